"""Polynomial vector fields, trajectory generation and forward sensitivities."""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .basis import BasisSpec, Coefficients, eval_basis, state_jacobians

__all__ = [
    "IntegrationError",
    "VectorField",
    "Trajectory",
    "SensitivityBundle",
    "integrate_trajectory",
    "integrate_sensitivities",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

DIVERGENCE_LIMIT = 1e6


class IntegrationError(RuntimeError):
    """The ODE solver failed or the state left the divergence guard."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


@dataclass(frozen=True)
class VectorField:
    """``f(x; C) = sum_k c_k phi_k(x)`` for a monomial dictionary."""

    spec: BasisSpec
    coeffs: Coefficients

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def C(self) -> np.ndarray:
        return self.coeffs.matrix

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = eval_basis(self.spec, x.reshape(-1, self.dim)) @ self.C
        return out.reshape(x.shape)

    def jacobian(self, x) -> np.ndarray:
        """State Jacobian ``F(x) = sum_k c_k grad phi_k(x)^T``, shape ``(d, d)``."""
        return state_jacobians(self.spec, np.reshape(x, (1, self.dim)), self.C)[0]

    def coeff_jacobian(self, x) -> np.ndarray:
        """Derivative of ``f(x)`` with respect to the free coefficients, ``(d, n_c)``."""
        phi = eval_basis(self.spec, np.reshape(x, (1, self.dim)))[0]
        full = np.kron(phi, np.eye(self.dim))
        return full[:, self.coeffs.free]


@dataclass
class Trajectory:
    """Uniformly sampled state history; ``states[j]`` is the state at ``j*delta``."""

    delta: float
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2:
            raise ValueError("states must be an m x d array")

    @property
    def m(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def origin(self) -> np.ndarray:
        return self.states[0]

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(self.m)

    @property
    def vector(self) -> np.ndarray:
        return self.states.reshape(-1)


@dataclass
class SensitivityBundle:
    """``V(t_j) = dE/dc`` (``d x n_c``) and ``W(t_j) = dE/dx0`` (``d x d``) at every node."""

    times: np.ndarray
    states: np.ndarray
    V: np.ndarray
    W: np.ndarray


def _blowup_event(t, y):
    return DIVERGENCE_LIMIT - np.max(np.abs(y))


_blowup_event.terminal = True


def _solve(rhs, y0, m, delta, rtol, atol, guard_dim, jac=None):
    if rtol <= 0 or atol <= 0:
        raise ValueError("rtol and atol must be positive")
    t_eval = delta * np.arange(m)
    if m == 1:
        return np.asarray(y0, dtype=float)[None, :]

    def event(t, y):
        return _blowup_event(t, y[:guard_dim])

    event.terminal = True
    with np.errstate(over="raise", invalid="raise"):
        try:
            sol = solve_ivp(
                rhs, (0.0, t_eval[-1]), y0, method="DOP853", t_eval=t_eval,
                rtol=rtol, atol=atol, events=event,
            )
        except FloatingPointError as err:
            raise IntegrationError("non-finite state during integration") from err
    if sol.status == 1:
        raise IntegrationError("state exceeded divergence guard", t=float(sol.t_events[0][0]))
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else 0.0
        raise IntegrationError(f"integration failed: {sol.message}", t=t_fail)
    Y = sol.y.T
    if not np.all(np.isfinite(Y)):
        raise IntegrationError("non-finite state during integration")
    return Y


def integrate_trajectory(field: VectorField, x0, m: int, delta: float,
                         rtol: float = 1e-10, atol: float = 1e-12) -> Trajectory:
    """Sample the flow of ``field`` from ``x0`` at ``t = 0, delta, ..., (m-1) delta``."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != field.dim:
        raise ValueError("x0 has wrong dimension")

    def rhs(t, x):
        return field(x)

    return Trajectory(delta, _solve(rhs, x0, m, delta, rtol, atol, field.dim))


def integrate_sensitivities(field: VectorField, x0, m: int, delta: float,
                            rtol: float = 1e-10, atol: float = 1e-12) -> SensitivityBundle:
    """Integrate the state together with its coefficient and initial-condition sensitivities.

    The augmented system has dimension ``d + d*n_c + d*d``; ``V`` and ``W`` are
    stored row-major after the state.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    d = field.dim
    nc = field.coeffs.n_free
    y0 = np.concatenate([x0, np.zeros(d * nc), np.eye(d).reshape(-1)])

    def rhs(t, y):
        x = y[:d]
        V = y[d:d + d * nc].reshape(d, nc)
        W = y[d + d * nc:].reshape(d, d)
        F = field.jacobian(x)
        return np.concatenate([
            field(x),
            (F @ V + field.coeff_jacobian(x)).reshape(-1),
            (F @ W).reshape(-1),
        ])

    Y = _solve(rhs, y0, m, delta, rtol, atol, d)
    return SensitivityBundle(
        times=delta * np.arange(m),
        states=Y[:, :d],
        V=Y[:, d:d + d * nc].reshape(m, d, nc),
        W=Y[:, d + d * nc:].reshape(m, d, d),
    )


def write_trajectory_csv(path, traj: Trajectory, noisy: np.ndarray | None = None):
    """Write ``t,x1,...,xd`` (plus ``y1,...,yd`` when ``noisy`` is given).

    ``path`` may also be an open text stream.
    """
    d = traj.dim
    header = ["t"] + [f"x{i + 1}" for i in range(d)]
    cols = [traj.times[:, None], traj.states]
    if noisy is not None:
        header += [f"y{i + 1}" for i in range(d)]
        cols.append(np.asarray(noisy).reshape(traj.m, d))
    data = np.hstack(cols)
    opened = contextlib.nullcontext(path) if hasattr(path, "write") else open(path, "w", newline="")
    with opened as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])


def read_trajectory_csv(path):
    """Read a trajectory CSV.

    Returns ``(t, X, Y)`` where ``Y`` is None when the file has no ``y``
    columns.  When only ``y`` columns exist, ``X`` is None.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    t = data[:, header.index("t")]
    xs = [i for i, h in enumerate(header) if h.startswith("x")]
    ys = [i for i, h in enumerate(header) if h.startswith("y")]
    X = data[:, xs] if xs else None
    Y = data[:, ys] if ys else None
    return t, X, Y
