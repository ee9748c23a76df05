"""Simultaneous identification and denoising by equality-constrained SQP.

The problem solved is

    min_{c, z}  1/2 (y - z)^T M (y - z) + alpha/2 c^T W c
    s.t.        h(c, z) = D_vec z - Phi_vec(z) c = 0

with ``W`` an iteratively reweighted approximation of an l_p penalty.  Each SQP
iteration computes a relaxation step that reduces the linearized constraint
residual, then solves a stabilized KKT system with block-preconditioned MINRES.
Several trajectories share ``c`` and each carries its own ``z``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, minres, splu

from .basis import BasisSpec, Coefficients, eval_basis, state_jacobians
from .findiff import FinDiffMatrix, kron_lift, make_findiff, make_second_diff
from .lsoi import _solve_masked, lsoi_solve
from .noise import WeightMatrix, oversample

__all__ = [
    "SolverOptions",
    "SiddsProblem",
    "ConstraintWorkspace",
    "StackedWorkspace",
    "IrlsState",
    "SqpState",
    "IterationRecord",
    "SolveReport",
    "SiddsResult",
    "smooth_init",
    "eval_constraint",
    "relaxation_step",
    "kkt_operator",
    "kkt_preconditioner",
    "kkt_solve",
    "sqp_step",
    "sidds_solve",
    "assemble_multi",
    "irls_weights",
]

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    """Tuning constants.  Defaults follow the published algorithm where it fixes them."""

    mu: float = 100.0
    zeta: float = 1e-4
    beta: float = 1e-4
    smoothing: float = 1e-2
    minres_tol: float = 1e-6
    minres_maxiter: int = 2000
    max_iter: int = 400
    polish_max_iter: int = 200
    eps_start: float = 1.0
    eps_factor: float = 10.0
    eps_stop: float = 1e-8
    lgrad_tol: float = 1e-6
    con_tol: float = 1e-8
    accept_margin: float = 1e-12
    min_step: float = 1e-8
    gamma_scale: float = 1e-4
    shift_multiplier_change: bool = False
    second_order_correction: bool = True
    merit_dual_norm: float = 2
    relaxation: str = "joint"
    use_filter: bool = True
    filter_margin: float = 1e-5
    floor_exit: bool = True
    stage_max_iter: int = 40

    @classmethod
    def from_dict(cls, data: dict | None) -> "SolverOptions":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown solver options: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "SolverOptions":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# constraint and its Jacobian


class ConstraintWorkspace:
    """Residual ``h``, ``K = -Phi_vec(z)`` and ``L = D_vec - grad Phi_vec(z) c`` for one trajectory.

    ``K`` is never stored in lifted form: products go through the ``m x n``
    dictionary matrix.  ``L`` is a sparse matrix of bandwidth ``d (q - 1)``.
    """

    def __init__(self, spec: BasisSpec, D: FinDiffMatrix, free=None):
        self.spec = spec
        self.D = D
        self.d = spec.dim
        self.m = D.m
        self.size = self.m * self.d
        self.Dvec = kron_lift(D, self.d)
        self.free = np.arange(spec.n * self.d) if free is None else np.asarray(free, dtype=int)
        self.Phi = None
        self.L = None
        self.h = None

    @property
    def n_free(self) -> int:
        return self.free.size

    def full_coeffs(self, c) -> np.ndarray:
        C = np.zeros(self.spec.n * self.d)
        C[self.free] = c
        return C.reshape(self.spec.n, self.d)

    def evaluate(self, c, z) -> np.ndarray:
        """Refresh ``h``, ``K`` and ``L`` at ``(c, z)``; returns ``h``."""
        z = np.asarray(z, dtype=float)
        if z.size != self.size:
            raise ValueError(f"z must have length {self.size}")
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(c)):
            raise FloatingPointError("non-finite iterate")
        C = self.full_coeffs(c)
        Z = z.reshape(self.m, self.d)
        self.Phi = eval_basis(self.spec, Z)
        self.h = self.Dvec @ z - (self.Phi @ C).reshape(-1)
        J = state_jacobians(self.spec, Z, C)
        Jmat = sp.bsr_matrix((J, np.arange(self.m), np.arange(self.m + 1)), shape=(self.size, self.size))
        self.L = (self.Dvec - Jmat).tocsr()
        return self.h

    def residual(self, c, z) -> np.ndarray:
        """``h(c, z)`` without touching the cached Jacobian."""
        C = self.full_coeffs(c)
        Z = np.asarray(z, dtype=float).reshape(self.m, self.d)
        return self.Dvec @ z - (eval_basis(self.spec, Z) @ C).reshape(-1)

    def K_matvec(self, u) -> np.ndarray:
        return -(self.Phi @ self.full_coeffs(u)).reshape(-1)

    def K_rmatvec(self, v) -> np.ndarray:
        return -(self.Phi.T @ np.reshape(v, (self.m, self.d))).reshape(-1)[self.free]

    def K_dense(self) -> np.ndarray:
        return -np.kron(self.Phi, np.eye(self.d))[:, self.free]

    def KtK(self) -> np.ndarray:
        G = np.kron(self.Phi.T @ self.Phi, np.eye(self.d))
        return G[np.ix_(self.free, self.free)]


class StackedWorkspace:
    """Constraint Jacobian for ``N`` trajectories sharing one coefficient vector.

    ``A = [K_stack, blockdiag(L_1, ..., L_N)]``.
    """

    def __init__(self, parts: list[ConstraintWorkspace]):
        if not parts:
            raise ValueError("need at least one workspace")
        first = parts[0]
        for ws in parts[1:]:
            if ws.spec != first.spec:
                raise ValueError("all trajectories must share the basis")
            if not np.array_equal(ws.free, first.free):
                raise ValueError("all trajectories must share the sparsity pattern")
            if ws.D.delta != first.D.delta or ws.D.points != first.D.points:
                raise ValueError("all trajectories must share the differentiation rule")
        self.parts = parts
        self.spec = first.spec
        self.free = first.free
        self.n_free = first.n_free
        self.sizes = [ws.size for ws in parts]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.nz = int(self.offsets[-1])

    def split(self, v):
        return [v[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def evaluate(self, c, z) -> np.ndarray:
        return np.concatenate([ws.evaluate(c, zi) for ws, zi in zip(self.parts, self.split(z))])

    def residual(self, c, z) -> np.ndarray:
        return np.concatenate([ws.residual(c, zi) for ws, zi in zip(self.parts, self.split(z))])

    @property
    def h(self) -> np.ndarray:
        return np.concatenate([ws.h for ws in self.parts])

    def K_matvec(self, u):
        return np.concatenate([ws.K_matvec(u) for ws in self.parts])

    def K_rmatvec(self, v):
        return sum(ws.K_rmatvec(vi) for ws, vi in zip(self.parts, self.split(v)))

    def L_matvec(self, v):
        return np.concatenate([ws.L @ vi for ws, vi in zip(self.parts, self.split(v))])

    def L_rmatvec(self, v):
        return np.concatenate([ws.L.T @ vi for ws, vi in zip(self.parts, self.split(v))])

    def A_matvec(self, x):
        return self.K_matvec(x[: self.n_free]) + self.L_matvec(x[self.n_free:])

    def A_rmatvec(self, v):
        return np.concatenate([self.K_rmatvec(v), self.L_rmatvec(v)])

    def KtK(self):
        return sum(ws.KtK() for ws in self.parts)

    @property
    def L(self) -> sp.csr_matrix:
        return sp.block_diag([ws.L for ws in self.parts], format="csr")

    def K_dense(self):
        return np.vstack([ws.K_dense() for ws in self.parts])

    def A_dense(self):
        return np.hstack([self.K_dense(), self.L.toarray()])

    def stacked_dictionary(self):
        return np.vstack([ws.Phi for ws in self.parts])


def assemble_multi(workspaces) -> StackedWorkspace:
    """Combine per-trajectory workspaces into a shared-coefficient constraint."""
    if isinstance(workspaces, ConstraintWorkspace):
        workspaces = [workspaces]
    return StackedWorkspace(list(workspaces))


def eval_constraint(ws, c, z):
    """Evaluate ``h`` at ``(c, z)`` and refresh the Jacobian blocks held by ``ws``."""
    return ws.evaluate(c, z)


# ---------------------------------------------------------------------------
# initialization


def smooth_init(y, lam: float, D2, d: int = 1, M: WeightMatrix | None = None) -> np.ndarray:
    """Tikhonov smoothing ``argmin (y - z)^T M (y - z) + lam^2 ||D2_vec z||^2``.

    ``D2`` acts on one coordinate; it is lifted to ``d`` coordinates here.
    With ``M = I`` this is the normal-equation solve of
    ``min ||[y; 0] - [I; lam D2] z||``.
    """
    y = np.asarray(y, dtype=float)
    if lam < 0:
        raise ValueError("smoothing parameter must be nonnegative")
    if lam == 0:
        return y.copy()
    D2v = kron_lift(D2, d)
    Mmat = sp.identity(y.size, format="csc") if M is None else M.tosparse()
    rhs = y if M is None else M.matvec(y)
    lhs = (Mmat + lam**2 * (D2v.T @ D2v)).tocsc()
    return splu(lhs).solve(rhs)


def irls_weights(c, eps: float, p: float) -> np.ndarray:
    """Diagonal of the reweighting matrix, ``(c_i^2 + eps)^(p/2 - 1)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return (np.asarray(c, dtype=float) ** 2 + eps) ** (p / 2.0 - 1.0)


@dataclass
class IrlsState:
    epsilon: float
    weights: np.ndarray


# ---------------------------------------------------------------------------
# relaxation step


def _normal_lu(L: sp.csr_matrix, shift: float):
    return splu((L.T @ L + shift * sp.identity(L.shape[0], format="csr")).tocsc(), permc_spec="NATURAL")


def relaxation_step(ws: StackedWorkspace, c=None, z=None, beta: float = 1e-4, residual=None,
                    method: str = "split"):
    """Direction ``p = (p_c, p_z)`` that reduces ``||h + A p||``.

    ``method="split"``: ``p_c`` solves the dense least-squares problem
    ``min ||Phi(Z) P - H||_F`` (column by column on the free entries) and
    ``p_z`` is the regularized normal-equation solution for the remaining
    residual, one banded LU per trajectory.

    ``method="joint"``: ``p`` minimizes ``||h + K p_c + L p_z||^2 + beta ||p_z||^2``
    exactly.  Eliminating ``p_z`` leaves the weighted fit
    ``min ||h + K p_c||_Q`` with ``Q = (L L^T + beta I)^{-1}`` banded-SPD, which
    favours the residual directions that ``L`` cannot remove.  ``p_z`` then
    comes from the same normal equations as in the split solve.

    Both satisfy ``||h + A p|| <= ||h||``.  When ``c, z`` are given the
    workspace is refreshed first.  ``residual`` replaces ``h`` on the
    right-hand side.
    """
    if c is not None:
        ws.evaluate(c, z)
    d = ws.spec.dim
    h = ws.h if residual is None else np.asarray(residual, dtype=float)
    if method == "split":
        Phi = ws.stacked_dictionary()
        H = np.vstack([hi.reshape(-1, d) for hi in ws.split(h)])
        cols = np.zeros(ws.spec.n * d, dtype=bool)
        cols[ws.free] = True
        P, _ = _solve_masked(Phi, H, cols.reshape(ws.spec.n, d))
        p_c = P.reshape(-1)[ws.free]
    elif method == "joint":
        KQK = np.zeros((ws.n_free, ws.n_free))
        KQh = np.zeros(ws.n_free)
        for part, hi in zip(ws.parts, ws.split(h)):
            Kd = part.K_dense()
            G = (part.L @ part.L.T + beta * sp.identity(part.size, format="csr")).tocsc()
            lu = splu(G, permc_spec="NATURAL")
            QK = lu.solve(Kd)
            KQK += Kd.T @ QK
            KQh += QK.T @ hi
        KQK = 0.5 * (KQK + KQK.T)
        p_c = -sla.lstsq(KQK, KQh, lapack_driver="gelsd")[0]
    else:
        raise ValueError(f"unknown relaxation method {method!r}")
    r = h + ws.K_matvec(p_c)
    p_z = []
    for part, ri in zip(ws.parts, ws.split(r)):
        lu = _normal_lu(part.L, beta)
        p_z.append(-lu.solve(part.L.T @ ri))
    return np.concatenate([p_c, *p_z])


# ---------------------------------------------------------------------------
# stabilized KKT system


@dataclass
class SqpState:
    """Iterate and stabilization constants of the SQP method."""

    c: np.ndarray
    z: np.ndarray
    w: np.ndarray
    M: list
    y: list
    alpha: float = 0.0
    weights: np.ndarray | None = None
    zeta: float = 1e-4
    gamma: float = 0.0
    mu: float = 100.0
    filter: list = field(default_factory=list)
    scale: float = 1.0

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.ones_like(self.c)

    @property
    def B_c(self) -> np.ndarray:
        """Diagonal of the coefficient block ``alpha W`` of the objective Hessian."""
        return self.alpha * self.weights

    def M_matvec(self, v, offsets) -> np.ndarray:
        return np.concatenate([Mi.matvec(v[a:b]) for Mi, a, b in zip(self.M, offsets[:-1], offsets[1:])])

    def residual_data(self, z=None):
        z = self.z if z is None else z
        return np.concatenate(self.y) - z

    def objective(self, c=None, z=None, offsets=None) -> float:
        c = self.c if c is None else c
        z = self.z if z is None else z
        r = self.residual_data(z)
        offsets = offsets if offsets is not None else np.concatenate([[0], np.cumsum([yi.size for yi in self.y])])
        return 0.5 * float(r @ self.M_matvec(r, offsets)) + 0.5 * self.alpha * float(np.sum(self.weights * c**2))

    def gradient(self, offsets, c=None, z=None) -> np.ndarray:
        c = self.c if c is None else c
        z = self.z if z is None else z
        r = self.residual_data(z)
        return np.concatenate([self.alpha * self.weights * c, -self.M_matvec(r, offsets)])


def kkt_operator(state: SqpState, ws: StackedWorkspace) -> LinearOperator:
    """``[[B + zeta I, A^T], [A, -gamma I]]`` as a linear operator."""
    nc, nz = ws.n_free, ws.nz
    Bc = state.B_c + state.zeta
    offsets = ws.offsets

    def matvec(x):
        x = np.ravel(x)
        dc, dz, w = x[:nc], x[nc:nc + nz], x[nc + nz:]
        top = Bc * dc + ws.K_rmatvec(w)
        mid = state.M_matvec(dz, offsets) + state.zeta * dz + ws.L_rmatvec(w)
        bot = ws.K_matvec(dc) + ws.L_matvec(dz) - state.gamma * w
        return np.concatenate([top, mid, bot])

    n = nc + 2 * nz
    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=float)


def kkt_matrix(state: SqpState, ws: StackedWorkspace) -> sp.csc_matrix:
    """Sparse assembled KKT matrix; used for reference solves and testing."""
    nc, nz = ws.n_free, ws.nz
    K = sp.csr_matrix(ws.K_dense())
    L = ws.L
    Mmat = sp.block_diag([Mi.tosparse() for Mi in state.M], format="csr")
    B = sp.diags(state.B_c + state.zeta)
    top = sp.hstack([B, sp.csr_matrix((nc, nz)), K.T])
    mid = sp.hstack([sp.csr_matrix((nz, nc)), Mmat + state.zeta * sp.identity(nz), L.T])
    bot = sp.hstack([K, L, -state.gamma * sp.identity(nz)])
    return sp.vstack([top, mid, bot]).tocsc()


def kkt_preconditioner(state: SqpState, ws: StackedWorkspace) -> LinearOperator:
    """Inverse of ``blockdiag(alpha W + zeta I + mu K^T K, M + zeta I + mu L^T L, I / mu)``.

    The first block is small and factored densely, the second is banded and
    factored with one sparse LU per trajectory, the third is diagonal.
    """
    nc, nz = ws.n_free, ws.nz
    mu = state.mu
    P1 = np.diag(state.B_c + state.zeta) + mu * ws.KtK()
    chol = sla.cho_factor(P1)
    lus = []
    for part, Mi in zip(ws.parts, state.M):
        P2 = Mi.tosparse() + state.zeta * sp.identity(part.size) + mu * (part.L.T @ part.L)
        lus.append(splu(P2.tocsc(), permc_spec="NATURAL"))
    offsets = ws.offsets

    def matvec(x):
        x = np.ravel(x)
        out = np.empty_like(x)
        out[:nc] = sla.cho_solve(chol, x[:nc])
        for lu, a, b in zip(lus, offsets[:-1], offsets[1:]):
            out[nc + a:nc + b] = lu.solve(x[nc + a:nc + b])
        out[nc + nz:] = mu * x[nc + nz:]
        return out

    n = nc + 2 * nz
    return LinearOperator((n, n), matvec=matvec, rmatvec=matvec, dtype=float)


class _KrylovDone(Exception):
    pass


@dataclass
class KktSolution:
    d: np.ndarray
    w: np.ndarray
    iterations: int
    residual: float
    converged: bool


def kkt_solve(state: SqpState, ws: StackedWorkspace, g, p, minres_tol: float = 1e-6,
              max_iter: int = 2000, precondition: bool = True, x0=None, callback=None,
              w_ref=None) -> KktSolution:
    """Solve the stabilized KKT system with (preconditioned) MINRES.

    The right-hand side is ``[-g; A p]``.  With ``w_ref`` the shift acts on
    the multiplier change instead, ``A d - gamma (w - w_ref) = A p``, which
    only moves ``-gamma w_ref`` into the right-hand side.  ``x0`` (for instance the previous
    multipliers with a zero primal step) is used as a warm start when its
    residual is smaller than ``||rhs||``; the iteration then stops once the
    true residual drops below ``minres_tol`` times the starting residual, which
    implies ``||r|| <= minres_tol ||rhs||``.  If MINRES stops on its internal
    estimate too early it is restarted from its iterate while iterations
    remain.  ``residual`` is reported relative to ``||rhs||`` and
    ``converged`` is False when ``max_iter`` runs out.
    """
    nc, nz = ws.n_free, ws.nz
    op = kkt_operator(state, ws)
    bottom = ws.A_matvec(p)
    if w_ref is not None:
        bottom = bottom - state.gamma * np.asarray(w_ref, dtype=float)
    rhs = np.concatenate([-np.asarray(g, dtype=float), bottom])
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return KktSolution(np.zeros(nc + nz), np.zeros(nz), 0, 0.0, True)
    prec = kkt_preconditioner(state, ws) if precondition else None
    x = np.zeros_like(rhs)
    r0 = bnorm
    if x0 is not None:
        x_try = np.asarray(x0, dtype=float)
        r_try = np.linalg.norm(rhs - op @ x_try)
        if r_try < bnorm:
            x, r0 = x_try.copy(), r_try
    target = minres_tol * r0
    used = 0
    best = [x, r0]

    def monitor(xk):
        # scipy stops on a preconditioned-norm estimate; test the true residual instead
        nonlocal used
        used += 1
        if callback is not None:
            callback(xk)
        r = np.linalg.norm(rhs - op @ xk)
        if r < best[1]:
            best[0], best[1] = xk.copy(), r
        if r <= target:
            raise _KrylovDone

    if r0 > target:
        try:
            minres(op, rhs, x0=x, M=prec, rtol=1e-14, maxiter=max_iter, callback=monitor)
        except _KrylovDone:
            pass
    x, res = best
    return KktSolution(x[: nc + nz], x[nc + nz:], used, float(res / bnorm), bool(res <= target))


# ---------------------------------------------------------------------------
# SQP iteration


@dataclass
class IterationRecord:
    it: int
    stage: str
    objective: float
    con_norm: float
    l_grad_norm: float
    eps: float
    minres_its: int
    step: float
    accepted: bool
    c_err: float = float("nan")
    x_err: float = float("nan")


@dataclass
class SolveReport:
    """Per-iteration diagnostics of a SIDDS solve."""

    records: list = field(default_factory=list)
    status: str = "running"
    seed: int | None = None
    elapsed: float = 0.0
    degraded_solves: int = 0
    stalled_stages: int = 0
    floor_exits: int = 0

    COLUMNS = ("it", "objective", "con_norm", "l_grad_norm", "eps", "minres_its")

    @property
    def iterations(self) -> int:
        return len(self.records)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path, extra=()):
        cols = list(self.COLUMNS) + list(extra)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in self.records:
                writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in cols])


@dataclass
class StepResult:
    accepted: bool
    step: float
    minres_its: int
    kkt_residual: float
    kkt_converged: bool


def _lagrangian_grad(state: SqpState, ws: StackedWorkspace) -> np.ndarray:
    return state.gradient(ws.offsets) + ws.A_rmatvec(state.w)


def sqp_step(state: SqpState, ws: StackedWorkspace, opts: SolverOptions) -> StepResult:
    """One SQP iteration from ``(state.c, state.z)``; the workspace must be current.

    Updates ``state`` in place (iterate, multipliers, next ``gamma``) and leaves
    the workspace evaluated at the new iterate.
    """
    nc = ws.n_free
    offsets = ws.offsets
    h = ws.h.copy()
    g = state.gradient(offsets)
    f0 = state.objective(offsets=offsets)
    hn0 = np.linalg.norm(h)

    p = relaxation_step(ws, beta=opts.beta, method=opts.relaxation)
    warm = np.concatenate([np.zeros(nc + ws.nz), state.w])
    sol = kkt_solve(state, ws, g, p, opts.minres_tol, opts.minres_maxiter, x0=warm,
                    w_ref=state.w if opts.shift_multiplier_change else None)
    d = sol.d
    w_new = sol.w
    # stabilization for the next iteration, from this iterate and its multipliers
    lgrad = g + ws.A_rmatvec(w_new)
    next_gamma = opts.gamma_scale * (np.sum(np.abs(lgrad)) + np.sum(np.abs(h)))

    def trial(t, extra=None):
        step_vec = t * d if extra is None else t * d + extra
        c_t = state.c + step_vec[:nc]
        z_t = state.z + step_vec[nc:]
        with np.errstate(over="ignore", invalid="ignore"):
            h_t = ws.residual(c_t, z_t)
            f_t = state.objective(c_t, z_t, offsets)
        return c_t, z_t, h_t, f_t

    def admissible(hn, f_t):
        # (||h||, f) pairs already left behind; blocks cycling between the two criteria
        gm = opts.filter_margin
        return all(hn <= (1 - gm) * hk or f_t <= fk - gm * hk for hk, fk in state.filter)

    def progress(h_t, f_t):
        if not (np.all(np.isfinite(h_t)) and np.isfinite(f_t)):
            return False
        hn = np.linalg.norm(h_t)
        ok = hn < (1 - opts.accept_margin) * hn0 or f_t < f0 - opts.accept_margin * abs(f0)
        return ok and (not opts.use_filter or admissible(hn, f_t))

    accepted, step = False, 1.0
    if np.any(d):
        c_t, z_t, h_t, f_t = trial(1.0)
        if progress(h_t, f_t):
            accepted = True
        elif opts.second_order_correction and np.all(np.isfinite(h_t)):
            # correct the curvature of h along d with the Jacobian held fixed
            soc = relaxation_step(ws, beta=opts.beta, residual=h_t, method=opts.relaxation)
            trial_soc = trial(1.0, soc)
            if progress(trial_soc[2], trial_soc[3]):
                accepted = True
                c_t, z_t, h_t, f_t = trial_soc
        if not accepted:
            nu = max(1.0, float(np.linalg.norm(w_new, ord=opts.merit_dual_norm)))
            merit0 = f0 + nu * hn0
            t = 0.5
            while t >= opts.min_step:
                c_t, z_t, h_t, f_t = trial(t)
                if (np.all(np.isfinite(h_t)) and f_t + nu * np.linalg.norm(h_t) < merit0
                        and (not opts.use_filter or admissible(np.linalg.norm(h_t), f_t))):
                    accepted, step = True, t
                    break
                t *= 0.5
    if accepted:
        if opts.use_filter and f_t >= f0:
            state.filter.append((hn0, f0))
        state.c, state.z = c_t, z_t
    state.w = w_new
    state.gamma = next_gamma
    ws.evaluate(state.c, state.z)
    return StepResult(accepted, step if accepted else 0.0, sol.iterations, sol.residual, sol.converged)


# ---------------------------------------------------------------------------
# problem definition and driver


class SiddsProblem:
    """Measurements, weights, dictionary and regularization for one solve.

    Parameters
    ----------
    trajectories : list of (y, M)
        ``y`` is an ``m x d`` array (or row-major vector) of measurements and
        ``M`` a :class:`WeightMatrix` or None for the identity.
    spec : BasisSpec
    delta : float
        Sample spacing of the measurements.
    points : int
        Finite-difference stencil width.
    p, alpha, tau : float
        Regularization order, weight and truncation threshold.  ``tau=None``
        means ``0.01 * max|c|`` at truncation time when ``alpha > 0``.
    oversample_factor : int
        Integration step is ``delta / oversample_factor``.
    mask : bool array (n, d), optional
        Fixed sparsity pattern; entries outside it are held at zero.
    """

    def __init__(self, trajectories, spec: BasisSpec, delta: float, points: int = 3,
                 p: float = 0.0, alpha: float = 0.0, tau: float | None = None,
                 oversample_factor: int = 1, mask=None):
        if not trajectories:
            raise ValueError("need at least one trajectory")
        if not 0 <= p <= 2:
            raise ValueError("p must lie in [0, 2]")
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if tau is not None and tau < 0:
            raise ValueError("tau must be nonnegative")
        self.spec = spec
        self.delta = float(delta)
        self.points = int(points)
        self.p, self.alpha, self.tau = float(p), float(alpha), tau
        self.oversample_factor = int(oversample_factor)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(spec.n, spec.dim)
        d = spec.dim
        self.measured = []
        self.trajectories = []
        for y, M in trajectories:
            y = np.asarray(y, dtype=float).reshape(-1, d)
            m = y.shape[0]
            M = WeightMatrix.identity(m, d) if M is None else M
            if M.m != m or M.d != d:
                raise ValueError("weight does not match measurements")
            if not M.is_psd(tol=1e-12 * max(1.0, np.abs(M.blocks).max())):
                raise ValueError("weight blocks must be positive semidefinite")
            self.measured.append(y)
            y_up, M_up, _ = oversample(y.reshape(-1), M, self.oversample_factor)
            self.trajectories.append((y_up, M_up))
        self.h = self.delta / self.oversample_factor
        self._D = {}

    @classmethod
    def single(cls, y, spec, delta, M=None, **kwargs) -> "SiddsProblem":
        return cls([(y, M)], spec, delta, **kwargs)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def N(self) -> int:
        return len(self.trajectories)

    def D_for(self, m: int) -> FinDiffMatrix:
        if m not in self._D:
            self._D[m] = make_findiff(m, self.h, self.points)
        return self._D[m]

    @property
    def D(self) -> FinDiffMatrix:
        return self.D_for(self.trajectories[0][0].size // self.dim)

    def free_indices(self, mask=None) -> np.ndarray:
        mask = self.mask if mask is None else mask
        if mask is None:
            return np.arange(self.spec.n * self.dim)
        return np.flatnonzero(np.asarray(mask).reshape(-1))

    def workspace(self, free=None) -> StackedWorkspace:
        free = self.free_indices() if free is None else free
        parts = [ConstraintWorkspace(self.spec, self.D_for(y.size // self.dim), free) for y, _ in self.trajectories]
        return assemble_multi(parts)


@dataclass
class SiddsResult:
    coeffs: Coefficients
    states: list
    report: SolveReport
    multipliers: np.ndarray

    def __iter__(self):
        return iter((self.coeffs, self.states, self.report))

    def measured_states(self, factor: int) -> list:
        return [Z[::factor] for Z in self.states]


def _initial_guess(problem: SiddsProblem, opts: SolverOptions, free):
    d = problem.dim
    zs = []
    for y, M in problem.trajectories:
        m = y.size // d
        D2 = make_second_diff(m, problem.h)
        if opts.smoothing > 0 or problem.oversample_factor > 1:
            # virtual samples carry no data, so weight the fit by M
            lam = opts.smoothing if opts.smoothing > 0 else 1e-2
            weight = None if problem.oversample_factor == 1 and np.all(M.blocks == np.eye(d)) else M
            zs.append(smooth_init(y, lam, D2, d, weight))
        else:
            zs.append(y.copy())
    Phi = np.vstack([eval_basis(problem.spec, z.reshape(-1, d)) for z in zs])
    rhs = np.vstack([problem.D_for(z.size // d).matrix @ z.reshape(-1, d) for z in zs])
    cols = np.zeros(problem.spec.n * d, dtype=bool)
    cols[free] = True
    C0, _ = _solve_masked(Phi, rhs, cols.reshape(problem.spec.n, d))
    return C0.reshape(-1)[free], np.concatenate(zs)


def _converged(state, ws, opts, lgrad, g, report=None) -> bool:
    """Stationarity of the Lagrangian plus feasibility.

    Feasibility holds when ``||h||_inf`` is below tolerance, or when the part
    of ``h`` the linearization can still remove, ``A p`` for the relaxation
    step ``p``, is.  The second case covers residual left in directions where
    ``A`` is numerically rank deficient (oscillatory adjoint modes of the
    centered difference matrix near the ends of the record).
    """
    if np.max(np.abs(lgrad), initial=0.0) > opts.lgrad_tol * (1 + np.max(np.abs(g), initial=0.0)):
        return False
    dz = np.max(np.abs(np.concatenate([part.Dvec @ zi for part, zi in zip(ws.parts, ws.split(state.z))])), initial=0.0)
    tol = opts.con_tol * (1 + dz)
    if np.max(np.abs(ws.h), initial=0.0) <= tol:
        return True
    if not opts.floor_exit:
        return False
    p = relaxation_step(ws, beta=opts.beta, method=opts.relaxation)
    if np.max(np.abs(ws.A_matvec(p)), initial=0.0) <= tol:
        if report is not None:
            report.floor_exits += 1
        return True
    return False


def _run_stage(state, ws, opts, report, eps, stage, max_iter, schedule, truth=None):
    """Iterate SQP steps; ``schedule`` drives the eps sequence for IRLS stages.

    Returns the final eps and whether the stage finished (converged).
    """
    offsets = ws.offsets
    iters = 0
    at_eps = 0
    while iters < max_iter:
        if schedule is not None:
            state.weights = irls_weights(state.c, eps, schedule)
        res = sqp_step(state, ws, opts)
        iters += 1
        at_eps += 1
        if not res.kkt_converged:
            report.degraded_solves += 1
        g = state.gradient(offsets)
        lgrad = g + ws.A_rmatvec(state.w)
        rec = IterationRecord(
            it=len(report.records), stage=stage,
            objective=state.scale * state.objective(offsets=offsets),
            con_norm=float(np.linalg.norm(ws.h)),
            l_grad_norm=state.scale * float(np.linalg.norm(lgrad)),
            eps=float(eps), minres_its=res.minres_its, step=res.step, accepted=res.accepted,
        )
        if truth is not None:
            rec.c_err, rec.x_err = truth(state)
        report.records.append(rec)
        done = _converged(state, ws, opts, lgrad, g, report)
        stuck = not res.accepted or (schedule is not None and at_eps >= opts.stage_max_iter)
        if stuck and not done:
            if schedule is None or eps / opts.eps_factor < opts.eps_stop:
                return eps, "stalled"
            # no progress at this eps (or cycling between reweightings): move on
            report.stalled_stages += 1
            done = True
        if done:
            if schedule is None:
                return eps, "converged"
            if eps / opts.eps_factor < opts.eps_stop:
                return eps / opts.eps_factor, "converged"
            eps /= opts.eps_factor
            at_eps = 0
            state.filter.clear()
    return eps, "max_iter"


def sidds_solve(problem: SiddsProblem, options: SolverOptions | dict | None = None,
                c0=None, z0=None, truth=None) -> SiddsResult:
    """Identify coefficients and denoised states.

    With ``alpha > 0`` the l_p penalty is handled by IRLS: ``eps`` starts at
    ``eps_start`` and is divided by ``eps_factor`` every time the SQP iteration
    converges, until it drops below ``eps_stop``.  Coefficients with
    ``|c| <= tau`` are then fixed at zero and the unregularized problem is
    solved again on the remaining support.  With ``alpha == 0`` a single
    unregularized stage is run (truncation still applies when ``tau > 0``).

    ``truth``, if given, is a callable ``(c_free_full, z) -> (c_err, x_err)``
    used only to annotate the report.
    """
    opts = options if isinstance(options, SolverOptions) else SolverOptions.from_dict(options)
    t_start = time.perf_counter()
    d = problem.dim
    free = problem.free_indices()
    ws = problem.workspace(free)
    if c0 is None or z0 is None:
        c_init, z_init = _initial_guess(problem, opts, free)
        c0 = c_init if c0 is None else np.asarray(c0, dtype=float).reshape(-1)[free]
        z0 = z_init if z0 is None else np.asarray(z0, dtype=float).reshape(-1)
    # the minimizer is unchanged by scaling the whole objective; iterate with
    # unit mean weight so the fixed constants (zeta, gamma, mu) keep their meaning
    scale = _weight_scale(problem)
    state = SqpState(
        c=np.asarray(c0, dtype=float).copy(), z=np.asarray(z0, dtype=float).copy(),
        w=np.zeros(ws.nz), M=[WeightMatrix(M.blocks / scale) for _, M in problem.trajectories],
        y=[y for y, _ in problem.trajectories], alpha=problem.alpha / scale,
        zeta=opts.zeta, mu=opts.mu, scale=scale,
    )
    report = SolveReport()
    ws.evaluate(state.c, state.z)
    state.gamma = opts.gamma_scale * (np.sum(np.abs(state.gradient(ws.offsets))) + np.sum(np.abs(ws.h)))

    def annotate(s, full_free=None):
        if truth is None:
            return None
        return truth(_expand(s.c, full_free if full_free is not None else free, problem), s.z)

    try:
        if problem.alpha > 0:
            _, status = _run_stage(state, ws, opts, report, opts.eps_start, "irls", opts.max_iter,
                                   problem.p, truth=(lambda s: annotate(s)) if truth else None)
        else:
            _, status = _run_stage(state, ws, opts, report, 0.0, "solve", opts.max_iter, None,
                                   truth=(lambda s: annotate(s)) if truth else None)
        tau = problem.tau
        if tau is None:
            tau = 0.01 * float(np.max(np.abs(state.c), initial=0.0)) if problem.alpha > 0 else 0.0
        keep = np.abs(state.c) > tau
        if problem.alpha > 0 or not np.all(keep):
            new_free = free[keep]
            state.c = state.c[keep]
            state.alpha = 0.0
            state.weights = np.ones_like(state.c)
            state.filter.clear()
            free = new_free
            ws = problem.workspace(free)
            ws.evaluate(state.c, state.z)
            _, status = _run_stage(state, ws, opts, report, 0.0, "polish", opts.polish_max_iter, None,
                                   truth=(lambda s: annotate(s, new_free)) if truth else None)
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as err:
        log.warning("SIDDS solve failed: %s", err)
        status = "failed"
    report.status = status
    report.elapsed = time.perf_counter() - t_start

    mask = np.zeros(problem.spec.n * d, dtype=bool)
    mask[free] = True
    coeffs = Coefficients(_expand(state.c, free, problem).reshape(problem.spec.n, d),
                          mask.reshape(problem.spec.n, d))
    states = [zi.reshape(-1, d) for zi in ws.split(state.z)]
    return SiddsResult(coeffs, states, report, scale * state.w)


def _weight_scale(problem: SiddsProblem) -> float:
    """Mean diagonal weight over the measured (nonzero-weight) samples."""
    diags = np.concatenate([np.einsum("jaa->ja", M.blocks).reshape(-1) for _, M in problem.trajectories])
    diags = diags[diags > 0]
    return float(diags.mean()) if diags.size else 1.0


def _expand(c, free, problem) -> np.ndarray:
    out = np.zeros(problem.spec.n * problem.dim)
    out[free] = c
    return out
