"""Registry of benchmark dynamical systems with polynomial right-hand sides."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .basis import BasisSpec, Coefficients, enumerate_basis, linear_basis
from .integrate import VectorField, integrate_trajectory

__all__ = ["TestProblem", "get_problem", "PROBLEMS", "vanderpol_cycle_point"]


@dataclass(frozen=True)
class TestProblem:
    """A registered system: its true field in the declared basis plus defaults.

    ``points`` is the default stencil width: 9 for the nonlinear benchmarks,
    3 for the harmonic oscillator.
    """

    __test__ = False  # not a pytest class

    name: str
    field: VectorField
    x0: np.ndarray
    m: int
    delta: float
    alpha: float
    rhs: object
    points: int = 9

    @property
    def spec(self) -> BasisSpec:
        return self.field.spec

    @property
    def dim(self) -> int:
        return self.field.dim

    @property
    def coeffs(self) -> Coefficients:
        return self.field.coeffs

    @property
    def true_mask(self) -> np.ndarray:
        return self.field.C != 0

    def fixed_sparsity(self) -> VectorField:
        """Same field with the true support as the coefficient mask."""
        return VectorField(self.spec, Coefficients(self.field.C, self.true_mask))


def _coeff_matrix(spec: BasisSpec, terms: list[dict]) -> np.ndarray:
    """``terms[i]`` maps exponent tuples to the coefficient in equation ``i``."""
    lookup = {tuple(a): k for k, a in enumerate(spec.multi_indices.tolist())}
    C = np.zeros((spec.n, spec.dim))
    for i, eq in enumerate(terms):
        for alpha, value in eq.items():
            C[lookup[alpha], i] = value
    return C


def _duffing_rhs(x):
    return np.array([x[1], -0.1 * x[1] - x[0] - 5.0 * x[0] ** 3])


def _lorenz_rhs(x):
    return np.array([10.0 * (x[1] - x[0]), x[0] * (28.0 - x[2]) - x[1], x[0] * x[1] - 8.0 / 3.0 * x[2]])


def _vdp_rhs(x):
    return np.array([x[1], 2.0 * x[1] * (1.0 - x[0] ** 2) - x[0]])


def _sho_rhs(x):
    return np.array([x[1], -x[0]])


def _build():
    out = {}
    spec = enumerate_basis(2, 3)
    C = _coeff_matrix(spec, [{(0, 1): 1.0}, {(0, 1): -0.1, (1, 0): -1.0, (3, 0): -5.0}])
    out["duffing"] = TestProblem("duffing", VectorField(spec, Coefficients(C)), np.array([-2.0, -2.0]),
                                 1000, 1e-2, 0.01, _duffing_rhs)
    spec = enumerate_basis(3, 2)
    C = _coeff_matrix(spec, [
        {(1, 0, 0): -10.0, (0, 1, 0): 10.0},
        {(1, 0, 0): 28.0, (0, 1, 0): -1.0, (1, 0, 1): -1.0},
        {(1, 1, 0): 1.0, (0, 0, 1): -8.0 / 3.0},
    ])
    out["lorenz63"] = TestProblem("lorenz63", VectorField(spec, Coefficients(C)), np.array([-8.0, 7.0, -28.0]),
                                  2000, 1e-2, 0.5, _lorenz_rhs)
    spec = enumerate_basis(2, 3)
    C = _coeff_matrix(spec, [{(0, 1): 1.0}, {(0, 1): 2.0, (2, 1): -2.0, (1, 0): -1.0}])
    out["vanderpol"] = TestProblem("vanderpol", VectorField(spec, Coefficients(C)), np.array([0.0, 1.0]),
                                   1000, 1e-2, 1.0, _vdp_rhs)
    spec = linear_basis(2)
    C = np.array([[0.0, -1.0], [1.0, 0.0]])
    out["sho"] = TestProblem("sho", VectorField(spec, Coefficients(C)), np.array([1.0, 0.0]),
                             2000, 1e-2, 0.0, _sho_rhs, points=3)
    return out


PROBLEMS = _build()
ALIASES = {"lorenz": "lorenz63", "vdp": "vanderpol", "van_der_pol": "vanderpol"}


def get_problem(name: str) -> TestProblem:
    key = ALIASES.get(name.lower(), name.lower())
    if key not in PROBLEMS:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[key]


@lru_cache(maxsize=None)
def _cycle_point(t_settle: float) -> tuple:
    prob = PROBLEMS["vanderpol"]
    steps = int(round(t_settle / 0.01)) + 1
    traj = integrate_trajectory(prob.field, prob.x0, steps, 0.01)
    return tuple(traj.states[-1])


def vanderpol_cycle_point(t_settle: float = 60.0) -> np.ndarray:
    """A state on (numerically) the Van der Pol limit cycle, reached from the default start."""
    return np.array(_cycle_point(float(t_settle)))
