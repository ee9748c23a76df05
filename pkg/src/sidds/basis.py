"""Total-degree monomial dictionaries and coefficient layout.

States are stored row-wise (``Z`` is ``m x d``) and every vectorization in the
package is row-major, so ``vectorize(Z) = [z_1; z_2; ...; z_m]``.  With that
convention the lifted dictionary ``Phi(Z) kron I_d`` applied to ``vec(C)``
equals ``vec(Phi(Z) @ C)`` and the finite-difference operator ``D kron I_d``
stays banded.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp

__all__ = [
    "BasisSpec",
    "Coefficients",
    "enumerate_basis",
    "linear_basis",
    "eval_basis",
    "eval_basis_grad",
    "grad_basis_contract",
    "vectorize",
    "devectorize",
]


@dataclass(frozen=True)
class BasisSpec:
    """Monomial dictionary ``{x^alpha}`` in ``dim`` variables.

    ``multi_indices`` has shape ``(n, dim)``; row ``k`` holds the exponents of
    the ``k``-th basis function.
    """

    dim: int
    degree: int
    multi_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.multi_indices, dtype=int).reshape(-1, self.dim)
        idx.setflags(write=False)
        object.__setattr__(self, "multi_indices", idx)

    def __eq__(self, other):
        if not isinstance(other, BasisSpec):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.degree == other.degree
            and np.array_equal(self.multi_indices, other.multi_indices)
        )

    def __hash__(self):
        return hash((self.dim, self.degree, self.multi_indices.tobytes()))

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.multi_indices.shape[0]

    def labels(self, names=None) -> list[str]:
        """Human readable monomial names, e.g. ``['1', 'x1', 'x1*x2']``."""
        names = names or [f"x{i + 1}" for i in range(self.dim)]
        out = []
        for alpha in self.multi_indices:
            terms = []
            for name, a in zip(names, alpha):
                if a == 1:
                    terms.append(name)
                elif a > 1:
                    terms.append(f"{name}^{a}")
            out.append("*".join(terms) if terms else "1")
        return out

    def to_dict(self) -> dict:
        return {
            "dim": int(self.dim),
            "degree": int(self.degree),
            "multi_indices": self.multi_indices.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "BasisSpec":
        return cls(int(data["dim"]), int(data["degree"]), np.array(data["multi_indices"], dtype=int))

    @classmethod
    def from_json(cls, text: str) -> "BasisSpec":
        return cls.from_dict(json.loads(text))


def enumerate_basis(dim: int, degree: int, min_degree: int = 0) -> BasisSpec:
    """All monomials with ``min_degree <= |alpha| <= degree``.

    Ordering is graded lexicographic: by total degree, then by descending
    exponent of ``x1``, then ``x2`` and so on.  For ``dim=2, degree=2`` this
    gives ``1, x1, x2, x1^2, x1*x2, x2^2``.
    """
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    if degree < 0:
        raise ValueError(f"degree must be nonnegative, got {degree}")
    if not 0 <= min_degree <= degree:
        raise ValueError("need 0 <= min_degree <= degree")
    rows = []
    for total in range(min_degree, degree + 1):
        level = [a for a in itertools.product(range(total + 1), repeat=dim) if sum(a) == total]
        level.sort(reverse=True)
        rows.extend(level)
    return BasisSpec(dim, degree, np.array(rows, dtype=int).reshape(-1, dim))


def linear_basis(dim: int) -> BasisSpec:
    """The dictionary ``x1, ..., xd`` with no constant term."""
    return enumerate_basis(dim, 1, min_degree=1)


def _power_table(states: np.ndarray, degree: int) -> np.ndarray:
    # table[p, j, i] = states[j, i] ** p
    m, d = states.shape
    table = np.empty((degree + 1, m, d))
    table[0] = 1.0
    for p in range(1, degree + 1):
        table[p] = table[p - 1] * states
    return table


def _check_states(spec: BasisSpec, states) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states.reshape(-1, spec.dim)
    if states.ndim != 2 or states.shape[1] != spec.dim:
        raise ValueError(f"states must have {spec.dim} columns, got shape {states.shape}")
    return states


def eval_basis(spec: BasisSpec, states) -> np.ndarray:
    """Evaluate the dictionary: ``Phi[j, k] = phi_k(x_j)``, shape ``(m, n)``."""
    states = _check_states(spec, states)
    table = _power_table(states, spec.degree)
    Phi = np.ones((states.shape[0], spec.n))
    for i in range(spec.dim):
        Phi *= table[spec.multi_indices[:, i], :, i].T
    return Phi


def eval_basis_grad(spec: BasisSpec, states) -> np.ndarray:
    """Partial derivatives of the dictionary.

    Returns ``G`` with shape ``(d, m, n)`` and ``G[l, j, k] = d phi_k / d x_l``
    evaluated at ``x_j``.
    """
    states = _check_states(spec, states)
    m, d = states.shape
    table = _power_table(states, spec.degree)
    alpha = spec.multi_indices
    # factors[i, j, k] = x_{j,i} ** alpha[k, i]
    factors = np.stack([table[alpha[:, i], :, i].T for i in range(d)])
    G = np.empty((d, m, spec.n))
    for l in range(d):
        prod = np.ones((m, spec.n))
        for i in range(d):
            if i == l:
                lowered = np.maximum(alpha[:, i] - 1, 0)
                prod *= alpha[:, i] * table[lowered, :, i].T
            else:
                prod *= factors[i]
        G[l] = prod
    return G


def state_jacobians(spec: BasisSpec, states, C) -> np.ndarray:
    """Jacobians of ``f(x; C) = C^T phi(x)`` at every state, shape ``(m, d, d)``.

    ``J[j, i, l] = sum_k C[k, i] * d phi_k / d x_l (x_j)``.
    """
    G = eval_basis_grad(spec, states)
    C = np.asarray(C, dtype=float).reshape(spec.n, spec.dim)
    # (d_l, m, n) @ (n, d_i) -> (d_l, m, d_i)
    J = G @ C
    return np.transpose(J, (1, 2, 0))


def grad_basis_contract(spec: BasisSpec, z, c) -> sp.bsr_matrix:
    """Derivative of ``z -> Phi_vec(z) @ c`` as a block-diagonal sparse matrix.

    Parameters
    ----------
    spec : BasisSpec
    z : array, length ``d*m``
        Row-major vectorized states.
    c : array, length ``d*n``
        Row-major vectorized coefficient matrix.

    Returns
    -------
    scipy.sparse.bsr_matrix
        ``(d*m, d*m)`` matrix with ``m`` dense ``d x d`` diagonal blocks; block
        ``j`` is the Jacobian of the vector field at ``z_j``.  The 3-tensor
        ``grad Phi_vec`` is never formed.
    """
    z = np.asarray(z, dtype=float)
    c = np.asarray(c, dtype=float)
    d = spec.dim
    if z.size % d:
        raise ValueError("length of z is not a multiple of dim")
    if c.size != d * spec.n:
        raise ValueError(f"c must have length {d * spec.n}, got {c.size}")
    m = z.size // d
    blocks = state_jacobians(spec, z.reshape(m, d), c.reshape(spec.n, d))
    return sp.bsr_matrix((blocks, np.arange(m), np.arange(m + 1)), shape=(d * m, d * m))


def vectorize(X) -> np.ndarray:
    """Row-major vectorization of a matrix."""
    return np.ascontiguousarray(X, dtype=float).reshape(-1)


def devectorize(x, rows: int, cols: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(rows, cols)


@dataclass
class Coefficients:
    """Coefficient matrix ``C`` (``n x d``) with an optional sparsity mask.

    ``mask[k, i]`` is True when ``C[k, i]`` is free.  Entries outside the mask
    are held at exactly zero.
    """

    matrix: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=float, copy=True)
        if self.matrix.ndim != 2:
            raise ValueError("coefficient matrix must be 2-D")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(self.matrix.shape)
            self.matrix[~self.mask] = 0.0

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def vector(self) -> np.ndarray:
        return vectorize(self.matrix)

    @property
    def free(self) -> np.ndarray:
        """Indices into the row-major vector of the free entries."""
        if self.mask is None:
            return np.arange(self.matrix.size)
        return np.flatnonzero(self.mask.reshape(-1))

    @property
    def n_free(self) -> int:
        return self.free.size

    def free_values(self) -> np.ndarray:
        return self.vector[self.free]

    @classmethod
    def from_free(cls, values, shape, mask=None) -> "Coefficients":
        C = np.zeros(shape)
        flat = C.reshape(-1)
        idx = np.arange(C.size) if mask is None else np.flatnonzero(np.asarray(mask).reshape(-1))
        flat[idx] = values
        return cls(C, mask)

    @classmethod
    def from_vector(cls, c, n: int, d: int, mask=None) -> "Coefficients":
        return cls(devectorize(c, n, d), mask)

    def support(self, tol: float = 0.0) -> np.ndarray:
        return np.abs(self.matrix) > tol

    def to_dict(self, spec: BasisSpec | None = None) -> dict:
        out = {"matrix": self.matrix.tolist()}
        if self.mask is not None:
            out["mask"] = self.mask.tolist()
        if spec is not None:
            out["basis"] = spec.labels()
        return out
