"""Finite-difference differentiation matrices on uniform grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "FinDiffMatrix",
    "fornberg_weights",
    "make_findiff",
    "make_second_diff",
    "kron_lift",
    "bandwidth",
]


def fornberg_weights(z: float, x, order: int) -> np.ndarray:
    """Finite-difference weights on arbitrary nodes (Fornberg's recursion).

    Parameters
    ----------
    z : float
        Evaluation point.
    x : array_like
        Stencil nodes.
    order : int
        Highest derivative order wanted.

    Returns
    -------
    ndarray, shape ``(order + 1, len(x))``
        Row ``k`` holds the weights approximating the ``k``-th derivative at ``z``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    c = np.zeros((n, order + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c.T


def bandwidth(A) -> int:
    """Largest ``|i - j|`` over the stored nonzeros of a sparse matrix."""
    A = sp.coo_matrix(A)
    nz = A.data != 0
    if not np.any(nz):
        return 0
    return int(np.max(np.abs(A.row[nz] - A.col[nz])))


@dataclass(frozen=True)
class FinDiffMatrix:
    """First-derivative operator ``D`` on ``m`` samples spaced ``delta`` apart.

    Interior rows use the centered ``points``-wide rule; the first and last
    ``(points - 1) // 2`` rows use the first/last ``points`` nodes evaluated at
    the boundary node, so every row is exact for polynomials of degree
    ``points - 1``.
    """

    m: int
    delta: float
    points: int
    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def half_width(self) -> int:
        return (self.points - 1) // 2

    def __matmul__(self, other):
        return self.matrix @ other

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def banded(self) -> np.ndarray:
        """LAPACK-style banded storage ``(2*(points-1) + 1, m)``."""
        w = self.points - 1
        ab = np.zeros((2 * w + 1, self.m))
        A = self.matrix.tocoo()
        ab[w + A.row - A.col, A.col] = A.data
        return ab


def make_findiff(m: int, delta: float, points: int = 3) -> FinDiffMatrix:
    """Build the ``points``-point differentiation matrix for ``m`` samples."""
    if points < 3 or points % 2 == 0:
        raise ValueError(f"points must be odd and >= 3, got {points}")
    if m < points:
        raise ValueError(f"need at least {points} samples, got m={m}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    half = (points - 1) // 2
    nodes = np.arange(points, dtype=float)
    center = fornberg_weights(half, nodes, 1)[1]

    rows, cols, vals = [], [], []
    interior = np.arange(half, m - half)
    for offset, w in enumerate(center):
        rows.append(interior)
        cols.append(interior - half + offset)
        vals.append(np.full(interior.size, w))
    for i in range(half):
        w = fornberg_weights(i, nodes, 1)[1]
        rows += [np.full(points, i), np.full(points, m - 1 - i)]
        cols += [np.arange(points), m - 1 - np.arange(points)]
        # mirror image of the left rule flips the sign of a first derivative
        vals += [w, -w]
    D = sp.csr_matrix(
        (np.concatenate(vals) / delta, (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, m),
    )
    D.sum_duplicates()
    return FinDiffMatrix(m, float(delta), points, D)


def make_second_diff(m: int, delta: float) -> sp.csr_matrix:
    """Three-point second-derivative matrix.

    Boundary rows repeat the stencil of the nearest interior row.
    """
    if m < 3:
        raise ValueError(f"need at least 3 samples, got m={m}")
    centers = np.clip(np.arange(m), 1, m - 2)
    rows = np.repeat(np.arange(m), 3)
    cols = (centers[:, None] + np.array([-1, 0, 1])).reshape(-1)
    vals = np.tile([1.0, -2.0, 1.0], m) / delta**2
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def kron_lift(D, d: int) -> sp.csr_matrix:
    """``D kron I_d``: acts on row-major vectorized ``m x d`` state histories."""
    if d < 1:
        raise ValueError("d must be positive")
    mat = D.matrix if isinstance(D, FinDiffMatrix) else sp.csr_matrix(D)
    if d == 1:
        return sp.csr_matrix(mat, copy=True)
    return sp.kron(mat, sp.identity(d, format="csr"), format="csr")
