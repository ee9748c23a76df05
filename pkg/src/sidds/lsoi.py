"""Least squares operator inference and its small-noise statistics.

LSOI regresses finite-difference derivatives of the data onto the dictionary
evaluated at the data, ``min_C ||D Y - Phi(Y) C||_F``.  Column ``i`` of ``C``
only involves column ``i`` of ``D Y``, so masked problems are solved one
output coordinate at a time on the dictionary columns that are free for it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .basis import BasisSpec, Coefficients, eval_basis, eval_basis_grad, state_jacobians
from .findiff import FinDiffMatrix, kron_lift
from .noise import NoiseModel, WeightMatrix

__all__ = [
    "RankDeficientWarning",
    "LsoiAsymptotics",
    "lsoi_solve",
    "weighted_lsoi_solve",
    "whitening_operator",
    "pinv_derivative",
    "lsoi_asymptotics",
    "lifted_dictionary",
]


class RankDeficientWarning(UserWarning):
    """The dictionary matrix lost column rank; a minimum-norm solution was used."""


def _states(Y, d=None) -> np.ndarray:
    Y = getattr(Y, "states", Y)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        if d is None:
            raise ValueError("vector input needs the state dimension")
        Y = Y.reshape(-1, d)
    return Y


def _column_masks(spec: BasisSpec, mask) -> np.ndarray:
    if mask is None:
        return np.ones((spec.n, spec.dim), dtype=bool)
    return np.asarray(mask, dtype=bool).reshape(spec.n, spec.dim)


def _qr_lstsq(A: np.ndarray, B: np.ndarray):
    """Least squares by pivoted QR; minimum-norm fallback when rank deficient."""
    if A.shape[1] == 0:
        return np.zeros((0,) + B.shape[1:]), False
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    if A.shape[0] >= A.shape[1] and np.all(diag > tol):
        X = np.empty((A.shape[1],) + B.shape[1:])
        X[piv] = sla.solve_triangular(R, Q.T @ B)
        return X, False
    X = sla.lstsq(A, B, lapack_driver="gelsd")[0]
    return X, True


def _solve_masked(Phi: np.ndarray, rhs: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, bool]:
    n, d = cols.shape
    C = np.zeros((n, d))
    deficient = False
    # group output coordinates that share a column pattern
    patterns = {}
    for i in range(d):
        patterns.setdefault(cols[:, i].tobytes(), []).append(i)
    for key, outs in patterns.items():
        S = cols[:, outs[0]]
        X, bad = _qr_lstsq(Phi[:, S], rhs[:, outs])
        C[np.ix_(S, outs)] = X
        deficient |= bad
    return C, deficient


def lsoi_solve(Y, D: FinDiffMatrix, spec: BasisSpec, mask=None) -> Coefficients:
    """Fit ``C`` from states ``Y`` (``m x d``) with derivative operator ``D``.

    Issues :class:`RankDeficientWarning` if a (masked) dictionary matrix is
    rank deficient; the minimum-norm solution is returned in that case.
    """
    Y = _states(Y, spec.dim)
    if Y.shape[1] != spec.dim:
        raise ValueError("state dimension does not match the basis")
    if Y.shape[0] != D.m:
        raise ValueError("number of samples does not match the differentiation matrix")
    cols = _column_masks(spec, mask)
    Phi = eval_basis(spec, Y)
    C, deficient = _solve_masked(Phi, D.matrix @ Y, cols)
    if deficient:
        warnings.warn("dictionary matrix is rank deficient", RankDeficientWarning, stacklevel=2)
    return Coefficients(C, None if mask is None else cols)


def lifted_dictionary(spec: BasisSpec, Y, free=None) -> np.ndarray:
    """Dense ``Phi(Y) kron I_d`` restricted to the free coefficient columns."""
    Y = _states(Y, spec.dim)
    big = np.kron(eval_basis(spec, Y), np.eye(spec.dim))
    return big if free is None else big[:, free]


def weighted_lsoi_solve(Y, D: FinDiffMatrix, spec: BasisSpec, Gamma, mask=None) -> Coefficients:
    """Solve ``min_c ||Gamma (D_vec y - Phi_vec(y) c)||_2``.

    ``Gamma`` is a dense ``dm x dm`` array, anything with ``@``, or None for
    the identity.
    """
    Y = _states(Y, spec.dim)
    cols = _column_masks(spec, mask)
    free = np.flatnonzero(cols.reshape(-1))
    A = lifted_dictionary(spec, Y, free)
    b = (D.matrix @ Y).reshape(-1)
    if Gamma is not None:
        try:
            A = Gamma @ A
            b = Gamma @ b
        except Exception as err:  # noqa: BLE001 - any operator failure is reported the same way
            raise ValueError(f"could not apply weighting operator: {err}") from err
    x, deficient = _qr_lstsq(np.asarray(A), np.asarray(b))
    if deficient:
        warnings.warn("weighted dictionary matrix is rank deficient", RankDeficientWarning, stacklevel=2)
    return Coefficients.from_free(x, (spec.n, spec.dim), None if mask is None else cols)


def whitening_operator(X, C_true, D: FinDiffMatrix, spec: BasisSpec, noise,
                       rank_tol: float = 1e-8) -> np.ndarray:
    """``Sigma^{-1/2} [D_vec - grad Phi_vec(x) c]^+`` linearized at the truth.

    The pseudoinverse drops singular values below ``rank_tol * s_max``.  This
    needs a dense SVD of a ``dm x dm`` matrix.
    """
    X = _states(X, spec.dim)
    m, d = X.shape
    Lmat = kron_lift(D, d).toarray()
    J = state_jacobians(spec, X, np.asarray(C_true, dtype=float).reshape(spec.n, d))
    for j in range(m):
        Lmat[j * d:(j + 1) * d, j * d:(j + 1) * d] -= J[j]
    Lpinv = sla.pinv(Lmat, rtol=rank_tol)
    Sigma = noise.covariance(m, d) if isinstance(noise, NoiseModel) else noise
    S = Sigma.sqrt_inverse()
    return (S.blocks @ Lpinv.reshape(m, d, m * d)).reshape(m * d, m * d)


def pinv_derivative(A, dA, A_pinv=None) -> np.ndarray:
    """Directional derivative of the Moore-Penrose pseudoinverse.

    Uses the Golub-Pereyra expression

    ``-A+ dA A+ + A+ A+^T dA^T (I - A A+) + (I - A+ A) dA^T A+^T A+``

    evaluated without forming either projector.  Valid where ``A`` has
    locally constant rank.
    """
    A = np.asarray(A, dtype=float)
    dA = np.asarray(dA, dtype=float)
    P = np.linalg.pinv(A) if A_pinv is None else A_pinv
    dAt = dA.T
    first = -P @ dA @ P
    second = P @ (P.T @ (dAt - (dAt @ A) @ P))
    tail = (dAt @ P.T) @ P
    third = tail - P @ (A @ tail)
    return first + second + third


@dataclass
class LsoiAsymptotics:
    """First-order bias and covariance of the LSOI coefficient estimate.

    ``covariance`` is ``T Sigma T^T`` for the noise covariance supplied, so it
    already includes ``sigma^2``.
    """

    bias: np.ndarray
    covariance: np.ndarray
    transform: np.ndarray


def lsoi_asymptotics(X, C_true, D: FinDiffMatrix, spec: BasisSpec, noise, mask=None) -> LsoiAsymptotics:
    """Small-noise statistics of LSOI around noise-free states ``X``.

    Parameters
    ----------
    X : (m, d) array or Trajectory
        Noise-free states.
    C_true : (n, d) array or Coefficients
        True coefficients; ``mask`` defaults to the mask of a Coefficients.
    D : FinDiffMatrix
    spec : BasisSpec
    noise : NoiseModel or WeightMatrix
        Noise model or explicit block covariance.
    """
    X = _states(X, spec.dim)
    m, d = X.shape
    if mask is None and isinstance(C_true, Coefficients):
        mask = C_true.mask
    C_true = getattr(C_true, "matrix", C_true)
    C_true = np.asarray(C_true, dtype=float).reshape(spec.n, d)
    cols = _column_masks(spec, mask)
    free = np.flatnonzero(cols.reshape(-1))
    nc = free.size
    position = -np.ones(spec.n * d, dtype=int)
    position[free] = np.arange(nc)

    Phi = eval_basis(spec, X)
    G = eval_basis_grad(spec, X)  # (d, m, n)
    DX = D.matrix @ X
    Dense = D.toarray()
    xdot = Phi @ C_true

    bias = np.zeros(nc)
    T = np.zeros((nc, m * d))
    for i in range(d):
        S = np.flatnonzero(cols[:, i])
        if S.size == 0:
            continue
        A = Phi[:, S]
        if np.linalg.matrix_rank(A) < S.size:
            raise np.linalg.LinAlgError(f"dictionary for output {i} is rank deficient at the truth")
        P = np.linalg.pinv(A)
        rows = position[S * d + i]
        bias[rows] = P @ (DX[:, i] - xdot[:, i])
        # noise entering through the derivative estimate of coordinate i
        T[rows, i::d] += P @ Dense
        # Noise in state entry (j, l) perturbs row j of A by g = G[l, j, S],
        # a rank-one dA = e_j g^T.  The pseudoinverse derivative applied to b
        # then reduces to three vector terms (see pinv_derivative):
        #   -P[:, j] (g . c) + P P^T g r_j + (I - P A) g u_j
        # with c = P b, r = b - A c and u = P^T c.
        b = DX[:, i]
        c = P @ b
        r = b - A @ c
        u = P.T @ c
        PPt = P @ P.T
        proj = np.eye(S.size) - P @ A
        for l in range(d):
            g = G[l][:, S]  # (m, |S|)
            if not np.any(g):
                continue
            term = -P * (g @ c)[None, :] + (PPt @ g.T) * r[None, :] + (proj @ g.T) * u[None, :]
            T[rows, l::d] += term

    Sigma = noise.covariance(m, d) if isinstance(noise, NoiseModel) else noise
    TS = np.einsum("cja,jab->cjb", T.reshape(nc, m, d), Sigma.blocks).reshape(nc, m * d)
    cov = TS @ T.T
    cov = 0.5 * (cov + cov.T)
    return LsoiAsymptotics(bias, cov, T)
