"""Constrained Cramer-Rao bounds and small-noise statistics of SIDDS.

Every stacked quantity uses the ``(c, z)`` ordering: the free coefficients
first, then the row-major state history.
"""

from __future__ import annotations

import contextlib
import csv
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .basis import Coefficients, eval_basis
from .findiff import FinDiffMatrix
from .integrate import VectorField, integrate_sensitivities, integrate_trajectory
from .noise import NoiseModel, WeightMatrix

__all__ = [
    "CutoffWarning",
    "CrlbResult",
    "SiddsAsymptotics",
    "tangent_matrix",
    "tangent_basis",
    "crlb_bound",
    "sidds_asymptotics",
    "constraint_jacobian_dense",
    "write_bound_csv",
]

PINV_RTOL = 1e-10
SIDDS_RANK_RTOL = 1e-6


class CutoffWarning(UserWarning):
    """Singular values sit close to the pseudoinverse cutoff."""


def _pinv_sym(A: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    A = 0.5 * (A + A.T)
    w, Q = np.linalg.eigh(A)
    top = np.max(np.abs(w), initial=0.0)
    cut = rtol * top
    near = np.abs(np.abs(w) - cut) < 0.5 * cut
    if top > 0 and np.any(near & (np.abs(w) > 0)):
        warnings.warn("eigenvalues cluster at the pseudoinverse cutoff", CutoffWarning, stacklevel=3)
    keep = np.abs(w) > cut
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (Q * inv) @ Q.T


def _field(field_or_spec, C=None, mask=None) -> VectorField:
    if isinstance(field_or_spec, VectorField):
        if mask is None:
            return field_or_spec
        return VectorField(field_or_spec.spec, Coefficients(field_or_spec.C, mask))
    return VectorField(field_or_spec, Coefficients(C, mask))


def _noise_blocks(noise, m: int, d: int) -> WeightMatrix:
    if isinstance(noise, NoiseModel):
        return noise.covariance(m, d)
    return noise


def _apply_blocks(W: WeightMatrix, Z: np.ndarray) -> np.ndarray:
    """``W @ Z`` for a block-diagonal ``W`` and a ``dm x k`` matrix ``Z``."""
    m, d = W.m, W.d
    k = Z.shape[1]
    return np.einsum("jab,jbk->jak", W.blocks, Z.reshape(m, d, k)).reshape(m * d, k)


def tangent_matrix(field: VectorField, x0, m: int, delta: float, **tol) -> np.ndarray:
    """Stacked sensitivities spanning the tangent space of the evolution constraint.

    Rows: free coefficients, then ``z_1, ..., z_m``; columns: coefficient
    perturbations, then initial-condition perturbations.  Row block ``j`` of
    the state part is ``[V(t_j) W(t_j)]`` with ``t_1 = 0`` so that the first
    state block is ``[0 I]``.
    """
    sens = integrate_sensitivities(field, x0, m, delta, **tol)
    d = field.dim
    nc = field.coeffs.n_free
    top = np.hstack([np.eye(nc), np.zeros((nc, d))])
    bottom = np.concatenate([sens.V, sens.W], axis=2).reshape(m * d, nc + d)
    return np.vstack([top, bottom])


def tangent_basis(field: VectorField, x0, m: int, delta: float, **tol) -> np.ndarray:
    """Orthonormal basis (reduced QR) of the constraint tangent space."""
    T = tangent_matrix(field, x0, m, delta, **tol)
    Q, R = np.linalg.qr(T)
    diag = np.abs(np.diag(R))
    if diag.min() <= max(T.shape) * np.finfo(float).eps * diag.max():
        raise np.linalg.LinAlgError("tangent space lost rank during QR")
    return Q


@dataclass
class CrlbResult:
    """Constrained CRLB ``U [U^T J U]^+ U^T`` kept in factored form.

    ``full_bound`` materializes the ``(n_c + dm)``-square matrix on demand.
    """

    basis: np.ndarray
    core: np.ndarray
    n_coeff: int

    @property
    def coeff_bound(self) -> np.ndarray:
        Uc = self.basis[: self.n_coeff]
        out = Uc @ self.core @ Uc.T
        return 0.5 * (out + out.T)

    @property
    def full_bound(self) -> np.ndarray:
        out = self.basis @ self.core @ self.basis.T
        return 0.5 * (out + out.T)

    @property
    def tangent_dim(self) -> int:
        return self.basis.shape[1]

    def trace(self) -> float:
        return float(np.trace(self.coeff_bound))


def crlb_bound(field: VectorField, x0, m: int, delta: float, noise, mask=None, **tol) -> CrlbResult:
    """Cramer-Rao bound for unbiased estimators of ``(c, z)``.

    With ``mask`` (or a masked ``field``) only the free coefficients enter the
    tangent space, which gives the sparsity-constrained bound.
    """
    field = _field(field, mask=mask)
    U = tangent_basis(field, x0, m, delta, **tol)
    d = field.dim
    nc = field.coeffs.n_free
    Sigma = _noise_blocks(noise, m, d)
    Uz = U[nc:]
    info = Uz.T @ _apply_blocks(Sigma.inverse(), Uz)
    return CrlbResult(U, _pinv_sym(info), nc)


def constraint_jacobian_dense(spec, C, X, D: FinDiffMatrix, free=None):
    """Residual ``h`` and dense ``[K L]`` of the discretized constraint at ``(C, X)``."""
    from .solver import ConstraintWorkspace  # local import: solver depends on crlb-free modules only

    X = np.asarray(getattr(X, "states", X), dtype=float)
    ws = ConstraintWorkspace(spec, D, free=free)
    C = np.asarray(C, dtype=float).reshape(spec.n, spec.dim)
    h = ws.evaluate(C.reshape(-1)[ws.free], X.reshape(-1))
    A = np.hstack([ws.K_dense(), ws.L.toarray()])
    return h, A


@dataclass
class SiddsAsymptotics:
    """First-order bias and leading covariance of SIDDS estimates of ``(c, z)``."""

    bias: np.ndarray
    basis: np.ndarray
    core: np.ndarray
    middle: np.ndarray
    n_coeff: int

    @property
    def coeff_bias(self) -> np.ndarray:
        return self.bias[: self.n_coeff]

    def _sandwich(self, rows):
        Ur = self.basis[rows]
        left = Ur @ self.core
        out = left @ self.middle @ left.T
        return 0.5 * (out + out.T)

    @property
    def covariance(self) -> np.ndarray:
        return self._sandwich(slice(None))

    @property
    def coeff_covariance(self) -> np.ndarray:
        return self._sandwich(slice(0, self.n_coeff))


def sidds_asymptotics(field: VectorField, x0, m: int, delta: float, D: FinDiffMatrix,
                      noise, M: WeightMatrix | None = None, mask=None,
                      X=None, rank_rtol: float | None = None) -> SiddsAsymptotics:
    """Small-noise bias and covariance of the discretized estimator.

    The bias is ``-[K L]^+ h(c*, x)``; the covariance is the sandwich
    ``U G U^T diag(0, M Sigma M) U G U^T`` with ``G = (U^T diag(0, M) U)^+``
    and ``U`` an orthonormal basis for the null space of ``[K L]``, found by
    a dense SVD.  Singular values below ``rank_rtol * s_max`` (default
    1e-6) count as zero: centered stencils leave a few structurally singular
    checkerboard directions, many decades below the rest of the spectrum,
    whose inclusion would let roundoff-sized parts of ``h`` dominate the bias.
    """
    field = _field(field, mask=mask)
    spec = field.spec
    d = field.dim
    if X is None:
        X = integrate_trajectory(field, x0, m, delta).states
    X = np.asarray(getattr(X, "states", X), dtype=float)
    free = field.coeffs.free
    nc = free.size
    h, A = constraint_jacobian_dense(spec, field.C, X, D, free=free)

    Uu, s, Vt = np.linalg.svd(A, full_matrices=True)
    rtol = SIDDS_RANK_RTOL if rank_rtol is None else rank_rtol
    rank = int(np.sum(s > rtol * s[0]))
    bias = -Vt[:rank].T @ ((Uu[:, :rank].T @ h) / s[:rank])
    U = Vt[rank:].T

    Sigma = _noise_blocks(noise, m, d)
    M = Sigma.inverse() if M is None else M
    Uz = U[nc:]
    MUz = _apply_blocks(M, Uz)
    core = _pinv_sym(Uz.T @ MUz)
    # U^T diag(0, M Sigma M) U
    middle = MUz.T @ _apply_blocks(Sigma, MUz)
    middle = 0.5 * (middle + middle.T)
    return SiddsAsymptotics(bias, U, core, middle, nc)


def write_bound_csv(path, result: CrlbResult, labels=None):
    """Diagonal of the coefficient bound plus its trace, one row per coefficient.

    ``path`` may also be an open text stream.
    """
    diag = np.diag(result.coeff_bound)
    labels = labels or [f"c{i}" for i in range(diag.size)]
    opened = contextlib.nullcontext(path) if hasattr(path, "write") else open(path, "w", newline="")
    with opened as fh:
        writer = csv.writer(fh)
        writer.writerow(["coefficient", "variance"])
        for name, v in zip(labels, diag):
            writer.writerow([name, repr(float(v))])
        writer.writerow(["trace", repr(float(diag.sum()))])
