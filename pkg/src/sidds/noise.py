"""Measurement noise models, block-diagonal weights and oversampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NoiseModel",
    "WeightMatrix",
    "sample_noise",
    "inverse_weight",
    "oversample",
    "restrict",
]


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise that is independent across samples.

    ``kind="iid"`` gives ``sigma^2 I``.  ``kind="correlated"`` correlates the
    first two coordinates of every sample with coefficient ``rho``; any further
    coordinates stay independent with variance ``sigma^2``.
    """

    kind: str = "iid"
    sigma: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        kind = {"block_correlated": "correlated"}.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in ("iid", "correlated"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseModel":
        return cls(data.get("kind", "iid"), float(data.get("sigma", 1.0)), float(data.get("rho", 0.0)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "rho": self.rho}

    def block(self, d: int) -> np.ndarray:
        """Covariance of one sample, ``d x d``."""
        S = np.eye(d)
        if self.kind == "correlated" and d >= 2:
            S[0, 1] = S[1, 0] = self.rho
        return self.sigma**2 * S

    def covariance(self, m: int, d: int) -> "WeightMatrix":
        """Full covariance as ``m`` repeated blocks."""
        return WeightMatrix(np.broadcast_to(self.block(d), (m, d, d)).copy())


class WeightMatrix:
    """Symmetric block-diagonal ``dm x dm`` operator stored as ``(m, d, d)`` blocks."""

    def __init__(self, blocks):
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError("blocks must have shape (m, d, d)")
        if not np.allclose(blocks, np.transpose(blocks, (0, 2, 1)), rtol=0, atol=1e-14 * max(1.0, np.abs(blocks).max(initial=0))):
            raise ValueError("weight blocks must be symmetric")
        self.blocks = blocks

    @classmethod
    def identity(cls, m: int, d: int, scale: float = 1.0) -> "WeightMatrix":
        return cls(np.broadcast_to(scale * np.eye(d), (m, d, d)).copy())

    @property
    def m(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    @property
    def shape(self):
        n = self.m * self.d
        return (n, n)

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.m, self.d)
        return np.einsum("jab,jb->ja", self.blocks, x).reshape(-1)

    def __matmul__(self, x):
        if isinstance(x, WeightMatrix):
            return WeightMatrix(self.blocks @ x.blocks)
        return self.matvec(x)

    def quad(self, x) -> float:
        """``x^T M x``."""
        return float(np.dot(x, self.matvec(x)))

    def tosparse(self) -> sp.csr_matrix:
        m, d = self.m, self.d
        return sp.bsr_matrix((self.blocks, np.arange(m), np.arange(m + 1)), shape=self.shape).tocsr()

    def toarray(self) -> np.ndarray:
        return self.tosparse().toarray()

    def inverse(self) -> "WeightMatrix":
        return WeightMatrix(np.linalg.inv(self.blocks))

    def sqrt_inverse(self) -> "WeightMatrix":
        """Symmetric inverse square root, block by block."""
        w, Q = np.linalg.eigh(self.blocks)
        if np.any(w <= 0):
            raise np.linalg.LinAlgError("weight is not positive definite")
        return WeightMatrix(np.einsum("jab,jb,jcb->jac", Q, 1.0 / np.sqrt(w), Q))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.blocks)

    def is_psd(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.eigenvalues() >= -tol))


def sample_noise(model: NoiseModel, m: int, d: int, seed) -> np.ndarray:
    """Draw one noise vector of length ``d*m`` (row-major) from ``model``."""
    rng = np.random.default_rng(seed)
    if model.sigma == 0:
        return np.zeros(m * d)
    L = np.linalg.cholesky(model.block(d))
    E = rng.standard_normal((m, d))
    return (E @ L.T).reshape(-1)


def inverse_weight(model: NoiseModel, m: int, d: int) -> WeightMatrix:
    """``Sigma^{-1}`` for ``m`` samples of dimension ``d``."""
    if model.sigma <= 0:
        raise ValueError("inverse weight needs sigma > 0")
    block = model.block(d)
    try:
        inv = np.linalg.inv(block)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("singular noise block") from err
    inv = 0.5 * (inv + inv.T)
    return WeightMatrix(np.broadcast_to(inv, (m, d, d)).copy())


def oversample(y, M: WeightMatrix, factor: int):
    """Insert ``factor - 1`` virtual samples between consecutive measurements.

    Returns ``(y_up, M_up, m_up)``.  Virtual samples carry zero data and zero
    weight, so they never enter the misfit.
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("oversampling factor must be a positive integer")
    m, d = M.m, M.d
    y = np.asarray(y, dtype=float).reshape(m, d)
    if factor == 1:
        return y.reshape(-1).copy(), WeightMatrix(M.blocks.copy()), m
    m_up = factor * (m - 1) + 1
    Y = np.zeros((m_up, d))
    Y[::factor] = y
    blocks = np.zeros((m_up, d, d))
    blocks[::factor] = M.blocks
    return Y.reshape(-1), WeightMatrix(blocks), m_up


def restrict(y_up, d: int, factor: int) -> np.ndarray:
    """Keep only the measurement nodes of an oversampled vector."""
    return np.asarray(y_up, dtype=float).reshape(-1, d)[::factor].reshape(-1)
