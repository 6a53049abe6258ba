"""Squared-exponential kernel, covariance assembly and jittered Cholesky."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class RbfParams:
    """RBF hyperparameters stored as logs.

    ``log_lengthscale`` is a scalar (isotropic) or one entry per input
    dimension (ARD).
    """

    log_lengthscale: np.ndarray
    log_signal_variance: float

    @classmethod
    def create(cls, lengthscale, signal_variance: float = 1.0) -> "RbfParams":
        ls = np.asarray(lengthscale, dtype=float)
        if (ls <= 0).any() or signal_variance <= 0:
            raise ValueError("lengthscale and signal_variance must be positive")
        return cls(np.log(ls), float(np.log(signal_variance)))

    @property
    def lengthscale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_lengthscale, dtype=float))

    @property
    def signal_variance(self) -> float:
        return float(np.exp(self.log_signal_variance))

    @property
    def ard(self) -> bool:
        return np.ndim(self.log_lengthscale) > 0


def _scaled(X: np.ndarray, p: RbfParams) -> np.ndarray:
    ls = p.lengthscale
    if ls.ndim and ls.shape[0] != X.shape[-1]:
        raise DimensionMismatch(f"{ls.shape[0]} lengthscales for {X.shape[-1]} input dims")
    return X / ls


def kernel_eval(x, x2, p: RbfParams) -> float:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape:
        raise DimensionMismatch(f"{x.shape} vs {x2.shape}")
    r2 = np.sum(((x - x2) / p.lengthscale) ** 2)
    return p.signal_variance * float(np.exp(-0.5 * r2))


def sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distance, computed from differences (exact at zero)."""
    return np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)


def kernel_matrix(X, X2, p: RbfParams) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != X2.shape[1]:
        raise DimensionMismatch(f"column counts {X.shape[1]} vs {X2.shape[1]}")
    return p.signal_variance * np.exp(-0.5 * sq_dist(_scaled(X, p), _scaled(X2, p)))


@dataclass(frozen=True)
class CholeskyFactor:
    L: np.ndarray
    jitter: float

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve((self.L, True), b)

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def robust_cholesky(K: np.ndarray, base_noise: float = 0.0) -> CholeskyFactor:
    """Factor ``K + (base_noise + jitter) I`` climbing the jitter ladder until it succeeds."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"square matrix required, got {K.shape}")
    if not np.allclose(K, K.T, rtol=0.0, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    eye = np.eye(K.shape[0])
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(K + (base_noise + jitter) * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0) and np.all(np.isfinite(L)):
            if jitter:
                log.debug("cholesky needed jitter %g", jitter)
            return CholeskyFactor(L, jitter)
    raise NotPositiveDefinite(
        f"matrix not positive definite after jitter {JITTER_LADDER[-1]:g} (base noise {base_noise:g})")


# --- torch variant used inside the variational layers -------------------

def rbf_torch(X, Z, log_lengthscale, log_signal_variance, latent_axis: bool = False):
    """Batched RBF against per-latent inducing inputs.

    ``Z`` is (Q, m, d) and lengthscales (Q, d). ``X`` is (..., n, d) and is
    broadcast against every latent GP, or already (Q, n, d) when
    ``latent_axis`` is set. Returns (..., Q, n, m).
    """
    import torch

    ls = torch.exp(log_lengthscale)[:, None, :]
    Xs = (X if latent_axis else X.unsqueeze(-3)) / ls
    Zs = Z / ls
    d2 = ((Xs ** 2).sum(-1).unsqueeze(-1) + (Zs ** 2).sum(-1).unsqueeze(-2)
          - 2.0 * Xs @ Zs.transpose(-1, -2))
    return torch.exp(log_signal_variance)[:, None, None] * torch.exp(-0.5 * d2.clamp_min(0.0))


def torch_cholesky(K):
    """Cholesky of a batch of SPD matrices with the same jitter ladder as ``robust_cholesky``."""
    import torch

    eye = torch.eye(K.shape[-1], dtype=K.dtype)
    for jitter in JITTER_LADDER:
        L, info = torch.linalg.cholesky_ex(K + jitter * eye)
        if not bool(info.any()):
            return L
    raise NotPositiveDefinite(f"inducing covariance not positive definite after jitter {JITTER_LADDER[-1]:g}")
