"""Sparse variational multi-output GP layer.

Q independent latent GPs, each with its own ARD RBF kernel and M inducing
inputs, are mixed linearly into D_out outputs (linear model of
coregionalization). The variational posterior over inducing values is kept
in whitened coordinates: u_q = L_q v_q with K_zz = L_q L_q^T and
v_q ~ N(m_q, S_q S_q^T), so the KL term is against N(0, I).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, InvalidConfig
from .kernels import rbf_torch, torch_cholesky

DTYPE = torch.float64
NOISE_FLOOR = 1e-8
# fixed diagonal load on K_zz before the jitter ladder
KZZ_JITTER = 1e-6
INDUCING_JITTER = 1e-3


@dataclass
class LayerMarginal:
    mean: torch.Tensor
    var: torch.Tensor


class SvgpLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, q: int, m: int, noise: bool = True):
        super().__init__()
        if min(d_in, d_out, q, m) < 1:
            raise InvalidConfig(f"layer sizes must be >= 1 (d_in={d_in}, d_out={d_out}, q={q}, m={m})")
        self.d_in, self.d_out, self.q, self.m = d_in, d_out, q, m
        z = lambda *shape: nn.Parameter(torch.zeros(*shape, dtype=DTYPE))
        self.Z = z(q, m, d_in)
        self.log_lengthscale = z(q, d_in)
        self.log_signal_variance = z(q)
        self.q_mu = z(q, m)
        self.q_sqrt_lower = z(q, m, m)
        self.q_sqrt_logdiag = z(q, m)
        self.mixing = z(d_out, q)
        self.log_noise = z(d_out) if noise else None
        # fixed linear mean h = x W^T; zero when absent
        self.register_buffer("mean_weight", None)

    @property
    def noise(self) -> torch.Tensor:
        if self.log_noise is None:
            return torch.zeros(self.d_out, dtype=DTYPE)
        return NOISE_FLOOR + torch.exp(self.log_noise)

    def q_sqrt(self) -> torch.Tensor:
        return torch.tril(self.q_sqrt_lower, diagonal=-1) + torch.diag_embed(torch.exp(self.q_sqrt_logdiag))

    def prior_mean(self, X: torch.Tensor) -> torch.Tensor | None:
        if self.mean_weight is None:
            return None
        return X @ self.mean_weight.T

    def forward(self, X: torch.Tensor) -> LayerMarginal:
        return layer_marginal(self, X)


def _orthonormal_mixing(d_out: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Random mixing matrix with unit-norm rows, orthonormal when d_out <= q."""
    G = rng.standard_normal((d_out, q))
    if d_out <= q:
        Qf, _ = np.linalg.qr(G.T)
        A = Qf.T
    else:
        A, _ = np.linalg.qr(G)
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def layer_init(d_in: int, d_out: int, q: int, m: int, X_sample, seed: int, *,
               noise: bool = True, noise_init: float = 1e-2, lengthscale: float | None = None,
               mean_weight=None) -> SvgpLayer:
    """Fresh layer whose whitened posterior equals the prior.

    Inducing inputs of every latent GP are a random subset of ``X_sample``
    (drawn with replacement when ``m`` exceeds the sample) plus small Gaussian
    jitter.
    """
    layer = SvgpLayer(d_in, d_out, q, m, noise=noise)
    Xs = np.asarray(X_sample, dtype=float)
    if Xs.ndim != 2 or Xs.shape[1] != d_in or Xs.shape[0] < 1:
        raise DimensionMismatch(f"X_sample must be (n, {d_in}), got {Xs.shape}")
    rng = np.random.default_rng(seed)
    replace = m > Xs.shape[0]
    Z = np.stack([Xs[rng.choice(Xs.shape[0], size=m, replace=replace)] for _ in range(q)])
    Z = Z + INDUCING_JITTER * rng.standard_normal(Z.shape)
    ls = math.sqrt(d_in) if lengthscale is None else lengthscale
    with torch.no_grad():
        layer.Z.copy_(torch.as_tensor(Z, dtype=DTYPE))
        layer.log_lengthscale.fill_(math.log(ls))
        layer.mixing.copy_(torch.as_tensor(_orthonormal_mixing(d_out, q, rng), dtype=DTYPE))
        if layer.log_noise is not None:
            layer.log_noise.fill_(math.log(noise_init - NOISE_FLOOR))
    if mean_weight is not None:
        layer.mean_weight = torch.as_tensor(np.asarray(mean_weight, dtype=float), dtype=DTYPE)
    return layer


def latent_marginals(layer: SvgpLayer, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-latent q(f) moments, each of shape (..., Q, n)."""
    if X.shape[-1] != layer.d_in:
        raise DimensionMismatch(f"layer expects {layer.d_in} inputs, got {X.shape[-1]}")
    eye = torch.eye(layer.m, dtype=DTYPE)
    Kzz = rbf_torch(layer.Z, layer.Z, layer.log_lengthscale, layer.log_signal_variance, latent_axis=True)
    L = torch_cholesky(Kzz + KZZ_JITTER * eye)
    Kzx = rbf_torch(X, layer.Z, layer.log_lengthscale, layer.log_signal_variance).transpose(-1, -2)
    Aw = torch.linalg.solve_triangular(L, Kzx, upper=False)  # (..., Q, M, n)
    mean = (Aw * layer.q_mu.unsqueeze(-1)).sum(-2)
    SAw = layer.q_sqrt().transpose(-1, -2) @ Aw
    kxx = torch.exp(layer.log_signal_variance).unsqueeze(-1)
    var = kxx - (Aw * Aw).sum(-2) + (SAw * SAw).sum(-2)
    return mean, var.clamp_min(0.0)


def layer_marginal(layer: SvgpLayer, X: torch.Tensor) -> LayerMarginal:
    """Per-point output moments before layer noise, shape (..., n, d_out)."""
    # marginals are pointwise, so leading sample axes fold into the point axis
    lead = X.shape[:-1]
    flat = X.reshape(-1, X.shape[-1])
    mean_q, var_q = latent_marginals(layer, flat)
    mean = mean_q.T @ layer.mixing.T
    var = var_q.T @ (layer.mixing ** 2).T
    pm = layer.prior_mean(flat)
    if pm is not None:
        mean = mean + pm
    return LayerMarginal(mean.reshape(*lead, layer.d_out), var.reshape(*lead, layer.d_out))


def layer_sample(layer: SvgpLayer, X: torch.Tensor, generator: torch.Generator | None = None, *,
                 eps: torch.Tensor | None = None, with_noise: bool = True,
                 marginal: LayerMarginal | None = None) -> torch.Tensor:
    """Reparameterised draw ``mean + sqrt(var [+ noise]) * eps``.

    ``eps`` may be supplied for common random numbers; otherwise it is drawn
    from ``generator`` with the shape of the marginal.
    """
    mg = layer_marginal(layer, X) if marginal is None else marginal
    var = mg.var + layer.noise if with_noise else mg.var
    if eps is None:
        eps = torch.randn(mg.mean.shape, generator=generator, dtype=DTYPE)
    return mg.mean + torch.sqrt(var) * eps


def layer_kl(layer: SvgpLayer) -> torch.Tensor:
    """Sum over latent GPs of KL(N(m, S S^T) || N(0, I))."""
    S = layer.q_sqrt()
    return 0.5 * ((layer.q_mu ** 2).sum() + (S ** 2).sum() - layer.q * layer.m
                  - 2.0 * layer.q_sqrt_logdiag.sum())
