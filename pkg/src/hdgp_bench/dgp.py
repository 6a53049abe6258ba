"""Two-layer deep GP trained with the doubly stochastic ELBO on heterotopic data.

Layer 1 maps compositions to a hidden representation of width
``T - reduction``; layer 2 maps samples of that representation to the T
task outputs. The hidden layer is sampled with the reparameterisation trick,
the output layer's Gaussian marginal is integrated against the Gaussian
likelihood in closed form. Only observed (row, task) cells enter the
likelihood.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import read_container, write_container
from .data import Dataset
from .errors import InvalidConfig, NonFinite
from .svgp import DTYPE, SvgpLayer, layer_init, layer_kl, layer_marginal, layer_sample

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class DgpOptions:
    q: int = 10
    m: int = 32
    steps: int = 3000
    lr: float = 5e-3
    train_samples: int = 8
    predict_samples: int = 2000
    layer1_noise: float = 1e-2
    task_noise: float = 0.1
    hidden_mean: str = "linear"
    include_noise: bool = True

    @classmethod
    def from_dict(cls, d: dict | None) -> "DgpOptions":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown dgp options {sorted(unknown)}")
        return cls(**d)


@dataclass
class ElboEstimate:
    value: float
    ell_term: float
    kl_term: float
    samples: int


class DgpModel(nn.Module):
    def __init__(self, layer1: SvgpLayer, layer2: SvgpLayer, task_names: Sequence[str], reduction: int,
                 fingerprint: str | None = None, config: dict | None = None):
        super().__init__()
        self.layer1 = layer1
        self.layer2 = layer2
        self.task_names = tuple(task_names)
        self.reduction = reduction
        self.fingerprint = fingerprint
        self.config = dict(config or {})

    @property
    def hidden_width(self) -> int:
        return self.layer1.d_out

    @property
    def task_noise(self) -> torch.Tensor:
        return self.layer2.noise


def _hidden_projection(X: np.ndarray, width: int) -> np.ndarray:
    """Fixed linear mean of the hidden layer: leading principal directions of X."""
    d = X.shape[1]
    Xc = X - X.mean(axis=0)
    _, _, Vt = np.linalg.svd(Xc, full_matrices=True)
    # sign convention keeps the projection independent of LAPACK details
    Vt = Vt * np.where(Vt[np.arange(d), np.abs(Vt).argmax(axis=1)] < 0, -1.0, 1.0)[:, None]
    W = np.zeros((width, d))
    k = min(width, d)
    W[:k] = Vt[:k]
    return W


def dgp_build(d_in: int = 8, tasks: int | Sequence[str] = 11, r: int = 0, q: int = 10, m: int = 32,
              seed: int = 0, X_sample=None, *, layer1_noise: float = 1e-2, task_noise: float = 0.1,
              hidden_mean: str = "linear", fingerprint: str | None = None) -> DgpModel:
    names = [f"task_{i}" for i in range(tasks)] if isinstance(tasks, int) else list(tasks)
    T = len(names)
    if not 0 <= r <= T - 1:
        raise InvalidConfig(f"reduction r={r} outside [0, {T - 1}] for {T} tasks")
    if hidden_mean not in ("zero", "linear"):
        raise InvalidConfig(f"hidden_mean must be 'zero' or 'linear', got {hidden_mean!r}")
    width = T - r
    ss = np.random.SeedSequence(seed)
    s1, s2, s3 = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    if X_sample is None:
        X_sample = np.random.default_rng(s3).standard_normal((max(m, 2), d_in))
    X_sample = np.array(X_sample, dtype=float)

    W = _hidden_projection(X_sample, width) if hidden_mean == "linear" else None
    layer1 = layer_init(d_in, width, q, m, X_sample, s1, noise=True, noise_init=layer1_noise, mean_weight=W)
    # layer-2 inducing inputs start on a draw of layer-1 outputs at the sample inputs
    gen = torch.Generator().manual_seed(s3)
    with torch.no_grad():
        H = layer_sample(layer1, torch.as_tensor(X_sample, dtype=DTYPE), gen).numpy()
    layer2 = layer_init(width, T, q, m, H, s2, noise=True, noise_init=task_noise)
    config = dict(d_in=d_in, tasks=names, r=r, q=q, m=m, seed=seed, layer1_noise=layer1_noise,
                  task_noise=task_noise, hidden_mean=hidden_mean)
    return DgpModel(layer1, layer2, names, r, fingerprint=fingerprint, config=config)


def _as_tensors(X, Y, mask):
    X = torch.tensor(np.asarray(X, dtype=float), dtype=DTYPE)
    mask_np = np.asarray(mask, dtype=bool)
    # dead cells never reach arithmetic
    Y_np = np.where(mask_np, np.nan_to_num(np.asarray(Y, dtype=float), nan=0.0, posinf=0.0, neginf=0.0), 0.0)
    return X, torch.as_tensor(Y_np, dtype=DTYPE), torch.tensor(mask_np)


def _draw_eps(model: DgpModel, n: int, s: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randn((s, n, model.hidden_width), generator=generator, dtype=DTYPE)


def elbo_terms(model: DgpModel, X: torch.Tensor, Y: torch.Tensor, mask: torch.Tensor,
               eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (expected log-likelihood, KL) for fixed hidden-layer noise ``eps``."""
    S = eps.shape[0]
    H = layer_sample(model.layer1, X, eps=eps)
    out = layer_marginal(model.layer2, H)
    noise = model.task_noise
    ll = (-0.5 * torch.log(2 * math.pi * noise)
          - 0.5 * ((Y - out.mean) ** 2 + out.var) / noise)
    ell = torch.where(mask, ll, torch.zeros((), dtype=DTYPE)).sum() / S
    kl = layer_kl(model.layer1) + layer_kl(model.layer2)
    return ell, kl


def elbo_estimate(model: DgpModel, X, Y, mask, s_samples: int = 8, generator: torch.Generator | None = None,
                  *, eps: torch.Tensor | None = None) -> ElboEstimate:
    X, Y, mask = _as_tensors(X, Y, mask)
    if eps is None:
        if s_samples < 1:
            raise InvalidConfig("s_samples must be >= 1")
        eps = _draw_eps(model, X.shape[0], s_samples, generator)
    with torch.no_grad():
        ell, kl = elbo_terms(model, X, Y, mask, eps)
    ell, kl = float(ell), float(kl)
    return ElboEstimate(ell - kl, ell, kl, eps.shape[0])


@dataclass
class TrainResult:
    model: DgpModel
    trace: list[float] = field(default_factory=list)


def train(model: DgpModel, data: Dataset, opts: DgpOptions = DgpOptions(), seed: int = 0) -> TrainResult:
    """Adam ascent on the ELBO over all variational and kernel parameters.

    Works on a copy; ``model`` itself is left untouched.
    """
    if list(data.task_names) != list(model.task_names):
        raise InvalidConfig(f"dataset tasks {data.task_names} != model tasks {model.task_names}")
    model = copy.deepcopy(model)
    model.fingerprint = data.fingerprint()
    X, Y, mask = _as_tensors(data.X, data.Y, data.mask)
    trace: list[float] = []
    if opts.steps <= 0:
        return TrainResult(model, trace)
    gen = torch.Generator().manual_seed(int(seed))
    params = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=opts.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        optim, lambda k: 0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(k, opts.steps) / opts.steps)))
    for step in range(opts.steps):
        eps = _draw_eps(model, X.shape[0], opts.train_samples, gen)
        optim.zero_grad()
        ell, kl = elbo_terms(model, X, Y, mask, eps)
        elbo = ell - kl
        if not torch.isfinite(elbo):
            raise NonFinite(f"non-finite ELBO at step {step} (ell={float(ell)}, kl={float(kl)})")
        (-elbo).backward()
        optim.step()
        sched.step()
        trace.append(float(elbo.detach()))
    return TrainResult(model, trace)


def predict(model: DgpModel, Xs, s_samples: int = 2000, generator: torch.Generator | None = None,
            include_noise: bool = True, chunk: int = 250) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo predictive mean and sd per task, in scaled units.

    Moments follow the law of total variance over hidden-layer samples.
    """
    X = torch.tensor(np.asarray(Xs, dtype=float), dtype=DTYPE)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    means, variances = [], []
    with torch.no_grad():
        first = layer_marginal(model.layer1, X)
        done = 0
        while done < s_samples:
            s = min(chunk, s_samples - done)
            eps = _draw_eps(model, X.shape[0], s, generator)
            H = layer_sample(model.layer1, X, eps=eps, marginal=first)
            out = layer_marginal(model.layer2, H)
            means.append(out.mean)
            variances.append(out.var)
            done += s
        mu = torch.cat(means)
        var = torch.cat(variances).mean(0) + mu.var(0, unbiased=False)
        if include_noise:
            var = var + model.task_noise
    mean = mu.mean(0).numpy()
    return mean, np.sqrt(np.maximum(var.numpy(), 0.0))


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(model: DgpModel, path: str | Path) -> None:
    params = {k: v.detach().tolist() for k, v in model.state_dict().items() if v is not None}
    write_container(path, "dgp", model.config, model.fingerprint, params)


def load_checkpoint(path: str | Path) -> DgpModel:
    doc = read_container(path, "dgp")
    cfg = doc["config"]
    model = dgp_build(cfg["d_in"], cfg["tasks"], cfg["r"], cfg["q"], cfg["m"], cfg["seed"],
                      layer1_noise=cfg["layer1_noise"], task_noise=cfg["task_noise"],
                      hidden_mean=cfg["hidden_mean"])
    model.load_state_dict({k: torch.tensor(v, dtype=DTYPE) for k, v in doc["params"].items()})
    model.fingerprint = doc["fingerprint"]
    return model
