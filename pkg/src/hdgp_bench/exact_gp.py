"""Single-task exact GP regression (the cGP baseline).

Zero prior mean in scaled space, RBF kernel, Gaussian noise. Hyperparameters
are trained by Adam ascent on the log marginal likelihood from several
log-uniform starting points; the restart with the highest final objective
wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, NonFinite
from .kernels import CholeskyFactor, RbfParams, kernel_matrix, robust_cholesky
from .optim import Adam

NOISE_FLOOR = 1e-8
LOG_BOUNDS = (-18.0, 9.0)


@dataclass(frozen=True)
class GpFitOptions:
    steps: int = 500
    restarts: int = 4
    lr: float = 0.05
    ard: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ExactGpModel:
    X: np.ndarray
    y: np.ndarray
    kernel: RbfParams
    noise: float
    chol: CholeskyFactor
    alpha: np.ndarray
    # only non-zero for exactly constant targets
    mean_constant: float = 0.0
    trace: tuple = field(default=(), compare=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def predict(self, Xs, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, Xs, include_noise=include_noise)


def condition(X, y, kernel: RbfParams, noise: float, mean_constant: float = 0.0,
              trace=()) -> ExactGpModel:
    """Build the posterior cache for fixed hyperparameters."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} inputs vs {y.shape[0]} targets")
    noise = max(float(noise), NOISE_FLOOR)
    chol = robust_cholesky(kernel_matrix(X, X, kernel), base_noise=noise)
    alpha = chol.solve(y - mean_constant)
    return ExactGpModel(X, y, kernel, noise, chol, alpha, mean_constant, tuple(trace))


def log_marginal_likelihood(m: ExactGpModel) -> float:
    r = m.y - m.mean_constant
    return float(-0.5 * r @ m.alpha - np.sum(np.log(np.diag(m.chol.L))) - 0.5 * m.n * math.log(2 * math.pi))


def predict(m: ExactGpModel, Xs, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    if Xs.shape[1] != m.X.shape[1]:
        raise DimensionMismatch(f"expected {m.X.shape[1]} input columns, got {Xs.shape[1]}")
    Ks = kernel_matrix(Xs, m.X, m.kernel)
    mean = Ks @ m.alpha + m.mean_constant
    v = scipy.linalg.solve_triangular(m.chol.L, Ks.T, lower=True)
    var = np.maximum(m.kernel.signal_variance - np.sum(v * v, axis=0), 0.0)
    if include_noise:
        var = var + m.noise
    return mean, np.sqrt(var)


# --- hyperparameter objective ---------------------------------------------

def unpack(theta: np.ndarray, ard: bool, d: int) -> tuple[RbfParams, float]:
    n_ls = d if ard else 1
    log_ls = theta[:n_ls] if ard else float(theta[0])
    return RbfParams(np.array(log_ls, dtype=float), float(theta[n_ls])), NOISE_FLOOR + math.exp(theta[n_ls + 1])


def lml_and_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, ard: bool = True) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient in (log lengthscale, log signal, log excess noise).

    Noise is parameterised as ``NOISE_FLOOR + exp(theta[-1])``.
    """
    n, d = X.shape
    kern, noise = unpack(theta, ard, d)
    K = kernel_matrix(X, X, kern)
    chol = robust_cholesky(K, base_noise=noise)
    alpha = chol.solve(y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(chol.L))) - 0.5 * n * math.log(2 * math.pi)
    Kinv = chol.solve(np.eye(n))
    W = np.outer(alpha, alpha) - Kinv

    grad = np.empty_like(theta)
    ls = kern.lengthscale
    if ard:
        for j in range(d):
            D = (X[:, j, None] - X[None, :, j]) ** 2 / ls[j] ** 2
            grad[j] = 0.5 * np.sum(W * K * D)
        k = d
    else:
        diff = X[:, None, :] - X[None, :, :]
        D = np.sum(diff ** 2, axis=-1) / float(ls) ** 2
        grad[0] = 0.5 * np.sum(W * K * D)
        k = 1
    grad[k] = 0.5 * np.sum(W * K)
    grad[k + 1] = 0.5 * math.exp(theta[k + 1]) * np.trace(W)
    return float(lml), grad


def _initial_theta(rng: np.random.Generator, d: int, ard: bool) -> np.ndarray:
    n_ls = d if ard else 1
    return np.concatenate([
        rng.uniform(math.log(0.5), math.log(10.0), size=n_ls),
        rng.uniform(math.log(0.5), math.log(2.0), size=1),
        rng.uniform(math.log(1e-3), math.log(0.3), size=1),
    ])


def _ascend(theta: np.ndarray, X, y, opts: GpFitOptions) -> tuple[np.ndarray, list[float]]:
    adam = Adam(theta.size, lr=opts.lr)
    trace = []
    for _ in range(opts.steps):
        lml, g = lml_and_grad(theta, X, y, opts.ard)
        if not (np.isfinite(lml) and np.all(np.isfinite(g))):
            raise NonFinite(f"non-finite marginal likelihood at theta={theta.tolist()}")
        trace.append(lml)
        theta = np.clip(theta + adam.step(-g), *LOG_BOUNDS)
    lml, _ = lml_and_grad(theta, X, y, opts.ard)
    if not np.isfinite(lml):
        raise NonFinite("non-finite final marginal likelihood")
    trace.append(lml)
    return theta, trace


def fit(X, y, opts: GpFitOptions = GpFitOptions()) -> ExactGpModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = X.shape
    if n < 2 or y.shape[0] != n:
        raise DimensionMismatch(f"need >= 2 matching rows, got X{X.shape} y{y.shape}")
    if np.all(y == y[0]):
        # the likelihood supremum sends signal and noise to zero; take the floor directly
        kern = RbfParams(np.zeros(d) if opts.ard else np.array(0.0), math.log(NOISE_FLOOR))
        return condition(X, y, kern, NOISE_FLOOR, mean_constant=float(y[0]))

    rng = np.random.default_rng(opts.seed)
    starts = [_initial_theta(rng, d, opts.ard) for _ in range(max(opts.restarts, 1))]
    best = None
    failures = []
    for theta0 in starts:
        try:
            theta, trace = _ascend(theta0, X, y, opts)
        except NonFinite as exc:
            failures.append(str(exc))
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (theta, trace)
    if best is None:
        raise NonFinite("all restarts failed: " + "; ".join(failures))
    kern, noise = unpack(best[0], opts.ard, d)
    return condition(X, y, kern, noise, trace=best[1])
