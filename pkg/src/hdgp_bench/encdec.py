"""Regularised dense encoder-decoder for masked multi-output regression.

Plain numpy with hand-written backpropagation. The network is a point
predictor: it has no predictive variance.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import read_container, write_container
from .data import Dataset
from .errors import DimensionMismatch, InvalidConfig, NoObservedEntries, NonFinite
from .optim import Adam

DEFAULT_HIDDEN = (64, 32, 16, 32, 64)


@dataclass(frozen=True)
class NetTrainOpts:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 16
    seed: int = 0
    l2: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.l2 < 0 or self.batch_size < 1:
            raise InvalidConfig(f"invalid training options {self}")


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    l2: float = 1e-3
    trained_tasks: tuple[str, ...] = ()
    fingerprint: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ("relu", "sigmoid"):
            raise InvalidConfig(f"activation must be relu or sigmoid, got {self.activation!r}")
        for W, b, W_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (W.shape[1],) or (W_next is not None and W_next.shape[0] != W.shape[1]):
                raise InvalidConfig("incompatible layer dimensions")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def predict(self, X) -> np.ndarray:
        return net_forward(self, X)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_flat(self, theta: np.ndarray) -> None:
        k = 0
        for W, b in zip(self.weights, self.biases):
            for a in (W, b):
                a[...] = theta[k:k + a.size].reshape(a.shape)
                k += a.size


def net_init(d_in: int, d_out: int, hidden: Sequence[int] = DEFAULT_HIDDEN, activation: str = "relu",
             l2: float = 1e-3, seed: int = 0) -> DenseNet:
    """Uniform fan-in initialisation, zero biases."""
    rng = np.random.default_rng(seed)
    widths = [d_in, *hidden, d_out]
    gain = 6.0 if activation == "relu" else 3.0
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(gain / a)
        weights.append(rng.uniform(-lim, lim, size=(a, b)))
        biases.append(np.zeros(b))
    return DenseNet(weights, biases, activation, l2, seed=seed)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 1.0 / (1.0 + np.exp(-z))


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    return a * (1.0 - a)


def _forward(net: DenseNet, X: np.ndarray):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.weights[0].shape[0]:
        raise DimensionMismatch(f"network expects {net.weights[0].shape[0]} inputs, got {X.shape}")
    acts, pre = [X], []
    h = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W + b
        pre.append(z)
        h = z if i == last else _act(z, net.activation)
        acts.append(h)
    return acts, pre


def net_forward(net: DenseNet, X) -> np.ndarray:
    return _forward(net, X)[0][-1]


def _masked_targets(Y, mask):
    mask = np.asarray(mask, dtype=bool)
    Y = np.where(mask, np.nan_to_num(np.asarray(Y, dtype=float), nan=0.0, posinf=0.0, neginf=0.0), 0.0)
    k = int(mask.sum())
    if k == 0:
        raise NoObservedEntries("no observed entries in the batch")
    return Y, mask, k


def net_loss(net: DenseNet, X, Y, mask, l2: float | None = None) -> float:
    """Mean squared error over observed cells plus ``l2 * sum(W**2)`` (biases excluded)."""
    lam = net.l2 if l2 is None else l2
    Y, mask, k = _masked_targets(Y, mask)
    r = np.where(mask, net_forward(net, X) - Y, 0.0)
    return float(np.sum(r * r) / k + lam * sum(np.sum(W * W) for W in net.weights))


@dataclass
class NetGrad:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


def net_grad(net: DenseNet, X, Y, mask, l2: float | None = None) -> NetGrad:
    lam = net.l2 if l2 is None else l2
    Y, mask, k = _masked_targets(Y, mask)
    acts, pre = _forward(net, X)
    delta = 2.0 * np.where(mask, acts[-1] - Y, 0.0) / k
    gW, gb = [None] * len(net.weights), [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        gW[i] = acts[i].T @ delta + 2.0 * lam * net.weights[i]
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ net.weights[i].T) * _act_grad(pre[i - 1], acts[i], net.activation)
    return NetGrad(gW, gb)


@dataclass
class NetTrainResult:
    net: DenseNet
    trace: list[float] = field(default_factory=list)


def net_train(net: DenseNet, data: Dataset, opts: NetTrainOpts = NetTrainOpts(),
              tasks: Sequence[str] | None = None) -> NetTrainResult:
    """Seeded shuffled minibatch Adam on the masked loss.

    ``trace`` holds the full-training-set loss before the first epoch and
    after every epoch. The input network is not modified.
    """
    tasks = list(data.task_names if tasks is None else tasks)
    d = data.select_tasks(tasks)
    if net.weights[-1].shape[1] != d.n_tasks:
        raise DimensionMismatch(f"network has {net.weights[-1].shape[1]} outputs for {d.n_tasks} tasks")
    net = copy.deepcopy(net)
    net.l2 = opts.l2
    net.trained_tasks = tuple(tasks)
    net.fingerprint = data.fingerprint()
    net.seed = opts.seed
    X, Y, mask = d.X, d.Y_filled(), d.mask
    trace = [net_loss(net, X, Y, mask)]
    rng = np.random.default_rng(opts.seed)
    theta = net.flat()
    adam = Adam(theta.size, lr=opts.lr)
    for epoch in range(opts.epochs):
        order = rng.permutation(d.n)
        for start in range(0, d.n, opts.batch_size):
            b = order[start:start + opts.batch_size]
            if not mask[b].any():
                continue
            g = net_grad(net, X[b], Y[b], mask[b]).flat()
            theta = theta + adam.step(g)
            net.set_flat(theta)
        loss = net_loss(net, X, Y, mask)
        if not np.isfinite(loss):
            raise NonFinite(f"non-finite training loss at epoch {epoch}")
        trace.append(loss)
    return NetTrainResult(net, trace)


def save_checkpoint(net: DenseNet, path: str | Path) -> None:
    config = {"widths": net.widths, "activation": net.activation, "l2": net.l2, "seed": net.seed,
              "trained_tasks": list(net.trained_tasks)}
    params = {"weights": [W.tolist() for W in net.weights], "biases": [b.tolist() for b in net.biases]}
    write_container(path, "encdec", config, net.fingerprint, params)


def load_checkpoint(path: str | Path) -> DenseNet:
    doc = read_container(path, "encdec")
    cfg, p = doc["config"], doc["params"]
    return DenseNet([np.array(W, dtype=float) for W in p["weights"]],
                    [np.array(b, dtype=float) for b in p["biases"]],
                    cfg["activation"], cfg["l2"], tuple(cfg["trained_tasks"]), doc["fingerprint"], cfg["seed"])
