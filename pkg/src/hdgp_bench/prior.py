"""Residual-prior composition around a probabilistic model.

A deterministic point predictor is subtracted from the scaled training
targets, the residual model learns what remains, and the prior is added
back to the predicted mean. Prior and residual model must have been
trained on the same rows; this is checked through split fingerprints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, SplitSpec
from .errors import SplitMismatch, TaskMismatch


@dataclass(frozen=True)
class PriorModel:
    """Point predictor in scaled units over ``tasks``.

    ``predictor(X)`` returns an (n, len(tasks)) array.
    """

    predictor: Callable[[np.ndarray], np.ndarray]
    tasks: tuple[str, ...]
    fingerprint: str

    @classmethod
    def from_net(cls, net, tasks: Sequence[str] | None = None) -> "PriorModel":
        trained = list(net.trained_tasks)
        tasks = trained if tasks is None else list(tasks)
        missing = set(tasks) - set(trained)
        if missing:
            raise TaskMismatch(f"prior tasks {sorted(missing)} were not trained by the network")
        cols = [trained.index(t) for t in tasks]
        return cls(lambda X: net.predict(X)[:, cols], tuple(tasks), net.fingerprint)

    @classmethod
    def zero(cls, tasks: Sequence[str], fingerprint: str) -> "PriorModel":
        k = len(tasks)
        return cls(lambda X: np.zeros((np.asarray(X).shape[0], k)), tuple(tasks), fingerprint)

    def predict_full(self, X, task_names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Prior values laid out over ``task_names`` plus the per-task coverage flags.

        Uncovered tasks get a zero prior.
        """
        unknown = set(self.tasks) - set(task_names)
        if unknown:
            raise TaskMismatch(f"prior covers tasks {sorted(unknown)} absent from the target model")
        X = np.asarray(X, dtype=float)
        values = np.zeros((X.shape[0], len(task_names)))
        covered = np.array([t in self.tasks for t in task_names])
        if covered.any():
            P = np.asarray(self.predictor(X), dtype=float)
            for j, t in enumerate(self.tasks):
                values[:, list(task_names).index(t)] = P[:, j]
        return values, covered


def guard_split(prior: PriorModel, train_spec: SplitSpec | str) -> None:
    fp = train_spec if isinstance(train_spec, str) else train_spec.fingerprint
    if prior.fingerprint is None or fp is None:
        raise SplitMismatch("missing split fingerprint")
    if prior.fingerprint != fp:
        raise SplitMismatch(f"prior trained on split {prior.fingerprint}, residual model on {fp}")


def residualize(data: Dataset, prior: PriorModel) -> Dataset:
    """Subtract the prior from observed cells of covered tasks."""
    guard_split(prior, data.fingerprint())
    values, covered = prior.predict_full(data.X, data.task_names)
    sub = np.where(data.mask & covered[None, :], values, 0.0)
    Y = np.where(data.mask, data.Y_filled() - sub, np.nan)
    return data.with_values(Y)


def restore(residual_mean, residual_sd, prior: PriorModel, Xs, task_names: Sequence[str]):
    """Add the prior back to a residual prediction. The sd passes through unchanged."""
    residual_mean = np.asarray(residual_mean, dtype=float)
    if residual_mean.shape[1] != len(task_names):
        raise TaskMismatch(f"{residual_mean.shape[1]} predicted columns for {len(task_names)} tasks")
    values, covered = prior.predict_full(Xs, task_names)
    mean = np.where(covered[None, :], residual_mean + values, residual_mean)
    return mean, residual_sd


@dataclass
class ResidualSurrogate:
    prior: PriorModel
    model: object
    task_names: tuple[str, ...]

    def __post_init__(self):
        if getattr(self.model, "fingerprint", None) != self.prior.fingerprint:
            raise SplitMismatch(
                f"prior fingerprint {self.prior.fingerprint} != residual model {getattr(self.model, 'fingerprint', None)}")

    @property
    def coverage(self) -> np.ndarray:
        return np.array([t in self.prior.tasks for t in self.task_names])

    def predict(self, Xs, predict_fn, **kwargs):
        mean, sd = predict_fn(self.model, Xs, **kwargs)
        return restore(mean, sd, self.prior, Xs, self.task_names)
