"""Heterotopic multi-task datasets: CSV I/O, scaling, splits and a synthetic generator.

A dataset holds an N x 8 composition matrix, an N x T property matrix and an
N x T observation mask. Unobserved property cells are stored as NaN and are
never read: every consumer goes through ``observed_values`` or ``np.where``
on the mask.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyTask, MalformedCsv, SimplexViolation

ELEMENTS = ("Al", "Co", "Cr", "Cu", "Fe", "Mn", "Ni", "V")
ROLES = ("main", "auxiliary")

# valence electrons per element, rule-of-mixtures VEC of the synthetic generator
VEC_CONSTANTS = np.array([3.0, 9.0, 6.0, 11.0, 8.0, 7.0, 10.0, 5.0])

SIMPLEX_TOL = 1e-6
SD_GUARD = 1e-12


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray
    task_names: tuple[str, ...]
    task_roles: tuple[str, ...]
    row_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if X.ndim != 2 or Y.ndim != 2 or mask.shape != Y.shape or X.shape[0] != Y.shape[0]:
            raise MalformedCsv(f"inconsistent shapes X{X.shape} Y{Y.shape} mask{mask.shape}")
        if len(self.task_names) != Y.shape[1] or len(self.task_roles) != Y.shape[1]:
            raise MalformedCsv("task_names/task_roles length must equal number of tasks")
        for role in self.task_roles:
            if role not in ROLES:
                raise MalformedCsv(f"unknown task role {role!r}")
        row_ids = np.arange(X.shape[0]) if self.row_ids is None else np.asarray(self.row_ids, dtype=int)
        # dead entries are NaN so that an accidental read is loud
        Y = np.where(mask, Y, np.nan)
        for arr in (X, Y, mask, row_ids):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "row_ids", row_ids)
        object.__setattr__(self, "task_names", tuple(self.task_names))
        object.__setattr__(self, "task_roles", tuple(self.task_roles))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.Y.shape[1]

    @property
    def main_tasks(self) -> list[str]:
        return [t for t, r in zip(self.task_names, self.task_roles) if r == "main"]

    def task_index(self, name: str) -> int:
        return self.task_names.index(name)

    def Y_filled(self, fill: float = 0.0) -> np.ndarray:
        """Property matrix with unobserved cells replaced by ``fill``."""
        return np.where(self.mask, np.nan_to_num(self.Y, nan=fill), fill)

    def observed_values(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Row positions and values of the observed entries of task ``t``."""
        rows = np.flatnonzero(self.mask[:, t])
        return rows, self.Y[rows, t]

    def take(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.X[idx], self.Y[idx], self.mask[idx], self.task_names,
                       self.task_roles, row_ids=self.row_ids[idx])

    def select_tasks(self, names: Sequence[str]) -> "Dataset":
        cols = [self.task_index(n) for n in names]
        return Dataset(self.X, self.Y[:, cols], self.mask[:, cols], tuple(names),
                       tuple(self.task_roles[c] for c in cols), row_ids=self.row_ids)

    def with_values(self, Y: np.ndarray) -> "Dataset":
        return Dataset(self.X, Y, self.mask, self.task_names, self.task_roles, row_ids=self.row_ids)

    def fingerprint(self) -> str:
        return split_fingerprint(self.row_ids)


def split_fingerprint(train_indices: Sequence[int]) -> str:
    """Order-independent hash of a training index set."""
    idx = sorted(int(i) for i in train_indices)
    return hashlib.sha256(",".join(map(str, idx)).encode()).hexdigest()[:16]


def validate_compositions(X: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(ELEMENTS):
        raise MalformedCsv(f"expected {len(ELEMENTS)} composition columns, got shape {X.shape}")
    bad = np.flatnonzero((X < 0.0).any(axis=1) | (X > 1.0).any(axis=1)
                         | (np.abs(X.sum(axis=1) - 1.0) > tol) | ~np.isfinite(X).all(axis=1))
    if bad.size:
        i = bad[0]
        raise SimplexViolation(f"row {i}: fractions {X[i].tolist()} sum to {X[i].sum():.9g}")


def _check_tasks(d: Dataset) -> None:
    counts = d.mask.sum(axis=0)
    for name, c in zip(d.task_names, counts):
        if c < 2:
            raise EmptyTask(f"task {name!r} has {c} observed values (need >= 2)")


def roles_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".roles.json")


def load_csv(path: str | Path, roles_path: str | Path | None = None) -> Dataset:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as e:
        raise MalformedCsv(f"{path}: file not found") from e
    except UnicodeDecodeError as e:
        raise MalformedCsv(f"{path}: not UTF-8 text") from e
    if not rows:
        raise MalformedCsv(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[: len(ELEMENTS)]) != ELEMENTS or len(header) <= len(ELEMENTS):
        raise MalformedCsv(f"{path}: header must start with {','.join(ELEMENTS)} followed by task columns")
    tasks = header[len(ELEMENTS):]
    if len(set(tasks)) != len(tasks):
        raise MalformedCsv(f"{path}: duplicate task columns")
    X, Y, M = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedCsv(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            X.append([float(v) for v in row[: len(ELEMENTS)]])
            cells = [v.strip() for v in row[len(ELEMENTS):]]
            Y.append([float(v) if v else np.nan for v in cells])
        except ValueError as exc:
            raise MalformedCsv(f"{path}:{lineno}: {exc}") from None
        M.append([bool(v) for v in cells])
    if not X:
        raise MalformedCsv(f"{path}: no data rows")
    X = np.array(X)
    validate_compositions(X)

    rp = Path(roles_path) if roles_path is not None else roles_path_for(path)
    if rp.exists():
        spec = json.loads(rp.read_text(encoding="utf-8"))
        role_map = spec.get("task_roles", spec)
        missing = [t for t in tasks if t not in role_map]
        if missing:
            raise MalformedCsv(f"{rp}: no role declared for {missing}")
        roles = tuple(role_map[t] for t in tasks)
    else:
        roles = ("main",) * len(tasks)
    d = Dataset(X, np.array(Y), np.array(M), tuple(tasks), roles)
    _check_tasks(d)
    return d


def write_csv(d: Dataset, path: str | Path, roles_path: str | Path | None = None) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ELEMENTS) + list(d.task_names))
        for i in range(d.n):
            cells = [repr(float(v)) for v in d.X[i]]
            cells += [repr(float(d.Y[i, t])) if d.mask[i, t] else "" for t in range(d.n_tasks)]
            w.writerow(cells)
    rp = Path(roles_path) if roles_path is not None else roles_path_for(path)
    rp.write_text(json.dumps({"task_roles": dict(zip(d.task_names, d.task_roles))}, indent=2) + "\n",
                  encoding="utf-8")


@dataclass(frozen=True)
class ScalingParams:
    x_mean: np.ndarray
    x_sd: np.ndarray
    y_mean: np.ndarray
    y_sd: np.ndarray

    def scale_X(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_sd

    def scale_Y(self, Y: np.ndarray) -> np.ndarray:
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_sd

    def unscale_Y(self, Y: np.ndarray) -> np.ndarray:
        return np.asarray(Y, dtype=float) * self.y_sd + self.y_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("x_mean", "x_sd", "y_mean", "y_sd")}


def _guarded_sd(v: np.ndarray) -> float:
    sd = float(np.std(v))
    return 1.0 if sd < SD_GUARD else sd


def fit_scaling(d: Dataset, train: Sequence[int]) -> ScalingParams:
    """Population z-score statistics from training rows and observed cells only."""
    idx = np.asarray(train, dtype=int)
    Xt = d.X[idx]
    y_mean, y_sd = [], []
    for t in range(d.n_tasks):
        obs = d.Y[idx, t][d.mask[idx, t]]
        if obs.size == 0:
            raise EmptyTask(f"task {d.task_names[t]!r} has no observed training entries")
        y_mean.append(float(obs.mean()))
        y_sd.append(_guarded_sd(obs))
    return ScalingParams(
        x_mean=Xt.mean(axis=0),
        x_sd=np.array([_guarded_sd(Xt[:, j]) for j in range(Xt.shape[1])]),
        y_mean=np.array(y_mean),
        y_sd=np.array(y_sd),
    )


def standardize(d: Dataset, train: Sequence[int]) -> tuple[Dataset, ScalingParams]:
    """Scale every row of ``d`` with statistics taken from the training rows."""
    p = fit_scaling(d, train)
    scaled = Dataset(p.scale_X(d.X), p.scale_Y(d.Y), d.mask, d.task_names, d.task_roles,
                     row_ids=d.row_ids)
    return scaled, p


def destandardize(d: Dataset, p: ScalingParams) -> Dataset:
    return Dataset(d.X * p.x_sd + p.x_mean, p.unscale_Y(d.Y), d.mask, d.task_names,
                   d.task_roles, row_ids=d.row_ids)


def destandardize_prediction(mean, sd, p: ScalingParams, task: int):
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    return mean * p.y_sd[task] + p.y_mean[task], sd * p.y_sd[task]


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]

    @property
    def fingerprint(self) -> str:
        return split_fingerprint(self.train_indices)


def split_seed(master_seed: int, split: int) -> int:
    """Per-split seed from the master seed (counter scheme)."""
    return int(np.random.SeedSequence([master_seed, split]).generate_state(1)[0])


def make_splits(n: int, ratio: float = 0.8, n_splits: int = 5, seed: int = 0) -> list[SplitSpec]:
    if n < 5:
        raise ValueError(f"need n >= 5, got {n}")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n_train = int(round(ratio * n))
    out = []
    for k in range(n_splits):
        s = split_seed(seed, k)
        perm = np.random.default_rng(s).permutation(n)
        out.append(SplitSpec(s, tuple(sorted(perm[:n_train].tolist())),
                             tuple(sorted(perm[n_train:].tolist()))))
    return out


# --- synthetic benchmark -------------------------------------------------

SYNTH_MAIN = (
    "Yield Strength (MPa)",
    "UTS True (MPa)",
    "Hardness (GPa)",
    "Modulus (GPa)",
    "Elongation (%)",
    "UTS/YS",
    "Avg HDYN/HQS",
    "Depth of Penetration (mm)",
)
SYNTH_AUX = ("VEC", "VarvYS (MPa)", "SFE (mJ/m2)")
SYNTH_MISSING = (0.2, 0.3, 0.25, 0.35, 0.4, 0.3, 0.2, 0.4)

_W_STRENGTH = np.array([1.6, 0.3, 0.9, -0.8, 0.1, 0.2, -0.6, 1.2])
_W_STIFF = np.array([-0.9, 0.8, 0.6, -0.3, 0.5, -0.2, 0.4, -0.6])
# rule-of-mixtures backbones (Al, Co, Cr, Cu, Fe, Mn, Ni, V)
_ROM_STRENGTH = np.array([2.2, -0.4, 1.0, -1.8, -0.2, 0.3, -1.4, 1.6])
_ROM_STIFF = np.array([-1.6, 1.2, 0.9, -0.8, 0.7, -0.5, 1.0, -0.4])


def vec(X: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=float) @ VEC_CONSTANTS


def sample_compositions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random alloys with 4 to 8 active elements, Dirichlet fractions on the active set."""
    X = np.zeros((n, len(ELEMENTS)))
    for i in range(n):
        k = rng.integers(4, len(ELEMENTS) + 1)
        active = rng.choice(len(ELEMENTS), size=k, replace=False)
        X[i, active] = rng.dirichlet(np.full(k, 1.5))
    X /= X.sum(axis=1, keepdims=True)
    return X


def _latent_factors(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = vec(X) - 7.375
    strength = X @ _ROM_STRENGTH + np.tanh(2.5 * (X @ _W_STRENGTH) - 0.6) + 0.3 * v + 4.0 * X[:, 0] * X[:, 7]
    stiff = X @ _ROM_STIFF + np.sin(2.0 * (X @ _W_STIFF)) + 0.2 * v ** 2
    curve = np.cos(3.0 * X[:, 2] - 2.0 * X[:, 4]) + 2.0 * X[:, 1] * X[:, 6]
    return strength, stiff, curve


def _synth_columns(X: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Noise-free value and noise sd per synthetic task."""
    s, k, c = _latent_factors(X)
    hetero = 0.5 + 1.5 * (X[:, 0] + X[:, 7])
    return {
        "Yield Strength (MPa)": (420 + 160 * s + 40 * c, 15 * hetero),
        "UTS True (MPa)": (820 + 190 * s - 60 * k + 30 * c ** 2, 25 * hetero),
        "Hardness (GPa)": (2.4 + 0.8 * s + 0.15 * k, 0.08 * hetero),
        "Modulus (GPa)": (190 + 22 * k + 6 * s, 5 * hetero),
        "Elongation (%)": (38 - 11 * s - 4 * np.tanh(k), 2.5 * hetero),
        "UTS/YS": (2.0 - 0.35 * s + 0.12 * k, 0.08 * hetero),
        "Avg HDYN/HQS": (1.35 + 0.05 * s - 0.04 * c, 0.01 * hetero),
        "Depth of Penetration (mm)": (3.1 - 0.3 * s + 0.08 * k, 0.05 * hetero),
        "VEC": (vec(X), np.zeros(len(X))),
        "VarvYS (MPa)": (300 + 120 * np.tanh(2.5 * (X @ _W_STRENGTH) - 0.6), np.zeros(len(X))),
        "SFE (mJ/m2)": (30 + 25 * (vec(X) - 7.375) + 15 * k, np.zeros(len(X))),
    }


def synth_benchmark(n: int = 100, seed: int = 7, missing_frac: Sequence[float] | None = None,
                    n_main: int = 8, n_aux: int = 3) -> Dataset:
    """Synthetic heterotopic benchmark with correlated main tasks and computed auxiliaries.

    Auxiliary columns (VEC first) come before the main ones. ``missing_frac``
    has one entry per task in column order; by default auxiliaries are fully
    observed and main tasks miss 20-40% of their cells.
    """
    if n < 20:
        raise ValueError(f"need n >= 20, got {n}")
    if not (1 <= n_main <= len(SYNTH_MAIN) and 0 <= n_aux <= len(SYNTH_AUX)):
        raise ValueError("n_main must be in 1..8 and n_aux in 0..3")
    names = SYNTH_AUX[:n_aux] + SYNTH_MAIN[:n_main]
    roles = ("auxiliary",) * n_aux + ("main",) * n_main
    if missing_frac is None:
        missing_frac = (0.0,) * n_aux + SYNTH_MISSING[:n_main]
    missing_frac = np.asarray(missing_frac, dtype=float)
    if missing_frac.shape != (len(names),):
        raise ValueError(f"missing_frac needs {len(names)} entries")
    if ((missing_frac < 0) | (missing_frac >= 1)).any() or not (missing_frac == 0).any():
        raise ValueError("missing_frac must lie in [0, 1) with at least one zero")

    rng = np.random.default_rng(seed)
    X = sample_compositions(n, rng)
    cols = _synth_columns(X)
    Y = np.empty((n, len(names)))
    for t, name in enumerate(names):
        mu, sd = cols[name]
        Y[:, t] = mu + sd * rng.standard_normal(n)
    # exact per-task counts so realised missingness equals the requested fraction
    mask = np.ones((n, len(names)), dtype=bool)
    for t in range(len(names)):
        k = min(int(round(missing_frac[t] * n)), n - 2)
        mask[rng.choice(n, size=k, replace=False), t] = False
    return Dataset(X, Y, mask, names, roles)
