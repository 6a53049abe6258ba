"""Benchmark orchestration: model roster over fixed splits, reduction sweep, reports.

Seeds follow a counter scheme. Split k uses SeedSequence([master, k]); model
slot j on split k uses SeedSequence([master, k, j]) where j is the model's
position in ``MODELS`` (the prior network takes slot ``len(MODELS)``), so
adding or removing roster entries never changes another model's seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__, dgp, encdec, exact_gp
from .data import Dataset, SplitSpec, load_csv, make_splits, standardize
from .errors import (
    ConfigError,
    IndexMismatch,
    InvalidConfig,
    MalformedCsv,
    NumericalError,
    SplitMismatch,
    UnknownTask,
)
from .metrics import METRICS, SMAPE_DEFINITION, aggregate_splits, score
from .prior import PriorModel, guard_split, residualize, restore

MODELS = ("cGP", "HDGP-NP-All", "HDGP-NP-Main", "HDGP-P-All", "HDGP-P-Main", "EncDec", "ExternalBaseline")
DGP_MODELS = MODELS[1:5]
PRIOR_MODELS = ("HDGP-P-All", "HDGP-P-Main")
PRIOR_SLOT = len(MODELS)
POINT_MODELS = ("EncDec", "ExternalBaseline")  # no predictive sd
SEED_SCHEME = "split k: SeedSequence([master, k]); model slot j: SeedSequence([master, k, j])"
# failures that mark a (model, split) cell absent instead of aborting the run
ISOLATED_ERRORS = (NumericalError, RuntimeError, np.linalg.LinAlgError, FloatingPointError)


def model_seed(master: int, split: int, model: str, extra: Sequence[int] = ()) -> int:
    slot = PRIOR_SLOT if model == "prior" else MODELS.index(model)
    return int(np.random.SeedSequence([master, split, slot, *extra]).generate_state(1)[0])


# --- configuration --------------------------------------------------------

def _options(cls, d: dict | None, section: str, exclude: Sequence[str] = ()):
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(d) - names
    if unknown:
        raise InvalidConfig(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise InvalidConfig(f"bad '{section}' section: {e}") from e


@dataclass(frozen=True)
class NetConfig:
    hidden: tuple[int, ...] = encdec.DEFAULT_HIDDEN
    activation: str = "relu"
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 16
    l2: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("relu", "sigmoid"):
            raise InvalidConfig(f"activation must be relu or sigmoid, got {self.activation!r}")
        if any(h < 1 for h in self.hidden):
            raise InvalidConfig(f"hidden widths must be positive, got {self.hidden}")

    def train_opts(self, seed: int) -> encdec.NetTrainOpts:
        return encdec.NetTrainOpts(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=seed, l2=self.l2)


@dataclass(frozen=True)
class PriorConfig(NetConfig):
    kind: str = "encdec"            # "encdec" or "zero"
    cover_auxiliary: bool = False   # explicit opt-in to priors on auxiliary tasks

    def __post_init__(self):
        super().__post_init__()
        if self.kind not in ("encdec", "zero"):
            raise InvalidConfig(f"prior kind must be encdec or zero, got {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    models: tuple[str, ...]
    roles: Path | None = None
    seed: int = 0
    n_splits: int = 5
    train_ratio: float = 0.8
    reduction: dict = field(default_factory=dict)
    dgp: dgp.DgpOptions = dgp.DgpOptions()
    exact_gp: exact_gp.GpFitOptions = exact_gp.GpFitOptions()
    encdec: NetConfig = NetConfig()
    prior: PriorConfig | None = None
    external: dict | None = None
    sweep: dict = field(default_factory=dict)
    metric_tasks: str = "main"
    workers: int = 1
    raw: dict = field(default_factory=dict, compare=False)

    KEYS = ("dataset", "roles", "models", "seed", "n_splits", "train_ratio", "reduction", "dgp", "exact_gp",
            "encdec", "prior", "external", "sweep", "metric_tasks", "workers")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidConfig("config must be a JSON object")
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise InvalidConfig("config needs a 'dataset' path")
        base = Path(base_dir)
        models = tuple(d.get("models") or ())
        if not models:
            raise InvalidConfig("model roster is empty")
        bad = [m for m in models if m not in MODELS]
        if bad:
            raise InvalidConfig(f"unknown models {bad}; choose from {list(MODELS)}")
        if len(set(models)) != len(models):
            raise InvalidConfig("duplicate models in roster")
        if any(m in PRIOR_MODELS for m in models) and not d.get("prior"):
            raise InvalidConfig("prior-injected models need a 'prior' section")
        if "ExternalBaseline" in models:
            ext = d.get("external") or {}
            if not ext.get("predictions"):
                raise InvalidConfig("ExternalBaseline needs external.predictions")
        red = d.get("reduction", 3)
        if isinstance(red, int):
            red = {m: red for m in DGP_MODELS}
        elif isinstance(red, dict):
            if set(red) - set(DGP_MODELS):
                raise InvalidConfig(f"reduction keys must be DGP models, got {sorted(red)}")
            red = {m: int(red.get(m, 3)) for m in DGP_MODELS}
        else:
            raise InvalidConfig("reduction must be an integer or a per-model mapping")
        metric_tasks = d.get("metric_tasks", "main")
        if metric_tasks not in ("main", "all"):
            raise InvalidConfig("metric_tasks must be 'main' or 'all'")
        seed, n_splits, ratio, workers = d.get("seed", 0), d.get("n_splits", 5), d.get("train_ratio", 0.8), d.get("workers", 1)
        if not isinstance(seed, int) or seed < 0:
            raise InvalidConfig(f"seed must be a non-negative integer, got {seed!r}")
        if not isinstance(n_splits, int) or n_splits < 1:
            raise InvalidConfig(f"n_splits must be a positive integer, got {n_splits!r}")
        if not 0 < float(ratio) < 1:
            raise InvalidConfig(f"train_ratio must lie in (0, 1), got {ratio!r}")
        if not isinstance(workers, int) or workers < 1:
            raise InvalidConfig(f"workers must be a positive integer, got {workers!r}")
        ext = d.get("external")
        if ext is not None:
            ext = {"name": str(ext.get("name", "ExternalBaseline")),
                   "predictions": str(base / ext["predictions"]) if ext.get("predictions") else None}
        sweep = dict(d.get("sweep") or {})
        if set(sweep) - {"model", "dgp"}:
            raise InvalidConfig(f"unknown keys in 'sweep': {sorted(set(sweep) - {'model', 'dgp'})}")
        if sweep.get("model", "HDGP-NP-All") not in DGP_MODELS:
            raise InvalidConfig(f"sweep.model must be one of {list(DGP_MODELS)}")
        return cls(
            dataset=base / d["dataset"],
            roles=base / d["roles"] if d.get("roles") else None,
            models=models, seed=seed, n_splits=n_splits, train_ratio=float(ratio), reduction=red,
            dgp=dgp.DgpOptions.from_dict(d.get("dgp")),
            exact_gp=_options(exact_gp.GpFitOptions, d.get("exact_gp"), "exact_gp", exclude=("seed",)),
            encdec=_options(NetConfig, d.get("encdec"), "encdec"),
            prior=_options(PriorConfig, d["prior"], "prior") if d.get("prior") else None,
            external=ext, sweep=sweep, metric_tasks=metric_tasks, workers=workers, raw=d,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise InvalidConfig(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d, path.parent)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def load_dataset(cfg: RunConfig) -> Dataset:
    d = load_csv(cfg.dataset, cfg.roles)
    if not d.main_tasks:
        raise ConfigError("dataset has no main tasks")
    for m in DGP_MODELS:
        T = d.n_tasks if m.endswith("All") else len(d.main_tasks)
        if m in cfg.models and not 0 <= cfg.reduction[m] <= T - 1:
            raise InvalidConfig(f"reduction {cfg.reduction[m]} for {m} outside [0, {T - 1}]")
    return d


def model_tasks(d: Dataset, model: str) -> list[str]:
    if model in ("cGP", "HDGP-NP-All", "HDGP-P-All"):
        return list(d.task_names)
    return list(d.main_tasks)


def metric_tasks(d: Dataset, cfg: RunConfig) -> list[str]:
    return list(d.main_tasks) if cfg.metric_tasks == "main" else list(d.task_names)


# --- external predictions ----------------------------------------------------

def import_external_predictions(path: str | Path, model_name: str, dataset: Dataset,
                                splits: Sequence[SplitSpec]) -> dict:
    """Read a ``index,task,split,prediction`` CSV in native units.

    Returns {"name", "values": {(split, task): {row: value}}}. A (split, task)
    pair that appears must cover every observed test row; pairs that never
    appear are reported absent.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise MalformedCsv(f"prediction file not found: {path}") from e
    rows = list(csv.DictReader(io.StringIO(text)))
    need = {"index", "task", "split", "prediction"}
    if not rows or not need <= set(rows[0]):
        raise MalformedCsv(f"{path}: need columns {sorted(need)}")
    values: dict[tuple[int, str], dict[int, float]] = {}
    for k, r in enumerate(rows, start=2):
        task = r["task"]
        if task not in dataset.task_names:
            raise UnknownTask(f"{path}:{k}: task {task!r} not in dataset")
        try:
            i, s, v = int(r["index"]), int(r["split"]), float(r["prediction"])
        except (TypeError, ValueError) as e:
            raise MalformedCsv(f"{path}:{k}: {e}") from e
        if not 0 <= s < len(splits):
            raise IndexMismatch(f"{path}:{k}: split {s} outside 0..{len(splits) - 1}")
        if i not in set(splits[s].test_indices):
            raise IndexMismatch(f"{path}:{k}: row {i} is not a test row of split {s}")
        cell = values.setdefault((s, task), {})
        if i in cell:
            raise IndexMismatch(f"{path}:{k}: duplicate prediction for row {i}, task {task!r}, split {s}")
        cell[i] = v
    for (s, task), cell in values.items():
        t = dataset.task_index(task)
        observed = [i for i in splits[s].test_indices if dataset.mask[i, t]]
        missing = sorted(set(observed) - set(cell))
        if missing:
            raise IndexMismatch(f"split {s}, task {task!r}: no prediction for observed test rows {missing[:5]}")
    return {"name": model_name, "values": values}


# --- per-split jobs -------------------------------------------------------------

@dataclass
class SplitResult:
    index: int
    predictions: dict          # model -> {task: (mean, sd | None)} over test rows, native units
    failures: list
    absent: list


def _native(mean, sd, p, tasks: list[str], d: Dataset) -> dict:
    out = {}
    for j, t in enumerate(tasks):
        k = d.task_index(t)
        m = mean[:, j] * p.y_sd[k] + p.y_mean[k]
        s = None if sd is None else sd[:, j] * p.y_sd[k]
        out[t] = (m, s)
    return out


def _check_fingerprint(obj, spec: SplitSpec, what: str) -> None:
    fp = getattr(obj, "fingerprint", None)
    if fp != spec.fingerprint:
        raise SplitMismatch(f"{what} trained on {fp}, split is {spec.fingerprint}")


def _train_prior(cfg: RunConfig, tr: Dataset, spec: SplitSpec, k: int) -> PriorModel:
    pc = cfg.prior
    tasks = list(tr.task_names) if pc.cover_auxiliary else list(tr.main_tasks)
    if pc.kind == "zero":
        return PriorModel.zero(tasks, tr.fingerprint())
    seed = model_seed(cfg.seed, k, "prior")
    net = encdec.net_init(tr.X.shape[1], len(tasks), pc.hidden, pc.activation, pc.l2, seed)
    net = encdec.net_train(net, tr, pc.train_opts(seed), tasks=tasks).net
    _check_fingerprint(net, spec, "prior network")
    return PriorModel.from_net(net)


def restrict_prior(prior: PriorModel, tasks: Sequence[str]) -> PriorModel:
    """Drop prior outputs for tasks the residual model does not carry."""
    if set(prior.tasks) <= set(tasks):
        return prior
    keep = [t for t in prior.tasks if t in tasks]
    cols = [prior.tasks.index(t) for t in keep]
    return PriorModel(lambda X, f=prior.predictor, c=cols: np.asarray(f(X))[:, c], tuple(keep), prior.fingerprint)


def fit_predict_dgp(train: Dataset, Xs, r: int, opts: dgp.DgpOptions, seed: int, prior: PriorModel | None = None):
    """Train a DGP (optionally on prior residuals) and predict in scaled units."""
    target = train if prior is None else residualize(train, prior)
    model = dgp.dgp_build(train.X.shape[1], train.task_names, r, opts.q, opts.m, seed, train.X,
                          layer1_noise=opts.layer1_noise, task_noise=opts.task_noise,
                          hidden_mean=opts.hidden_mean)
    model = dgp.train(model, target, opts, seed=seed).model
    gen = torch.Generator().manual_seed(seed)
    mean, sd = dgp.predict(model, Xs, opts.predict_samples, gen, include_noise=opts.include_noise)
    if prior is not None:
        guard_split(prior, model.fingerprint)
        mean, sd = restore(mean, sd, prior, Xs, train.task_names)
    return model, mean, sd


def _run_model(name: str, cfg: RunConfig, d: Dataset, tr: Dataset, Xte, spec: SplitSpec, k: int,
               prior: PriorModel | None, p, tasks_scored: list[str]):
    seed = model_seed(cfg.seed, k, name)
    if name == "cGP":
        tasks = [t for t in model_tasks(d, name) if t in tasks_scored]
        mean = np.empty((len(Xte), len(tasks)))
        sd = np.empty_like(mean)
        for j, t in enumerate(tasks):
            rows, y = tr.observed_values(tr.task_index(t))
            opts = dataclasses.replace(cfg.exact_gp, seed=model_seed(cfg.seed, k, name, (tr.task_index(t),)))
            m = exact_gp.fit(tr.X[rows], y, opts)
            mean[:, j], sd[:, j] = exact_gp.predict(m, Xte, include_noise=True)
        return _native(mean, sd, p, tasks, d)
    if name in DGP_MODELS:
        tasks = model_tasks(d, name)
        sub = tr.select_tasks(tasks)
        use_prior = None
        if name in PRIOR_MODELS:
            guard_split(prior, spec)
            use_prior = restrict_prior(prior, tasks)
        model, mean, sd = fit_predict_dgp(sub, Xte, cfg.reduction[name], cfg.dgp, seed, use_prior)
        _check_fingerprint(model, spec, name)
        return _native(mean, sd, p, tasks, d)
    if name == "EncDec":
        tasks = model_tasks(d, name)
        nc = cfg.encdec
        net = encdec.net_init(tr.X.shape[1], len(tasks), nc.hidden, nc.activation, nc.l2, seed)
        net = encdec.net_train(net, tr, nc.train_opts(seed), tasks=tasks).net
        _check_fingerprint(net, spec, name)
        return _native(net.predict(Xte), None, p, tasks, d)
    raise AssertionError(name)


def _external(ext: dict, d: Dataset, spec: SplitSpec, k: int, tasks_scored: list[str]) -> dict:
    out = {}
    pos = {i: j for j, i in enumerate(spec.test_indices)}
    for t in tasks_scored:
        cell = ext["values"].get((k, t))
        if cell is None:
            continue
        m = np.full(len(spec.test_indices), np.nan)
        for i, v in cell.items():
            m[pos[i]] = v
        out[t] = (m, None)
    return out


def run_split(cfg: RunConfig, d: Dataset, k: int, spec: SplitSpec, ext: dict | None = None) -> SplitResult:
    torch.set_num_threads(1)
    train, test = list(spec.train_indices), list(spec.test_indices)
    # leak-free protocol: scaling and every fit only ever see the train rows
    assert not set(train) & set(test), "train and test rows overlap"
    scaled, p = standardize(d, train)
    tr = scaled.take(train)
    assert tr.fingerprint() == spec.fingerprint, "train subset fingerprint drifted"
    Xte = scaled.X[test]
    tasks_scored = metric_tasks(d, cfg)
    preds, failures, absent = {}, [], []

    prior, prior_error = None, None
    if any(m in PRIOR_MODELS for m in cfg.models):
        try:
            prior = _train_prior(cfg, tr, spec, k)
        except ISOLATED_ERRORS as e:
            prior_error = f"prior: {type(e).__name__}: {e}"

    for name in MODELS:
        if name not in cfg.models:
            continue
        label = ext["name"] if name == "ExternalBaseline" else name
        if name == "ExternalBaseline":
            got = _external(ext, d, spec, k, tasks_scored)
            if not got:
                absent.append({"model": label, "split": k, "reason": "no predictions"})
                continue
            preds[label] = got
            continue
        if name in PRIOR_MODELS and prior is None:
            failures.append({"model": label, "split": k, "error": prior_error})
            absent.append({"model": label, "split": k, "reason": "prior failed"})
            continue
        try:
            preds[label] = _run_model(name, cfg, d, tr, Xte, spec, k, prior, p, tasks_scored)
        except ISOLATED_ERRORS as e:
            failures.append({"model": label, "split": k, "error": f"{type(e).__name__}: {e}"})
            absent.append({"model": label, "split": k, "reason": "training failed"})
    return SplitResult(k, preds, failures, absent)


def _run_splits(cfg: RunConfig, d: Dataset, splits: list[SplitSpec], ext: dict | None) -> list[SplitResult]:
    if cfg.workers <= 1 or len(splits) == 1:
        return [run_split(cfg, d, k, sp, ext) for k, sp in enumerate(splits)]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(run_split, cfg, d, k, sp, ext) for k, sp in enumerate(splits)]
        return [f.result() for f in futures]   # collected in split order


# --- reports ---------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}"


def _json_num(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return float(f"{v:.6g}")


def _json_full(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-." else "_" for c in name).strip("_")


def _score_results(d: Dataset, splits: list[SplitSpec], results: list[SplitResult], models: list[str],
                   tasks: list[str]):
    """Metric rows plus parity tables; absent cells stay None."""
    rows, parity = [], {}
    for name in models:
        for t in tasks:
            k_t = d.task_index(t)
            per_metric = {m: [] for m in METRICS}
            for res, sp in zip(results, splits):
                pred = res.predictions.get(name, {}).get(t)
                if pred is None:
                    for m in METRICS:
                        per_metric[m].append(None)
                    continue
                mean, sd = pred
                test = np.asarray(sp.test_indices)
                obs = d.mask[test, k_t]
                y = d.Y[test[obs], k_t]
                yhat = mean[obs]
                s = score(y, yhat) if obs.any() else {m: float("nan") for m in METRICS}
                for m in METRICS:
                    v = s[m]
                    per_metric[m].append(None if math.isnan(v) else v)
                parity[(name, t, res.index)] = (test[obs], y, yhat, None if sd is None else sd[obs])
            for m in METRICS:
                mean_v, sd_v = aggregate_splits(per_metric[m])
                rows.append({"model": name, "task": t, "metric": m, "mean": mean_v, "sd": sd_v,
                             "split_values": per_metric[m]})
    return rows, parity


def _metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "task", "metric", "mean", "sd", "split_values"])
    for r in rows:
        w.writerow([r["model"], r["task"], r["metric"], _fmt(r["mean"]), _fmt(r["sd"]),
                    json.dumps([_json_num(v) for v in r["split_values"]])])
    return buf.getvalue()


def _parity_csv(idx, y, yhat, sd) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "actual", "predicted_mean", "predicted_sd"])
    for j in range(len(idx)):
        w.writerow([int(idx[j]), repr(float(y[j])), repr(float(yhat[j])), "" if sd is None else repr(float(sd[j]))])
    return buf.getvalue()


def _dataset_info(cfg: RunConfig, d: Dataset) -> dict:
    h = hashlib.sha256(Path(cfg.dataset).read_bytes())
    if cfg.roles is not None and Path(cfg.roles).exists():
        h.update(Path(cfg.roles).read_bytes())
    return {"sha256": h.hexdigest(), "n": d.n, "tasks": list(d.task_names), "roles": list(d.task_roles)}


class _Writer:
    """Collects output files; removes everything it wrote if the run aborts."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.created_dir = not out_dir.exists()
        self.written: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        return path

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self.created_dir:
            try:
                self.out_dir.rmdir()
            except OSError:
                pass


def _with_outputs(out_dir, fn):
    out_dir = Path(out_dir)
    w = _Writer(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        return fn(w)
    except BaseException:
        w.rollback()
        raise


def _resolved(cfg: RunConfig) -> dict:
    """Effective options after defaults, so unstated choices (ARD, hidden mean, ...) are on record."""
    asd = dataclasses.asdict
    return {"dgp": asd(cfg.dgp),
            "exact_gp": {k: v for k, v in asd(cfg.exact_gp).items() if k != "seed"},
            "encdec": asd(cfg.encdec),
            "prior": asd(cfg.prior) if cfg.prior is not None else None,
            "reduction": {m: cfg.reduction[m] for m in cfg.models if m in DGP_MODELS},
            "metric_tasks": cfg.metric_tasks}


def run_benchmark(cfg: RunConfig, out_dir: str | Path) -> dict:
    """Train the roster over every split and write metrics.csv, report.json and parity CSVs."""
    d = load_dataset(cfg)
    try:
        splits = make_splits(d.n, cfg.train_ratio, cfg.n_splits, cfg.seed)
    except ValueError as e:
        raise InvalidConfig(str(e)) from e
    ext = None
    if "ExternalBaseline" in cfg.models:
        ext = import_external_predictions(cfg.external["predictions"], cfg.external["name"], d, splits)

    def body(w: _Writer) -> dict:
        results = _run_splits(cfg, d, splits, ext)
        labels = [ext["name"] if m == "ExternalBaseline" else m for m in MODELS if m in cfg.models]
        tasks = metric_tasks(d, cfg)
        rows, parity = _score_results(d, splits, results, labels, tasks)
        for (name, t, k), (idx, y, yhat, sd) in sorted(parity.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
            w.write(f"parity_{_safe(name)}_{_safe(t)}_{k}.csv", _parity_csv(idx, y, yhat, sd))
        w.write("metrics.csv", _metrics_csv(rows))
        report = {
            "format": "hdgp-bench-report",
            "version": 1,
            "package_version": __version__,
            "config": cfg.raw,
            "resolved": _resolved(cfg),
            "dataset": _dataset_info(cfg, d),
            "seed_scheme": SEED_SCHEME,
            "smape_definition": SMAPE_DEFINITION,
            "splits": [{"index": k, "seed": sp.seed, "fingerprint": sp.fingerprint,
                        "n_train": len(sp.train_indices), "n_test": len(sp.test_indices)}
                       for k, sp in enumerate(splits)],
            # full precision here so mean and sd recompute exactly from the split values
            "metrics": [{**r, "mean": _json_full(r["mean"]), "sd": _json_full(r["sd"]),
                         "split_values": [_json_full(v) for v in r["split_values"]]} for r in rows],
            "absent": [a for res in results for a in res.absent],
            "failures": [f for res in results for f in res.failures],
        }
        w.write("report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report

    return _with_outputs(out_dir, body)


# --- reduction sweep --------------------------------------------------------------

TIE_TOL = 1e-12


def recommend_reduction(table: Sequence[dict]) -> int:
    """Highest mean Spearman, then lowest mean scaled RMSE, then smallest r.

    ``table`` holds one {"r", "spearman", "rmse_scaled"} entry per r; values
    within 1e-12 count as ties. Undefined values rank last.
    """
    if not table:
        raise InvalidConfig("no reduction values to compare")

    def val(x, worst):
        return x if x is not None and math.isfinite(x) else worst

    best_s = max(val(e["spearman"], -math.inf) for e in table)
    cands = [e for e in table if val(e["spearman"], -math.inf) >= best_s - TIE_TOL]
    best_r = min(val(e["rmse_scaled"], math.inf) for e in cands)
    cands = [e for e in cands if val(e["rmse_scaled"], math.inf) <= best_r + TIE_TOL]
    return min(int(e["r"]) for e in cands)


def sweep_reduction(cfg: RunConfig, r_values: Sequence[int], out_dir: str | Path) -> dict:
    """Train the sweep model for every r on every split and write sweep.csv and sweep.json."""
    name = cfg.sweep.get("model", "HDGP-NP-All")
    opts = cfg.dgp
    if cfg.sweep.get("dgp"):
        merged = {**dataclasses.asdict(cfg.dgp), **cfg.sweep["dgp"]}
        opts = dgp.DgpOptions.from_dict(merged)
    if name in PRIOR_MODELS and cfg.prior is None:
        raise InvalidConfig(f"sweep model {name} needs a 'prior' section")
    d = load_csv(cfg.dataset, cfg.roles)
    T = len(model_tasks(d, name))
    r_values = [int(r) for r in r_values]
    if not r_values:
        raise InvalidConfig("empty reduction list")
    bad = [r for r in r_values if not 0 <= r <= T - 1]
    if bad:
        raise InvalidConfig(f"reduction values {bad} outside [0, {T - 1}] for {name}")
    r_values = sorted(set(r_values))
    try:
        splits = make_splits(d.n, cfg.train_ratio, cfg.n_splits, cfg.seed)
    except ValueError as e:
        raise InvalidConfig(str(e)) from e
    tasks = list(d.main_tasks)
    torch.set_num_threads(1)

    # per (r, task): lists of per-split Spearman, RMSE and scaled RMSE
    acc = {(r, t): ([], [], []) for r in r_values for t in tasks}
    for k, sp in enumerate(splits):
        scaled, p = standardize(d, list(sp.train_indices))
        tr = scaled.take(list(sp.train_indices))
        Xte = scaled.X[list(sp.test_indices)]
        prior = _train_prior(cfg, tr, sp, k) if name in PRIOR_MODELS else None
        sub = tr.select_tasks(model_tasks(d, name))
        if prior is not None:
            prior = restrict_prior(prior, sub.task_names)
        seed = model_seed(cfg.seed, k, name)
        test = np.asarray(sp.test_indices)
        for r in r_values:
            _, mean, _ = fit_predict_dgp(sub, Xte, r, opts, seed, prior)
            for t in tasks:
                j, kt = sub.task_index(t), d.task_index(t)
                obs = d.mask[test, kt]
                y = d.Y[test[obs], kt]
                yhat = mean[obs, j] * p.y_sd[kt] + p.y_mean[kt]
                s = score(y, yhat)
                acc[(r, t)][0].append(s["Spearman"])
                acc[(r, t)][1].append(s["RMSE"])
                acc[(r, t)][2].append(s["RMSE"] / p.y_sd[kt])

    def mean_of(v):
        v = [x for x in v if math.isfinite(x)]
        return float(np.mean(v)) if v else float("nan")

    lines, table = [], []
    for r in r_values:
        per = {t: tuple(mean_of(v) for v in acc[(r, t)]) for t in tasks}
        for t in tasks:
            lines.append((r, t, *per[t]))
        s_mean = mean_of([per[t][0] for t in tasks])
        rs_mean = mean_of([per[t][2] for t in tasks])
        lines.append((r, "MEAN", s_mean, float("nan"), rs_mean))
        table.append({"r": r, "spearman": s_mean, "rmse_scaled": rs_mean})
    best = recommend_reduction(table)

    def body(w: _Writer) -> dict:
        buf = io.StringIO()
        cw = csv.writer(buf, lineterminator="\n")
        cw.writerow(["r", "task", "spearman", "rmse", "rmse_scaled"])
        for r, t, s, rm, rs in lines:
            cw.writerow([r, t] + ["" if math.isnan(x) else repr(x) for x in (s, rm, rs)])
        w.write("sweep.csv", buf.getvalue())
        summary = {"model": name, "r_values": r_values, "recommended_r": best,
                   "rule": "max mean Spearman, then min mean scaled RMSE, then smallest r",
                   "table": [{k: (_json_full(v)) for k, v in e.items()} for e in table]}
        w.write("sweep.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary

    return _with_outputs(out_dir, body)


def read_sweep_csv(path: str | Path) -> list[dict]:
    """MEAN rows of a sweep.csv in the form ``recommend_reduction`` takes."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["task"] == "MEAN":
                out.append({"r": int(row["r"]),
                            "spearman": float(row["spearman"]) if row["spearman"] else None,
                            "rmse_scaled": float(row["rmse_scaled"]) if row["rmse_scaled"] else None})
    return out
