import csv
import json

import numpy as np
import pytest

from hdgp_bench import bench
from hdgp_bench.bench import (
    RunConfig,
    fit_predict_dgp,
    import_external_predictions,
    read_sweep_csv,
    recommend_reduction,
    run_benchmark,
    sweep_reduction,
)
from hdgp_bench.cli import main, parse_range
from hdgp_bench.data import load_csv, make_splits, roles_path_for, standardize, synth_benchmark, write_csv
from hdgp_bench.dgp import DgpOptions
from hdgp_bench.metrics import aggregate_splits
from hdgp_bench.errors import ConfigError, IndexMismatch, InvalidConfig, NotPositiveDefinite, UnknownTask
from hdgp_bench.prior import PriorModel

FAST = {"dgp": {"steps": 5, "predict_samples": 20, "m": 6, "q": 3},
        "exact_gp": {"steps": 10, "restarts": 1},
        "encdec": {"epochs": 3, "hidden": [8, 4, 8]},
        "prior": {"epochs": 3, "hidden": [8, 4, 8]}}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    d = synth_benchmark(40, seed=3, n_main=3, n_aux=2)
    write_csv(d, root / "data.csv", roles_path_for(root / "data.csv"))
    return root, d


def config(root, **kw):
    d = {"dataset": "data.csv", "models": ["HDGP-NP-All"], "seed": 7, "n_splits": 2, "reduction": 1, **FAST}
    d.update(kw)
    return RunConfig.from_dict(d, root)


class TestConfig:
    def test_prior_models_need_prior_section(self, small):
        root, _ = small
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"dataset": "data.csv", "models": ["HDGP-P-All"]}, root)

    def test_prior_check_precedes_training(self, small, monkeypatch):
        root, _ = small
        monkeypatch.setattr(bench, "run_split", lambda *a, **k: pytest.fail("training started"))
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"dataset": "data.csv", "models": ["HDGP-P-Main"], "dgp": {}}, root)

    @pytest.mark.parametrize("patch", [
        {"models": []}, {"models": ["XGBoost"]}, {"bogus": 1}, {"dgp": {"stepz": 3}},
        {"reduction": "five"}, {"n_splits": 0}, {"train_ratio": 1.5}, {"models": ["cGP", "cGP"]},
        {"models": ["ExternalBaseline"]}, {"prior": {"kind": "oracle"}, "models": ["HDGP-P-All"]},
    ])
    def test_invalid(self, small, patch):
        root, _ = small
        d = {"dataset": "data.csv", "models": ["cGP"], **patch}
        with pytest.raises(InvalidConfig):
            RunConfig.from_dict(d, root)

    def test_reduction_checked_against_dataset(self, small, tmp_path):
        root, _ = small
        cfg = config(root, models=["HDGP-NP-Main"], reduction=3)  # 3 main tasks -> r <= 2
        with pytest.raises(InvalidConfig):
            run_benchmark(cfg, tmp_path / "out")
        assert not (tmp_path / "out").exists()

    def test_per_model_seeds_do_not_depend_on_roster(self):
        a = bench.model_seed(7, 1, "HDGP-P-All")
        assert a == bench.model_seed(7, 1, "HDGP-P-All")
        assert a != bench.model_seed(7, 1, "HDGP-NP-All") != bench.model_seed(7, 0, "HDGP-NP-All")


@pytest.fixture(scope="module")
def run(small, tmp_path_factory):
    root, d = small
    out = tmp_path_factory.mktemp("run")
    cfg = config(root, models=list(bench.MODELS[:6]))
    return run_benchmark(cfg, out), out, d, cfg


class TestRun:
    def test_row_count(self, run):
        report, out, d, cfg = run
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6 * len(d.main_tasks) * 5
        assert rows[0].keys() == {"model", "task", "metric", "mean", "sd", "split_values"}

    def test_aggregates_recomputable(self, run):
        report, *_ = run
        for r in report["metrics"]:
            vals = [v for v in r["split_values"] if v is not None]
            if len(vals) == 2:
                m, sd = aggregate_splits(vals)
                assert abs(r["mean"] - m) <= 1e-12 and abs(r["sd"] - sd) <= 1e-12

    def test_parity_completeness(self, run):
        report, out, d, _ = run
        splits = make_splits(d.n, 0.8, 2, 7)
        for k, sp in enumerate(splits):
            for t in d.main_tasks:
                n_obs = int(d.mask[list(sp.test_indices), d.task_index(t)].sum())
                for m in ("cGP", "EncDec"):
                    path = out / f"parity_{bench._safe(m)}_{bench._safe(t)}_{k}.csv"
                    with open(path, newline="") as fh:
                        rows = list(csv.DictReader(fh))
                    assert len(rows) == n_obs
                    if m == "EncDec":
                        assert all(r["predicted_sd"] == "" for r in rows)
                    else:
                        assert all(float(r["predicted_sd"]) > 0 for r in rows)

    def test_report_fields(self, run):
        report, *_ = run
        assert report["failures"] == [] and report["absent"] == []
        assert "0/0" in report["smape_definition"]
        assert len({s["fingerprint"] for s in report["splits"]}) == 2
        assert report["resolved"]["exact_gp"]["ard"] is True
        assert report["resolved"]["dgp"]["hidden_mean"] == "linear"

    def test_deterministic(self, small, tmp_path):
        root, _ = small
        cfg = config(root, models=["cGP", "HDGP-P-All", "EncDec"])
        run_benchmark(cfg, tmp_path / "a")
        run_benchmark(cfg, tmp_path / "b")
        for f in ("metrics.csv", "report.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_workers_do_not_change_output(self, small, tmp_path):
        root, _ = small
        run_benchmark(config(root, models=["HDGP-NP-Main", "EncDec"]), tmp_path / "a")
        run_benchmark(config(root, models=["HDGP-NP-Main", "EncDec"], workers=2), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_failure_is_isolated(small, tmp_path, monkeypatch):
    root, _ = small
    real = bench._run_model

    def flaky(name, cfg, d, tr, Xte, spec, k, *rest):
        if name == "cGP" and k == 1:
            raise NotPositiveDefinite("forced")
        return real(name, cfg, d, tr, Xte, spec, k, *rest)

    monkeypatch.setattr(bench, "_run_model", flaky)
    report = run_benchmark(config(root, models=["cGP", "EncDec"]), tmp_path / "out")
    assert report["failures"] == [{"model": "cGP", "split": 1, "error": "NotPositiveDefinite: forced"}]
    cgp = [r for r in report["metrics"] if r["model"] == "cGP" and r["metric"] == "RMSE"]
    assert all(r["split_values"][1] is None and r["split_values"][0] is not None for r in cgp)
    assert all(r["sd"] == 0.0 for r in cgp)


def test_abort_removes_partial_outputs(small, tmp_path, monkeypatch):
    root, _ = small
    monkeypatch.setattr(bench, "_metrics_csv", lambda rows: (_ for _ in ()).throw(KeyboardInterrupt))
    out = tmp_path / "out"
    with pytest.raises(KeyboardInterrupt):
        run_benchmark(config(root, models=["EncDec"]), out)
    assert not out.exists()


def test_zero_prior_matches_no_prior(small):
    root, d = small
    (sp,) = make_splits(d.n, 0.8, 1, 7)
    s, _ = standardize(d, sp.train_indices)
    tr = s.take(sp.train_indices)
    Xte = s.X[list(sp.test_indices)]
    opts = DgpOptions(steps=8, predict_samples=30, m=6, q=3)
    _, m0, s0 = fit_predict_dgp(tr, Xte, 1, opts, seed=11)
    _, m1, s1 = fit_predict_dgp(tr, Xte, 1, opts, seed=11, prior=PriorModel.zero(tr.main_tasks, tr.fingerprint()))
    assert np.array_equal(m0, m1) and np.array_equal(s0, s1)


class TestExternal:
    def _write(self, path, rows):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "task", "split", "prediction"])
            w.writerows(rows)
        return path

    def _echo_rows(self, d, splits, only=None):
        rows = []
        for k, sp in enumerate(splits):
            if only is not None and k not in only:
                continue
            for t in d.main_tasks:
                j = d.task_index(t)
                rows += [(i, t, k, repr(float(d.Y[i, j]))) for i in sp.test_indices if d.mask[i, j]]
        return rows

    def test_echo_is_perfect(self, small, tmp_path):
        root, d = small
        splits = make_splits(d.n, 0.8, 2, 7)
        pred = self._write(tmp_path / "p.csv", self._echo_rows(d, splits))
        cfg = config(root, models=["ExternalBaseline"], external={"name": "XGB", "predictions": str(pred)})
        report = run_benchmark(cfg, tmp_path / "out")
        for r in report["metrics"]:
            assert r["model"] == "XGB"
            if r["metric"] == "RMSE":
                assert r["mean"] == 0.0
            if r["metric"] == "R2":
                assert r["mean"] == 1.0

    def test_unknown_task(self, small, tmp_path):
        root, d = small
        splits = make_splits(d.n, 0.8, 2, 7)
        pred = self._write(tmp_path / "p.csv", [(splits[0].test_indices[0], "Density", 0, "1.0")])
        with pytest.raises(UnknownTask):
            import_external_predictions(pred, "XGB", d, splits)

    def test_train_row_rejected(self, small, tmp_path):
        root, d = small
        splits = make_splits(d.n, 0.8, 2, 7)
        pred = self._write(tmp_path / "p.csv", [(splits[0].train_indices[0], d.main_tasks[0], 0, "1.0")])
        with pytest.raises(IndexMismatch):
            import_external_predictions(pred, "XGB", d, splits)

    def test_split_zero_only(self, small, tmp_path):
        root, d = small
        splits = make_splits(d.n, 0.8, 2, 7)
        pred = self._write(tmp_path / "p.csv", self._echo_rows(d, splits, only={0}))
        cfg = config(root, models=["ExternalBaseline"], external={"name": "XGB", "predictions": str(pred)})
        report = run_benchmark(cfg, tmp_path / "out")
        assert report["absent"] == [{"model": "XGB", "split": 1, "reason": "no predictions"}]
        assert all(r["split_values"][1] is None and r["split_values"][0] is not None
                   for r in report["metrics"] if r["metric"] == "RMSE")

    def test_cli_import(self, small, tmp_path):
        root, d = small
        splits = make_splits(d.n, 0.8, 2, 7)
        pred = self._write(tmp_path / "p.csv", self._echo_rows(d, splits))
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"dataset": str(root / "data.csv"), "models": ["cGP"], "seed": 7,
                                        "n_splits": 2}))
        assert main(["import", "--pred", str(pred), "--name", "XGB", "--config", str(cfg_path),
                     "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_text().count("XGB,") == len(d.main_tasks) * 5


class TestSweep:
    def test_recommendation_matches_csv(self, small, tmp_path):
        root, d = small
        cfg = config(root, sweep={"model": "HDGP-NP-Main"})
        summary = sweep_reduction(cfg, [0, 1, 2], tmp_path / "sw")
        table = read_sweep_csv(tmp_path / "sw" / "sweep.csv")
        assert [e["r"] for e in table] == [0, 1, 2]
        assert summary["recommended_r"] == recommend_reduction(table)
        with open(tmp_path / "sw" / "sweep.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * (len(d.main_tasks) + 1)

    def test_single_r(self, small, tmp_path):
        root, _ = small
        assert sweep_reduction(config(root), [2], tmp_path / "sw")["recommended_r"] == 2

    def test_out_of_range(self, small, tmp_path):
        root, _ = small
        with pytest.raises(InvalidConfig):
            sweep_reduction(config(root, sweep={"model": "HDGP-NP-Main"}), [0, 3], tmp_path / "sw")

    def test_tie_rule(self):
        table = [{"r": 4, "spearman": 0.8, "rmse_scaled": 0.5},
                 {"r": 2, "spearman": 0.8 + 1e-13, "rmse_scaled": 0.5 - 1e-13},
                 {"r": 6, "spearman": 0.7, "rmse_scaled": 0.1}]
        assert recommend_reduction(table) == 2

    def test_spearman_first_then_rmse(self):
        table = [{"r": 0, "spearman": 0.9, "rmse_scaled": 0.6},
                 {"r": 1, "spearman": 0.9, "rmse_scaled": 0.4},
                 {"r": 2, "spearman": 0.95, "rmse_scaled": 0.9},
                 {"r": 3, "spearman": None, "rmse_scaled": 0.1}]
        assert recommend_reduction(table) == 2
        assert recommend_reduction(table[:2]) == 1


class TestCli:
    def test_parse_range(self):
        assert parse_range("0..3") == [0, 1, 2, 3]
        assert parse_range("2") == [2]
        assert parse_range("0,2,5") == [0, 2, 5]
        with pytest.raises(InvalidConfig):
            parse_range("a..b")

    def test_synth_writes_sidecar(self, tmp_path):
        assert main(["synth", "--n", "30", "--seed", "2", "--out", str(tmp_path / "d.csv")]) == 0
        d = load_csv(tmp_path / "d.csv")
        assert d.n == 30 and len(d.main_tasks) == 8 and d.n_tasks == 11

    def test_exit_codes(self, small, tmp_path, capsys):
        root, _ = small
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": str(root / "data.csv"), "models": ["HDGP-P-All"]}))
        assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        missing = tmp_path / "missing.json"
        missing.write_text(json.dumps({"dataset": str(tmp_path / "nope.csv"), "models": ["cGP"]}))
        assert main(["run", "--config", str(missing), "--out", str(tmp_path / "o")]) == 3
        assert main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_numerical_exit_code(self, small, tmp_path, monkeypatch):
        root, _ = small
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset": str(root / "data.csv"), "models": ["cGP"], "n_splits": 1}))
        monkeypatch.setattr(bench, "run_benchmark", None)  # not reached through the CLI binding

        def boom(*a, **k):
            raise NotPositiveDefinite("forced")

        monkeypatch.setattr("hdgp_bench.cli.run_benchmark", boom)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
