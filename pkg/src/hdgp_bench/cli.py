"""``bench`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import RunConfig, run_benchmark, sweep_reduction
from .data import roles_path_for, synth_benchmark, write_csv
from .errors import BenchError, ConfigError, InvalidConfig

log = logging.getLogger("hdgp_bench")


def parse_range(text: str) -> list[int]:
    """``0..10`` (inclusive), ``3`` or ``0,2,5``."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InvalidConfig(f"cannot parse reduction range {text!r}; use e.g. 0..10 or 0,2,5") from None


def _cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    report = run_benchmark(cfg, args.out)
    log.info("wrote %d metric rows to %s", len(report["metrics"]), args.out)
    for f in report["failures"]:
        log.warning("%s failed on split %d: %s", f["model"], f["split"], f["error"])
    return 0


def _cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    summary = sweep_reduction(cfg, parse_range(args.r), args.out)
    print(f"recommended r = {summary['recommended_r']} ({summary['model']})")
    return 0


def _cmd_synth(args) -> int:
    d = synth_benchmark(args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(d, out, roles_path_for(out))
    log.info("wrote %s and %s", out, roles_path_for(out))
    return 0


def _cmd_import(args) -> int:
    cfg = RunConfig.load(args.config)
    ext = {"name": args.name, "predictions": str(Path(args.pred).resolve())}
    cfg = cfg.replace(models=("ExternalBaseline",), external=ext,
                      raw={**cfg.raw, "models": ["ExternalBaseline"], "external": {"name": args.name,
                                                                                   "predictions": args.pred}})
    report = run_benchmark(cfg, args.out)
    for a in report["absent"]:
        log.warning("%s absent on split %d (%s)", a["model"], a["split"], a["reason"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bench", description="Multi-task surrogate benchmark harness")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train the roster over all splits and write reports")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="sweep the DGP reduction parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--r", required=True, help="reduction values, e.g. 0..10")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("synth", help="write the synthetic benchmark CSV and its roles sidecar")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("import", help="score an external model's test predictions")
    p.add_argument("--pred", required=True, help="CSV with index,task,split,prediction")
    p.add_argument("--name", required=True)
    p.add_argument("--config", required=True, help="run config supplying dataset and splits")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_import)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except BenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        # argument values the library rejects (e.g. synth --n 5)
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
