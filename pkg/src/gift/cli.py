"""Command-line entry point: ``gift run|sweep|gdumb|check-bounds|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import harness, theory


def _overrides(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load(args) -> harness.ExperimentConfig:
    overrides = _overrides(args.set)
    if args.config:
        return harness.load_config(args.config, overrides)
    return harness.ExperimentConfig.from_dict(overrides)


def _out_dir(args, cfg: harness.ExperimentConfig) -> Path:
    return Path(args.out or cfg["output.path"])


def cmd_run(args) -> int:
    cfg = _load(args)
    record = harness.run_experiment(cfg)
    files = harness.emit_report([record], _out_dir(args, cfg))
    print(f"{record.fingerprint}  accuracy {record.mean:.4f} ± {record.std:.4f} over {len(record.seeds)} seed(s)")
    print(f"wrote {files['results']}")
    return 0


def _parse_axis(spec: str):
    if "=" not in spec:
        raise SystemExit(f"--axis expects name=v1,v2,..., got {spec!r}")
    name, values = spec.split("=", 1)
    vals: List[str] = [v.strip() for v in values.split(",") if v.strip()]
    # numeric ranges written as start:stop:step
    if len(vals) == 1 and vals[0].count(":") == 2 and name.strip() != "optimizer":
        start, stop, step = (float(x) for x in vals[0].split(":"))
        n = int(round((stop - start) / step)) + 1
        vals = [repr(round(start + i * step, 10)) for i in range(n)]
    return name.strip(), vals


def cmd_sweep(args) -> int:
    cfg = _load(args)
    axes = dict(_parse_axis(a) for a in args.axis)
    result = harness.grid_sweep(cfg, axes)
    files = harness.emit_report(result.records, _out_dir(args, cfg), sweep=result)
    for cell, r in zip(result.cells, result.records):
        desc = " ".join(f"{k}={v}" for k, v in cell.items())
        print(f"{desc:40s} {r.mean:.4f} ± {r.std:.4f}")
    print(f"wrote {files['results']}")
    return 0


def cmd_gdumb(args) -> int:
    cfg = _load(args)
    res = harness.gdumb_incremental(cfg, args.steps)
    for k, (acc, size) in enumerate(zip(res.accuracies, res.memory_sizes), 1):
        print(f"step {k}: classes {len(res.seen_classes[k - 1])}, memory {size}, accuracy {acc:.4f}")
    return 0


def cmd_check_bounds(args) -> int:
    reports = list(theory.random_bound_trials(args.trials, k=args.k, tau=args.tau, seed=args.seed))
    gaps = np.array([r.gap_jensen for r in reports])
    approx = np.array([r.gap_approx for r in reports])
    if args.out:
        theory.write_bound_csv(reports, args.out)
    print(f"trials {len(reports)}: min Jensen gap {gaps.min():.3e}, approx gap mean {approx.mean():.4f} "
          f"[{approx.min():.4f}, {approx.max():.4f}]")
    ok = bool(gaps.min() >= -1e-9)
    print("Jensen bound holds" if ok else "Jensen bound VIOLATED")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    worst = harness.loss_gradcheck(args.instances, args.batch, args.classes, args.seed)
    ok = True
    for name, err in worst.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name:12s} max relative error {err:.2e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gift", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="key = value config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="report directory (default: output.path)")
        return p

    p = with_config(sub.add_parser("run", help="run one configuration"))
    p.set_defaults(func=cmd_run)
    p = with_config(sub.add_parser("sweep", help="Cartesian grid over config axes"))
    p.add_argument("--axis", action="append", default=[], required=True,
                   help="name=v1,v2 (e.g. loss=ce,kl,cosine; seed=0,1,2; gamma=0:1:0.1; optimizer=sgd:0.5,adamw)")
    p.set_defaults(func=cmd_sweep)
    p = with_config(sub.add_parser("gdumb", help="class-incremental GDumb run"))
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(func=cmd_gdumb)

    p = sub.add_parser("check-bounds", help="sweep the InfoNCE bound on random draws")
    p.add_argument("--k", type=int, default=0, help="batch size K (0: random in 2..64)")
    p.add_argument("--tau", type=float, default=0.0, help="temperature (0: random from {0.1, 0.5, 1})")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write one CSV row per trial")
    p.set_defaults(func=cmd_check_bounds)

    p = sub.add_parser("gradcheck", help="compare loss gradients with finite differences")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, harness.StageError, OSError) as exc:
        print(f"gift: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
