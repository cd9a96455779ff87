"""Command-line entry point: ``ocdist run | fit | compare | selftest``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checks, harness
from .config import ConfigError, bundled_configs, load


def _load(path, seed):
    cfg = load(path)
    return cfg.with_seed(seed) if seed is not None else cfg


def cmd_run(args):
    cfg = _load(args.config, args.seed)
    out = args.out or cfg.output
    res = harness.run_experiment(cfg, out)
    rep = res.report
    if "error" in rep:
        print(f"{cfg.name}: numerical failure: {rep['error']}", file=sys.stderr)
        return res.exit_code
    rate = rep["rate"].get("classification", rep["rate"].get("error"))
    print(f"{cfg.name} [{rep['algorithm']}] iterations={rep['iterations']} converged={rep['converged']} "
          f"to_tol={rep['iterations_to_tol']} rate={rate} msgs={rep['messages']} bytes={rep['bytes']}")
    for name, chk in rep["checks"].items():
        print(f"  {'ok  ' if chk['ok'] else 'FAIL'} {name}: {chk['detail']}")
    if out:
        print(f"  wrote {', '.join(str(p) for p in res.files.values())}")
    return res.exit_code


def cmd_fit(args):
    rate = harness.refit(args.trace, args.meta)
    text = json.dumps(rate, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "fit.json").write_text(text + "\n")
    print(text)
    return harness.EXIT_PROPERTY if "error" in rate else harness.EXIT_OK


def cmd_compare(args):
    cfgs = [load(path) for path in args.config]
    rows, code = harness.compare(cfgs, seed=args.seed, out_dir=args.out)
    print(harness.format_table(rows))
    return code


def cmd_selftest(args):
    results = checks.run_all(echo=print)
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return harness.EXIT_PROPERTY if failed else harness.EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ocdist", description=__doc__.split(":")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True,
                     help=f"config path or bundled name ({', '.join(bundled_configs())})")
    run.add_argument("--out", help="output directory for trace.csv, trace.meta.json, report.json")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=cmd_run)

    fit = sub.add_parser("fit", help="re-fit the convergence rate of a saved trace")
    fit.add_argument("trace", help="trace CSV written by 'run'")
    fit.add_argument("--meta", help="metadata JSON (default: next to the trace)")
    fit.add_argument("--out", help="directory for fit.json")
    fit.set_defaults(func=cmd_fit)

    cmp_ = sub.add_parser("compare", help="run several configs on one seed and tabulate")
    cmp_.add_argument("--config", action="append", required=True, help="repeat for each config")
    cmp_.add_argument("--out", help="output directory (one subdirectory per run plus compare.json)")
    cmp_.add_argument("--seed", type=int, help="seed applied to every config")
    cmp_.set_defaults(func=cmd_compare)

    st = sub.add_parser("selftest", help="run the invariant suite on bundled and generated instances")
    st.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return harness.EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
