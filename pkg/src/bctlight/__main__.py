"""Command line: ``python -m bctlight {train,eval,bench}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import CONTROLLERS, ExperimentConfig, bench, evaluate, train


def _grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 2x2, got {text!r}") from None
    return r, c


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--log-events", action="store_true", help="write the simulator event log of the evaluation episode")
    p.add_argument("--ct-diagnostics", action="store_true", help="write one JSON line per critique fit and gate decision")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bctlight", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one controller and evaluate it greedily")
    p.add_argument("--config", help="JSON experiment config; omitted keys keep their defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--controller", choices=CONTROLLERS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--scenario", help="directory with a CityFlow roadnet and flow file")
    p.add_argument("--grid", type=_grid)
    _common(p)

    p = sub.add_parser("eval", help="run one greedy episode from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("bench", help="train several controllers on a synthetic grid and tabulate metrics")
    p.add_argument("--controllers", default="fixedtime,maxpressure,dqn,ap_dqn,bct_aplight")
    p.add_argument("--grid", type=_grid, default=(1, 1))
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out")
    _common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {"log_events": args.log_events, "ct_diagnostics": args.ct_diagnostics}

    if args.command == "train":
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        changes = dict(flags, out=args.out)
        for key in ("seed", "controller", "episodes", "scenario", "grid"):
            if getattr(args, key) is not None:
                changes[key] = getattr(args, key)
        report = train(cfg.replace(**changes))
        print(json.dumps({"final": report.final, "ct": report.ct, "aborted": report.aborted}, indent=2))
        return 1 if report.aborted else 0

    if args.command == "eval":
        report = evaluate(args.checkpoint, args.scenario, args.seed, args.out)
        print(json.dumps({"final": report.final, "ct": report.ct}, indent=2))
        return 0

    base = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    base = base.replace(**flags)
    controllers = [c.strip() for c in args.controllers.split(",") if c.strip()]
    unknown = set(controllers) - set(CONTROLLERS)
    if unknown:
        print(f"unknown controllers: {sorted(unknown)}", file=sys.stderr)
        return 2
    results = bench(controllers, args.grid, args.episodes, args.seed, base, args.out)
    print(f"{'controller':<12} {'ATT':>9} {'AQL':>9} {'AWT':>9} {'reward':>10}")
    for name, rep in results.items():
        f = rep.final
        if not f:
            print(f"{name:<12} aborted: {rep.aborted}")
            continue
        print(f"{name:<12} {f['att']:9.2f} {f['aql']:9.2f} {f['awt']:9.2f} {f['reward']:10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
