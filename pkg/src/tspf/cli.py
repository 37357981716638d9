"""Command line entry point: ``tspf {run,tune,report,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys

from tspf import experiment
from tspf.config import OUTPUT_ROOT_ENV, load_config, resolve_output
from tspf.errors import ContractError

log = logging.getLogger("tspf")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p.add_argument("--workers", type=int, default=1, help="replications run in parallel")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<config name>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tspf", description="Two-stage CATE estimation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="train and evaluate all methods over the replications"))
    _common(sub.add_parser("tune", help="grid-search the loss weights on validation loss"))
    _common(sub.add_parser("synth", help="write the synthesized dataset bundles only"))
    rep = sub.add_parser("report", help="render the results table of a finished run")
    rep.add_argument("results_dir")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg, resolve_output(cfg, args.out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            txt, _ = experiment.report(args.results_dir)
            print(txt.read_text(), end="")
            return 0
        cfg, out = _load(args)
        if args.command == "run":
            experiment.run_experiment(cfg, out, workers=args.workers)
            print(f"results written to {out}")
            print((out / "table.txt").read_text() if (out / "table.txt").exists() else "no completed runs", end="")
        elif args.command == "tune":
            result = experiment.tune(cfg, workers=args.workers)
            path = experiment.write_tune(result, out)
            print(f"best lambdas {result.best} (validation loss {result.best_score:.4f}); details in {path}")
        elif args.command == "synth":
            paths = experiment.synth(cfg, out)
            print(f"wrote {len(paths)} bundles to {out}")
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
