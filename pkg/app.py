"""
SGL - Small-Group Learning architecture search
Command-line entry point
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from src.config import config
from src.exceptions import ConfigError, DatasetError, OracleBudgetError, SGLError
from src.experiment_runner import ExperimentRunner
from src.models import ExperimentConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GRADCHECK_FAIL = 3

logger = logging.getLogger("sgl")


def configure_logging(debug: bool = False) -> None:
    level = logging.DEBUG if debug or config.DEBUG else getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format=config.LOG_FORMAT, stream=sys.stderr)


def parse_seeds(text: str) -> List[int]:
    """'3', '1,2,5' or '1-10'."""
    seeds: List[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part[1:]:
                low, high = part.split("-", 1)
                seeds.extend(range(int(low), int(high) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgl", description="Small-group differentiable architecture search")
    parser.add_argument("--debug", action="store_true", help="verbose logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, help="experiment config (JSON)")
        sub.add_argument("--seed", type=parse_seeds, help="seed list, e.g. 1 or 1,2,3 or 1-10")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--precision", choices=sorted(config.PRECISIONS), help="floating-point precision")
        sub.add_argument("--workers", type=int, help="worker threads per stage")
        sub.add_argument("--emit-plots", action="store_true", help="write HTML figures next to the metrics")
        sub.add_argument("--first-order", action="store_true", help="architecture step without the unrolled terms")

    search = commands.add_parser("search", help="run the group search")
    common(search)
    search.add_argument("--resume", type=Path, help="checkpoint to continue from")

    gradcheck = commands.add_parser("gradcheck", help="certify the hypergradient against central differences")
    common(gradcheck)

    compare = commands.add_parser("compare", help="group search against the single-learner baseline")
    common(compare)

    derive = commands.add_parser("derive", help="derive genotypes from a checkpoint and retrain them")
    common(derive)
    derive.add_argument("--checkpoint", type=Path, required=True, help="final.ckpt of a search run")
    derive.add_argument("--retrain-steps", type=int, help="SGD steps on train+val")

    schema = commands.add_parser("schema", help="write the experiment config JSON schema")
    schema.add_argument("--out", type=Path, default=Path("configs/schema.json"))
    return parser


def load_experiment(args: argparse.Namespace) -> ExperimentRunner:
    """Config file plus command-line overrides."""
    text: Optional[str] = None
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        experiment = ExperimentConfig.from_text(text)
    else:
        experiment = ExperimentConfig.from_text(json.dumps(
            {"output_dir": config.OUTPUT_DIR, "precision": config.PRECISION, "workers": config.WORKERS}
        ))

    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("invalid command line", ["workers: must be at least 1"])
        overrides["workers"] = args.workers
    if args.emit_plots:
        overrides["emit_plots"] = True
    if args.first_order:
        overrides["engine"] = experiment.engine.model_copy(update={"first_order": True})
    if overrides:
        experiment = ExperimentConfig.from_text(experiment.model_copy(update=overrides).to_text())
    return ExperimentRunner(experiment, text)


def run(args: argparse.Namespace) -> int:
    if args.command == "schema":
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(ExperimentConfig.model_json_schema(by_alias=True), indent=2) + "\n")
        print(f"schema written to {args.out}")
        return EXIT_OK

    runner = load_experiment(args)

    if args.command == "search":
        summary = runner.run_search(resume=args.resume)
        for result in summary.results:
            print(f"seed {result.seed:>3}  steps {result.steps_run:>5}  "
                  f"val error {result.val_error:.4f}  test error {result.test_error:.4f}")
        print(f"val error {summary.val_error_mean:.4f} ± {summary.val_error_std:.4f}  "
              f"test error {summary.test_error_mean:.4f} ± {summary.test_error_std:.4f}  "
              f"over {len(summary.results)} seed(s)")
        return EXIT_OK

    if args.command == "gradcheck":
        report = runner.run_gradcheck()
        for k, error in enumerate(report.own_errors):
            print(f"own   learner {k}: relative error {error:.3e}")
        for pair, error in report.cross_errors.items():
            print(f"cross {pair}: relative error {error:.3e}")
        verdict = "PASS" if report.passed else "FAIL"
        print(f"total relative error {report.total_error:.3e} (tolerance {report.tolerance:.0e}) {verdict}")
        return EXIT_OK if report.passed else EXIT_GRADCHECK_FAIL

    if args.command == "compare":
        report = runner.run_compare()
        print(f"sgl       test error {report.sgl.test_error_mean:.4f} ± {report.sgl.test_error_std:.4f}")
        print(f"baseline  test error {report.baseline.test_error_mean:.4f} ± {report.baseline.test_error_std:.4f}")
        print(f"difference {report.difference:+.4f}")
        return EXIT_OK

    if args.command == "derive":
        for result in runner.derive_and_retrain(args.checkpoint, args.retrain_steps):
            ops = ", ".join(f"{e.source}->{n.node}:{e.op.value}" for n in result.genotype.nodes for e in n.entries)
            print(f"learner {result.learner}: test error {result.test_error:.4f}  [{ops}]")
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    configure_logging(args.debug)

    try:
        return run(args)
    except (ConfigError, DatasetError, OracleBudgetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SGLError as exc:
        logger.error("run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
