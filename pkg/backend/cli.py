"""Command-line interface: synth, fit, score, explain, evaluate, report, bag, diag-kde."""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from audit_system import AuditSystem
from config import config
from errors import (
    DatasetError,
    DegenerateScoreError,
    HansLensError,
    ModelFormatError,
    NumericalError,
    OutputExistsError,
    RelevanceError,
    ShapeError,
)
from models import RunConfig, SynthSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATASET = 3
EXIT_SHAPE = 4
EXIT_OUTPUT_EXISTS = 5
EXIT_NUMERICAL = 6

SPLITS = ("train", "val", "val_outliers", "test")


def exit_code_for(error: Exception) -> int:
    if isinstance(error, DatasetError):
        return EXIT_DATASET
    if isinstance(error, (ShapeError, ModelFormatError)):
        return EXIT_SHAPE
    if isinstance(error, OutputExistsError):
        return EXIT_OUTPUT_EXISTS
    if isinstance(error, (NumericalError, DegenerateScoreError, RelevanceError)):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def _grid(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("grid must not be empty")
    return values


def _size(text: str) -> List[int]:
    try:
        height, width = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from e
    return [height, width]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hanslens", description="Explain anomaly detectors and score Clever Hans effects")
    parser.add_argument("--version", action="version", version=f"%(prog)s {config.VERSION}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--seed", type=int, default=0, help="Run seed")
    common.add_argument("--force", action="store_true", help="Allow writing into a non-empty output directory")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic anomaly class")
    synth.add_argument("--kind", required=True,
                       choices=["stripe", "dotted_line", "brightness", "spatter_noise", "cartoon2d"])
    synth.add_argument("--size", type=_size, help="Image size as HxW")
    synth.add_argument("--n-train", type=int)
    synth.add_argument("--n-val", type=int)
    synth.add_argument("--n-val-outliers", type=int)
    synth.add_argument("--n-test", type=int)
    synth.add_argument("--stripe-width", type=int)
    synth.add_argument("--dot-count", type=int)
    synth.add_argument("--brightness-offset", type=float)
    synth.add_argument("--noise-probability", type=float)

    fit = sub.add_parser("fit", parents=[common], help="Fit a detector on a class's train split")
    fit.add_argument("--data", required=True, help="Manifest file or dataset directory")
    fit.add_argument("--model", required=True, choices=["kde", "autoencoder", "deep"])
    fit.add_argument("--gamma-grid", type=_grid)
    fit.add_argument("--lambda-grid", type=_grid)
    fit.add_argument("--epochs", type=int)
    fit.add_argument("--backbone", help="HLW1 feature extractor for the deep model")

    for name, help_text in (("score", "Write outlier scores"), ("explain", "Write heatmaps")):
        command = sub.add_parser(name, parents=[common], help=help_text)
        command.add_argument("--data", required=True)
        command.add_argument("--model", required=True, help="Fitted model directory")
        command.add_argument("--lrp-gamma", type=float)
        command.add_argument("--split", choices=SPLITS, default="test")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Detection and explanation accuracy report")
    evaluate.add_argument("--data", required=True, nargs="+", help="One dataset per class")
    evaluate.add_argument("--model", required=True, nargs="+",
                          help="Fitted model directories of one detector kind, paired with --data")
    evaluate.add_argument("--lrp-gamma", type=float)
    evaluate.add_argument("--top-k", type=int, help="Classes listed in the Clever Hans ranking")

    report = sub.add_parser("report", parents=[common], help="Compare evaluation reports of several detectors")
    report.add_argument("--reports", required=True, nargs="+", help="report.json files or evaluate output directories")
    report.add_argument("--top-k", type=int)

    bag = sub.add_parser("bag", parents=[common], help="Bag standardized KDE, autoencoder and deep detectors")
    bag.add_argument("--data", required=True)
    bag.add_argument("--members", nargs="+", help="Fitted model directories; all three kinds are fitted otherwise")
    bag.add_argument("--gamma-grid", type=_grid)
    bag.add_argument("--lambda-grid", type=_grid)
    bag.add_argument("--epochs", type=int)
    bag.add_argument("--backbone")

    diag = sub.add_parser("diag-kde", parents=[common], help="KDE distance-to-the-mean residual table")
    diag.add_argument("--data", required=True)
    diag.add_argument("--gamma-grid", type=_grid)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    known = {"command", "out", "seed", "force", "verbose", "quiet", "data", "model",
             "gamma_grid", "lambda_grid", "lrp_gamma", "epochs", "top_k"}
    options: Dict[str, Any] = {
        key: value for key, value in sorted(vars(args).items()) if key not in known and value is not None
    }
    data, model = getattr(args, "data", None), getattr(args, "model", None)
    datasets: List[str] = []
    models: List[str] = []
    if isinstance(data, list):
        datasets, models = data, model
        data, model = data[0], model[0]
    return RunConfig(
        command=args.command, out=args.out, seed=args.seed, force=args.force,
        data=data, model=model, datasets=datasets, models=models,
        gamma_grid=getattr(args, "gamma_grid", None), lambda_grid=getattr(args, "lambda_grid", None),
        lrp_gamma=getattr(args, "lrp_gamma", None), epochs=getattr(args, "epochs", None),
        top_k=getattr(args, "top_k", None), options=options,
    )


def _synth_spec(args: argparse.Namespace) -> SynthSpec:
    fields: Dict[str, Any] = {"kind": args.kind, "seed": args.seed}
    for key in ("n_train", "n_val", "n_val_outliers", "n_test", "stripe_width",
                "dot_count", "brightness_offset", "noise_probability"):
        if getattr(args, key) is not None:
            fields[key] = getattr(args, key)
    if args.size is not None:
        fields["image_size"] = tuple(args.size)
    return SynthSpec(**fields)


def _configure_logging(args: argparse.Namespace):
    level = config.LOG_LEVEL
    if args.verbose:
        level = "DEBUG"
    elif args.quiet:
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def dispatch(system: AuditSystem, args: argparse.Namespace):
    if args.command == "fit":
        system.fit(args.model, args.backbone)
    elif args.command == "score":
        system.score(args.split)
    elif args.command == "explain":
        system.explain(args.split)
    elif args.command == "evaluate":
        print(system.evaluate().format_table(), end="")
    elif args.command == "report":
        print(system.report(args.reports).format_table(), end="")
    elif args.command == "bag":
        system.bag(args.members, args.backbone)
    elif args.command == "diag-kde":
        system.diag_kde()


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, execute one command and return the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    _configure_logging(args)

    try:
        run_config = _run_config(args)
        spec = _synth_spec(args) if args.command == "synth" else None
    except (ValidationError, ValueError) as e:
        logger.error("Invalid arguments: %s", e)
        return EXIT_USAGE

    system = AuditSystem(config, run_config)
    try:
        system.prepare_output()
        if spec is not None:
            system.synth(spec)
        else:
            dispatch(system, args)
        system.write_metadata()
    except HansLensError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except ValueError as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
