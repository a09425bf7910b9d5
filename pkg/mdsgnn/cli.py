import argparse
import logging
import os
import sys
from collections.abc import Sequence
from enum import IntEnum
from pathlib import Path

from mdsgnn.config import (
    ConfigError,
    Corruption,
    DroppedLoss,
    GradCheckSettings,
    Method,
    SweepAxis,
    TrainConfig,
    load_config,
)
from mdsgnn.experiments import (
    Summary,
    ablate,
    coerce_sweep_value,
    compare,
    prepare_graph,
    run_seeds,
    sweep,
)
from mdsgnn.gradcheck import CHECKS, require_passing, run_suite
from mdsgnn.graphdata import (
    DatasetError,
    Graph,
    IncompleteGraph,
    corrupt,
    load_incomplete_dataset,
    make_sbm_graph,
    save_dataset,
)
from mdsgnn.numerics import NumericalError
from mdsgnn.reporting import TABLE_FILE, MetricsWriter, sweep_rows, write_table
from mdsgnn.training import fit, save_checkpoint

logger = logging.getLogger(__name__)

THREADS_VARIABLE = "MDSGNN_THREADS"


class ExitCode(IntEnum):
    OK = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """
    ArgumentParser whose usage errors exit with :attr:`ExitCode.USAGE`.
    """

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.USAGE, f"{self.prog}: error: {message}\n")


def _fraction(raw: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {raw!r}")
    if not 0 <= value <= 1:
        raise argparse.ArgumentTypeError(f"should be in [0, 1], got {raw}")
    return value


def _positive_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {raw!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"should be at least 1, got {raw}")
    return value


def _add_data_arguments(parser: argparse.ArgumentParser, single_seed: bool):
    parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    parser.add_argument("--config", type=Path, help="key=value training configuration")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="seed (first seed for multi-seed runs)")
    if not single_seed:
        parser.add_argument("--seeds", type=_positive_int, default=5, help="number of seeds")
    parser.add_argument(
        "--feature-missing",
        type=_fraction,
        help="corrupt the clean dataset with this feature missing rate before every run",
    )
    parser.add_argument(
        "--edge-missing",
        type=_fraction,
        help="corrupt the clean dataset with this edge missing rate before every run",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdsgnn", description="Node classification on graphs with missing data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corrupt_parser = commands.add_parser(
        "corrupt", help="mask features and drop edges of a dataset"
    )
    corrupt_parser.add_argument("--in", dest="source", type=Path, required=True)
    corrupt_parser.add_argument("--out", type=Path, required=True)
    corrupt_parser.add_argument("--feature-missing", type=_fraction, default=0.5)
    corrupt_parser.add_argument("--edge-missing", type=_fraction, default=0.5)
    corrupt_parser.add_argument("--seed", type=int, default=0)

    train_parser = commands.add_parser("train", help="train MDS-GNN with one seed")
    _add_data_arguments(train_parser, single_seed=True)
    train_parser.add_argument("--checkpoint", type=Path, help="save the trained parameters here")

    run_parser = commands.add_parser("run", help="train one method over several seeds")
    _add_data_arguments(run_parser, single_seed=False)
    run_parser.add_argument("--method", type=Method, choices=list(Method), default=Method.MDSGNN)

    ablate_parser = commands.add_parser("ablate", help="drop a loss term and rerun the seeds")
    _add_data_arguments(ablate_parser, single_seed=False)
    ablate_parser.add_argument("--drop", type=DroppedLoss, choices=list(DroppedLoss), required=True)

    sweep_parser = commands.add_parser("sweep", help="rerun the seeds along one axis")
    _add_data_arguments(sweep_parser, single_seed=False)
    sweep_parser.add_argument("--axis", type=SweepAxis, choices=list(SweepAxis), required=True)
    sweep_parser.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_parser.add_argument("--method", type=Method, choices=list(Method), default=Method.MDSGNN)

    compare_parser = commands.add_parser("compare", help="MDS-GNN against the baselines")
    _add_data_arguments(compare_parser, single_seed=False)
    compare_parser.add_argument(
        "--methods", default=",".join(Method), help="comma-separated methods"
    )

    gradcheck_parser = commands.add_parser("gradcheck", help="finite-difference gradient suite")
    gradcheck_parser.add_argument("--seed", type=int, default=0)
    gradcheck_parser.add_argument(
        "--components", help=f"comma-separated subset of {', '.join(CHECKS)}"
    )

    synth_parser = commands.add_parser("synth", help="write the stochastic block model benchmark")
    synth_parser.add_argument("--out", type=Path, required=True)
    synth_parser.add_argument("--nodes", type=_positive_int, default=300)
    synth_parser.add_argument("--classes", type=_positive_int, default=3)
    synth_parser.add_argument("--features", type=_positive_int, default=50)
    synth_parser.add_argument("--p-in", type=_fraction, default=0.1)
    synth_parser.add_argument("--p-out", type=_fraction, default=0.01)
    synth_parser.add_argument("--seed", type=int, default=0)
    return parser


def _split_list(raw: str) -> list[str]:
    values = [part.strip() for part in raw.split(",") if part.strip()]
    if not values:
        raise UsageError("expected a non-empty comma-separated list")
    return values


def _workers() -> int:
    raw = os.environ.get(THREADS_VARIABLE, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_VARIABLE} should be an integer, got {raw!r}")
    if workers < 1:
        raise UsageError(f"{THREADS_VARIABLE} should be at least 1, got {workers}")
    return workers


def _config(args: argparse.Namespace) -> TrainConfig:
    if args.config is None:
        return TrainConfig(seed=args.seed)
    if not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config).replace(seed=args.seed)


def _corruption(args: argparse.Namespace) -> Corruption | None:
    if args.feature_missing is None and args.edge_missing is None:
        return None
    return Corruption(
        feature_missing=args.feature_missing or 0.0, edge_missing=args.edge_missing or 0.0
    )


def _clean_graph(directory: Path) -> Graph:
    """
    Read a dataset that is about to be corrupted.

    :raises DatasetError: If its ``mask.tsv`` already marks feature rows missing.
    """
    observed = load_incomplete_dataset(directory)
    if observed.mask.num_missing:
        raise DatasetError(
            f"{observed.mask.num_missing} feature rows are already missing, "
            "corrupt the clean dataset instead",
            path=directory / "mask.tsv",
        )
    return observed.graph


def _graph(args: argparse.Namespace, corruption: Corruption | None) -> Graph | IncompleteGraph:
    """
    Clean graph when the command corrupts it per seed, the observed graph otherwise.
    """
    if corruption is None:
        return load_incomplete_dataset(args.data)
    return _clean_graph(args.data)


def _seeds(args: argparse.Namespace) -> list[int]:
    return [args.seed + offset for offset in range(args.seeds)]


def cmd_corrupt(args: argparse.Namespace) -> ExitCode:
    graph = _clean_graph(args.source)
    observed = corrupt(graph, args.feature_missing, args.edge_missing, args.seed)
    provenance = (
        f"corrupted from {args.source.name}: feature_missing={args.feature_missing!r} "
        f"edge_missing={args.edge_missing!r} seed={args.seed}"
    )
    save_dataset(observed, args.out, provenance=provenance)
    dropped = graph.num_edges - observed.graph.num_edges
    print(f"masked {observed.mask.num_missing} of {graph.n} nodes")
    print(f"dropped {dropped} of {graph.num_edges} edges")
    return ExitCode.OK


def cmd_train(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    corruption = _corruption(args)
    observed = prepare_graph(_graph(args, corruption), corruption, cfg.seed)
    state, metrics = fit(observed, cfg)

    writer = MetricsWriter(args.out)
    writer.add_run(metrics, cfg, str(Method.MDSGNN))
    if args.checkpoint is not None:
        save_checkpoint(state, args.checkpoint)
    print(
        f"seed {metrics.seed}: test accuracy {metrics.test_acc:.4f} "
        f"(best validation {metrics.best_val_acc:.4f} at epoch {metrics.best_epoch})"
    )
    return ExitCode.OK


def _print_summary(summary: Summary):
    accuracies = ", ".join(f"{value:.4f}" for value in summary.accuracies)
    print(f"{summary.tag}: {summary.mean:.4f} ± {summary.std:.4f} [{accuracies}]")


def cmd_run(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    corruption = _corruption(args)
    summary = run_seeds(
        _graph(args, corruption),
        cfg,
        _seeds(args),
        corruption,
        method=args.method,
        workers=_workers(),
    )
    MetricsWriter(args.out).add_summary(summary, cfg)
    write_table(args.out / TABLE_FILE, [(summary.tag, summary.mean, summary.std)], header="tag")
    _print_summary(summary)
    return ExitCode.OK


def cmd_ablate(args: argparse.Namespace) -> ExitCode:
    cfg = _config(args)
    corruption = _corruption(args)
    summary = ablate(
        _graph(args, corruption), cfg, args.drop, _seeds(args), corruption, workers=_workers()
    )
    MetricsWriter(args.out).add_summary(summary, cfg)
    write_table(args.out / TABLE_FILE, [(summary.tag, summary.mean, summary.std)], header="tag")
    _print_summary(summary)
    return ExitCode.OK


def cmd_sweep(args: argparse.Namespace) -> ExitCode:
    try:
        values = [coerce_sweep_value(args.axis, raw) for raw in _split_list(args.values)]
    except ValueError as exc:
        raise UsageError(f"--values: {exc}") from exc
    cfg = _config(args)
    corruption = _corruption(args)
    axis_corrupts = args.axis in (
        SweepAxis.FEATURE_MISSING,
        SweepAxis.EDGE_MISSING,
        SweepAxis.MISSING_RATE,
    )
    graph = _clean_graph(args.data) if axis_corrupts else _graph(args, corruption)
    table = sweep(
        graph,
        cfg,
        args.axis,
        values,
        _seeds(args),
        corruption,
        method=args.method,
        workers=_workers(),
    )

    writer = MetricsWriter(args.out)
    for row in table.rows:
        writer.add_summary(row.summary, cfg)
        _print_summary(row.summary)
    write_table(args.out / TABLE_FILE, sweep_rows(table), header=str(args.axis))
    return ExitCode.OK


def cmd_compare(args: argparse.Namespace) -> ExitCode:
    try:
        methods = [Method(raw) for raw in _split_list(args.methods)]
    except ValueError as exc:
        raise UsageError(f"--methods: {exc}") from exc
    cfg = _config(args)
    corruption = _corruption(args)
    summaries = compare(
        _graph(args, corruption), cfg, methods, _seeds(args), corruption, workers=_workers()
    )

    writer = MetricsWriter(args.out)
    for summary in summaries.values():
        writer.add_summary(summary, cfg)
        _print_summary(summary)
    write_table(
        args.out / TABLE_FILE,
        [(summary.tag, summary.mean, summary.std) for summary in summaries.values()],
        header="method",
    )
    return ExitCode.OK


def cmd_gradcheck(args: argparse.Namespace) -> ExitCode:
    components = _split_list(args.components) if args.components else None
    try:
        result = run_suite(GradCheckSettings(seed=args.seed), components)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for name, error in result.errors.items():
        status = "ok" if error < result.tolerance else "FAIL"
        print(f"{name}\t{error:.3e}\t{status}")
    require_passing(result)
    return ExitCode.OK


def cmd_synth(args: argparse.Namespace) -> ExitCode:
    graph = make_sbm_graph(
        n=args.nodes,
        num_classes=args.classes,
        p_in=args.p_in,
        p_out=args.p_out,
        f=args.features,
        seed=args.seed,
    )
    save_dataset(graph, args.out, provenance=f"stochastic block model, seed={args.seed}")
    print(f"wrote {graph.n} nodes and {graph.num_edges} edges to {args.out}")
    return ExitCode.OK


COMMANDS = {
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def _configure_logging(args: argparse.Namespace):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mdsgnn: error: {exc}", file=sys.stderr)
        return ExitCode.USAGE
    except ConfigError as exc:
        print(f"mdsgnn: config error: {exc}", file=sys.stderr)
        return ExitCode.USAGE
    except (DatasetError, OSError) as exc:
        print(f"mdsgnn: data error: {exc}", file=sys.stderr)
        return ExitCode.DATA
    except NumericalError as exc:
        print(f"mdsgnn: numerical failure in {exc.component}: {exc}", file=sys.stderr)
        return ExitCode.NUMERICAL
    except ValueError as exc:
        print(f"mdsgnn: data error: {exc}", file=sys.stderr)
        return ExitCode.DATA


if __name__ == "__main__":
    raise SystemExit(main())
