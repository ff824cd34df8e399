"""Command-line entry point: train, eval, trace, analyze, compare and registry."""
import argparse
import itertools
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from sqlalchemy.exc import DatabaseError

from config import (
    BEST_CHECKPOINT,
    CONFIG_SNAPSHOT_FILE,
    LOG_FORMAT,
    LOG_LEVEL,
    RESULTS_FILE,
    TRACE_FILE,
    ConfigError,
    RunConfig,
    _parse_bool,
    parse_overrides,
)
from data_loader import DataFormatError, Dataset, load_dataset
from models import LeNet5, Model, ModelSpec, RecurrentAttentionModel, load_checkpoint
from nn_core import DimensionError, NumericError
from report_generator import ReportGenerator
from run_registry import RunRegistry
from scanpath import DEFAULT_THRESHOLD, analyze
from training import TrainConfig, collect_traces, evaluate, fit, write_traces

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

REGISTRY_FILE = "registry.db"
REGISTRY_COLUMNS = ["config_hash", "model_tag", "dataset", "param_count", "test_accuracy", "epochs", "run_dir"]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def load_run_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """Config file (if any), then ``--set`` overrides, then validation."""
    overrides = parse_overrides(args.set or [])
    if args.config:
        config = RunConfig.from_file(args.config, overrides)
    else:
        config = (base or RunConfig()).with_overrides(overrides)
    return config.validate()


def config_for_checkpoint(checkpoint: Path, args: argparse.Namespace) -> RunConfig:
    """Use the snapshot stored next to a checkpoint, if there is one."""
    snapshot = Path(checkpoint).parent / CONFIG_SNAPSHOT_FILE
    if snapshot.exists() and not args.config:
        logger.info(f"Using config snapshot {snapshot}")
        base = RunConfig.from_file(snapshot)
        return load_run_config(args, base)
    return load_run_config(args)


def make_run_dir(config: RunConfig) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = Path(config.output_dir) / f"{stamp}_{config.config_hash()}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


def attach_run_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(Path(run_dir) / "run.log")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler):
    logging.getLogger().removeHandler(handler)
    handler.close()


def prepare_data(config: RunConfig, download: bool = False) -> Dict[str, Dataset]:
    """Load the dataset splits; ``train_limit`` caps train, ``test_limit`` caps val and test."""
    splits = load_dataset(config.dataset, Path(config.data_root), config.seed, config.val_fraction, download)
    if config.train_limit:
        splits["train"] = splits["train"].subset(config.train_limit)
    if config.test_limit:
        splits["val"] = splits["val"].subset(config.test_limit)
        splits["test"] = splits["test"].subset(config.test_limit)
    for name, split in splits.items():
        logger.info(f"{config.dataset}/{name}: {len(split)} images of {split.image_size}x{split.image_size}")
    return splits


def build_from_config(config: RunConfig) -> Model:
    if config.variant == "LENET":
        return LeNet5(config.num_classes, config.image_size, config.seed)
    return RecurrentAttentionModel(ModelSpec.from_run_config(config), config.seed)


def run_training(config: RunConfig, download: bool = False, show_progress: bool = False) -> Dict:
    """Train one cell end to end and persist every artifact in a fresh run directory."""
    run_dir = make_run_dir(config)
    handler = attach_run_log(run_dir)
    try:
        config.save(run_dir / CONFIG_SNAPSHOT_FILE)
        logger.info(f"Run directory {run_dir} (config {config.config_hash()})")
        splits = prepare_data(config, download)
        model = build_from_config(config)

        result = fit(model, splits["train"], splits["val"], TrainConfig.from_run_config(config, show_progress), run_dir)
        test = evaluate(model, splits["test"], batch_size=config.batch_size, seed=config.seed)
        logger.info(
            f"{model.spec.tag()}: test accuracy {test.accuracy:.4f}, "
            f"{test.ms_per_image:.3f} ms/image, {test.param_count:,} parameters"
        )

        if config.emit_traces and isinstance(model, RecurrentAttentionModel):
            traces = collect_traces(model, splits["test"], config.trace_images, seed=config.seed)
            write_traces(run_dir / TRACE_FILE, traces, config.image_size, model.spec.tag())

        results = {
            "model_tag": model.spec.tag(include_scale=config.dataset == "fer2013"),
            "config_hash": config.config_hash(),
            "dataset": config.dataset,
            "variant": config.variant,
            "num_glimpses": config.num_glimpses,
            "num_scales": config.num_scales,
            "param_count": test.param_count,
            "test_accuracy": test.accuracy,
            "ms_per_image": test.ms_per_image,
            "best_val_accuracy": result.best_val_acc,
            "best_epoch": result.best_epoch,
            "epochs": len(result.history),
            "mean_epoch_seconds": result.mean_epoch_seconds,
            "stopped_early": result.stopped_early,
            "run_dir": str(run_dir),
            "checkpoint": str(run_dir / BEST_CHECKPOINT),
        }
        with open(run_dir / RESULTS_FILE, "w") as f:
            json.dump(results, f, indent=2)
        return results
    finally:
        detach_run_log(handler)


def record_results(registry: RunRegistry, results: Dict):
    registry.record(
        config_hash=results["config_hash"],
        model_tag=results["model_tag"],
        dataset=results["dataset"],
        variant=results["variant"],
        param_count=results["param_count"],
        run_dir=Path(results["run_dir"]),
        checkpoint=Path(results["checkpoint"]),
        ms_per_image=results["ms_per_image"],
        test_accuracy=results["test_accuracy"],
        best_val_accuracy=results["best_val_accuracy"],
        epochs=results["epochs"],
        num_glimpses=results["num_glimpses"],
        num_scales=results["num_scales"],
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    results = run_training(config, download=args.download, show_progress=args.progress)
    registry = RunRegistry(Path(config.output_dir) / REGISTRY_FILE)
    try:
        record_results(registry, results)
    finally:
        registry.close()
    print(f"{results['model_tag']}: accuracy {results['test_accuracy']:.4f} "
          f"({results['param_count']:,} params) -> {results['run_dir']}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, _, extra = load_checkpoint(Path(args.checkpoint))
    config = config_for_checkpoint(args.checkpoint, args)
    split = prepare_data(config, args.download)[args.split]
    result = evaluate(model, split, batch_size=config.batch_size, seed=config.seed)
    report = {
        "model_tag": model.spec.tag(),
        "split": args.split,
        "accuracy": result.accuracy,
        "param_count": result.param_count,
        "ms_per_image": result.ms_per_image,
        "num_images": result.num_images,
        "checkpoint_epoch": extra.get("epoch"),
    }
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_trace(args: argparse.Namespace) -> int:
    model, _, _ = load_checkpoint(Path(args.checkpoint))
    if not isinstance(model, RecurrentAttentionModel):
        raise ConfigError("trace needs an attention model checkpoint, not LeNet-5")
    config = config_for_checkpoint(args.checkpoint, args)
    split = prepare_data(config, args.download)[args.split]
    traces = collect_traces(model, split, args.n_images, batch_size=config.batch_size, seed=config.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / TRACE_FILE
    count = write_traces(out, traces, config.image_size, model.spec.tag())
    print(f"{count} traces -> {out}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    trace_log = Path(args.trace_log)
    bandwidth = None if args.bandwidth == "auto" else float(args.bandwidth)
    if bandwidth is not None and bandwidth <= 0:
        raise ConfigError("bandwidth must be positive or 'auto'")
    report = analyze(trace_log, args.threshold, bandwidth, args.by_label, args.patch_size)
    out_dir = Path(args.out) if args.out else trace_log.parent / "analysis"
    ReportGenerator(out_dir).write_scanpath_report(report)
    print(ReportGenerator.summary_text(report), end="")
    return EXIT_OK


def _split_list(value: Optional[str], cast=str) -> List:
    if not value:
        return []
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def compare_matrix(base: RunConfig, variants: List[str], glimpses: List[int], scales: List[int],
                   baseline_modes: List[str], contexts: List[bool], include_lenet: bool) -> List[RunConfig]:
    """Expand the comparison grid into valid run configs (invalid cells are skipped)."""
    cells = []
    if include_lenet:
        cells.append(base.with_overrides({"variant": "LENET"}).validate())
    for variant, steps, scale, mode, context in itertools.product(
            variants or [base.variant], glimpses or [base.num_glimpses], scales or [base.num_scales],
            baseline_modes or [base.baseline_mode], contexts or [base.context_cnn]):
        variant = variant.upper()
        if variant == "RAM" and mode == "hybrid":
            mode = "single"
        if context and variant != "DRAM":
            logger.info(f"Skipping {variant} with context network")
            continue
        config = base.with_overrides({
            "variant": variant, "num_glimpses": steps, "num_scales": scale,
            "baseline_mode": mode, "context_cnn": context,
        }).validate()
        if config.config_hash() not in {c.config_hash() for c in cells}:
            cells.append(config)
    return cells


def cmd_compare(args: argparse.Namespace) -> int:
    base = load_run_config(args)
    cells = compare_matrix(
        base,
        _split_list(args.variants),
        _split_list(args.glimpses, int),
        _split_list(args.scales, int),
        _split_list(args.baseline_modes),
        _split_list(args.context, _parse_bool),
        args.include_lenet,
    )
    logger.info(f"Comparing {len(cells)} cells on {base.dataset}")
    registry = RunRegistry(Path(base.output_dir) / REGISTRY_FILE)
    rows = []
    try:
        for config in cells:
            cached = None if args.force else registry.get(config.config_hash())
            if cached is None:
                cached = run_training(config, download=args.download, show_progress=args.progress)
                record_results(registry, cached)
            rows.append(cached)
        stats = registry.get_statistics()
        logger.info(
            f"Registry: {stats['hits']} hits, {stats['misses']} misses "
            f"(hit rate {stats['hit_rate']:.0%}), {stats['total_entries']} entries"
        )
    finally:
        registry.close()
    out_dir = Path(args.out) if args.out else Path(base.output_dir) / "comparison"
    paths = ReportGenerator(out_dir).write_comparison(rows, title=args.title or base.dataset)
    print(paths["markdown"].read_text(), end="")
    return EXIT_OK


def cmd_registry(args: argparse.Namespace) -> int:
    """List (or clear) the finished runs recorded under the output directory."""
    config = load_run_config(args)
    registry = RunRegistry(Path(config.output_dir) / REGISTRY_FILE)
    try:
        if args.clear:
            print(json.dumps({"cleared": registry.clear_all()}))
            return EXIT_OK
        runs = registry.list_runs(args.dataset)
    finally:
        registry.close()
    print(runs[REGISTRY_COLUMNS].to_csv(index=False), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value run config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default from LOG_LEVEL)")
    common.add_argument("--download", action="store_true", help="fetch MNIST/FashionMNIST if missing")

    parser = argparse.ArgumentParser(prog="ramlab", description="Hard visual attention laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="train one model")
    train.add_argument("--progress", action="store_true", help="show batch progress bars")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--split", choices=["train", "val", "test"], default="test")
    ev.set_defaults(func=cmd_eval)

    trace = sub.add_parser("trace", parents=[common], help="log glimpse traces of a checkpoint")
    trace.add_argument("checkpoint")
    trace.add_argument("--n-images", type=int, default=100)
    trace.add_argument("--split", choices=["train", "val", "test"], default="test")
    trace.add_argument("--out", help="trace log path (default: next to the checkpoint)")
    trace.set_defaults(func=cmd_trace)

    an = sub.add_parser("analyze", parents=[common], help="fixation/saccade analysis of a trace log")
    an.add_argument("trace_log")
    an.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    an.add_argument("--bandwidth", default="auto", help="KDE bandwidth or 'auto' (Scott's rule)")
    an.add_argument("--by-label", action="store_true", help="add per-class density curves")
    an.add_argument("--patch-size", type=float, default=8, help="long-jump length for the summary")
    an.add_argument("--out", help="output directory (default: <trace dir>/analysis)")
    an.set_defaults(func=cmd_analyze)

    cmp_ = sub.add_parser("compare", parents=[common], help="train or load a grid of cells and tabulate")
    cmp_.add_argument("--variants", help="comma list, e.g. RAM,MRAM,DRAM")
    cmp_.add_argument("--glimpses", help="comma list of glimpse counts")
    cmp_.add_argument("--scales", help="comma list of retina scale counts")
    cmp_.add_argument("--baseline-modes", help="comma list of single,hybrid")
    cmp_.add_argument("--context", help="comma list of true,false (DRAM context network)")
    cmp_.add_argument("--include-lenet", action="store_true")
    cmp_.add_argument("--force", action="store_true", help="retrain even when the registry has the cell")
    cmp_.add_argument("--progress", action="store_true")
    cmp_.add_argument("--title")
    cmp_.add_argument("--out", help="output directory (default: <output_dir>/comparison)")
    cmp_.set_defaults(func=cmd_compare)

    reg = sub.add_parser("registry", parents=[common], help="list or clear the run registry")
    reg.add_argument("--dataset", help="only runs on this dataset")
    reg.add_argument("--clear", action="store_true", help="remove every registry entry")
    reg.set_defaults(func=cmd_registry)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    level = str(args.log_level).upper()
    if not isinstance(logging.getLevelName(level), int):
        print(f"ramlab: unknown log level {args.log_level!r}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        return args.func(args)
    except (ConfigError, DimensionError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError, OSError, DatabaseError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
