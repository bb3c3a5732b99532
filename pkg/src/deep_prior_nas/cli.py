import argparse
import dataclasses
import logging
import statistics
import subprocess
import sys
from collections.abc import Callable, Sequence
from datetime import UTC, datetime
from pathlib import Path

from rich import box
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from deep_prior_nas import __version__
from deep_prior_nas.arch_space import Shape, resolve_spec, serialize
from deep_prior_nas.config import (
    PRESETS,
    AppConfig,
    apply_preset,
    apply_seed,
    dump_config,
    load_config,
)
from deep_prior_nas.continual import (
    RESULTS_FILE,
    parse_core,
    run_continual,
    write_results_csv,
)
from deep_prior_nas.datasets import LoadedDataset, load_dataset
from deep_prior_nas.errors import ConfigError, DPNASError
from deep_prior_nas.linear_head import evaluate, train_linear
from deep_prior_nas.metrics import SearchMetrics
from deep_prior_nas.prior_engine import DeepPrior, init_weights, load_prior
from deep_prior_nas.records import RunManifest, SearchLogEntry, read_jsonl
from deep_prior_nas.reporting import (
    ABLATION_CSV,
    ACCURACY_CSV,
    cmd_report as build_report,
    measurement_table,
    write_accuracy_csv,
)
from deep_prior_nas.search import (
    SEARCH_LOG,
    moving_average,
    prior_accuracy,
    rank_correlation,
    reinit_ablation,
    run_search,
    sample_ablation_specs,
    select_top,
    write_ablation_csv,
)

logger = logging.getLogger(__name__)
console = Console()


def _git_revision() -> str | None:
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True
        )
    except (OSError, subprocess.CalledProcessError):
        return None
    return result.stdout.strip() or None


def _now() -> str:
    return datetime.now(UTC).isoformat(timespec="seconds")


def _load_data(config: AppConfig) -> LoadedDataset:
    root = config.dataset.resolved_root()
    ds = load_dataset(config.dataset.name, root)
    logger.info(
        f"Loaded {ds.name} from {root}: {len(ds.train)} train / {len(ds.test)} test samples"
    )
    return ds


def _resolve_prior(text: str, input_shape: Shape, config: AppConfig, seed: int) -> DeepPrior:
    """A saved prior checkpoint, a named reference spec or a spec string."""
    path = Path(text)
    if path.suffix == ".json" and path.is_file():
        return load_prior(path, config.prior.flat_cap)
    return init_weights(resolve_spec(text, input_shape), seed, config.prior.flat_cap)


def _config_table(config: AppConfig) -> Table:
    table = Table(title="Effective configuration", box=box.SIMPLE)
    table.add_column("Section")
    table.add_column("Settings")
    for section, values in dataclasses.asdict(config).items():
        table.add_row(section, escape(", ".join(f"{k}={v}" for k, v in values.items())))
    return table


def _accuracy_table(title: str, rows: Sequence[dict[str, object]]) -> Table:
    table = Table(title=title, box=box.SIMPLE)
    for column in ("dataset", "model", "seed", "test_accuracy"):
        table.add_column(column, justify="right" if column == "test_accuracy" else "left")
    for row in rows:
        table.add_row(
            str(row["dataset"]),
            str(row["model"]),
            str(row["seed"]),
            f"{float(str(row['test_accuracy'])):.4f}",
        )
    return table


def cmd_search(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    metrics = SearchMetrics(config.metrics)
    if config.metrics.enabled:
        metrics.start_metrics_server()
    ranked, log = run_search(
        config,
        output_dir,
        _load_data(config),
        resume=args.resume is not None,
        metrics=metrics,
        handle_signals=True,
    )
    if not log:
        return

    table = Table(title="Top deep priors", box=box.SIMPLE)
    for column in ("index", "val_accuracy", "eps", "spec"):
        table.add_column(column)
    for entry in ranked[:5]:
        table.add_row(
            str(entry.index), f"{entry.val_accuracy:.4f}", f"{entry.eps:.1f}", entry.spec
        )
    console.print(table)

    explore_len = config.search.explore_len
    rolling = moving_average(log, config.search.rolling_window)
    explore = [e.val_accuracy for e in log if e.index < explore_len]
    exploit = [r for e, r in zip(log, rolling, strict=True) if e.index >= explore_len]
    if explore and exploit:
        console.print(
            f"Exploration mean reward {statistics.mean(explore):.4f}, "
            f"final rolling reward {exploit[-1]:.4f}"
        )


def cmd_eval_arch(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    ds = _load_data(config)
    rows: list[dict[str, object]] = []
    for seed in args.seeds:
        prior = _resolve_prior(args.arch, ds.train.sample_shape, config, seed)
        accuracy = prior_accuracy(prior, ds.train, ds.test, config)
        logger.info(f"{serialize(prior.spec)} seed {prior.seed}: test accuracy {accuracy:.4f}")
        rows.append(
            {
                "dataset": ds.name,
                "model": args.arch,
                "seed": prior.seed,
                "test_accuracy": accuracy,
            }
        )
    write_accuracy_csv(rows, output_dir / ACCURACY_CSV)
    console.print(_accuracy_table("Random prior + linear classifier", rows))


def cmd_baseline_lc(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    ds = _load_data(config)
    clf = train_linear(ds.train.flattened(), ds.train.labels, config.classifier)
    accuracy = evaluate(clf, ds.test.flattened(), ds.test.labels)
    logger.info(f"Raw-pixel linear classifier on {ds.name}: test accuracy {accuracy:.4f}")
    rows: list[dict[str, object]] = [
        {
            "dataset": ds.name,
            "model": "lc",
            "seed": config.classifier.seed,
            "test_accuracy": accuracy,
        }
    ]
    write_accuracy_csv(rows, output_dir / ACCURACY_CSV)
    console.print(_accuracy_table("Linear classifier on raw pixels", rows))


def cmd_reinit_ablation(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    log = [SearchLogEntry.from_dict(d) for d in read_jsonl(args.run / SEARCH_LOG)]
    if not log:
        raise ConfigError(f"No search log in {args.run}")
    try:
        if args.top:
            chosen = select_top(log, args.top)
        else:
            chosen = sample_ablation_specs(log, args.per_segment)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    ds = _load_data(config)
    train, test = ds.train, ds.test
    if config.search.classes:
        train = train.with_classes(config.search.classes)
        test = test.with_classes(config.search.classes)
    specs = [resolve_spec(e.spec, train.sample_shape) for e in chosen]
    results = reinit_ablation(
        specs,
        args.repeats,
        config,
        train,
        test,
        search_rewards=[e.val_accuracy for e in chosen],
    )
    write_ablation_csv(results, output_dir / ABLATION_CSV)

    table = Table(title="Re-initialisation ablation", box=box.SIMPLE)
    for column in ("search reward", "median", "q1", "q3", "min", "max", "std", "spec"):
        table.add_column(column)
    for r in results:
        q1, q3 = r.quartiles
        table.add_row(
            f"{r.search_reward:.4f}",
            f"{r.median:.4f}",
            f"{q1:.4f}",
            f"{q3:.4f}",
            f"{min(r.accuracies):.4f}",
            f"{max(r.accuracies):.4f}",
            f"{r.spread:.4f}",
            r.spec,
        )
    console.print(table)
    if len(results) > 2:
        correlation = rank_correlation(results)
        console.print(f"Spearman rank correlation with search reward: {correlation:.3f}")


def cmd_continual(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    metrics = SearchMetrics(config.metrics)
    if config.metrics.enabled:
        metrics.start_metrics_server()
    ds = _load_data(config)
    prior = _resolve_prior(args.arch, ds.train.sample_shape, config, config.search.seed)
    result = run_continual(
        prior, ds, config.classifier, config.continual, config.prior.embed_batch_size, metrics
    )
    write_results_csv(result, output_dir / RESULTS_FILE)

    table = Table(title=f"Continual {result.label}", box=box.SIMPLE)
    for column in ("increment", "seen classes", "accuracy", "core size"):
        table.add_column(column)
    for row in result.rows:
        table.add_row(
            str(row.increment),
            " ".join(map(str, row.seen_classes)),
            f"{row.accuracy:.4f}",
            str(row.core_size),
        )
    console.print(table)
    console.print(f"Final accuracy: {result.final_accuracy:.4f}")


def cmd_report(args: argparse.Namespace, config: AppConfig, output_dir: Path) -> None:
    report = build_report(args.runs, output_dir)
    console.print(measurement_table(report.measurements))
    for path in report.files:
        console.print(f"Wrote {path}")


def _apply_overrides(args: argparse.Namespace, config: AppConfig) -> AppConfig:
    if getattr(args, "preset", None):
        config = apply_preset(config, args.preset)
    if getattr(args, "seed", None) is not None:
        config = apply_seed(config, args.seed)
    if getattr(args, "dataset", None):
        config = dataclasses.replace(
            config, dataset=dataclasses.replace(config.dataset, name=args.dataset)
        )
    if args.command == "continual":
        continual = config.continual
        try:
            if args.mode:
                continual = dataclasses.replace(continual, mode=args.mode)
            if args.increments:
                continual = dataclasses.replace(continual, increments=args.increments)
            if args.core:
                policy, size = parse_core(args.core)
                continual = dataclasses.replace(continual, core_policy=policy, core_size=size)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        config = dataclasses.replace(config, continual=continual)
    return config


def _output_dir(args: argparse.Namespace, config: AppConfig) -> Path:
    if getattr(args, "resume", None) is not None:
        return Path(args.resume)
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(config.output.directory)


Command = Callable[[argparse.Namespace, AppConfig, Path], None]

COMMANDS: dict[str, Command] = {
    "search": cmd_search,
    "eval-arch": cmd_eval_arch,
    "baseline-lc": cmd_baseline_lc,
    "reinit-ablation": cmd_reinit_ablation,
    "continual": cmd_continual,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpnas",
        description="Search random-weight deep priors and use them for continual learning",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config (default: ./config.yml)")
    common.add_argument("--seed", type=int, help="Override every seed in the config")
    common.add_argument("--out", type=Path, help="Output directory (default: output.directory)")
    dataset = argparse.ArgumentParser(add_help=False)
    dataset.add_argument("--dataset", choices=["mnist", "fashion-mnist", "cifar10"])

    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", parents=[common, dataset], help="Run the prior search")
    search.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="Search schedule: 'full' 2500/1500/100 or 'desk' 300/180/12 (same proportions)",
    )
    search.add_argument("--resume", type=Path, help="Resume the search in this directory")

    eval_arch = sub.add_parser(
        "eval-arch", parents=[common, dataset], help="Test accuracy of one random prior"
    )
    eval_arch.add_argument(
        "--arch", required=True, help="Spec string, lenet-ref, cnn2l-ref or a prior .json"
    )
    eval_arch.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    sub.add_parser(
        "baseline-lc", parents=[common, dataset], help="Linear classifier on raw pixels"
    )

    ablation = sub.add_parser(
        "reinit-ablation", parents=[common, dataset], help="Re-draw weights of searched specs"
    )
    ablation.add_argument("--run", type=Path, required=True, help="Search output directory")
    ablation.add_argument("--repeats", type=int, default=10)
    ablation.add_argument("--per-segment", type=int, default=6)
    ablation.add_argument("--top", type=int, help="Ablate the top-k priors instead of segments")

    continual = sub.add_parser(
        "continual", parents=[common, dataset], help="Class-incremental learning on a prior"
    )
    continual.add_argument(
        "--arch", required=True, help="Prior .json, spec string or reference name"
    )
    continual.add_argument("--mode", choices=["multi-head", "single-head", "accumulate"])
    continual.add_argument("--core", help="Core set: N (total budget) or per-task:N")
    continual.add_argument(
        "--increments", help="'0,1;2,3', '0-4;5-9' or split-mnist, cifar-a10d5, cifar-a5d1"
    )

    report = sub.add_parser("report", parents=[common], help="Consolidate run directories")
    report.add_argument("runs", type=Path, nargs="+")

    config = sub.add_parser("config", parents=[common], help="Show the effective config")
    config.add_argument("--dump", action="store_true", help="Print the config as YAML")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        config = _apply_overrides(args, load_config(args.config))
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error loading configuration: {e}", file=sys.stderr)
        return ConfigError.exit_code

    logging.basicConfig(
        level=getattr(logging, config.logging.level),
        format=config.logging.format,
    )

    if args.command == "config":
        if args.dump:
            print(dump_config(config), end="")
        else:
            console.print(_config_table(config))
        return 0

    output_dir = _output_dir(args, config)
    manifest = RunManifest(
        command=args.command,
        argv=list(argv if argv is not None else sys.argv[1:]),
        config=dataclasses.asdict(config),
        version=__version__,
        git_revision=_git_revision(),
        seed=config.search.seed,
        started_at=_now(),
        output_dir=str(output_dir),
    )
    manifest.save(output_dir)

    try:
        COMMANDS[args.command](args, config, output_dir)
    except DPNASError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1

    dataclasses.replace(manifest, finished_at=_now()).save(output_dir)
    return 0


def run() -> None:
    sys.exit(main())
