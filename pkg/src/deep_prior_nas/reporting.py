"""Consolidated result tables across run directories.

Published accuracies are kept as constants next to the measured values so a
report shows both and flags deviations beyond the accepted tolerance.
"""

import csv
import logging
import shutil
import statistics
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from rich import box
from rich.table import Table

from deep_prior_nas.continual import RESULTS_FILE, read_results_csv
from deep_prior_nas.datasets import TASK_PROTOCOLS, parse_increments
from deep_prior_nas.records import RunManifest, SearchLogEntry, read_jsonl
from deep_prior_nas.search import ROLLING_CSV, SEARCH_LOG

logger = logging.getLogger(__name__)

ACCURACY_CSV = "accuracy.csv"
ABLATION_CSV = "ablation.csv"
REPORT_FILE = "report.md"
CURVES_FILE = "continual_curves.csv"


@dataclass(frozen=True)
class Anchor:
    """A published accuracy in percent; ``tolerance`` None means report-only."""

    value: float
    tolerance: float | None
    note: str = ""


# Keyed by (experiment, dataset, variant).
ANCHORS: dict[tuple[str, str, str], Anchor] = {
    ("baseline-lc", "mnist", "lc"): Anchor(91.48, 1.5),
    ("baseline-lc", "fashion-mnist", "lc"): Anchor(85.91, 1.5),
    ("baseline-lc", "cifar10", "lc"): Anchor(41.12, 1.5),
    ("eval-arch", "mnist", "lenet-ref"): Anchor(88.76, 2.5, "reconstructed architecture"),
    ("eval-arch", "fashion-mnist", "lenet-ref"): Anchor(80.33, 2.5, "reconstructed architecture"),
    ("eval-arch", "cifar10", "lenet-ref"): Anchor(43.40, 2.5, "reconstructed architecture"),
    ("eval-arch", "mnist", "cnn2l-ref"): Anchor(98.01, 2.5, "reconstructed architecture"),
    ("eval-arch", "fashion-mnist", "cnn2l-ref"): Anchor(89.29, 2.5, "reconstructed architecture"),
    ("eval-arch", "cifar10", "cnn2l-ref"): Anchor(60.26, 2.5, "reconstructed architecture"),
    ("search", "fashion-mnist", "dp-nas"): Anchor(92.0, None, "full-scale search only"),
    ("continual", "mnist", "multi-head"): Anchor(99.79, 0.79),
    ("continual", "fashion-mnist", "multi-head"): Anchor(99.37, 1.37),
    ("continual", "mnist", "single-head"): Anchor(76.31, 4.0, "10 core entries per task"),
    ("continual", "cifar10", "single-head cifar-a5d1"): Anchor(58.13, None),
    ("continual", "cifar10", "single-head cifar-a10d5"): Anchor(
        65.15, None, "must beat the raw linear baseline"
    ),
}

# Other methods as reported in the continual-learning literature: value in
# percent and the work that reported it in that scenario.
LITERATURE_MULTI_HEAD: dict[str, dict[str, tuple[float, str]]] = {
    "EWC": {
        "mnist": (99.3, "Chaudhry et al. 2018"),
        "fashion-mnist": (95.3, "Farquhar & Gal 2018"),
    },
    "RWalk": {"mnist": (99.3, "Chaudhry et al. 2018")},
    "VCL + Core": {
        "mnist": (98.6, "Farquhar & Gal 2018"),
        "fashion-mnist": (97.1, "Farquhar & Gal 2018"),
    },
    "VCL": {"mnist": (97.0, "Farquhar & Gal 2018"), "fashion-mnist": (80.6, "Farquhar & Gal 2018")},
    "VGR": {"mnist": (99.3, "Farquhar & Gal 2018"), "fashion-mnist": (99.2, "Farquhar & Gal 2018")},
}

LITERATURE_SINGLE_HEAD: dict[str, dict[str, tuple[float, str]]] = {
    "EWC": {"mnist": (55.80, "Chaudhry et al. 2018"), "cifar-a10d5": (37.75, "Hu et al. 2019")},
    "IMM": {
        "mnist": (67.25, "Hu et al. 2019"),
        "cifar-a5d1": (32.36, "Hu et al. 2019"),
        "cifar-a10d5": (62.98, "Hu et al. 2019"),
    },
    "DGR": {
        "mnist": (75.47, "Hu et al. 2019"),
        "cifar-a5d1": (31.09, "Hu et al. 2019"),
        "cifar-a10d5": (65.11, "Hu et al. 2019"),
    },
    "PGMA": {
        "mnist": (81.70, "Hu et al. 2019"),
        "cifar-a5d1": (40.47, "Hu et al. 2019"),
        "cifar-a10d5": (69.51, "Hu et al. 2019"),
    },
    "RWalk": {"mnist": (82.50, "Chaudhry et al. 2018")},
    "iCarl": {
        "mnist": (55.80, "Chaudhry et al. 2018"),
        "cifar-a5d1": (57.30, "Ayub & Wagner 2021"),
    },
    "DGM": {"cifar-a5d1": (64.94, "Ayub & Wagner 2021")},
    "EEC": {"cifar-a5d1": (85.12, "Ayub & Wagner 2021")},
}


@dataclass(frozen=True)
class Measurement:
    run: str
    experiment: str
    dataset: str
    variant: str
    accuracy: float

    @property
    def anchor(self) -> Anchor | None:
        return ANCHORS.get((self.experiment, self.dataset, self.variant))

    @property
    def deviation(self) -> float | None:
        anchor = self.anchor
        return None if anchor is None else 100 * self.accuracy - anchor.value

    @property
    def flagged(self) -> bool:
        anchor, deviation = self.anchor, self.deviation
        if anchor is None or anchor.tolerance is None or deviation is None:
            return False
        return abs(deviation) > anchor.tolerance


@dataclass
class Report:
    measurements: list[Measurement] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)

    @property
    def flagged(self) -> list[Measurement]:
        return [m for m in self.measurements if m.flagged]


def write_accuracy_csv(rows: Sequence[dict[str, Any]], path: Path) -> None:
    """Per-seed test accuracies from ``baseline-lc`` and ``eval-arch``."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["dataset", "model", "seed", "test_accuracy"])
        writer.writeheader()
        writer.writerows(rows)


def _continual_variant(config: dict[str, Any]) -> str:
    continual = config.get("continual", {})
    mode = str(continual.get("mode", "single-head"))
    if mode != "single-head" or config.get("dataset", {}).get("name") != "cifar10":
        return mode
    increments = parse_increments(str(continual.get("increments", "")))
    for name, protocol in TASK_PROTOCOLS.items():
        if increments == protocol:
            return f"{mode} {name}"
    return mode


def _measure_run(run_dir: Path, manifest: RunManifest) -> list[Measurement]:
    dataset = str(manifest.config.get("dataset", {}).get("name", ""))
    run = run_dir.name

    if manifest.command in ("baseline-lc", "eval-arch"):
        grouped: dict[str, list[float]] = {}
        with open(run_dir / ACCURACY_CSV, newline="") as f:
            for row in csv.DictReader(f):
                grouped.setdefault(row["model"], []).append(float(row["test_accuracy"]))
        return [
            Measurement(run, manifest.command, dataset, model, statistics.median(accs))
            for model, accs in grouped.items()
        ]

    if manifest.command == "search":
        log = [SearchLogEntry.from_dict(d) for d in read_jsonl(run_dir / SEARCH_LOG)]
        if not log:
            return []
        best = max(e.val_accuracy for e in log)
        return [Measurement(run, "search", dataset, "dp-nas", best)]

    if manifest.command == "continual":
        rows = read_results_csv(run_dir / RESULTS_FILE)
        variant = _continual_variant(manifest.config)
        if variant == "multi-head":
            # Heads are never modified, so each task's own accuracy is final.
            final = statistics.mean(r.accuracy for r in rows)
        else:
            final = rows[-1].accuracy
        return [Measurement(run, "continual", dataset, variant, final)]

    return []


def markdown_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    lines = [
        "| " + " | ".join(headers) + " |",
        "|" + "|".join("---" for _ in headers) + "|",
    ]
    lines += ["| " + " | ".join(str(cell) for cell in row) + " |" for row in rows]
    return "\n".join(lines)


def _measurement_rows(measurements: Sequence[Measurement]) -> list[list[str]]:
    rows = []
    for m in measurements:
        anchor = m.anchor
        rows.append(
            [
                m.run,
                m.experiment,
                m.dataset,
                m.variant,
                f"{100 * m.accuracy:.2f}",
                f"{anchor.value:.2f}" if anchor else "-",
                f"{m.deviation:+.2f}" if m.deviation is not None else "-",
                "FLAG" if m.flagged else "ok",
            ]
        )
    return rows


MEASUREMENT_HEADERS = (
    "run",
    "experiment",
    "dataset",
    "variant",
    "measured %",
    "published %",
    "delta",
    "status",
)


def measurement_table(measurements: Sequence[Measurement]) -> Table:
    table = Table(title="Measured vs published", box=box.SIMPLE)
    for header in MEASUREMENT_HEADERS:
        table.add_column(header, justify="right" if "%" in header else "left")
    for row in _measurement_rows(measurements):
        table.add_row(*row, style="bold red" if row[-1] == "FLAG" else None)
    return table


def _literature_section(title: str, table: dict[str, dict[str, tuple[float, str]]]) -> str:
    columns = sorted({key for values in table.values() for key in values})
    rows = []
    for method, values in table.items():
        cells = [f"{values[c][0]:.2f} ({values[c][1]})" if c in values else "-" for c in columns]
        rows.append([method, *cells])
    return f"## {title}\n\n" + markdown_table(["method", *columns], rows)


def cmd_report(run_dirs: Sequence[Path], output_dir: Path) -> Report:
    """Merge run directories into ``report.md`` plus CSV series."""
    output_dir.mkdir(parents=True, exist_ok=True)
    report = Report()
    curves: list[list[Any]] = []

    for run_dir in run_dirs:
        manifest = RunManifest.load(run_dir)
        logger.info(f"Reading {manifest.command} run {run_dir}")
        report.measurements += _measure_run(run_dir, manifest)

        if manifest.command == "search" and (run_dir / ROLLING_CSV).exists():
            target = output_dir / f"rolling_reward_{run_dir.name}.csv"
            shutil.copyfile(run_dir / ROLLING_CSV, target)
            report.files.append(target)
        elif manifest.command == "reinit-ablation" and (run_dir / ABLATION_CSV).exists():
            target = output_dir / f"ablation_{run_dir.name}.csv"
            shutil.copyfile(run_dir / ABLATION_CSV, target)
            report.files.append(target)
        elif manifest.command == "continual":
            for row in read_results_csv(run_dir / RESULTS_FILE):
                seen = " ".join(str(c) for c in row.seen_classes)
                curves.append([run_dir.name, row.increment, seen, row.accuracy, row.core_size])

    if curves:
        path = output_dir / CURVES_FILE
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["run", "increment", "seen_classes", "accuracy", "core_size"])
            writer.writerows(curves)
        report.files.append(path)

    sections = [
        "# Results",
        markdown_table(MEASUREMENT_HEADERS, _measurement_rows(report.measurements)),
        _literature_section("Multi-head literature", LITERATURE_MULTI_HEAD),
        _literature_section("Single-head literature", LITERATURE_SINGLE_HEAD),
    ]
    if any(m.variant in ("lenet-ref", "cnn2l-ref") for m in report.measurements):
        sections.append(
            "Reference architectures are reconstructions with guessed channel widths."
        )
    path = output_dir / REPORT_FILE
    path.write_text("\n\n".join(sections) + "\n")
    report.files.append(path)

    for m in report.flagged:
        logger.warning(
            f"{m.run}: {m.experiment} {m.dataset} {m.variant} deviates {m.deviation:+.2f} "
            "points from the published value"
        )
    return report
