"""Class-incremental learning on a frozen deep prior.

Multi-head runs train one independent classifier per task. Single-head runs
grow one classifier and rehearse a core set of stored embeddings.
"""

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

from deep_prior_nas.config import ContinualConfig, TrainConfig
from deep_prior_nas.datasets import (
    FloatArray,
    IntArray,
    LoadedDataset,
    TaskStream,
    make_task_stream,
    parse_increments,
)
from deep_prior_nas.errors import ConfigError, ContinualError
from deep_prior_nas.linear_head import (
    LinearClassifier,
    evaluate,
    grow_classes,
    train_linear,
)
from deep_prior_nas.metrics import SearchMetrics
from deep_prior_nas.prior_engine import DeepPrior, EmbeddedDataset, embed_dataset

logger = logging.getLogger(__name__)

RESULTS_FILE = "continual_results.csv"
CORE_POLICIES = ("total", "per-task", "all")


def class_quotas(classes: Sequence[int], budget: int) -> dict[int, int]:
    """Split ``budget`` evenly over ``classes``; the remainder goes to the lowest ids."""
    ordered = sorted(classes)
    base, remainder = divmod(budget, len(ordered))
    return {c: base + (1 if i < remainder else 0) for i, c in enumerate(ordered)}


def _uniform_pick(
    labels: IntArray, quotas: dict[int, int], rng: np.random.Generator
) -> npt.NDArray[np.int64]:
    picked = []
    for cls, quota in sorted(quotas.items()):
        idx = np.flatnonzero(labels == cls)
        if len(idx) > quota:
            idx = np.sort(rng.choice(idx, size=quota, replace=False))
        picked.append(idx)
    if not picked:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(picked))


@dataclass
class CoreSet:
    """Rehearsal memory of embedded training samples.

    ``total`` keeps at most ``size`` entries with equal per-class quotas,
    ``per-task`` stores ``size`` new entries for every finished task and
    ``all`` keeps everything (the accumulation baseline).
    """

    policy: str = "total"
    size: int = 40
    features: FloatArray | None = None
    labels: IntArray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.policy not in CORE_POLICIES:
            raise ValueError(f"Unknown core policy: {self.policy}")
        if self.size < 0:
            raise ValueError("Core set size must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    def check_capacity(self, task_classes: Sequence[Sequence[int]]) -> None:
        """Raise before training when the budget cannot cover the stream's classes."""
        if self.policy == "per-task":
            widest = max((len(t) for t in task_classes), default=0)
            if self.size < widest:
                raise ContinualError(
                    f"Core size {self.size} per task cannot hold one entry for each of "
                    f"{widest} classes"
                )
        elif self.policy == "total":
            total = len({c for t in task_classes for c in t})
            if self.size < total:
                raise ContinualError(
                    f"Core budget {self.size} is smaller than the {total} seen classes"
                )

    def class_counts(self) -> dict[int, int]:
        classes, counts = np.unique(self.labels, return_counts=True)
        return {int(c): int(n) for c, n in zip(classes, counts, strict=True)}

    def add_task(
        self, features: FloatArray, labels: IntArray, rng: np.random.Generator
    ) -> None:
        task_classes = [int(c) for c in np.unique(labels)]
        if self.policy == "all":
            self._extend(features, labels)
            return

        if self.policy == "per-task":
            if self.size < len(task_classes):
                raise ContinualError(
                    f"Core size {self.size} per task cannot hold one entry for each of "
                    f"{len(task_classes)} classes"
                )
            pick = _uniform_pick(labels, class_quotas(task_classes, self.size), rng)
            self._extend(features[pick], labels[pick])
            return

        seen = sorted(set(self.class_counts()) | set(task_classes))
        if self.size < len(seen):
            raise ContinualError(
                f"Core budget {self.size} is smaller than the {len(seen)} seen classes"
            )
        quotas = class_quotas(seen, self.size)
        if self.features is not None and len(self):
            keep = _uniform_pick(self.labels, quotas, rng)
            self.features, self.labels = self.features[keep], self.labels[keep]
        pick = _uniform_pick(labels, {c: quotas[c] for c in task_classes}, rng)
        self._extend(features[pick], labels[pick])

    def _extend(self, features: FloatArray, labels: IntArray) -> None:
        if self.features is None:
            self.features = np.asarray(features, dtype=np.float32)
        else:
            self.features = np.concatenate([self.features, features])
        self.labels = np.concatenate([self.labels, labels.astype(np.int64)])


@dataclass(frozen=True)
class IncrementResult:
    increment: int
    seen_classes: tuple[int, ...]
    accuracy: float
    core_size: int = 0


@dataclass(frozen=True)
class ContinualResult:
    scenario: str
    rows: tuple[IncrementResult, ...]
    core_policy: str | None = None
    core_budget: int | None = None
    # Row t holds every head's accuracy after task t; multi-head only.
    accuracy_matrix: FloatArray | None = None

    @property
    def final_accuracy(self) -> float:
        """Average over task heads (multi-head) or accuracy on all classes."""
        if self.accuracy_matrix is not None:
            return float(np.mean(self.accuracy_matrix[-1]))
        return self.rows[-1].accuracy

    @property
    def label(self) -> str:
        if self.core_policy in (None, "all"):
            return self.scenario
        return f"{self.scenario} core {self.core_policy}:{self.core_budget}"


def _check_prior_classes(prior: DeepPrior, stream: TaskStream) -> None:
    first = tuple(stream.task_classes(0))
    if prior.search_classes is None:
        logger.warning("Prior carries no search-class metadata; cannot check it saw only task 0")
    elif tuple(sorted(prior.search_classes)) != first:
        logger.warning(
            f"Prior was searched on classes {list(prior.search_classes)}, "
            f"not the first task {list(first)}"
        )


def _embed_stream(
    prior: DeepPrior, stream: TaskStream, batch_size: int
) -> tuple[EmbeddedDataset, EmbeddedDataset]:
    train = embed_dataset(prior, stream.train, batch_size)
    test = embed_dataset(prior, stream.test, batch_size)
    logger.info(f"Embedded {len(train)} train / {len(test)} test samples into {train.dim} dims")
    return train, test


def run_multi_head(
    prior: DeepPrior,
    stream: TaskStream,
    cfg: TrainConfig,
    batch_size: int = 256,
    metrics: SearchMetrics | None = None,
) -> ContinualResult:
    """One independent head per task, each evaluated on its own task's test set."""
    _check_prior_classes(prior, stream)
    train, test = _embed_stream(prior, stream, batch_size)
    task_tests = [test.with_classes(stream.task_classes(t)) for t in range(len(stream))]

    heads: list[LinearClassifier] = []
    matrix = np.full((len(stream), len(stream)), np.nan)
    rows = []
    for t in range(len(stream)):
        task = train.with_classes(stream.task_classes(t))
        heads.append(train_linear(task.features, task.labels, cfg))
        for s in range(t + 1):
            matrix[t, s] = evaluate(heads[s], task_tests[s].features, task_tests[s].labels)
        rows.append(IncrementResult(t, tuple(stream.seen_classes(t)), float(matrix[t, t])))
        logger.info(
            f"Multi-head task {t} {stream.task_classes(t)}: accuracy {matrix[t, t]:.4f}, "
            f"average so far {np.mean(matrix[t, : t + 1]):.4f}"
        )
        if metrics:
            metrics.record_increment("multi-head", float(matrix[t, t]))

    return ContinualResult("multi-head", tuple(rows), accuracy_matrix=matrix)


def _run_growing_head(
    scenario: str,
    prior: DeepPrior,
    stream: TaskStream,
    cfg: TrainConfig,
    core: CoreSet,
    seed: int,
    batch_size: int,
    metrics: SearchMetrics | None,
) -> ContinualResult:
    _check_prior_classes(prior, stream)
    core.check_capacity([stream.task_classes(t) for t in range(len(stream))])
    train, test = _embed_stream(prior, stream, batch_size)
    rng = np.random.default_rng(seed)

    clf: LinearClassifier | None = None
    rows = []
    for t in range(len(stream)):
        new_ids = stream.task_classes(t)
        task = train.with_classes(new_ids)
        if clf is None:
            clf = LinearClassifier.fresh(new_ids, task.dim)
        else:
            clf = grow_classes(clf, new_ids)

        # Interleave: train_linear reshuffles the concatenation every epoch.
        features, labels = task.features, task.labels
        if core.features is not None and len(core):
            features = np.concatenate([features, core.features])
            labels = np.concatenate([labels, core.labels])
        clf = train_linear(features, labels, cfg, init=clf)
        core.add_task(task.features, task.labels, rng)

        seen = stream.seen_classes(t)
        seen_test = test.with_classes(seen)
        accuracy = evaluate(clf, seen_test.features, seen_test.labels)
        rows.append(IncrementResult(t, tuple(seen), accuracy, len(core)))
        logger.info(
            f"{scenario} increment {t} +{new_ids}: accuracy {accuracy:.4f} on "
            f"{len(seen)} classes, core holds {len(core)}"
        )
        if metrics:
            metrics.record_increment(scenario, accuracy)

    return ContinualResult(scenario, tuple(rows), core.policy, core.size)


def run_single_head(
    prior: DeepPrior,
    stream: TaskStream,
    cfg: TrainConfig,
    core_cfg: ContinualConfig,
    batch_size: int = 256,
    metrics: SearchMetrics | None = None,
) -> ContinualResult:
    core = CoreSet(core_cfg.core_policy, core_cfg.core_size)
    return _run_growing_head(
        "single-head", prior, stream, cfg, core, core_cfg.seed, batch_size, metrics
    )


def run_accumulation_baseline(
    prior: DeepPrior,
    stream: TaskStream,
    cfg: TrainConfig,
    batch_size: int = 256,
    metrics: SearchMetrics | None = None,
) -> ContinualResult:
    """Single-head training that rehearses every embedding seen so far."""
    return _run_growing_head(
        "accumulate", prior, stream, cfg, CoreSet("all"), 0, batch_size, metrics
    )


def parse_core(text: str) -> tuple[str, int]:
    """``"40"`` is a total budget, ``"per-task:10"`` a per-task count."""
    policy, _, size = text.rpartition(":")
    try:
        return policy or "total", int(size)
    except ValueError as e:
        raise ValueError(f"Invalid core option '{text}'") from e


def run_continual(
    prior: DeepPrior,
    data: LoadedDataset,
    cfg: TrainConfig,
    continual: ContinualConfig,
    batch_size: int = 256,
    metrics: SearchMetrics | None = None,
) -> ContinualResult:
    try:
        stream = make_task_stream(data, parse_increments(continual.increments))
    except ValueError as e:
        raise ConfigError(f"Invalid increments '{continual.increments}': {e}") from e
    logger.info(
        f"Continual {continual.mode} over {len(stream)} increments "
        f"{[stream.task_classes(t) for t in range(len(stream))]}"
    )
    if continual.mode == "multi-head":
        return run_multi_head(prior, stream, cfg, batch_size, metrics)
    if continual.mode == "accumulate":
        return run_accumulation_baseline(prior, stream, cfg, batch_size, metrics)
    return run_single_head(prior, stream, cfg, continual, batch_size, metrics)


def write_results_csv(result: ContinualResult, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["increment", "seen_classes", "accuracy", "core_size"])
        for row in result.rows:
            seen = " ".join(str(c) for c in row.seen_classes)
            writer.writerow([row.increment, seen, row.accuracy, row.core_size])


def read_results_csv(path: Path) -> list[IncrementResult]:
    with open(path, newline="") as f:
        return [
            IncrementResult(
                int(row["increment"]),
                tuple(int(c) for c in row["seen_classes"].split()),
                float(row["accuracy"]),
                int(row["core_size"]),
            )
            for row in csv.DictReader(f)
        ]
