import asyncio
import csv
import logging
import signal
import time
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from deep_prior_nas.arch_space import (
    Action,
    ArchitectureGrammar,
    ArchitectureSpec,
    ConstructionState,
    infer_shapes,
    parse,
    serialize,
)
from deep_prior_nas.config import AppConfig
from deep_prior_nas.datasets import ImageDataset, LoadedDataset, load_dataset
from deep_prior_nas.errors import ArchitectureError, CheckpointError, InvalidReason
from deep_prior_nas.linear_head import evaluate, train_linear
from deep_prior_nas.metrics import SearchMetrics
from deep_prior_nas.prior_engine import (
    DeepPrior,
    EmbeddedDataset,
    EmbeddingCache,
    embed_dataset,
    init_weights,
    save_prior,
    separation_ratio,
)
from deep_prior_nas.q_agent import (
    QTable,
    ReplayRecord,
    epsilon_schedule,
    replay_step,
    sample_architecture,
)
from deep_prior_nas.records import (
    SearchLogEntry,
    append_jsonl,
    read_jsonl,
    write_jsonl,
)

logger = logging.getLogger(__name__)

SEARCH_LOG = "search_log.jsonl"
REPLAY_LOG = "replay_buffer.jsonl"
QTABLE_FILE = "qtable.ckpt"
ROLLING_CSV = "rolling_reward.csv"
TOP_PRIOR = "top_prior.json"

# Independent random streams derived from (global seed, index, stream).
WEIGHT_STREAM = 0
REPLAY_STREAM = 1
ABLATION_STREAM = 2
SAMPLE_STREAM = 3

Trajectory = list[tuple[ConstructionState, Action]]
ArchRecord = ReplayRecord[ConstructionState, Action]


def derive_seed(global_seed: int, index: int, stream: int = WEIGHT_STREAM) -> int:
    return int(np.random.SeedSequence([global_seed, index, stream]).generate_state(1)[0])


@dataclass(frozen=True)
class Evaluation:
    index: int
    spec: ArchitectureSpec
    trajectory: Trajectory
    weight_seed: int
    eps: float
    flat_dim: int
    reward: float
    wall_time: float
    worker: int


def embed_with_config(prior: DeepPrior, ds: ImageDataset, config: AppConfig) -> EmbeddedDataset:
    cache = EmbeddingCache(Path(config.prior.cache_dir)) if config.prior.cache_dir else None
    return embed_dataset(
        prior,
        ds,
        config.prior.embed_batch_size,
        cache=cache,
        memory_budget_mb=config.prior.memory_budget_mb,
    )


def prior_accuracy(
    prior: DeepPrior,
    train: ImageDataset,
    held_out: ImageDataset,
    config: AppConfig,
) -> float:
    """Embed both splits, train a linear head on ``train`` and score ``held_out``."""
    train_emb = embed_with_config(prior, train, config)
    held_emb = embed_with_config(prior, held_out, config)
    clf = train_linear(train_emb.features, train_emb.labels, config.classifier)
    return evaluate(clf, held_emb.features, held_emb.labels)


def _rewards(log: Sequence[SearchLogEntry] | Sequence[float]) -> list[float]:
    return [e.val_accuracy if isinstance(e, SearchLogEntry) else float(e) for e in log]


def moving_average(log: Sequence[SearchLogEntry] | Sequence[float], window: int) -> list[float]:
    """Trailing mean over up to ``window`` most recent rewards at each index."""
    if window < 1:
        raise ValueError("Moving-average window must be at least 1")
    rewards = np.asarray(_rewards(log), dtype=np.float64)
    sums = np.concatenate([[0.0], np.cumsum(rewards)])
    series = []
    for i in range(len(rewards)):
        low = max(0, i + 1 - window)
        series.append(float((sums[i + 1] - sums[low]) / (i + 1 - low)))
    return series


def select_top(log: Sequence[SearchLogEntry], k: int) -> list[SearchLogEntry]:
    """Top-k entries by validation accuracy, ties broken by earlier index."""
    if not log:
        raise ValueError("Search log is empty")
    if k > len(log):
        raise ValueError(f"Cannot select top {k} of {len(log)} entries")
    return sorted(log, key=lambda e: (-e.val_accuracy, e.index))[:k]


def write_rolling_csv(log: Sequence[SearchLogEntry], window: int, path: Path) -> None:
    rolling = moving_average(log, window)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "reward", "rolling_mean", "eps"])
        for entry, mean in zip(log, rolling, strict=True):
            writer.writerow([entry.index, entry.val_accuracy, mean, entry.eps])


def prepare_search_data(
    config: AppConfig, data: LoadedDataset | None = None
) -> tuple[ImageDataset, ImageDataset]:
    """Train/validation splits for reward evaluation, restricted to search classes."""
    ds = data or load_dataset(config.dataset.name, config.dataset.resolved_root())
    if ds.val is None:
        ds = ds.with_validation(config.dataset.val_fraction, config.dataset.seed)
    assert ds.val is not None
    train, val = ds.train, ds.val
    if config.search.classes:
        train = train.with_classes(config.search.classes)
        val = val.with_classes(config.search.classes)
        logger.info(f"Search restricted to classes {sorted(config.search.classes)}")
    return train, val


class SearchDriver:
    """Runs the sample → embed → train → reward → q-update loop."""

    def __init__(
        self,
        config: AppConfig,
        train: ImageDataset,
        val: ImageDataset,
        output_dir: Path,
        metrics: SearchMetrics | None = None,
    ):
        self.config = config
        self.train = train
        self.val = val
        self.output_dir = output_dir
        self.metrics = metrics
        self.grammar = ArchitectureGrammar(
            input_shape=train.sample_shape,
            max_convs=config.agent.max_convs,
            flat_cap=config.prior.flat_cap,
            bucket_edges=tuple(config.agent.bucket_edges),
        )
        self.q = QTable(default=config.agent.q_init)
        self.buffer: list[ArchRecord] = []
        self.log: list[SearchLogEntry] = []
        self.running = False
        self.output_dir.mkdir(parents=True, exist_ok=True)

    @property
    def search_classes(self) -> tuple[int, ...] | None:
        classes = self.config.search.classes
        return tuple(sorted(classes)) if classes else None

    def resume(self) -> None:
        """Restore log, replay buffer and q-table from the output directory."""
        qtable_path = self.output_dir / QTABLE_FILE
        if not qtable_path.exists():
            logger.info(f"No checkpoint in {self.output_dir}, starting fresh")
            return
        self.q = QTable.load(qtable_path)
        applied = self.q.records_applied
        log = [SearchLogEntry.from_dict(d) for d in read_jsonl(self.output_dir / SEARCH_LOG)]
        replay = read_jsonl(self.output_dir / REPLAY_LOG)
        if len(log) < applied or len(replay) < applied:
            raise CheckpointError(
                f"Checkpoint in {self.output_dir} records {applied} architectures "
                f"but the logs hold {len(log)} / {len(replay)}"
            )
        try:
            self.buffer = [ReplayRecord.from_dict(d, self.grammar) for d in replay[:applied]]
        except (ArchitectureError, KeyError, ValueError) as e:
            raise CheckpointError(f"Corrupt replay log in {self.output_dir}: {e}") from e
        self.log = log[:applied]
        if len(log) > applied or len(replay) > applied:
            logger.warning(f"Dropping log lines written after the last checkpoint ({applied})")
            write_jsonl(self.output_dir / SEARCH_LOG, [e.to_dict() for e in self.log])
            write_jsonl(
                self.output_dir / REPLAY_LOG, [r.to_dict(self.grammar) for r in self.buffer]
            )
        logger.info(f"Resumed search at {len(self.log)} architectures")

    def _sample(self, index: int) -> tuple[ArchitectureSpec, Trajectory, float, int]:
        search = self.config.search
        eps = epsilon_schedule(index, search.explore_len, search.decay_every, search.decay_step)
        for attempt in range(search.max_resample):
            rng = np.random.default_rng([search.seed, index, SAMPLE_STREAM, attempt])
            spec, trajectory = sample_architecture(self.q, eps, rng, self.grammar)
            trace = infer_shapes(spec, self.config.prior.flat_cap, self.config.agent.max_convs)
            if isinstance(trace, InvalidReason):
                # Rejected specs never reach the buffer or consume an index.
                logger.warning(f"Rejected sampled architecture ({trace.value}): {spec}")
                if self.metrics:
                    self.metrics.record_rejection(trace.value)
                continue
            return spec, trajectory, eps, trace.flat_dim
        raise ArchitectureError(
            f"No valid architecture after {search.max_resample} samples at index {index}"
        )

    def _evaluate(
        self,
        index: int,
        spec: ArchitectureSpec,
        trajectory: Trajectory,
        eps: float,
        flat_dim: int,
        worker: int,
    ) -> Evaluation:
        started = time.perf_counter()
        weight_seed = derive_seed(self.config.search.seed, index, WEIGHT_STREAM)
        prior = init_weights(spec, weight_seed, self.config.prior.flat_cap)
        reward = prior_accuracy(prior, self.train, self.val, self.config)
        return Evaluation(
            index,
            spec,
            trajectory,
            weight_seed,
            eps,
            flat_dim,
            reward,
            time.perf_counter() - started,
            worker,
        )

    def _apply(self, evaluation: Evaluation) -> None:
        agent = self.config.agent
        record: ArchRecord = ReplayRecord(
            tuple(evaluation.trajectory), evaluation.reward, serialize(evaluation.spec)
        )
        self.buffer.append(record)
        rng = np.random.default_rng([self.config.search.seed, evaluation.index, REPLAY_STREAM])
        replay_step(
            self.q, self.buffer, agent.replay_batch, rng, agent.alpha, agent.gamma, self.grammar
        )

        entry = SearchLogEntry(
            index=evaluation.index,
            spec=record.spec,
            weight_seed=evaluation.weight_seed,
            val_accuracy=evaluation.reward,
            eps=evaluation.eps,
            wall_time=round(evaluation.wall_time, 3),
            flat_dim=evaluation.flat_dim,
            worker=evaluation.worker,
        )
        self.log.append(entry)
        append_jsonl(self.output_dir / REPLAY_LOG, record.to_dict(self.grammar))
        append_jsonl(self.output_dir / SEARCH_LOG, entry.to_dict())

        window = self.config.search.rolling_window
        rolling = float(np.mean([e.val_accuracy for e in self.log[-window:]]))
        if self.metrics:
            self.metrics.record_architecture(entry.val_accuracy, rolling, entry.eps)
        logger.info(
            f"Architecture {entry.index}: reward {entry.val_accuracy:.4f} "
            f"(rolling {rolling:.4f}, eps {entry.eps:.1f}, {entry.wall_time:.1f}s) {entry.spec}"
        )
        if len(self.log) % self.config.search.checkpoint_every == 0:
            self.checkpoint()

    def checkpoint(self) -> None:
        self.q.records_applied = len(self.buffer)
        self.q.save(self.output_dir / QTABLE_FILE)
        window = self.config.search.rolling_window
        write_rolling_csv(self.log, window, self.output_dir / ROLLING_CSV)
        logger.debug(f"Checkpoint written at {len(self.log)} architectures")

    async def run(self) -> list[SearchLogEntry]:
        """Run until ``total_architectures`` are logged or ``stop()`` is called."""
        self.running = True
        search = self.config.search
        next_index = max((e.index for e in self.log), default=-1) + 1
        free_workers = list(range(search.workers))
        pending: dict[asyncio.Task[Evaluation], int] = {}

        logger.info(
            f"Search started at index {next_index} of {search.total_architectures} "
            f"with {search.workers} worker(s)"
        )
        try:
            while True:
                while self.running and next_index < search.total_architectures and free_workers:
                    spec, trajectory, eps, flat_dim = self._sample(next_index)
                    worker = free_workers.pop(0)
                    task = asyncio.create_task(
                        asyncio.to_thread(
                            self._evaluate, next_index, spec, trajectory, eps, flat_dim, worker
                        )
                    )
                    pending[task] = worker
                    next_index += 1
                if not pending:
                    break
                done, _ = await asyncio.wait(pending, return_when=asyncio.FIRST_COMPLETED)
                # Completion order; simultaneous completions by index.
                for task in sorted(done, key=lambda t: t.result().index):
                    free_workers.append(pending.pop(task))
                    self._apply(task.result())
                free_workers.sort()
        except Exception as e:
            logger.exception(f"Search aborted: {e}")
            if pending:
                await asyncio.gather(*pending, return_exceptions=True)
            raise
        finally:
            self.checkpoint()
            self.running = False
            logger.info(f"Search stopped after {len(self.log)} architectures")
        return self.log

    def stop(self) -> None:
        """Stop sampling; in-flight evaluations still complete and are logged."""
        logger.info("Stopping search")
        self.running = False

    def save_top_prior(self) -> DeepPrior:
        best = select_top(self.log, 1)[0]
        prior = init_weights(
            parse(best.spec), best.weight_seed, self.config.prior.flat_cap, self.search_classes
        )
        save_prior(prior, self.output_dir / TOP_PRIOR)
        ratio = separation_ratio(
            embed_with_config(prior, self.val, self.config).features, self.val.labels
        )
        pixel_ratio = separation_ratio(self.val.flattened(), self.val.labels)
        logger.info(
            f"Top prior {best.spec} (reward {best.val_accuracy:.4f}); distance separation "
            f"{ratio:.3f} embedded vs {pixel_ratio:.3f} in pixel space"
        )
        return prior


async def _drive(driver: SearchDriver, handle_signals: bool) -> list[SearchLogEntry]:
    if handle_signals:

        def handle_signal(sig: int, frame: object) -> None:
            logger.info(f"Received signal {sig}, finishing in-flight evaluations...")
            driver.stop()

        signal.signal(signal.SIGINT, handle_signal)
        signal.signal(signal.SIGTERM, handle_signal)
    return await driver.run()


def run_search(
    config: AppConfig,
    output_dir: Path,
    data: LoadedDataset | None = None,
    resume: bool = False,
    metrics: SearchMetrics | None = None,
    handle_signals: bool = False,
) -> tuple[list[SearchLogEntry], list[SearchLogEntry]]:
    """Run (or resume) a search; returns the ranked log and the log in index order."""
    train, val = prepare_search_data(config, data)
    driver = SearchDriver(config, train, val, output_dir, metrics)
    if resume:
        driver.resume()
    log = asyncio.run(_drive(driver, handle_signals))
    if log:
        driver.save_top_prior()
    return select_top(log, len(log)) if log else [], log


@dataclass(frozen=True)
class AblationResult:
    spec: str
    accuracies: tuple[float, ...]
    search_reward: float | None = None

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies))

    @property
    def quartiles(self) -> tuple[float, float]:
        low, high = np.percentile(self.accuracies, [25, 75])
        return float(low), float(high)

    @property
    def spread(self) -> float:
        return float(np.std(self.accuracies))


def reinit_ablation(
    specs: Sequence[ArchitectureSpec],
    repeats: int,
    config: AppConfig,
    train: ImageDataset,
    test: ImageDataset,
    seeds: Sequence[int] | None = None,
    search_rewards: Sequence[float] | None = None,
) -> list[AblationResult]:
    """Test accuracy of each spec across ``repeats`` independent weight draws."""
    if repeats < 2:
        raise ValueError("Re-initialisation ablation needs at least 2 repeats")
    if seeds is not None and len(seeds) != repeats:
        raise ValueError(f"Expected {repeats} seeds, got {len(seeds)}")

    results = []
    for i, spec in enumerate(specs):
        spec_seeds = seeds or [
            derive_seed(config.search.seed, i * repeats + r, ABLATION_STREAM)
            for r in range(repeats)
        ]
        accuracies = []
        for seed in spec_seeds:
            prior = init_weights(spec, seed, config.prior.flat_cap)
            accuracies.append(prior_accuracy(prior, train, test, config))
        result = AblationResult(
            serialize(spec),
            tuple(accuracies),
            search_rewards[i] if search_rewards is not None else None,
        )
        q1, q3 = result.quartiles
        logger.info(
            f"Ablation {i + 1}/{len(specs)}: median {result.median:.4f} "
            f"[{q1:.4f}, {q3:.4f}] {result.spec}"
        )
        results.append(result)
    return results


def sample_ablation_specs(
    log: Sequence[SearchLogEntry], per_segment: int = 6
) -> list[SearchLogEntry]:
    """Lowest, median and top ``per_segment`` entries by reward, ascending."""
    if len(log) < 3 * per_segment:
        raise ValueError(f"Need at least {3 * per_segment} log entries, got {len(log)}")
    ranked = sorted(log, key=lambda e: (e.val_accuracy, e.index))
    middle = len(ranked) // 2 - per_segment // 2
    return (
        ranked[:per_segment]
        + ranked[middle : middle + per_segment]
        + ranked[-per_segment:]
    )


def rank_correlation(results: Sequence[AblationResult]) -> float:
    """Spearman correlation between ablation medians and original search rewards."""
    rewards = [r.search_reward for r in results]
    if any(r is None for r in rewards):
        raise ValueError("Every ablation result needs its search reward")
    correlation = spearmanr([r.median for r in results], rewards)[0]
    return float(correlation)


def write_ablation_csv(results: Sequence[AblationResult], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["spec", "search_reward", "median", "q1", "q3", "min", "max", "std"])
        for r in results:
            q1, q3 = r.quartiles
            writer.writerow(
                [
                    r.spec,
                    r.search_reward,
                    r.median,
                    q1,
                    q3,
                    min(r.accuracies),
                    max(r.accuracies),
                    r.spread,
                ]
            )
