"""Tabular Q-learning over construction grammars with epsilon-greedy sampling.

Rewards arrive only on the terminating action; earlier steps bootstrap from
the best successor value.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Generic, Protocol, TypeVar

import numpy as np

from deep_prior_nas.arch_space import (
    Action,
    ArchitectureGrammar,
    ArchitectureSpec,
    ConstructionState,
)
from deep_prior_nas.errors import CheckpointError

logger = logging.getLogger(__name__)

QTABLE_HEADER = "# qtable v1"

S = TypeVar("S")
A = TypeVar("A")


class Grammar(Protocol[S, A]):
    def start(self) -> S: ...

    def actions(self, state: S) -> Sequence[A]: ...

    def step(self, state: S, action: A) -> S: ...

    def is_terminal(self, action: A) -> bool: ...

    def state_key(self, state: S) -> str: ...

    def action_key(self, action: A) -> str: ...

    def parse_action(self, text: str) -> A: ...


@dataclass
class QTable:
    default: float = 0.5
    values: dict[str, dict[str, float]] = field(default_factory=dict)
    # Number of search records folded into the table, for checkpoint consistency.
    records_applied: int = 0

    def get(self, state_key: str, action_key: str) -> float:
        return self.values.get(state_key, {}).get(action_key, self.default)

    def set(self, state_key: str, action_key: str, value: float) -> None:
        if not math.isfinite(value):
            raise ValueError(f"Non-finite q-value for ({state_key}, {action_key})")
        self.values.setdefault(state_key, {})[action_key] = value

    def __len__(self) -> int:
        return sum(len(actions) for actions in self.values.values())

    def save(self, path: Path) -> None:
        lines = [f"{QTABLE_HEADER} default={self.default!r} records={self.records_applied}"]
        for state_key in sorted(self.values):
            for action_key, value in sorted(self.values[state_key].items()):
                lines.append(f"{state_key}\t{action_key}\t{value!r}")
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "QTable":
        try:
            header, *rows = path.read_text().splitlines()
            if not header.startswith(QTABLE_HEADER):
                raise ValueError(f"bad header '{header}'")
            meta = dict(item.split("=", 1) for item in header.split()[3:])
            table = cls(default=float(meta["default"]), records_applied=int(meta["records"]))
            for row in rows:
                state_key, action_key, value = row.split("\t")
                table.set(state_key, action_key, float(value))
        except (OSError, ValueError, KeyError) as e:
            raise CheckpointError(f"Cannot load q-table {path}: {e}") from e
        return table


@dataclass(frozen=True)
class ReplayRecord(Generic[S, A]):
    """A finished trajectory (ending in a terminal action) and its reward."""

    trajectory: tuple[tuple[S, A], ...]
    reward: float
    spec: str

    def to_dict(self, grammar: Grammar[S, A]) -> dict[str, Any]:
        return {
            "spec": self.spec,
            "reward": self.reward,
            "trajectory": [grammar.action_key(a) for _, a in self.trajectory],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], grammar: Grammar[S, A]) -> "ReplayRecord[S, A]":
        state = grammar.start()
        trajectory = []
        for text in data["trajectory"]:
            action = grammar.parse_action(str(text))
            trajectory.append((state, action))
            state = grammar.step(state, action)
        return cls(tuple(trajectory), float(data["reward"]), str(data["spec"]))


def epsilon_schedule(
    index: int, explore_len: int = 1500, decay_every: int = 100, decay_step: float = 0.1
) -> float:
    """Epsilon of 1 during exploration, then one decrement per ``decay_every``."""
    if index < 0:
        raise ValueError("Architecture index must be non-negative")
    if index < explore_len:
        return 1.0
    decrements = 1 + (index - explore_len) // decay_every
    return max(0.0, round(1.0 - decay_step * decrements, 12))


def best_value(q: QTable, grammar: Grammar[S, A], state: S) -> float:
    key = grammar.state_key(state)
    return max(q.get(key, grammar.action_key(a)) for a in grammar.actions(state))


def choose_action(
    q: QTable, grammar: Grammar[S, A], state: S, eps: float, rng: np.random.Generator
) -> A:
    legal = grammar.actions(state)
    if rng.random() < eps:
        return legal[rng.integers(len(legal))]
    key = grammar.state_key(state)
    values = np.array([q.get(key, grammar.action_key(a)) for a in legal])
    tied = np.flatnonzero(values == values.max())
    return legal[tied[rng.integers(len(tied))]]


def sample_trajectory(
    q: QTable, grammar: Grammar[S, A], eps: float, rng: np.random.Generator
) -> list[tuple[S, A]]:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"Epsilon must lie in [0, 1], got {eps}")
    state = grammar.start()
    trajectory = []
    while True:
        action = choose_action(q, grammar, state, eps, rng)
        trajectory.append((state, action))
        if grammar.is_terminal(action):
            return trajectory
        state = grammar.step(state, action)


def sample_architecture(
    q: QTable,
    eps: float,
    rng: np.random.Generator,
    grammar: ArchitectureGrammar | None = None,
) -> tuple[ArchitectureSpec, list[tuple[ConstructionState, Action]]]:
    grammar = grammar or ArchitectureGrammar()
    trajectory = sample_trajectory(q, grammar, eps, rng)
    return grammar.build(trajectory), trajectory


def bellman_update(
    q: QTable,
    rec: ReplayRecord[S, A],
    alpha: float,
    gamma: float,
    grammar: Grammar[S, A],
) -> QTable:
    """Update q in place along the trajectory, last step first, and return it."""
    last = len(rec.trajectory) - 1
    for i in range(last, -1, -1):
        state, action = rec.trajectory[i]
        if i == last:
            target = rec.reward
        else:
            target = gamma * best_value(q, grammar, rec.trajectory[i + 1][0])
        s_key, a_key = grammar.state_key(state), grammar.action_key(action)
        q.set(s_key, a_key, (1 - alpha) * q.get(s_key, a_key) + alpha * target)
    return q


def replay_step(
    q: QTable,
    buffer: Sequence[ReplayRecord[S, A]],
    batch: int,
    rng: np.random.Generator,
    alpha: float,
    gamma: float,
    grammar: Grammar[S, A],
) -> QTable:
    """Replay the newest record, then ``batch`` uniform draws of older records."""
    if not buffer:
        raise ValueError("Replay buffer is empty")
    bellman_update(q, buffer[-1], alpha, gamma, grammar)
    pool = buffer[:-1] or buffer
    for i in rng.integers(len(pool), size=batch):
        bellman_update(q, pool[int(i)], alpha, gamma, grammar)
    logger.debug(f"Replayed {batch + 1} records, q-table holds {len(q)} entries")
    return q
