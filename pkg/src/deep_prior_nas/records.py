import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from deep_prior_nas.errors import CheckpointError

MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class SearchLogEntry:
    """One evaluated architecture in ``search_log.jsonl``."""

    index: int
    spec: str
    weight_seed: int
    val_accuracy: float
    eps: float
    wall_time: float
    flat_dim: int
    worker: int = 0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SearchLogEntry":
        """Create SearchLogEntry from a JSON line with type conversion."""
        return cls(
            index=int(data["index"]),
            spec=str(data["spec"]),
            weight_seed=int(data["weight_seed"]),
            val_accuracy=float(data["val_accuracy"]),
            eps=float(data["eps"]),
            wall_time=float(data["wall_time"]),
            flat_dim=int(data["flat_dim"]),
            worker=int(data.get("worker", 0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RunManifest:
    command: str
    argv: list[str]
    config: dict[str, Any]
    version: str
    git_revision: str | None
    seed: int
    started_at: str
    output_dir: str
    finished_at: str | None = None

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        return cls(
            command=str(data["command"]),
            argv=[str(a) for a in data["argv"]],
            config=dict(data["config"]),
            version=str(data["version"]),
            git_revision=data.get("git_revision"),
            seed=int(data["seed"]),
            started_at=str(data["started_at"]),
            output_dir=str(data["output_dir"]),
            finished_at=data.get("finished_at"),
        )

    def save(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, directory: Path) -> "RunManifest":
        path = directory / MANIFEST_FILE
        if not path.exists():
            raise CheckpointError(f"Manifest not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (ValueError, KeyError, TypeError) as e:
            raise CheckpointError(f"Corrupt manifest {path}: {e}") from e


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def append_jsonl(path: Path, record: dict[str, Any]) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def write_jsonl(path: Path, records: list[dict[str, Any]]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
