import logging
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import numpy.typing as npt

from deep_prior_nas.config import TrainConfig
from deep_prior_nas.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PREDICT_CHUNK = 4096

Array = npt.NDArray[np.floating]
LabelArray = npt.NDArray[np.integer]


@dataclass
class AdamState:
    m_weights: Array
    v_weights: Array
    m_bias: Array
    v_bias: Array
    step: int = 0

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "AdamState":
        return cls(
            m_weights=np.zeros((num_classes, dim), dtype=np.float32),
            v_weights=np.zeros((num_classes, dim), dtype=np.float32),
            m_bias=np.zeros(num_classes, dtype=np.float32),
            v_bias=np.zeros(num_classes, dtype=np.float32),
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.m_weights.copy(),
            self.v_weights.copy(),
            self.m_bias.copy(),
            self.v_bias.copy(),
            self.step,
        )


@dataclass
class LinearClassifier:
    """Softmax linear classifier; row i of ``weights`` scores ``class_ids[i]``."""

    weights: Array
    bias: Array
    class_ids: tuple[int, ...]
    adam: AdamState | None = None
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, class_ids: Iterable[int], dim: int) -> "LinearClassifier":
        ids = tuple(int(c) for c in class_ids)
        return cls(
            weights=np.zeros((len(ids), dim), dtype=np.float32),
            bias=np.zeros(len(ids), dtype=np.float32),
            class_ids=ids,
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def copy(self) -> "LinearClassifier":
        return replace(
            self,
            weights=self.weights.copy(),
            bias=self.bias.copy(),
            adam=self.adam.copy() if self.adam else None,
            loss_history=list(self.loss_history),
        )

    def logits(self, features: Array) -> Array:
        return np.asarray(features) @ self.weights.T + self.bias

    def predict(self, features: Array) -> npt.NDArray[np.int64]:
        """Predicted class ids; ties go to the lowest class id."""
        order = np.argsort(self.class_ids, kind="stable")
        ids = np.asarray(self.class_ids, dtype=np.int64)[order]
        predictions = []
        for start in range(0, len(features), PREDICT_CHUNK):
            scores = self.logits(features[start : start + PREDICT_CHUNK])[:, order]
            predictions.append(ids[np.argmax(scores, axis=1)])
        if not predictions:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(predictions)


def softmax_cross_entropy(
    weights: Array, bias: Array, features: Array, rows: LabelArray
) -> tuple[float, Array, Array]:
    """Mean cross-entropy and its gradients w.r.t. weights and bias.

    ``rows`` are target row indices into ``weights``. Works in the dtype of
    the inputs.
    """
    n = len(rows)
    logits = features @ weights.T + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = -float(np.mean(np.log(probs[np.arange(n), rows])))
    grad = probs
    grad[np.arange(n), rows] -= 1
    grad /= n
    return loss, grad.T @ features, grad.sum(axis=0)


def _row_indices(clf: LinearClassifier, labels: LabelArray) -> npt.NDArray[np.int64]:
    lookup = {c: i for i, c in enumerate(clf.class_ids)}
    unknown = set(np.unique(labels).tolist()) - set(lookup)
    if unknown:
        raise ValueError(f"Labels {sorted(unknown)} have no classifier row")
    return np.array([lookup[int(y)] for y in labels], dtype=np.int64)


def _adam_update(
    param: Array, grad: Array, m: Array, v: Array, step: int, cfg: TrainConfig
) -> None:
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * grad**2
    m_hat = m / (1 - cfg.beta1**step)
    v_hat = v / (1 - cfg.beta2**step)
    param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def train_linear(
    features: Array,
    labels: LabelArray,
    cfg: TrainConfig,
    init: LinearClassifier | None = None,
) -> LinearClassifier:
    """Mini-batch Adam on mean softmax cross-entropy; returns final-epoch parameters.

    ``init`` is never mutated. Without it a zero classifier over the sorted
    label set is trained.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("Cannot train on an empty dataset")
    dim = int(features.shape[1])
    if init is None:
        clf = LinearClassifier.fresh(np.unique(labels).tolist(), dim)
    else:
        clf = init.copy()
    if clf.dim != dim:
        raise ValueError(f"Feature dimension {dim} does not match classifier {clf.dim}")

    rows = _row_indices(clf, labels)
    adam = clf.adam or AdamState.zeros(clf.num_classes, dim)
    batch_size = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = np.asarray(features[idx], dtype=np.float32)
            loss, grad_w, grad_b = softmax_cross_entropy(
                clf.weights, clf.bias, batch, rows[idx]
            )
            adam.step += 1
            _adam_update(clf.weights, grad_w, adam.m_weights, adam.v_weights, adam.step, cfg)
            _adam_update(clf.bias, grad_b, adam.m_bias, adam.v_bias, adam.step, cfg)
            epoch_loss += loss * len(idx)
        clf.loss_history.append(epoch_loss / n)
        logger.debug(f"Epoch {epoch + 1}/{cfg.epochs}: loss {epoch_loss / n:.4f}")

    clf.adam = adam
    return clf


def evaluate(clf: LinearClassifier, features: Array, labels: LabelArray) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(clf.predict(features) == np.asarray(labels)))


def grow_classes(clf: LinearClassifier, new_class_ids: Iterable[int]) -> LinearClassifier:
    """Append zero rows for new classes; existing rows and optimiser state are kept."""
    new_ids = tuple(int(c) for c in new_class_ids)
    duplicates = set(new_ids) & set(clf.class_ids)
    if duplicates or len(set(new_ids)) != len(new_ids):
        raise ValueError(f"Duplicate class ids in growth: {sorted(duplicates) or new_ids}")

    grown = clf.copy()
    if not new_ids:
        return grown
    extra = len(new_ids)
    grown.weights = np.vstack([clf.weights, np.zeros((extra, clf.dim), dtype=clf.weights.dtype)])
    grown.bias = np.concatenate([clf.bias, np.zeros(extra, dtype=clf.bias.dtype)])
    grown.class_ids = clf.class_ids + new_ids
    if clf.adam is not None:
        zeros = AdamState.zeros(extra, clf.dim)
        grown.adam = AdamState(
            np.vstack([clf.adam.m_weights, zeros.m_weights]),
            np.vstack([clf.adam.v_weights, zeros.v_weights]),
            np.concatenate([clf.adam.m_bias, zeros.m_bias]),
            np.concatenate([clf.adam.v_bias, zeros.v_bias]),
            clf.adam.step,
        )
    return grown


def save_classifier(clf: LinearClassifier, path: Path) -> None:
    np.savez(
        path,
        format_version=CHECKPOINT_VERSION,
        weights=clf.weights,
        bias=clf.bias,
        class_ids=np.asarray(clf.class_ids, dtype=np.int64),
    )


def load_classifier(path: Path) -> LinearClassifier:
    try:
        with np.load(path) as blob:
            version = int(blob["format_version"])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"Unsupported classifier checkpoint version {version}")
            weights, bias = blob["weights"], blob["bias"]
            class_ids = tuple(int(c) for c in blob["class_ids"])
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"Cannot load classifier checkpoint {path}: {e}") from e
    if weights.shape[0] != len(class_ids) or len(bias) != len(class_ids):
        raise CheckpointError(f"Classifier checkpoint {path} has inconsistent shapes")
    return LinearClassifier(weights, bias, class_ids)
