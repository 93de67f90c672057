"""Predictor abstraction and the built-in cheap classifier.

The cheap stage is a multinomial logistic regression over hashed word
n-grams, trained by mini-batch gradient descent on labels produced by a
more expensive oracle predictor. Trained models are immutable; predict is
pure and safe to call concurrently.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, EntitySpan
from .errors import BackendError, TrainingError, ValidationError
from .hashing import DEFAULT_HASH_SEED, fnv1a64

KIND_CLASSIFICATION = "classification"
KIND_ENTITY = "entity-recognition"

# Binary class names for entity-presence oracle labels.
NO_ENTITY = "no-entity"
WITH_ENTITY = "with-entity"

MANIFEST_VERSION = 1
_BATCH_SIZE = 64

DEFAULT_FEATURE_DIM = 2**18
MIN_FEATURE_DIM = 2**10


@dataclass(frozen=True)
class LabelDistribution:
    """Normalized probability mass over a label set.

    Key order of `probs` is the label order; argmax ties break toward the
    earliest label in that order.
    """

    probs: dict[str, float]

    def __post_init__(self):
        if not self.probs:
            raise ValidationError("distribution needs at least one label")
        total = 0.0
        for label, p in self.probs.items():
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"probability out of range for {label!r}: {p}")
            total += p
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"probabilities sum to {total}, expected 1")

    def top_label(self) -> str:
        best_label, best_p = None, -1.0
        for label, p in self.probs.items():
            if p > best_p:
                best_label, best_p = label, p
        return best_label  # type: ignore[return-value]

    def to_json(self) -> dict[str, float]:
        return dict(self.probs)


def one_hot(label: str, label_set: Sequence[str]) -> LabelDistribution:
    if label not in label_set:
        raise ValidationError(f"label {label!r} not in label set")
    return LabelDistribution({l: (1.0 if l == label else 0.0) for l in label_set})


class Predictor(abc.ABC):
    """A cascade stage's model.

    Classification predictors return one LabelDistribution per input text,
    always over exactly `label_set` in its order. Entity-recognition
    predictors return one list of EntitySpan per input, in the coordinates
    of that input text. Implementations must be safe for concurrent calls.
    """

    id: str
    kind: str
    label_set: tuple[str, ...] | None

    @abc.abstractmethod
    def predict_batch(self, texts: Sequence[str]) -> list:
        """One prediction per text, order preserved."""


# ---------------------------------------------------------------------------
# Feature hashing


class SparseVector:
    """L2-normalized sparse feature vector (sorted unique indices)."""

    __slots__ = ("dim", "indices", "values")

    def __init__(self, dim: int, indices: np.ndarray, values: np.ndarray):
        self.dim = dim
        self.indices = indices
        self.values = values

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.values
        return dense

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseVector)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


def _require_power_of_two(dim: int) -> None:
    if dim < 2 or dim & (dim - 1):
        raise ValidationError(f"feature_dim must be a power of two, got {dim}")


def featurize(
    text: str,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    ngram_range: tuple[int, int] = (1, 2),
    hash_seed: int = DEFAULT_HASH_SEED,
) -> SparseVector:
    """Hash lowercased word n-grams into a fixed-size L2-normalized vector.

    Deterministic; empty text maps to the zero vector. Colliding n-grams
    add their counts before normalization.
    """
    _require_power_of_two(feature_dim)
    low, high = ngram_range
    if not (1 <= low <= high <= 5):
        raise ValidationError(f"ngram_range must satisfy 1 <= low <= high <= 5, got {ngram_range}")
    tokens = text.lower().split()
    counts: dict[int, float] = {}
    mask = feature_dim - 1
    for n in range(low, high + 1):
        for i in range(len(tokens) - n + 1):
            gram = " ".join(tokens[i : i + n])
            idx = fnv1a64(gram.encode("utf-8"), hash_seed) & mask
            counts[idx] = counts.get(idx, 0.0) + 1.0
    if not counts:
        return SparseVector(feature_dim, np.empty(0, dtype=np.int64), np.empty(0))
    indices = np.fromiter(sorted(counts), dtype=np.int64, count=len(counts))
    values = np.array([counts[i] for i in indices], dtype=np.float64)
    values /= np.linalg.norm(values)
    return SparseVector(feature_dim, indices, values)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 20
    l2: float = 1e-5
    seed: int = 0
    feature_dim: int = DEFAULT_FEATURE_DIM
    ngram_range: tuple[int, int] = (1, 2)

    def __post_init__(self):
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValidationError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if not (1 <= self.epochs <= 10000):
            raise ValidationError(f"epochs must be in [1, 10000], got {self.epochs}")
        if self.l2 < 0:
            raise ValidationError(f"l2 must be nonnegative, got {self.l2}")
        _require_power_of_two(self.feature_dim)
        if self.feature_dim < MIN_FEATURE_DIM:
            raise ValidationError(f"feature_dim must be >= {MIN_FEATURE_DIM}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_gradient(
    weights: np.ndarray,
    bias: np.ndarray,
    features: Sequence[SparseVector],
    label_idx: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus (l2/2)·||W||², with analytic gradients.

    Used by the training loop batch-by-batch and exposed so the gradient
    can be checked against finite differences.
    """
    n = len(features)
    k = weights.shape[0]
    grad_w = l2 * weights
    grad_b = np.zeros(k)
    loss = 0.0
    for j, vec in enumerate(features):
        logits = weights[:, vec.indices] @ vec.values + bias
        probs = _softmax(logits)
        loss -= np.log(max(probs[label_idx[j]], 1e-300))
        delta = probs.copy()
        delta[label_idx[j]] -= 1.0
        grad_w[:, vec.indices] += np.outer(delta, vec.values) / n
        grad_b += delta / n
    loss = loss / n + 0.5 * l2 * float(np.sum(weights * weights))
    return loss, grad_w, grad_b


def _dataset_loss(weights, bias, features, label_idx, l2) -> float:
    loss, _, _ = loss_and_gradient(weights, bias, features, label_idx, l2)
    return loss


def train(
    examples: Sequence[tuple[str, str]],
    cfg: TrainConfig = TrainConfig(),
    *,
    trained_on: str | None = None,
    model_id: str = "linear-text",
) -> "LinearTextClassifier":
    """Fit a multinomial logistic regression on (text, label) pairs.

    Deterministic given cfg.seed. Requires at least 10 examples spanning at
    least 2 labels; raises TrainingError on a non-finite loss, naming the
    epoch where it appeared.
    """
    if len(examples) < 10:
        raise ValidationError(f"need at least 10 examples, got {len(examples)}")
    label_set = tuple(sorted({label for _, label in examples}))
    if len(label_set) < 2:
        raise ValidationError(f"need at least 2 distinct labels, got {label_set}")

    label_pos = {label: i for i, label in enumerate(label_set)}
    features = [
        featurize(text, cfg.feature_dim, cfg.ngram_range) for text, _ in examples
    ]
    label_idx = np.array([label_pos[label] for _, label in examples], dtype=np.int64)

    k = len(label_set)
    weights = np.zeros((k, cfg.feature_dim))
    bias = np.zeros(k)
    rng = np.random.default_rng(cfg.seed)

    initial_loss = _dataset_loss(weights, bias, features, label_idx, cfg.l2)
    losses = [initial_loss]
    n = len(examples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, _BATCH_SIZE):
            batch = order[start : start + _BATCH_SIZE]
            _, grad_w_cols, grad_b, cols = _batch_gradient(
                weights, bias, features, label_idx, batch
            )
            weights *= 1.0 - cfg.learning_rate * cfg.l2
            weights[:, cols] -= cfg.learning_rate * grad_w_cols
            bias -= cfg.learning_rate * grad_b
        epoch_loss = _dataset_loss(weights, bias, features, label_idx, cfg.l2)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        losses.append(epoch_loss)

    return LinearTextClassifier(
        id=model_id,
        label_set=label_set,
        weights=weights,
        bias=bias,
        feature_dim=cfg.feature_dim,
        ngram_range=cfg.ngram_range,
        hash_seed=DEFAULT_HASH_SEED,
        trained_on=trained_on,
        train_losses=tuple(losses),
    )


def _batch_gradient(weights, bias, features, label_idx, batch):
    """Data-term gradient for one mini-batch, restricted to touched columns."""
    col_union = sorted({int(i) for j in batch for i in features[j].indices})
    cols = np.array(col_union, dtype=np.int64)
    col_pos = {c: p for p, c in enumerate(col_union)}
    b = len(batch)
    x = np.zeros((b, len(cols)))
    for row, j in enumerate(batch):
        vec = features[j]
        for idx, val in zip(vec.indices, vec.values):
            x[row, col_pos[int(idx)]] = val
    logits = x @ weights[:, cols].T + bias
    probs = _softmax(logits)
    delta = probs
    delta[np.arange(b), label_idx[batch]] -= 1.0
    grad_w_cols = delta.T @ x / b
    grad_b = delta.mean(axis=0)
    return None, grad_w_cols, grad_b, cols


class LinearTextClassifier(Predictor):
    """Trained logistic-regression classifier over hashed n-grams."""

    kind = KIND_CLASSIFICATION

    def __init__(
        self,
        id: str,
        label_set: tuple[str, ...],
        weights: np.ndarray,
        bias: np.ndarray,
        feature_dim: int,
        ngram_range: tuple[int, int],
        hash_seed: int = DEFAULT_HASH_SEED,
        trained_on: str | None = None,
        train_losses: tuple[float, ...] = (),
    ):
        if not np.all(np.isfinite(weights)) or not np.all(np.isfinite(bias)):
            raise ValidationError("model weights must be finite")
        _require_power_of_two(feature_dim)
        if feature_dim < MIN_FEATURE_DIM:
            raise ValidationError(f"feature_dim must be >= {MIN_FEATURE_DIM}")
        self.id = id
        self.label_set = tuple(label_set)
        self.weights = weights
        self.bias = bias
        self.feature_dim = feature_dim
        self.ngram_range = tuple(ngram_range)
        self.hash_seed = hash_seed
        self.trained_on = trained_on
        self.train_losses = train_losses

    def predict(self, text: str) -> LabelDistribution:
        vec = featurize(text, self.feature_dim, self.ngram_range, self.hash_seed)
        logits = self.weights[:, vec.indices] @ vec.values + self.bias
        probs = _softmax(logits)
        probs = probs / probs.sum()  # pin the sum to 1 exactly-ish
        return LabelDistribution({l: float(p) for l, p in zip(self.label_set, probs)})

    def predict_batch(self, texts: Sequence[str]) -> list[LabelDistribution]:
        return [self.predict(t) for t in texts]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write manifest.json plus a dense weight blob into a directory."""
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": MANIFEST_VERSION,
            "id": self.id,
            "label_set": list(self.label_set),
            "feature_dim": self.feature_dim,
            "ngram_range": list(self.ngram_range),
            "hash": {"name": "fnv1a64", "seed": self.hash_seed},
            "trained_on": self.trained_on,
            "train_losses": list(self.train_losses),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        np.savez(out / "weights.npz", weights=self.weights, bias=self.bias)

    @classmethod
    def load(cls, path: str | Path) -> "LinearTextClassifier":
        src = Path(path)
        manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
        version = manifest.get("format_version")
        if version != MANIFEST_VERSION:
            raise ValidationError(
                f"unsupported model manifest version {version!r}, expected {MANIFEST_VERSION}"
            )
        if manifest.get("hash", {}).get("name") != "fnv1a64":
            raise ValidationError("model was built with an unknown feature hash")
        blob = np.load(src / "weights.npz")
        return cls(
            id=manifest["id"],
            label_set=tuple(manifest["label_set"]),
            weights=blob["weights"],
            bias=blob["bias"],
            feature_dim=int(manifest["feature_dim"]),
            ngram_range=tuple(manifest["ngram_range"]),
            hash_seed=int(manifest["hash"]["seed"]),
            trained_on=manifest.get("trained_on"),
            train_losses=tuple(manifest.get("train_losses", ())),
        )


# ---------------------------------------------------------------------------
# Oracle labeling


def oracle_label(
    backend: Predictor,
    docs: Sequence[Document],
    batch_size: int = 32,
) -> list[tuple[str, str]]:
    """Label documents with a stronger predictor's output.

    Classification backends contribute their argmax label; entity backends
    are binarized to with-entity/no-entity. Aborts on the first backend
    failure, naming the failing document: no partial output is dropped
    silently.
    """
    out: list[tuple[str, str]] = []
    for start in range(0, len(docs), batch_size):
        chunk = docs[start : start + batch_size]
        try:
            preds = backend.predict_batch([d.text for d in chunk])
        except Exception as exc:
            raise BackendError(
                f"oracle backend {backend.id!r} failed: {exc}", doc_id=chunk[0].id
            ) from exc
        for doc, pred in zip(chunk, preds):
            if backend.kind == KIND_CLASSIFICATION:
                out.append((doc.id, pred.top_label()))
            else:
                spans: Sequence[EntitySpan] = pred
                out.append((doc.id, WITH_ENTITY if len(spans) else NO_ENTITY))
    return out
