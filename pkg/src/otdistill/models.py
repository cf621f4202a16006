"""Small trainable classifiers factored as embedding network plus linear head.

Everything runs on numpy: a linear-projection embedding or a one-hidden-layer
tanh MLP, class-center computation (empirical means or normalized head
columns), nearest-class-mean classification, and seeded mini-batch SGD.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .transport import CostMatrix

__all__ = [
    "DegenerateClassError",
    "DegenerateHeadError",
    "TrainingDivergedError",
    "Architecture",
    "LinearEmbedding",
    "MLPEmbedding",
    "LabeledDataset",
    "ClassCenters",
    "Classifier",
    "OptimizerConfig",
    "TrainingTrace",
    "build_classifier",
    "tempered_softmax",
    "empirical_centers",
    "head_weight_centers",
    "ncm_logits",
    "ncm_classify",
    "cost_matrix",
    "train_supervised",
    "sgd_step",
    "minibatch_indices",
]

EMPIRICAL_MEAN = "empirical-mean"
NORMALIZED_HEAD = "normalized-head-weights"


class DegenerateClassError(ValueError):
    """A class has no instances where a center is required."""


class DegenerateHeadError(ValueError):
    """A head column is zero and cannot be normalized."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class Architecture:
    """Shape of a classifier: embedding family plus layer sizes."""

    kind: str  # "linear" | "mlp"
    input_dim: int
    embed_dim: int
    hidden_dim: int | None = None
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "mlp" and not self.hidden_dim:
            raise ValueError("mlp architecture requires hidden_dim")
        if self.kind == "mlp" and self.nonlinearity != "tanh":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")
        if self.input_dim < 1 or self.embed_dim < 1:
            raise ValueError("dimensions must be positive")

    def descriptor(self) -> dict:
        d = {"kind": self.kind, "input_dim": self.input_dim, "embed_dim": self.embed_dim}
        if self.kind == "mlp":
            d["hidden_dim"] = self.hidden_dim
            d["nonlinearity"] = self.nonlinearity
        return d


def _init_matrix(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class LinearEmbedding:
    """Single linear projection of the input into feature space."""

    weight: np.ndarray  # (D, d)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weight

    def forward_cached(self, X):
        return X @ self.weight, (X,)

    def backward(self, cache, d_features):
        (X,) = cache
        return {"weight": X.T @ d_features}

    def parameters(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight}

    def copy(self) -> "LinearEmbedding":
        return LinearEmbedding(self.weight.copy())


@dataclass
class MLPEmbedding:
    """One hidden tanh layer followed by a linear projection."""

    w1: np.ndarray  # (D, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, d)
    b2: np.ndarray  # (d,)

    def forward(self, X: np.ndarray) -> np.ndarray:
        return np.tanh(X @ self.w1 + self.b1) @ self.w2 + self.b2

    def forward_cached(self, X):
        H = np.tanh(X @ self.w1 + self.b1)
        return H @ self.w2 + self.b2, (X, H)

    def backward(self, cache, d_features):
        X, H = cache
        d_pre = (d_features @ self.w2.T) * (1.0 - H * H)
        return {
            "w1": X.T @ d_pre,
            "b1": d_pre.sum(axis=0),
            "w2": H.T @ d_features,
            "b2": d_features.sum(axis=0),
        }

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "MLPEmbedding":
        return MLPEmbedding(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class LabeledDataset:
    """Instances with integer labels indexing an ordered label set."""

    instances: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) indices into label_set
    label_set: tuple[int, ...]

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_set = tuple(int(c) for c in self.label_set)
        if self.instances.ndim != 2:
            raise ValueError(f"instances must be 2-D, got shape {self.instances.shape}")
        if self.labels.shape != (self.instances.shape[0],):
            raise ValueError("labels must be one integer per instance")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.label_set)):
            raise ValueError("labels must index into label_set")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def one_hot(self) -> np.ndarray:
        Y = np.zeros((self.n, self.num_classes))
        Y[np.arange(self.n), self.labels] = 1.0
        return Y


@dataclass(frozen=True)
class ClassCenters:
    """One feature-space center per class, with its provenance."""

    centers: np.ndarray  # (C, d)
    label_set: tuple[int, ...]
    provenance: str

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "label_set", tuple(int(c) for c in self.label_set))
        if centers.ndim != 2 or centers.shape[0] != len(self.label_set):
            raise ValueError(f"centers shape {centers.shape} does not match label set")
        if self.provenance not in (EMPIRICAL_MEAN, NORMALIZED_HEAD):
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class Classifier:
    """Embedding network plus linear head over an ordered label set."""

    architecture: Architecture
    embedding: LinearEmbedding | MLPEmbedding
    head: np.ndarray  # (d, C)
    label_set: tuple[int, ...]
    stored_centers: ClassCenters | None = None

    def __post_init__(self):
        self.label_set = tuple(int(c) for c in self.label_set)
        if self.head.shape != (self.architecture.embed_dim, len(self.label_set)):
            raise ValueError(
                f"head shape {self.head.shape} does not match embed_dim "
                f"{self.architecture.embed_dim} and {len(self.label_set)} classes"
            )

    @property
    def num_classes(self) -> int:
        return len(self.label_set)

    def embed(self, X: np.ndarray) -> np.ndarray:
        return self.embedding.forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.embed(X) @ self.head

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Argmax label indices (into label_set), first index on ties."""
        return np.argmax(self.logits(X), axis=1)

    def accuracy(self, data: LabeledDataset) -> float:
        if data.n == 0:
            return float("nan")
        return float(np.mean(self.predict(data.instances) == data.labels))

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"embedding.{k}": v for k, v in self.embedding.parameters().items()}
        params["head"] = self.head
        return params

    def copy(self) -> "Classifier":
        return Classifier(
            architecture=self.architecture,
            embedding=self.embedding.copy(),
            head=self.head.copy(),
            label_set=self.label_set,
            stored_centers=self.stored_centers,
        )

    def logit_backward(self, cache, features: np.ndarray, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given the gradient w.r.t. the logits."""
        grads = {"head": features.T @ d_logits}
        d_features = d_logits @ self.head.T
        for k, v in self.embedding.backward(cache, d_features).items():
            grads[f"embedding.{k}"] = v
        return grads


def build_classifier(architecture: Architecture, label_set, seed: int) -> Classifier:
    """Fresh classifier with seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""
    rng = np.random.default_rng(seed)
    label_set = tuple(int(c) for c in label_set)
    if architecture.kind == "linear":
        embedding = LinearEmbedding(_init_matrix(rng, architecture.input_dim, (architecture.input_dim, architecture.embed_dim)))
    else:
        h = architecture.hidden_dim
        embedding = MLPEmbedding(
            w1=_init_matrix(rng, architecture.input_dim, (architecture.input_dim, h)),
            b1=_init_matrix(rng, architecture.input_dim, (h,)),
            w2=_init_matrix(rng, h, (h, architecture.embed_dim)),
            b2=_init_matrix(rng, h, (architecture.embed_dim,)),
        )
    head = _init_matrix(rng, architecture.embed_dim, (architecture.embed_dim, len(label_set)))
    return Classifier(architecture=architecture, embedding=embedding, head=head, label_set=label_set)


def tempered_softmax(logits, tau: float) -> np.ndarray:
    """Softmax with temperature tau, computed with max subtraction.

    Accepts a vector or a batch of row vectors; output rows are strictly
    positive and sum to 1.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite entries")
    scaled = z / tau
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def empirical_centers(embedding, data: LabeledDataset) -> ClassCenters:
    """Per-class mean of the embedded instances."""
    features = embedding.forward(data.instances)
    centers = np.empty((data.num_classes, features.shape[1]))
    for idx, label in enumerate(data.label_set):
        mask = data.labels == idx
        if not mask.any():
            raise DegenerateClassError(f"class {label} has no instances; cannot compute its center")
        centers[idx] = features[mask].mean(axis=0)
    return ClassCenters(centers=centers, label_set=data.label_set, provenance=EMPIRICAL_MEAN)


def head_weight_centers(classifier: Classifier) -> ClassCenters:
    """Unit-normalized head columns as approximate class centers."""
    norms = np.linalg.norm(classifier.head, axis=0)
    if np.any(norms == 0):
        dead = [classifier.label_set[i] for i in np.flatnonzero(norms == 0)]
        raise DegenerateHeadError(f"zero head column(s) for class(es) {dead}; cannot normalize")
    centers = (classifier.head / norms).T
    return ClassCenters(centers=centers, label_set=classifier.label_set, provenance=NORMALIZED_HEAD)


def ncm_logits(embedding, centers: ClassCenters, X: np.ndarray) -> np.ndarray:
    """Negative squared distances to each class center, batched."""
    features = embedding.forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    diffs = features[:, None, :] - centers.centers[None, :, :]
    return -np.sum(diffs * diffs, axis=2)


def ncm_classify(embedding, centers: ClassCenters, x) -> int:
    """Label id of the nearest class center; ties go to the lowest index."""
    if len(centers.label_set) == 0:
        raise ValueError("no class centers to classify against")
    scores = ncm_logits(embedding, centers, np.asarray(x, dtype=np.float64)[None, :])
    return centers.label_set[int(np.argmax(scores[0]))]


def cost_matrix(teacher_centers: ClassCenters, student_centers: ClassCenters) -> CostMatrix:
    """Pairwise Euclidean distances between two sets of class centers."""
    a = teacher_centers.centers
    b = student_centers.centers
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"center dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    entries = np.sqrt(np.maximum(sq, 0.0))
    return CostMatrix(entries, teacher_centers.label_set, student_centers.label_set)


@dataclass(frozen=True)
class OptimizerConfig:
    """Mini-batch SGD settings (momentum and weight decay included)."""

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 100
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.2

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for m in self.lr_milestones:
            if epoch >= m:
                lr *= self.lr_decay
        return lr


@dataclass
class TrainingTrace:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.accuracies[-1] if self.accuracies else float("nan")


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """In-place SGD-with-momentum update (decoupled from any model class)."""
    for name, p in params.items():
        g = grads[name] + weight_decay * p
        velocity[name] = momentum * velocity[name] + g
        p -= lr * velocity[name]


def minibatch_indices(rng: np.random.Generator, n: int, batch_size: int):
    """Yield index arrays covering a fresh permutation of range(n)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _cross_entropy_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over the batch and its gradient w.r.t. the logits."""
    probs = tempered_softmax(logits, 1.0)
    n = logits.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(n), labels], 1e-300))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(nll.mean()), grad / n


def train_supervised(
    classifier: Classifier,
    data: LabeledDataset,
    config: OptimizerConfig,
    seed: int = 0,
) -> tuple[Classifier, TrainingTrace]:
    """Minimize mean cross entropy with seeded mini-batch SGD.

    The input classifier is left untouched; a trained copy is returned
    together with per-epoch loss and training accuracy.
    """
    if data.labels.size and data.labels.max() >= classifier.num_classes:
        raise ValueError("dataset labels exceed the classifier's label set")
    model = classifier.copy()
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    trace = TrainingTrace()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        epoch_loss = 0.0
        seen = 0
        for idx in minibatch_indices(rng, data.n, config.batch_size):
            X = data.instances[idx]
            features, cache = model.embedding.forward_cached(X)
            logits = features @ model.head
            loss, d_logits = _cross_entropy_and_grad(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
            grads = model.logit_backward(cache, features, d_logits)
            sgd_step(model.parameters(), grads, velocity, lr, config.momentum, config.weight_decay)
            epoch_loss += loss * len(idx)
            seen += len(idx)
        trace.losses.append(epoch_loss / max(seen, 1))
        trace.accuracies.append(model.accuracy(data))
    return model, trace
