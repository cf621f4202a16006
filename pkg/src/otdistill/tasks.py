"""Synthetic class pools and the sliding-window task protocols.

A pool is a set of Gaussian class prototypes with a seeded random class
order; windows over that order define related-but-distinct tasks with an
exactly computable class-overlap ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import LabeledDataset

__all__ = [
    "ClassPool",
    "TaskSpec",
    "WindowPair",
    "make_pool",
    "sliding_windows",
    "double_sliding_windows",
    "overlap_ratio",
    "sample_dataset",
    "DEFAULT_POOL_CLASSES",
    "DEFAULT_INPUT_DIM",
    "DEFAULT_SPREAD",
    "DEFAULT_COVARIANCE",
    "DEFAULT_WINDOW",
    "DEFAULT_STEP",
    "DEFAULT_TRAIN_PER_CLASS",
    "DEFAULT_TEST_PER_CLASS",
]

DEFAULT_POOL_CLASSES = 100
DEFAULT_INPUT_DIM = 16
DEFAULT_SPREAD = 5.0
DEFAULT_COVARIANCE = 1.0
DEFAULT_WINDOW = 20
DEFAULT_STEP = 5
DEFAULT_TRAIN_PER_CLASS = 50
DEFAULT_TEST_PER_CLASS = 50


@dataclass(frozen=True)
class ClassPool:
    """Global class universe: one prototype per class plus a window order."""

    prototypes: np.ndarray  # (P, D)
    covariance_scale: float
    class_order: tuple[int, ...]  # seeded permutation the window protocols slide over
    spread: float
    seed: int

    def __post_init__(self):
        prototypes = np.asarray(self.prototypes, dtype=np.float64)
        object.__setattr__(self, "prototypes", prototypes)
        object.__setattr__(self, "class_order", tuple(int(c) for c in self.class_order))
        if prototypes.ndim != 2:
            raise ValueError("prototypes must be a (P, D) matrix")
        if sorted(self.class_order) != list(range(prototypes.shape[0])):
            raise ValueError("class_order must be a permutation of range(P)")
        if self.covariance_scale < 0:
            raise ValueError("covariance_scale must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def input_dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class TaskSpec:
    """A window's label set plus sampling sizes and seed."""

    label_set: tuple[int, ...]
    instances_per_class_train: int
    instances_per_class_test: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "label_set", tuple(int(c) for c in self.label_set))
        if len(set(self.label_set)) != len(self.label_set):
            raise ValueError("label_set entries must be unique")
        if self.instances_per_class_train < 0 or self.instances_per_class_test < 0:
            raise ValueError("instance counts must be nonnegative")


@dataclass(frozen=True)
class WindowPair:
    teacher_labels: tuple[int, ...]
    student_labels: tuple[int, ...]
    overlap: float


def make_pool(
    num_classes: int = DEFAULT_POOL_CLASSES,
    input_dim: int = DEFAULT_INPUT_DIM,
    spread: float = DEFAULT_SPREAD,
    covariance_scale: float = DEFAULT_COVARIANCE,
    seed: int = 0,
) -> ClassPool:
    """Draw class prototypes i.i.d. from N(0, spread^2 I).

    Euclidean distance between prototypes is the pool's ground-truth
    semantic proximity; the class order used by the window protocols is
    drawn from the same seeded generator and persisted with the pool.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if input_dim < 1:
        raise ValueError(f"input_dim must be positive, got {input_dim}")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(0.0, spread, size=(num_classes, input_dim))
    order = tuple(int(c) for c in rng.permutation(num_classes))
    return ClassPool(
        prototypes=prototypes,
        covariance_scale=covariance_scale,
        class_order=order,
        spread=spread,
        seed=seed,
    )


def overlap_ratio(a, b) -> float:
    """|A intersect B| / |A|; the window protocols use equal-size windows."""
    a = tuple(a)
    return len(set(a) & set(b)) / len(a)


def sliding_windows(pool: ClassPool, window_size: int, step: int) -> list[tuple[int, ...]]:
    """Window label sets over the pool's class order.

    The first window starts at offset 0 and advances by ``step`` until the
    last full window fits.
    """
    if window_size > pool.num_classes:
        raise ValueError(f"window_size {window_size} exceeds pool size {pool.num_classes}")
    if window_size < 1 or step < 1:
        raise ValueError("window_size and step must be positive")
    windows = []
    offset = 0
    while offset + window_size <= pool.num_classes:
        windows.append(tuple(pool.class_order[offset : offset + window_size]))
        offset += step
    return windows


def double_sliding_windows(pool: ClassPool, window_size: int, step: int) -> list[WindowPair]:
    """Cartesian product of teacher and student windows with overlap ratios."""
    windows = sliding_windows(pool, window_size, step)
    return [
        WindowPair(teacher_labels=t, student_labels=s, overlap=overlap_ratio(t, s))
        for t in windows
        for s in windows
    ]


def sample_dataset(pool: ClassPool, spec: TaskSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Draw train and test sets for a task from the pool's Gaussians.

    Instances for class c come from N(prototype_c, covariance_scale * I).
    Train and test use generators spawned from disjoint derived seeds, so
    the two splits never share draws.  Labels are re-indexed to the spec's
    ordered label set; the global class ids survive in ``label_set``.
    """
    for c in spec.label_set:
        if not (0 <= c < pool.num_classes):
            raise ValueError(f"label {c} is not in the pool")
    train_ss, test_ss = np.random.SeedSequence(spec.seed).spawn(2)
    scale = np.sqrt(pool.covariance_scale)

    def draw(ss, per_class):
        rng = np.random.default_rng(ss)
        xs, ys = [], []
        for idx, c in enumerate(spec.label_set):
            xs.append(rng.normal(pool.prototypes[c], scale, size=(per_class, pool.input_dim)))
            ys.append(np.full(per_class, idx, dtype=np.int64))
        if per_class == 0:
            return LabeledDataset(
                np.empty((0, pool.input_dim)), np.empty(0, dtype=np.int64), spec.label_set
            )
        return LabeledDataset(np.concatenate(xs), np.concatenate(ys), spec.label_set)

    return draw(train_ss, spec.instances_per_class_train), draw(test_ss, spec.instances_per_class_test)
