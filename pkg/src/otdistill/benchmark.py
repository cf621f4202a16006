"""Default desk-scale benchmark: teachers on sliding windows of one pool.

One place defines the pool, the five teacher/student windows, the two
teacher architecture families, and the training settings used by the CLI
defaults, the experiment scripts, and the acceptance checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import DistillConfig
from .models import (
    Architecture,
    Classifier,
    OptimizerConfig,
    build_classifier,
    empirical_centers,
    tempered_softmax,
    train_supervised,
)
from .seeding import derive_seed
from .store import RepositoryManifest, build_manifest, save_manifest, save_model
from .tasks import ClassPool, TaskSpec, make_pool, sample_dataset, sliding_windows

__all__ = [
    "BenchmarkConfig",
    "DEFAULT_BENCHMARK",
    "build_pool",
    "benchmark_windows",
    "task_spec_for_window",
    "teacher_architectures",
    "parse_architecture",
    "student_architecture",
    "train_teacher",
    "train_teacher_repository",
    "make_trace_instance",
]


@dataclass(frozen=True)
class BenchmarkConfig:
    """Sizes and training settings of the default benchmark."""

    pool_classes: int = 100
    input_dim: int = 16
    spread: float = 5.0
    covariance_scale: float = 8.0
    window_size: int = 20
    step: int = 5
    num_windows: int = 5
    train_per_class: int = 50
    test_per_class: int = 50
    embed_dim: int = 16
    teacher_hidden: int = 32
    student_hidden: int = 16
    student_embed_dim: int = 8
    teacher_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=0.05, epochs=60, lr_milestones=(40,))
    )
    student_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(learning_rate=0.05, epochs=30)
    )
    distill: DistillConfig = field(default_factory=lambda: DistillConfig())
    seed: int = 0


DEFAULT_BENCHMARK = BenchmarkConfig()


def build_pool(cfg: BenchmarkConfig = DEFAULT_BENCHMARK) -> ClassPool:
    return make_pool(
        num_classes=cfg.pool_classes,
        input_dim=cfg.input_dim,
        spread=cfg.spread,
        covariance_scale=cfg.covariance_scale,
        seed=cfg.seed,
    )


def benchmark_windows(pool: ClassPool, cfg: BenchmarkConfig = DEFAULT_BENCHMARK) -> list[tuple[int, ...]]:
    """The first num_windows windows of the sliding protocol."""
    windows = sliding_windows(pool, cfg.window_size, cfg.step)
    if len(windows) < cfg.num_windows:
        raise ValueError(f"pool yields only {len(windows)} windows, need {cfg.num_windows}")
    return windows[: cfg.num_windows]


def task_spec_for_window(
    window: tuple[int, ...], role: str, index: int, cfg: BenchmarkConfig = DEFAULT_BENCHMARK
) -> TaskSpec:
    """Task spec with a seed derived from the role and window index."""
    return TaskSpec(
        label_set=window,
        instances_per_class_train=cfg.train_per_class,
        instances_per_class_test=cfg.test_per_class,
        seed=derive_seed(cfg.seed, role, index),
    )


def parse_architecture(name: str, input_dim: int, embed_dim: int) -> Architecture:
    """"linear" or "mlp<width>" (e.g. mlp32) into an Architecture."""
    if name == "linear":
        return Architecture(kind="linear", input_dim=input_dim, embed_dim=embed_dim)
    if name.startswith("mlp"):
        try:
            hidden = int(name[3:])
        except ValueError:
            raise ValueError(f"cannot parse architecture {name!r}; expected 'linear' or 'mlp<width>'")
        return Architecture(kind="mlp", input_dim=input_dim, embed_dim=embed_dim, hidden_dim=hidden)
    raise ValueError(f"cannot parse architecture {name!r}; expected 'linear' or 'mlp<width>'")


def teacher_architectures(cfg: BenchmarkConfig = DEFAULT_BENCHMARK) -> dict[str, Architecture]:
    return {
        "linear": parse_architecture("linear", cfg.input_dim, cfg.embed_dim),
        f"mlp{cfg.teacher_hidden}": parse_architecture(f"mlp{cfg.teacher_hidden}", cfg.input_dim, cfg.embed_dim),
    }


def student_architecture(cfg: BenchmarkConfig = DEFAULT_BENCHMARK) -> Architecture:
    return Architecture(
        kind="mlp", input_dim=cfg.input_dim, embed_dim=cfg.student_embed_dim, hidden_dim=cfg.student_hidden
    )


def train_teacher(
    pool: ClassPool,
    window: tuple[int, ...],
    architecture: Architecture,
    optimizer: OptimizerConfig,
    spec: TaskSpec,
    seed: int,
) -> tuple[Classifier, dict]:
    """Train one teacher on its window and attach its empirical class centers.

    Returns the trained model and a training summary (accuracies, seed) for
    the repository manifest.
    """
    train, test = sample_dataset(pool, spec)
    template = build_classifier(architecture, spec.label_set, seed=seed)
    trained, trace = train_supervised(template, train, optimizer, seed=seed)
    trained.stored_centers = empirical_centers(trained.embedding, train)
    summary = {
        "train_accuracy": trace.final_accuracy,
        "test_accuracy": trained.accuracy(test),
        "seed": seed,
    }
    return trained, summary


def train_teacher_repository(
    pool: ClassPool,
    out_dir,
    cfg: BenchmarkConfig = DEFAULT_BENCHMARK,
    architectures: dict[str, Architecture] | None = None,
    windows: list[tuple[int, ...]] | None = None,
    pool_path=None,
) -> RepositoryManifest:
    """Train one teacher per (window, architecture) and write the repository."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    architectures = architectures or teacher_architectures(cfg)
    windows = windows if windows is not None else benchmark_windows(pool, cfg)
    for w_idx, window in enumerate(windows):
        spec = task_spec_for_window(window, "teacher-task", w_idx, cfg)
        for arch_name, architecture in sorted(architectures.items()):
            teacher_id = f"w{w_idx}-{arch_name}"
            seed = derive_seed(cfg.seed, "teacher", w_idx, arch_name)
            model, summary = train_teacher(pool, window, architecture, cfg.teacher_optimizer, spec, seed)
            save_model(model, out_dir / f"{teacher_id}.json", model_id=teacher_id, training=summary)
    manifest = build_manifest(out_dir, pool_path=pool_path)
    save_manifest(manifest, out_dir)
    return manifest


def make_trace_instance(dim: int, seed: int, tau: float = 3.0, center_dim: int = 16):
    """One synthetic transport problem for the convergence-trace protocol.

    Marginals are tempered softmaxes of random logits; the cost matrix holds
    distances between random unit-norm class centers, so entries live in
    [0, 2] like normalized-center costs do.
    """
    rng = np.random.default_rng(seed)
    mu = tempered_softmax(rng.normal(0.0, 2.0, size=dim), tau)
    nu = tempered_softmax(rng.normal(0.0, 2.0, size=dim), tau)
    a = rng.normal(size=(dim, center_dim))
    b = rng.normal(size=(dim, center_dim))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    M = np.sqrt(np.maximum(sq, 0.0))
    return mu, nu, M
