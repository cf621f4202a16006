"""Cross-task distillation: cross entropy plus a per-instance transport term.

The student is pulled toward the teacher's tempered prediction under a cost
matrix built from class centers in the teacher's feature space.  A KL term
(same label space only) and a no-teacher mode serve as baselines.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .models import (
    EMPIRICAL_MEAN,
    NORMALIZED_HEAD,
    Classifier,
    LabeledDataset,
    OptimizerConfig,
    TrainingDivergedError,
    empirical_centers,
    head_weight_centers,
    cost_matrix,
    minibatch_indices,
    sgd_step,
    tempered_softmax,
    _cross_entropy_and_grad,
)
from .transport import CostMatrix

__all__ = [
    "SinkhornUnconvergedError",
    "InvalidConfigurationError",
    "DistillConfig",
    "EpochStats",
    "DistillRun",
    "build_cost_matrix_for_pair",
    "distill_loss",
    "kl_baseline_loss",
    "run_distillation",
    "export_trace_csv",
]

MODE_SINKHORN = "sinkhorn"
MODE_KL = "kl-baseline"
MODE_NONE = "none"

ON_UNCONVERGED_ERROR = "error"
ON_UNCONVERGED_LAST_ITERATE = "use-last-iterate"


class SinkhornUnconvergedError(RuntimeError):
    """A per-instance transport solve hit max_iters under the 'error' policy."""


class InvalidConfigurationError(ValueError):
    """Config is internally inconsistent (e.g. KL baseline across label sets)."""


@dataclass(frozen=True)
class DistillConfig:
    """Hyper-parameters of one distillation run."""

    lam: float = 10.0  # weight of the per-instance distillation term
    tau: float = 3.0
    epsilon: float = 0.1
    # gradient-quality tolerance; the solver default is tighter but training
    # gradients do not benefit below the optimizer's own noise floor
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iters: int = 5000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    teacher_center_provenance: str = NORMALIZED_HEAD
    mode: str = MODE_SINKHORN
    # The printed gradient form corresponds to tau = 1; the exact chain rule
    # through the tempered softmax carries a 1/tau factor (default).
    exact_tau_gradient: bool = True
    on_unconverged: str = ON_UNCONVERGED_ERROR

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        if self.mode not in (MODE_SINKHORN, MODE_KL, MODE_NONE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.teacher_center_provenance not in (EMPIRICAL_MEAN, NORMALIZED_HEAD):
            raise ValueError(f"unknown provenance {self.teacher_center_provenance!r}")
        if self.on_unconverged not in (ON_UNCONVERGED_ERROR, ON_UNCONVERGED_LAST_ITERATE):
            raise ValueError(f"unknown unconverged policy {self.on_unconverged!r}")


@dataclass
class EpochStats:
    epoch: int
    ce_loss: float
    distill_loss: float  # mean per-instance term before the lam weighting
    train_accuracy: float


@dataclass
class DistillRun:
    """A trained student plus everything needed to audit the run."""

    student: Classifier
    trace: list[EpochStats]
    final_test_accuracy: float
    cost: CostMatrix | None
    config: DistillConfig
    seed: int
    unconverged_instances: int = 0


def build_cost_matrix_for_pair(
    teacher: Classifier,
    student_data: LabeledDataset,
    provenance: str = NORMALIZED_HEAD,
) -> CostMatrix:
    """Class-center distances between the teacher's and the student's classes.

    Teacher centers come from its normalized head columns, or from centers
    stored at teacher-training time when ``provenance`` is empirical-mean.
    Student centers are always empirical means under the teacher's embedding.
    The matrix is computed once, before any training loop, and held fixed.
    """
    if provenance == NORMALIZED_HEAD:
        teacher_centers = head_weight_centers(teacher)
    elif provenance == EMPIRICAL_MEAN:
        if teacher.stored_centers is None:
            raise InvalidConfigurationError(
                "empirical-mean provenance requires the teacher to carry stored centers"
            )
        teacher_centers = teacher.stored_centers
    else:
        raise InvalidConfigurationError(f"unknown provenance {provenance!r}")
    student_centers = empirical_centers(teacher.embedding, student_data)
    return cost_matrix(teacher_centers, student_centers)


def _sinkhorn_term(student_logits, teacher_logits, cost, config: DistillConfig):
    """Per-instance transport values and the gradient of their mean w.r.t. logits."""
    p_t = tempered_softmax(teacher_logits, config.tau)
    p_s = tempered_softmax(student_logits, config.tau)
    batch = transport.solve_sinkhorn_batch(
        p_t, p_s, cost, config.epsilon, tol=config.sinkhorn_tol, max_iters=config.sinkhorn_max_iters
    )
    n_bad = int(np.sum(~batch.converged))
    if n_bad and config.on_unconverged == ON_UNCONVERGED_ERROR:
        raise SinkhornUnconvergedError(
            f"{n_bad} transport solve(s) did not reach tol={config.sinkhorn_tol} "
            f"within {config.sinkhorn_max_iters} iterations"
        )
    grad = (batch.beta - np.sum(batch.beta * p_s, axis=1, keepdims=True)) * p_s
    if config.exact_tau_gradient:
        grad = grad / config.tau
    return batch.primal_value, grad, n_bad


def distill_loss(student_logits, teacher_logits, labels, cost, config: DistillConfig):
    """Batch loss mean(ce_i + lam * S_i) and its gradient w.r.t. student logits."""
    student_logits = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    teacher_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if student_logits.shape[0] != teacher_logits.shape[0]:
        raise ValueError("student and teacher logits must be aligned per instance")
    n = student_logits.shape[0]
    ce, grad = _cross_entropy_and_grad(student_logits, labels)
    if config.lam == 0.0:
        return ce, grad
    values, s_grad, _ = _sinkhorn_term(student_logits, teacher_logits, cost, config)
    loss = ce + config.lam * float(values.mean())
    return loss, grad + (config.lam / n) * s_grad


def kl_baseline_loss(student_logits, teacher_logits, labels, config: DistillConfig):
    """Cross entropy plus lam * KL(teacher || student) on tempered predictions."""
    student_logits = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    teacher_logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if student_logits.shape != teacher_logits.shape:
        raise InvalidConfigurationError(
            "KL baseline requires identical label spaces "
            f"(got logits {student_logits.shape} vs {teacher_logits.shape})"
        )
    n = student_logits.shape[0]
    ce, grad = _cross_entropy_and_grad(student_logits, labels)
    p_t = tempered_softmax(teacher_logits, config.tau)
    p_s = tempered_softmax(student_logits, config.tau)
    kl = float(np.mean(np.sum(p_t * (np.log(p_t) - np.log(p_s)), axis=1)))
    grad = grad + (config.lam / (n * config.tau)) * (p_s - p_t)
    return ce + config.lam * kl, grad


def run_distillation(
    teacher: Classifier | None,
    student_template: Classifier,
    train_data: LabeledDataset,
    test_data: LabeledDataset,
    config: DistillConfig,
    seed: int = 0,
) -> DistillRun:
    """Train a student under the configured objective; the teacher is frozen.

    The cost matrix is computed once before the epoch loop.  A run with
    lam = 0 skips the per-instance solves entirely and is trace-identical
    to mode "none" under the same seed.
    """
    mode = config.mode
    if mode != MODE_NONE and teacher is None:
        raise InvalidConfigurationError(f"mode {mode!r} requires a teacher")
    if mode != MODE_NONE and config.lam == 0.0:
        mode = MODE_NONE
    if mode == MODE_KL and teacher.label_set != student_template.label_set:
        raise InvalidConfigurationError(
            "KL baseline requires identical teacher and student label sets"
        )

    cost = None
    if mode == MODE_SINKHORN:
        cost = build_cost_matrix_for_pair(teacher, train_data, config.teacher_center_provenance)

    student = student_template.copy()
    opt = config.optimizer
    rng = np.random.default_rng(seed)
    velocity = {k: np.zeros_like(v) for k, v in student.parameters().items()}
    trace: list[EpochStats] = []
    unconverged = 0

    for epoch in range(opt.epochs):
        lr = opt.lr_at(epoch)
        ce_sum = 0.0
        distill_sum = 0.0
        seen = 0
        for idx in minibatch_indices(rng, train_data.n, opt.batch_size):
            X = train_data.instances[idx]
            y = train_data.labels[idx]
            features, cache = student.embedding.forward_cached(X)
            logits = features @ student.head
            ce, d_logits = _cross_entropy_and_grad(logits, y)
            term = 0.0
            if mode == MODE_SINKHORN:
                t_logits = teacher.logits(X)
                values, s_grad, n_bad = _sinkhorn_term(logits, t_logits, cost, config)
                unconverged += n_bad
                term = float(values.mean())
                d_logits = d_logits + (config.lam / len(idx)) * s_grad
            elif mode == MODE_KL:
                t_logits = teacher.logits(X)
                p_t = tempered_softmax(t_logits, config.tau)
                p_s = tempered_softmax(logits, config.tau)
                term = float(np.mean(np.sum(p_t * (np.log(p_t) - np.log(p_s)), axis=1)))
                d_logits = d_logits + (config.lam / (len(idx) * config.tau)) * (p_s - p_t)
            loss = ce + config.lam * term if mode != MODE_NONE else ce
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}")
            grads = student.logit_backward(cache, features, d_logits)
            sgd_step(student.parameters(), grads, velocity, lr, opt.momentum, opt.weight_decay)
            ce_sum += ce * len(idx)
            distill_sum += term * len(idx)
            seen += len(idx)
        trace.append(
            EpochStats(
                epoch=epoch,
                ce_loss=ce_sum / max(seen, 1),
                distill_loss=distill_sum / max(seen, 1) if mode != MODE_NONE else 0.0,
                train_accuracy=student.accuracy(train_data),
            )
        )

    return DistillRun(
        student=student,
        trace=trace,
        final_test_accuracy=student.accuracy(test_data),
        cost=cost,
        config=config,
        seed=seed,
        unconverged_instances=unconverged,
    )


def export_trace_csv(run: DistillRun, path) -> None:
    """Per-epoch trace with the fixed columns epoch,ce_loss,distill_loss,train_acc."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "ce_loss", "distill_loss", "train_acc"])
        for row in run.trace:
            writer.writerow(
                [row.epoch, repr(row.ce_loss), repr(row.distill_loss), repr(row.train_accuracy)]
            )
