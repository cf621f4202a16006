"""Teacher assessment over a model repository.

Every teacher is scored by the average transport distance between its
tempered predictions and a student surrogate's predictions on the target
training set; lower is better.  Three regimes trade quality for cost:
"vanilla" distills a full student per teacher, "approx-I" shares one
plain-trained student across teachers, and "approx-II" fits a cheap linear
student on each teacher's features.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import transport
from .distill import (
    MODE_NONE,
    DistillConfig,
    InvalidConfigurationError,
    ON_UNCONVERGED_ERROR,
    SinkhornUnconvergedError,
    build_cost_matrix_for_pair,
    run_distillation,
)
from .models import (
    NORMALIZED_HEAD,
    Architecture,
    Classifier,
    LabeledDataset,
    tempered_softmax,
    _init_matrix,
)
from .seeding import derive_seed
from .store import Repository

__all__ = [
    "UndefinedCorrelationError",
    "FictitiousTrainerConfig",
    "AssessmentConfig",
    "FictitiousFit",
    "TeacherAssessment",
    "AssessmentReport",
    "fit_fictitious_student",
    "assess_teacher",
    "assess_repository",
    "correlation_stats",
    "kl_between_students",
    "report_to_csv",
    "REPORT_COLUMNS",
]

REGIME_VANILLA = "vanilla"
REGIME_APPROX_I = "approx-I"
REGIME_APPROX_II = "approx-II"

REPORT_COLUMNS = ["teacher_id", "regime", "metric", "rank", "converged", "seconds", "ground_truth_acc"]


class UndefinedCorrelationError(ValueError):
    """Correlation requested on a constant sequence."""


@dataclass(frozen=True)
class FictitiousTrainerConfig:
    """Full-batch gradient descent settings for the linear surrogate."""

    learning_rate: float | None = None  # None: 1 / smoothness estimate
    l2: float = 1e-3
    max_iters: int = 2000
    grad_tol: float = 1e-6


@dataclass(frozen=True)
class AssessmentConfig:
    regime: str = REGIME_APPROX_II
    # None couples the metric temperature to the distillation config's tau
    # (falling back to its default); an explicit value overrides it.
    tau: float | None = None
    epsilon: float = 0.1
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iters: int = 5000
    fictitious: FictitiousTrainerConfig = field(default_factory=FictitiousTrainerConfig)
    teacher_center_provenance: str = NORMALIZED_HEAD
    distill: DistillConfig | None = None
    on_unconverged: str = ON_UNCONVERGED_ERROR

    def __post_init__(self):
        if self.regime not in (REGIME_VANILLA, REGIME_APPROX_I, REGIME_APPROX_II):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def effective_tau(self) -> float:
        if self.tau is not None:
            return self.tau
        return (self.distill or DistillConfig()).tau

    @property
    def tau_coupled(self) -> bool:
        return self.tau is None


@dataclass
class FictitiousFit:
    classifier: Classifier
    converged: bool
    iterations: int
    grad_norm: float


@dataclass
class TeacherAssessment:
    teacher_id: str
    metric: float
    rank: int | None
    converged: bool
    seconds: float
    ground_truth_acc: float | None = None
    error: str | None = None


@dataclass
class AssessmentReport:
    rows: list[TeacherAssessment]
    regime: str
    effective_tau: float
    tau_coupled: bool
    pearson: float | None = None
    spearman: float | None = None

    @property
    def selected(self) -> str | None:
        """Teacher id at rank 1, the repository's best candidate."""
        for row in self.rows:
            if row.rank == 1:
                return row.teacher_id
        return None


def fit_fictitious_student(
    teacher: Classifier,
    student_data: LabeledDataset,
    config: FictitiousTrainerConfig = FictitiousTrainerConfig(),
    seed: int = 0,
) -> FictitiousFit:
    """Fit a linear head on the teacher's features for the student's classes.

    Features are extracted once; the multinomial-logistic objective with L2
    regularization is then minimized by deterministic full-batch gradient
    descent to a gradient-norm tolerance.  Non-convergence is reported via
    the flag, not an error.
    """
    Z = teacher.embed(student_data.instances)
    n, d = Z.shape
    C = student_data.num_classes
    Y = student_data.one_hot()

    lr = config.learning_rate
    if lr is None:
        # 1 / L for the logistic smoothness bound L <= lam_max(Z^T Z) / (2n) + l2
        lam_max = float(np.linalg.eigvalsh((Z.T @ Z) / n).max())
        lr = 1.0 / (0.5 * lam_max + config.l2)

    rng = np.random.default_rng(seed)
    W = _init_matrix(rng, d, (d, C))
    grad_norm = np.inf
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        P = tempered_softmax(Z @ W, 1.0)
        grad = Z.T @ (P - Y) / n + config.l2 * W
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= config.grad_tol:
            break
        W -= lr * grad

    surrogate = Classifier(
        architecture=teacher.architecture,
        embedding=teacher.embedding.copy(),
        head=W,
        label_set=student_data.label_set,
    )
    return FictitiousFit(
        classifier=surrogate,
        converged=grad_norm <= config.grad_tol,
        iterations=iterations,
        grad_norm=grad_norm,
    )


def assess_teacher(
    teacher: Classifier,
    surrogate: Classifier,
    student_data: LabeledDataset,
    config: AssessmentConfig,
) -> float:
    """Average transport distance from teacher to surrogate predictions."""
    if surrogate.label_set != student_data.label_set:
        raise InvalidConfigurationError("surrogate label set must match the student task")
    cost = build_cost_matrix_for_pair(teacher, student_data, config.teacher_center_provenance)
    tau = config.effective_tau
    p_t = tempered_softmax(teacher.logits(student_data.instances), tau)
    p_s = tempered_softmax(surrogate.logits(student_data.instances), tau)
    batch = transport.solve_sinkhorn_batch(
        p_t, p_s, cost, config.epsilon, tol=config.sinkhorn_tol, max_iters=config.sinkhorn_max_iters
    )
    n_bad = int(np.sum(~batch.converged))
    if n_bad and config.on_unconverged == ON_UNCONVERGED_ERROR:
        raise SinkhornUnconvergedError(
            f"{n_bad} transport solve(s) did not converge while assessing the teacher"
        )
    return float(batch.primal_value.mean())


def _surrogate_for(teacher, student_data, config, seed, student_template, plain_student):
    """Build the regime's surrogate; returns (classifier, converged_flag)."""
    if config.regime == REGIME_APPROX_II:
        fit = fit_fictitious_student(teacher, student_data, config.fictitious, seed=seed)
        return fit.classifier, fit.converged
    if config.regime == REGIME_APPROX_I:
        if plain_student is None:
            raise InvalidConfigurationError("approx-I regime requires a pre-trained plain student")
        return plain_student, True
    if student_template is None or config.distill is None:
        raise InvalidConfigurationError(
            "vanilla regime requires a student template and a distillation config"
        )
    run = run_distillation(teacher, student_template, student_data, student_data, config.distill, seed=seed)
    return run.student, True


def assess_repository(
    repository: Repository,
    student_data: LabeledDataset,
    config: AssessmentConfig,
    student_template: Classifier | None = None,
    plain_student: Classifier | None = None,
    ground_truth: dict[str, float] | None = None,
    seed: int = 0,
) -> AssessmentReport:
    """Score and rank every teacher in the repository.

    Teachers are processed independently with seeds derived from the master
    seed and the teacher id, so the report does not depend on processing
    order.  Per-teacher failures are recorded in their row instead of
    aborting the run.
    """
    if len(repository) == 0:
        raise InvalidConfigurationError("repository is empty")
    rows: list[TeacherAssessment] = []
    for teacher_id in repository.teacher_ids:
        start = time.perf_counter()
        try:
            teacher = repository.load(teacher_id)
            surrogate, converged = _surrogate_for(
                teacher, student_data, config, derive_seed(seed, teacher_id), student_template, plain_student
            )
            metric = assess_teacher(teacher, surrogate, student_data, config)
            rows.append(
                TeacherAssessment(
                    teacher_id=teacher_id,
                    metric=metric,
                    rank=None,
                    converged=converged,
                    seconds=time.perf_counter() - start,
                )
            )
        except Exception as exc:  # recorded per teacher, not fatal
            rows.append(
                TeacherAssessment(
                    teacher_id=teacher_id,
                    metric=float("nan"),
                    rank=None,
                    converged=False,
                    seconds=time.perf_counter() - start,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )

    scored = sorted(
        (r for r in rows if r.error is None), key=lambda r: (r.metric, r.teacher_id)
    )
    for position, row in enumerate(scored, start=1):
        row.rank = position

    if ground_truth:
        for row in rows:
            row.ground_truth_acc = ground_truth.get(row.teacher_id)

    report = AssessmentReport(
        rows=rows,
        regime=config.regime,
        effective_tau=config.effective_tau,
        tau_coupled=config.tau_coupled,
    )
    with_truth = [r for r in rows if r.error is None and r.ground_truth_acc is not None]
    if len(with_truth) >= 3:
        try:
            report.pearson, report.spearman = correlation_stats(report)
        except UndefinedCorrelationError:
            pass
    return report


def correlation_stats(report: AssessmentReport) -> tuple[float, float]:
    """Pearson on (-metric, accuracy) and Spearman on their ranks."""
    pairs = [
        (-r.metric, r.ground_truth_acc)
        for r in report.rows
        if r.error is None and r.ground_truth_acc is not None
    ]
    if len(pairs) < 3:
        raise UndefinedCorrelationError(f"need at least 3 teachers with ground truth, got {len(pairs)}")
    q = np.array([p[0] for p in pairs])
    g = np.array([p[1] for p in pairs])
    if np.ptp(q) == 0 or np.ptp(g) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sequence")
    pearson = float(stats.pearsonr(q, g).statistic)
    spearman = float(stats.spearmanr(q, g).statistic)
    return pearson, spearman


def kl_between_students(a: Classifier, b: Classifier, data: LabeledDataset, tau: float = 3.0) -> float:
    """Mean KL(a || b) on tempered predictions; quantifies surrogate fidelity."""
    if a.label_set != b.label_set:
        raise InvalidConfigurationError("KL between students requires identical label sets")
    p_a = tempered_softmax(a.logits(data.instances), tau)
    p_b = tempered_softmax(b.logits(data.instances), tau)
    return float(np.mean(np.sum(p_a * (np.log(p_a) - np.log(p_b)), axis=1)))


def report_to_csv(
    report: AssessmentReport,
    path,
    external: dict[str, dict[str, float]] | None = None,
    timings: bool = False,
) -> None:
    """Write the fixed-column report CSV.

    ``external`` maps column name -> {teacher_id: value} for metric values
    ingested from other tools.  Wall-clock seconds are machine-dependent, so
    the seconds column is left blank unless ``timings`` is set; with it off,
    reruns of the same assessment are byte-identical.
    """
    external = external or {}
    header = REPORT_COLUMNS + sorted(external)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in report.rows:
            record = [
                row.teacher_id,
                report.regime,
                "" if np.isnan(row.metric) else repr(row.metric),
                "" if row.rank is None else row.rank,
                str(bool(row.converged)).lower(),
                repr(row.seconds) if timings else "",
                "" if row.ground_truth_acc is None else repr(row.ground_truth_acc),
            ]
            for col in sorted(external):
                value = external[col].get(row.teacher_id)
                record.append("" if value is None else repr(value))
            writer.writerow(record)
