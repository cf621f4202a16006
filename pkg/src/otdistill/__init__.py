"""Cross-task knowledge distillation and teacher assessment via entropic OT."""

from .transport import (
    CostMatrix,
    GibbsKernel,
    SinkhornSolution,
    ConvergenceTrace,
    NotConvergedError,
    NumericalInstabilityError,
    entropy,
    solve_sinkhorn,
    sinkhorn_distance,
    gradient_wrt_target,
    gradient_wrt_logits,
    hilbert_metric,
    variation_seminorm,
    contraction_coefficient,
    convergence_trace,
    solve_dual_ascent,
)
from .models import (
    Architecture,
    Classifier,
    ClassCenters,
    LabeledDataset,
    OptimizerConfig,
    build_classifier,
    tempered_softmax,
    empirical_centers,
    head_weight_centers,
    ncm_classify,
    cost_matrix,
    train_supervised,
)
from .tasks import ClassPool, TaskSpec, make_pool, sliding_windows, double_sliding_windows, sample_dataset
from .distill import DistillConfig, DistillRun, build_cost_matrix_for_pair, distill_loss, kl_baseline_loss, run_distillation
from .assess import (
    AssessmentConfig,
    AssessmentReport,
    fit_fictitious_student,
    assess_teacher,
    assess_repository,
    correlation_stats,
    kl_between_students,
)
from .store import Repository, save_model, load_model, build_manifest, verify_manifest

__version__ = "0.1.0"
