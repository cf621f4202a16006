"""Entropic optimal transport core.

Sinkhorn fixed-point solver (plain and log-domain), dual potentials and
their use as gradients, Hilbert-projective-metric contraction diagnostics,
and a slow dual-ascent reference solver for cross-checking small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "NumericalInstabilityError",
    "NotConvergedError",
    "CostMatrix",
    "GibbsKernel",
    "SinkhornSolution",
    "BatchSinkhornSolution",
    "ConvergenceTrace",
    "check_probability_vector",
    "entropy",
    "solve_sinkhorn",
    "solve_sinkhorn_batch",
    "sinkhorn_distance",
    "gradient_wrt_target",
    "gradient_wrt_logits",
    "hilbert_metric",
    "variation_seminorm",
    "contraction_coefficient",
    "convergence_trace",
    "solve_dual_ascent",
]

# Division denominators (and log arguments) are clamped here instead of
# producing inf/NaN; non-finite results are reported as errors.
_TINY = 1e-300

# Below this regularization strength exp(-M/epsilon) is at risk of underflow
# at double precision, so the solver switches to the log domain by default.
_LOG_DOMAIN_EPSILON = 0.05


class NumericalInstabilityError(RuntimeError):
    """Plain-domain Sinkhorn produced non-finite values (try log_domain=True)."""


class NotConvergedError(RuntimeError):
    """A gradient or potential was requested from an unconverged solve."""


def check_probability_vector(p, name: str = "p") -> np.ndarray:
    """Validate and return a 1-D probability vector as float64."""
    v = np.asarray(p, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(v < 0):
        raise ValueError(f"{name} contains negative entries")
    if abs(float(v.sum()) - 1.0) > 1e-8:
        raise ValueError(f"{name} must sum to 1, got {v.sum()!r}")
    return v


def _cost_entries(cost) -> np.ndarray:
    entries = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {entries.shape}")
    if not np.all(np.isfinite(entries)):
        raise ValueError("cost matrix contains non-finite entries")
    if np.any(entries < 0):
        raise ValueError("cost matrix contains negative entries")
    return entries


@dataclass(frozen=True)
class CostMatrix:
    """Nonnegative semantic distances between a source and a target label set."""

    entries: np.ndarray
    source_labels: tuple[int, ...]
    target_labels: tuple[int, ...]

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("cost matrix contains non-finite entries")
        if np.any(entries < 0):
            raise ValueError("cost matrix contains negative entries")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "source_labels", tuple(self.source_labels))
        object.__setattr__(self, "target_labels", tuple(self.target_labels))
        if entries.shape != (len(self.source_labels), len(self.target_labels)):
            raise ValueError(
                f"cost matrix shape {entries.shape} does not match label lists "
                f"({len(self.source_labels)}, {len(self.target_labels)})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @classmethod
    def from_array(cls, entries) -> "CostMatrix":
        """Wrap a raw array with positional label ids."""
        entries = np.asarray(entries, dtype=np.float64)
        return cls(entries, tuple(range(entries.shape[0])), tuple(range(entries.shape[1])))


@dataclass(frozen=True)
class GibbsKernel:
    """Elementwise exp(-M/epsilon) of a cost matrix; strictly positive."""

    entries: np.ndarray
    epsilon: float

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f"kernel must be 2-D, got shape {entries.shape}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not np.all(np.isfinite(entries)) or np.any(entries <= 0) or np.any(entries > 1.0):
            raise ValueError("kernel entries must lie in (0, 1]")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_cost(cls, cost, epsilon: float) -> "GibbsKernel":
        M = _cost_entries(cost)
        if epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        entries = np.exp(-M / epsilon)
        if np.any(entries == 0.0):
            raise NumericalInstabilityError(
                "exp(-M/epsilon) underflows at double precision; "
                "work with the cost matrix in the log domain instead"
            )
        return cls(entries, epsilon)


@dataclass
class SinkhornSolution:
    """Converged (or truncated) solution of one entropic transport problem."""

    plan: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    primal_value: float
    dual_value: float
    iterations_used: int
    marginal_violation: float
    converged: bool
    epsilon: float


@dataclass
class BatchSinkhornSolution:
    """Solutions for a batch of problems sharing one cost matrix."""

    alpha: np.ndarray  # (B, R1)
    beta: np.ndarray  # (B, R2)
    primal_value: np.ndarray  # (B,)
    marginal_violation: np.ndarray  # (B,)
    converged: np.ndarray  # (B,) bool
    iterations_used: int
    epsilon: float


def entropy(plan) -> float:
    """Discrete entropy -sum T_mn (log T_mn - 1), with 0 log 0 = 0."""
    T = np.asarray(plan, dtype=np.float64)
    if not np.all(np.isfinite(T)):
        raise ValueError("plan contains non-finite entries")
    if np.any(T < 0):
        raise ValueError("plan contains negative entries")
    positive = T[T > 0]
    return float(positive.sum() - np.sum(positive * np.log(positive)))


def _entropy_rows(plans: np.ndarray) -> np.ndarray:
    """Entropy of each (R1, R2) slice of a (B, R1, R2) stack."""
    safe = np.where(plans > 0, plans, 1.0)
    return plans.sum(axis=(1, 2)) - np.sum(plans * np.log(safe), axis=(1, 2))


def _solve_plain(mu, nu, M, epsilon, tol, max_iters):
    K = np.exp(-M / epsilon)
    u = np.ones(M.shape[0])
    v = np.ones(M.shape[1])
    plan = K.copy()
    violation = np.inf
    iterations = 0
    while iterations < max_iters:
        u = mu / np.maximum(K @ v, _TINY)
        v = nu / np.maximum(K.T @ u, _TINY)
        iterations += 1
        plan = u[:, None] * K * v[None, :]
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v)) and np.all(np.isfinite(plan))):
            raise NumericalInstabilityError(
                "plain-domain Sinkhorn overflowed or produced NaN; rerun with log_domain=True"
            )
        violation = float(np.abs(plan.sum(axis=1) - mu).sum() + np.abs(plan.sum(axis=0) - nu).sum())
        if violation <= tol:
            break
    with np.errstate(divide="ignore"):
        alpha = epsilon * np.log(np.maximum(u, _TINY))
        beta = epsilon * np.log(np.maximum(v, _TINY))
    return plan, alpha, beta, violation, iterations


def _solve_log(mu, nu, M, epsilon, tol, max_iters):
    log_mu = np.log(np.maximum(mu, _TINY))
    log_nu = np.log(np.maximum(nu, _TINY))
    log_K = -M / epsilon
    f = np.zeros(M.shape[0])  # log u
    g = np.zeros(M.shape[1])  # log v
    plan = np.exp(log_K)
    violation = np.inf
    iterations = 0
    while iterations < max_iters:
        f = log_mu - logsumexp(log_K + g[None, :], axis=1)
        g = log_nu - logsumexp(log_K + f[:, None], axis=0)
        iterations += 1
        plan = np.exp(log_K + f[:, None] + g[None, :])
        violation = float(np.abs(plan.sum(axis=1) - mu).sum() + np.abs(plan.sum(axis=0) - nu).sum())
        if violation <= tol:
            break
    return plan, epsilon * f, epsilon * g, violation, iterations


def solve_sinkhorn(
    mu,
    nu,
    cost,
    epsilon: float,
    tol: float = 1e-9,
    max_iters: int = 1000,
    log_domain: bool | None = None,
) -> SinkhornSolution:
    """Solve the entropic transport problem between mu and nu.

    Alternates the fixed-point updates u = mu / (K v), v = nu / (K^T u)
    with K = exp(-M/epsilon) until the L1 marginal violation drops below
    ``tol`` or ``max_iters`` full iterations have run.  ``log_domain=None``
    picks the stabilized log-domain variant automatically for small epsilon.

    Non-convergence is not an error: the solution is returned with
    ``converged=False``.
    """
    mu = check_probability_vector(mu, "mu")
    nu = check_probability_vector(nu, "nu")
    M = _cost_entries(cost)
    if M.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {M.shape} does not match marginals ({mu.size}, {nu.size})")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be at least 1, got {max_iters}")
    if log_domain is None:
        log_domain = epsilon < _LOG_DOMAIN_EPSILON

    solver = _solve_log if log_domain else _solve_plain
    plan, alpha, beta, violation, iterations = solver(mu, nu, M, epsilon, tol, max_iters)

    primal = float(np.sum(plan * M) - epsilon * entropy(plan))
    dual = float(
        alpha @ mu + beta @ nu - epsilon * np.sum(np.exp((alpha[:, None] + beta[None, :] - M) / epsilon))
    )
    if not (np.isfinite(primal) and np.isfinite(dual)):
        raise NumericalInstabilityError(
            "Sinkhorn objective is non-finite; check for zero masses or rerun with log_domain=True"
        )
    return SinkhornSolution(
        plan=plan,
        alpha=alpha,
        beta=beta,
        primal_value=primal,
        dual_value=dual,
        iterations_used=iterations,
        marginal_violation=violation,
        converged=violation <= tol,
        epsilon=epsilon,
    )


def _lse_inplace(A: np.ndarray, axis: int) -> np.ndarray:
    """Log-sum-exp along one axis of a 3-D stack, clobbering A."""
    m = A.max(axis=axis)
    np.subtract(A, np.expand_dims(m, axis), out=A)
    np.exp(A, out=A)
    return m + np.log(A.sum(axis=axis))


def _batch_result(F, G, log_K, mu, nu, M, epsilon, tol, iterations) -> BatchSinkhornSolution:
    plans = np.exp(log_K[None, :, :] + F[:, :, None] + G[:, None, :])
    violation = np.abs(plans.sum(axis=2) - mu).sum(axis=1) + np.abs(plans.sum(axis=1) - nu).sum(axis=1)
    primal = np.einsum("bij,ij->b", plans, M) - epsilon * _entropy_rows(plans)
    return BatchSinkhornSolution(
        alpha=epsilon * F,
        beta=epsilon * G,
        primal_value=primal,
        marginal_violation=violation,
        converged=violation <= tol,
        iterations_used=iterations,
        epsilon=epsilon,
    )


def _solve_batch_log(mu, nu, M, epsilon, tol, max_iters) -> BatchSinkhornSolution:
    log_mu = np.log(np.maximum(mu, _TINY))
    log_nu = np.log(np.maximum(nu, _TINY))
    log_K = -M / epsilon
    F = np.zeros_like(mu)
    G = np.zeros_like(nu)
    A = np.empty((mu.shape[0], mu.shape[1], nu.shape[1]))
    iterations = 0
    while iterations < max_iters:
        np.add(log_K[None, :, :], G[:, None, :], out=A)
        row_lse = _lse_inplace(A, axis=2)
        # after a full iteration the columns are exact, so the row gap is
        # the whole violation; reusing the next update's log-sum-exp makes
        # the stop test free
        if iterations > 0 and np.all(np.abs(np.exp(F + row_lse) - mu).sum(axis=1) <= tol):
            break
        F = log_mu - row_lse
        np.add(log_K[None, :, :], F[:, :, None], out=A)
        G = log_nu - _lse_inplace(A, axis=1)
        iterations += 1
    return _batch_result(F, G, log_K, mu, nu, M, epsilon, tol, iterations)


def _solve_batch_plain(mu, nu, M, epsilon, tol, max_iters) -> BatchSinkhornSolution | None:
    """Fixed-point iteration on u, v directly; None when it loses stability."""
    K = np.exp(-M / epsilon)
    if np.any(K.sum(axis=0) == 0.0) or np.any(K.sum(axis=1) == 0.0):
        return None
    u = np.ones_like(mu)
    v = np.ones_like(nu)
    iterations = 0
    while iterations < max_iters:
        Kv = v @ K.T
        if iterations > 0 and np.all(np.abs(u * Kv - mu).sum(axis=1) <= tol):
            break
        u = mu / np.maximum(Kv, _TINY)
        v = nu / np.maximum(u @ K, _TINY)
        iterations += 1
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            return None
    with np.errstate(divide="ignore"):
        F = np.log(np.maximum(u, _TINY))
        G = np.log(np.maximum(v, _TINY))
    return _batch_result(F, G, -M / epsilon, mu, nu, M, epsilon, tol, iterations)


def solve_sinkhorn_batch(
    mu,
    nu,
    cost,
    epsilon: float,
    tol: float = 1e-9,
    max_iters: int = 1000,
) -> BatchSinkhornSolution:
    """Solve a batch of transport problems sharing one cost matrix.

    ``mu`` is (B, R1) and ``nu`` is (B, R2); row b defines one problem.
    Iteration stops once every problem in the batch meets ``tol`` (extra
    iterations only tighten already-converged rows, so results do not
    depend on the other problems in the batch).

    Runs the plain fixed-point update (two matrix products per iteration)
    whenever the kernel is representable, and falls back to the stabilized
    log-domain variant if the kernel underflows or the scalings overflow.
    """
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if mu.ndim != 2 or nu.ndim != 2 or mu.shape[0] != nu.shape[0]:
        raise ValueError(f"expected (B, R1) and (B, R2) marginals, got {mu.shape} and {nu.shape}")
    M = _cost_entries(cost)
    if M.shape != (mu.shape[1], nu.shape[1]):
        raise ValueError(f"cost shape {M.shape} does not match marginals {mu.shape}, {nu.shape}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    result = None
    if epsilon >= _LOG_DOMAIN_EPSILON:
        result = _solve_batch_plain(mu, nu, M, epsilon, tol, max_iters)
    if result is None:
        result = _solve_batch_log(mu, nu, M, epsilon, tol, max_iters)
    return result


def sinkhorn_distance(
    mu,
    nu,
    cost,
    epsilon: float,
    tol: float = 1e-9,
    max_iters: int = 1000,
    log_domain: bool | None = None,
) -> float:
    """Entropically regularized transport cost <T, M> - epsilon * H(T)."""
    return solve_sinkhorn(mu, nu, cost, epsilon, tol=tol, max_iters=max_iters, log_domain=log_domain).primal_value


def gradient_wrt_target(solution: SinkhornSolution) -> np.ndarray:
    """Gradient of the transport cost w.r.t. the target marginal.

    Returns the target dual potential, which is unique only up to an
    additive constant; directional derivatives along zero-sum directions
    are well defined.
    """
    if not solution.converged:
        raise NotConvergedError("gradient requested from an unconverged solve; it would be stale")
    return solution.beta.copy()


def gradient_wrt_logits(
    solution: SinkhornSolution,
    student_probs,
    tau: float = 1.0,
    exact_tau_scaling: bool = True,
) -> np.ndarray:
    """Gradient of the transport cost w.r.t. the logits behind the target.

    ``student_probs`` must be the tempered softmax (temperature ``tau``) that
    was used as the target marginal.  With ``exact_tau_scaling`` the chain
    rule's 1/tau factor is applied; switched off, the returned vector is
    (beta - <beta, p>) * p, the tau = 1 form.  Either way the output sums
    to zero.
    """
    if not solution.converged:
        raise NotConvergedError("gradient requested from an unconverged solve; it would be stale")
    p = np.asarray(student_probs, dtype=np.float64)
    if p.shape != solution.beta.shape:
        raise ValueError(f"student_probs shape {p.shape} does not match potential {solution.beta.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    grad = (solution.beta - float(solution.beta @ p)) * p
    if exact_tau_scaling:
        grad = grad / tau
    return grad


def variation_seminorm(v) -> float:
    """max(v) - min(v); a norm on vectors defined up to an additive constant."""
    v = np.asarray(v, dtype=np.float64)
    return float(v.max() - v.min())


def hilbert_metric(x, y) -> float:
    """Hilbert projective metric log max_{i,j} (x_i y_j) / (x_j y_i).

    Equals the variation seminorm of log(x) - log(y); zero exactly when
    x and y are positive multiples of each other.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {x.shape} and {y.shape}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("hilbert_metric requires strictly positive vectors")
    d = np.log(x) - np.log(y)
    return variation_seminorm(d)


def _log_psi(log_K: np.ndarray) -> float:
    """log of the maximal 2x2 cross ratio of a positive kernel given as logs."""
    if log_K.shape[0] < 2 or log_K.shape[1] < 2:
        return 0.0
    diff = log_K[:, None, :] - log_K[None, :, :]  # (R1, R1, R2) row differences
    spans = diff.max(axis=2) - diff.min(axis=2)
    return float(spans.max())


def contraction_coefficient(kernel: GibbsKernel) -> float:
    """Birkhoff contraction coefficient kappa = (sqrt(psi) - 1)/(sqrt(psi) + 1).

    psi is the maximal cross ratio K_ik K_jl / (K_jk K_il); kappa lies in
    [0, 1) and bounds the per-application contraction of the Hilbert metric
    under multiplication by the kernel.  Computed as tanh(log(psi)/4) so
    large ratios do not overflow.
    """
    log_K = np.log(kernel.entries)
    return float(np.tanh(_log_psi(log_K) / 4.0))


def _kappa_from_cost(M: np.ndarray, epsilon: float) -> float:
    return float(np.tanh(_log_psi(-M / epsilon) / 4.0))


@dataclass
class ConvergenceTrace:
    """Per-iteration distance of the running gradient to the final one.

    ``seminorm_error[t-1]`` is the variation-seminorm distance of the
    gradient after t full iterations to the gradient at the last iterate,
    ``bound`` is kappa^(2t) times the initial error, and ``l2_error`` the
    plain Euclidean distance.
    """

    iterations: np.ndarray
    seminorm_error: np.ndarray
    bound: np.ndarray
    l2_error: np.ndarray
    kappa: float
    initial_error: float

    def bound_dominates(self, slack: float = 1e-9) -> bool:
        return bool(np.all(self.seminorm_error <= self.bound + slack))

    def error_ratios(self, floor: float = 1e-13) -> np.ndarray:
        """Consecutive seminorm error ratios where the denominator is above floor."""
        prev = np.concatenate(([self.initial_error], self.seminorm_error[:-1]))
        mask = prev > floor
        return self.seminorm_error[mask] / prev[mask]


def convergence_trace(mu, nu, cost, epsilon: float, total_iters: int) -> ConvergenceTrace:
    """Run a fixed number of iterations and trace gradient convergence.

    The gradient after t iterations is epsilon * log v^(t); the final
    iterate serves as the reference, so ``total_iters`` must be large
    enough for it to stand in for the fixed point.
    """
    mu = check_probability_vector(mu, "mu")
    nu = check_probability_vector(nu, "nu")
    M = _cost_entries(cost)
    if M.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {M.shape} does not match marginals ({mu.size}, {nu.size})")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if total_iters < 1:
        raise ValueError(f"total_iters must be at least 1, got {total_iters}")

    log_mu = np.log(np.maximum(mu, _TINY))
    log_nu = np.log(np.maximum(nu, _TINY))
    log_K = -M / epsilon
    f = np.zeros(mu.size)
    g = np.zeros(nu.size)
    gradients = np.empty((total_iters, nu.size))
    for t in range(total_iters):
        f = log_mu - logsumexp(log_K + g[None, :], axis=1)
        g = log_nu - logsumexp(log_K + f[:, None], axis=0)
        gradients[t] = epsilon * g

    reference = gradients[-1]
    diffs = gradients - reference[None, :]
    seminorm = diffs.max(axis=1) - diffs.min(axis=1)
    l2 = np.linalg.norm(diffs, axis=1)
    kappa = _kappa_from_cost(M, epsilon)
    initial_error = variation_seminorm(-reference)  # gradient before any iteration is 0
    t = np.arange(1, total_iters + 1)
    bound = initial_error * kappa ** (2.0 * t)
    return ConvergenceTrace(
        iterations=t,
        seminorm_error=seminorm,
        bound=bound,
        l2_error=l2,
        kappa=kappa,
        initial_error=initial_error,
    )


def solve_dual_ascent(
    mu,
    nu,
    cost,
    epsilon: float,
    step: float | None = None,
    tol: float = 1e-12,
    max_iters: int = 500_000,
) -> SinkhornSolution:
    """Reference solver: plain gradient ascent on the dual objective.

    Deliberately takes small fixed steps instead of the fixed-point update,
    so it follows an independent path to the same optimum.  Slow; intended
    for cross-checking the main solver on small instances.
    """
    mu = check_probability_vector(mu, "mu")
    nu = check_probability_vector(nu, "nu")
    M = _cost_entries(cost)
    if M.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {M.shape} does not match marginals ({mu.size}, {nu.size})")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if step is None:
        step = 0.5 * epsilon / max(float(mu.max()), float(nu.max()))

    alpha = epsilon * np.log(np.maximum(mu, _TINY))
    beta = epsilon * np.log(np.maximum(nu, _TINY))
    plan = np.exp((alpha[:, None] + beta[None, :] - M) / epsilon)
    violation = np.inf
    iterations = 0
    for iterations in range(1, max_iters + 1):
        plan = np.exp((alpha[:, None] + beta[None, :] - M) / epsilon)
        row_gap = mu - plan.sum(axis=1)
        col_gap = nu - plan.sum(axis=0)
        violation = float(np.abs(row_gap).sum() + np.abs(col_gap).sum())
        if violation <= tol:
            break
        alpha += step * row_gap
        beta += step * col_gap

    primal = float(np.sum(plan * M) - epsilon * entropy(plan))
    dual = float(
        alpha @ mu + beta @ nu - epsilon * np.sum(np.exp((alpha[:, None] + beta[None, :] - M) / epsilon))
    )
    return SinkhornSolution(
        plan=plan,
        alpha=alpha,
        beta=beta,
        primal_value=primal,
        dual_value=dual,
        iterations_used=iterations,
        marginal_violation=violation,
        converged=violation <= tol,
        epsilon=epsilon,
    )
