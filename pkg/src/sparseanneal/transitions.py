"""Phase-transition analysis of annealing traces.

As the temperature drops, the number of distinct columns of Q (equivalently
the number of distinct nonzero values in x) jumps upward at critical
temperatures where the tracked fixed point loses stability.  This module
detects those jumps along a trace, predicts them from the curvature of the
x-eliminated objective restricted to column-sum-preserving perturbations,
computes the per-phase fractional-change statistic of the coefficients, and
estimates the underlying true sparsity as the distinct-column count that
persists over the widest log(1/T) range.

All analysis is read-only over immutable traces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparseanneal.core import (
    DomainError,
    Problem,
    _perturbation_basis,
    _stability_pencil,
    column_groups,
    entropy,
    relaxed_cost,
)
from sparseanneal.solver import AnnealTrace, update_x

# Kept deliberately above the clip scale: central differences need room on
# both sides of every perturbed entry.
_BOUNDARY_MARGIN_FACTOR = 2.5


@dataclass(frozen=True)
class PerturbationBasis:
    """Fixed parameterization of the column-sum-preserving directions.

    C is the d x (d-1) matrix [I; 0] - (1/d) 1, with the last row holding
    the exact negated sum of the rows above it so each column sums to zero
    in floating point identically.  Perturbing a column of Q by C phi moves
    the state without leaving the column-stochastic manifold, and any such
    feasible direction is a combination of these.
    """

    C: np.ndarray

    @classmethod
    def for_dimension(cls, d: int) -> "PerturbationBasis":
        if d < 1:
            raise DomainError(f"dimension must be positive, got {d}")
        return cls(C=_perturbation_basis(d))

    def __post_init__(self) -> None:
        C = np.asarray(self.C, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1] + 1:
            raise DomainError(f"basis must be d x (d-1), got {C.shape}")
        if C.shape[1] and float(np.abs(C.sum(axis=0)).max()) != 0.0:
            raise DomainError("basis columns must sum to zero exactly")
        object.__setattr__(self, "C", C)


@dataclass(frozen=True)
class BlockEstimate:
    """Critical-temperature estimate from one coincident-column group."""

    columns: tuple[int, ...]
    t_cr: float | None
    h0_min_eigenvalue: float
    included: bool


@dataclass(frozen=True)
class CriticalTemperatureEstimate:
    """Aggregate critical temperature with per-block detail.

    value is None when no coincident-column block produced a usable
    estimate (all columns already distinct, or every block was excluded
    for an indefinite temperature-coefficient matrix).
    """

    value: float | None
    blocks: tuple[BlockEstimate, ...]
    factor_two: bool
    warnings: tuple[str, ...]


@dataclass(frozen=True)
class PhaseSegment:
    """Fractional-change statistics of x between two consecutive jumps."""

    start: int
    stop: int
    k_d: int
    median_change: float
    max_change: float


@dataclass(frozen=True)
class PersistenceEstimate:
    """Sparsity estimate: the k_d with the largest log(1/T) dwell.

    The k_d = 1 plateau (unbounded above by the T_max choice) and the
    terminal k_d = k plateau (unbounded below) are excluded; when nothing
    remains the estimate falls back to k with low_confidence set.
    """

    k_hat: int
    low_confidence: bool
    dwell: tuple[tuple[int, float], ...]


@dataclass(frozen=True)
class TransitionReport:
    """Everything the trace says about its phase transitions.

    mechanisms labels each transition by how the solver reached the new
    state: "instability" when the stability test rejected the tracked
    continuation (a symmetry-breaking split, expected to show a stability
    sign flip across the transition), "probe" when a fresh equilibration
    from the maximum-entropy state won (a valley change with no local
    signature), and "drift" when plain equilibration moved basins on its
    own.
    """

    critical_temperatures: tuple[tuple[float, int, int], ...]
    segments: tuple[PhaseSegment, ...]
    jumps: tuple[float, ...]
    persistence: PersistenceEstimate
    mechanisms: tuple[str, ...] = ()
    analytic: tuple[CriticalTemperatureEstimate, ...] | None = None

    def __post_init__(self) -> None:
        temps = [t for t, _, _ in self.critical_temperatures]
        if any(b >= a for a, b in zip(temps, temps[1:])):
            raise DomainError("critical temperatures must strictly decrease")


def count_distinct_columns(Q: np.ndarray, col_tol: float = 1e-3) -> int:
    """Number of distinct columns of Q under a relative max-norm tolerance."""
    return len(column_groups(Q, col_tol))


def _objective_factory(problem: Problem):
    """Evaluator of the x-eliminated objective D(Q, x*(Q)) - T H(Q).

    Terms that are invariant along column-sum-preserving directions (the
    column-sum multiplier and its quadratic penalty) are omitted: they
    cancel exactly in any finite difference taken along the basis.
    """
    def objective(Qp: np.ndarray, temperature: float) -> float:
        x = update_x(problem, Qp)
        return relaxed_cost(problem, Qp, x) - temperature * entropy(Qp)

    return objective


def _fd_step(Q: np.ndarray, step: float | None) -> float:
    h = 1e-5 * (1.0 + float(np.linalg.norm(Q))) if step is None else float(step)
    margin = float(np.minimum(Q, 1.0 - Q).min())
    if margin <= _BOUNDARY_MARGIN_FACTOR * h:
        raise DomainError(
            "Q entries are within finite-difference reach of the {0,1} "
            f"boundary (margin {margin:.3g}, step {h:.3g})")
    return h


def reduced_hessian(
    problem: Problem,
    Q: np.ndarray,
    T: float,
    step: float | None = None,
) -> np.ndarray:
    """Hessian of the x-eliminated objective over feasible perturbations.

    The perturbation Q + C Phi is parameterized by Phi with one
    (d-1)-block per column of Q, giving a symmetric k(d-1) matrix in the
    flattened coordinates (column-major blocks).  Entries are second-order
    central finite differences of the objective with x re-solved at every
    evaluation; the result is symmetrized.  Positive definite exactly when
    the state is a stable local minimum at temperature T.

    Parameters
    ----------
    problem : Problem
        Data defining the objective.
    Q : ndarray
        Fixed point at temperature T, strictly inside (0, 1).
    T : float
        Temperature of the evaluation.
    step : float, optional
        Override for the finite-difference step (default 1e-5 scaled by
        the Frobenius norm of Q).
    """
    Q = np.asarray(Q, dtype=float)
    d, k = Q.shape
    if not float(T) > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    h = _fd_step(Q, step)
    C = PerturbationBasis.for_dimension(d).C
    f = _objective_factory(problem)
    m = (d - 1) * k

    def perturbed(coords: list[tuple[int, float]]) -> float:
        Qp = Q.copy()
        for idx, amount in coords:
            j, a = divmod(idx, d - 1)
            Qp[:, j] += amount * C[:, a]
        return f(Qp, T)

    base = f(Q, T)
    H = np.zeros((m, m))
    plus = np.empty(m)
    minus = np.empty(m)
    for i in range(m):
        plus[i] = perturbed([(i, h)])
        minus[i] = perturbed([(i, -h)])
        H[i, i] = (plus[i] - 2.0 * base + minus[i]) / (h * h)
    for i in range(m):
        for l in range(i + 1, m):
            pp = perturbed([(i, h), (l, h)])
            mm = perturbed([(i, -h), (l, -h)])
            # reuse the axis evaluations: f(+i+l)+f(-i-l) - f(+i)-f(-i)
            # - f(+l)-f(-l) + 2 f(0) equals 2 h^2 H_il for a quadratic
            H[i, l] = H[l, i] = (
                pp + mm - plus[i] - minus[i] - plus[l] - minus[l] + 2.0 * base
            ) / (2.0 * h * h)
    return 0.5 * (H + H.T)


def stability_matrix(problem: Problem, Q: np.ndarray, T: float) -> np.ndarray:
    """Closed-form twin of reduced_hessian, safe at near-binary states.

    Assembles the same k(d-1) matrix as T P - N from the analytic second
    derivatives of the x-eliminated objective (entropy part P, data part
    N).  Finite differences need room on both sides of every Q entry and
    fail once the state approaches the {0,1} boundary; this form only ever
    evaluates 1/(q(1-q)), which stays finite on clipped entries, so it is
    the evaluator of choice for late-trace states.  Cross-validated
    against reduced_hessian to 1e-5 relative at interior states.
    """
    Q = np.asarray(Q, dtype=float)
    x = update_x(problem, Q)
    P, N = _stability_pencil(problem.A, problem.y, problem.column_norms_sq,
                             Q, x)
    return float(T) * P - N


def block_critical_value(H0: np.ndarray, H1: np.ndarray) -> float:
    """Per-block formula: largest T with (T/2) H0 - H1 singular.

    Equivalently 2 lambda_max of the generalized eigenproblem
    H1 v = lambda H0 v, reduced by a Cholesky factorization of H0 (which
    must be positive definite).
    """
    L = np.linalg.cholesky(H0)
    S = np.linalg.solve(L, np.linalg.solve(L, H1).T)
    vals = np.linalg.eigvalsh(0.5 * (S + S.T))
    return 2.0 * float(vals[-1])


def critical_temperature(
    problem: Problem,
    Q: np.ndarray,
    T_probe: float,
    col_tol: float = 1e-3,
    factor_two: bool = False,
    step: float | None = None,
) -> CriticalTemperatureEstimate:
    """Predict where the state at T_probe loses stability.

    Within each group of coincident columns, the objective restricted to
    the paired direction family C phi (e_j1 - e_j2)^T has a Hessian that
    is exactly linear in T (the data part is temperature free once x is
    eliminated, the entropy part is proportional to T), so evaluating it
    at T_probe and T_probe/2 on the same Q separates the two parts:

        H(T) = (T/2) H0 - H1.

    The block's critical temperature is where that pencil turns singular,
    2 lambda_max(H1 v = lambda H0 v); the aggregate is the maximum over
    blocks (doubled when factor_two is set).  Groups that are already
    singletons cannot split and are skipped; blocks whose H0 is not
    positive definite are excluded with a warning.
    """
    Q = np.asarray(Q, dtype=float)
    d, _ = Q.shape
    h = _fd_step(Q, step)
    C = PerturbationBasis.for_dimension(d).C
    f = _objective_factory(problem)
    warnings: list[str] = []
    blocks: list[BlockEstimate] = []

    def block_hessian(j1: int, j2: int, temperature: float) -> np.ndarray:
        m = d - 1
        base = f(Q, temperature)
        plus = np.empty(m)
        minus = np.empty(m)
        H = np.zeros((m, m))

        def at(coords):
            Qp = Q.copy()
            for a, amount in coords:
                Qp[:, j1] += amount * C[:, a]
                Qp[:, j2] -= amount * C[:, a]
            return f(Qp, temperature)

        for a in range(m):
            plus[a] = at([(a, h)])
            minus[a] = at([(a, -h)])
            H[a, a] = (plus[a] - 2.0 * base + minus[a]) / (h * h)
        for a in range(m):
            for b in range(a + 1, m):
                pp = at([(a, h), (b, h)])
                mm = at([(a, -h), (b, -h)])
                H[a, b] = H[b, a] = (
                    pp + mm - plus[a] - minus[a] - plus[b] - minus[b]
                    + 2.0 * base
                ) / (2.0 * h * h)
        return 0.5 * (H + H.T)

    for group in column_groups(Q, col_tol):
        if len(group) < 2:
            continue
        j1, j2 = group[0], group[1]
        t1, t2 = float(T_probe), 0.5 * float(T_probe)
        Ha = block_hessian(j1, j2, t1)
        Hb = block_hessian(j1, j2, t2)
        H0 = 2.0 * (Ha - Hb) / (t1 - t2)
        H1 = 0.5 * t1 * H0 - Ha
        h0_min = float(np.linalg.eigvalsh(H0)[0])
        if h0_min <= 0.0:
            warnings.append(
                f"block for columns {tuple(group)} excluded: temperature "
                f"coefficient not positive definite (min eigenvalue "
                f"{h0_min:.3g})")
            blocks.append(BlockEstimate(columns=tuple(group), t_cr=None,
                                        h0_min_eigenvalue=h0_min,
                                        included=False))
            continue
        t_cr = block_critical_value(H0, H1)
        blocks.append(BlockEstimate(columns=tuple(group), t_cr=t_cr,
                                    h0_min_eigenvalue=h0_min, included=True))

    usable = [b.t_cr for b in blocks if b.included and b.t_cr is not None]
    if not blocks:
        warnings.append("all columns are already distinct; nothing can split")
    value = None
    if usable:
        value = max(usable)
        if factor_two:
            value *= 2.0
    return CriticalTemperatureEstimate(
        value=value,
        blocks=tuple(blocks),
        factor_two=factor_two,
        warnings=tuple(warnings),
    )


def fractional_change_stats(
    trace: AnnealTrace,
) -> tuple[tuple[PhaseSegment, ...], tuple[float, ...]]:
    """Per-phase fractional change of x, and the jump at each transition.

    Within a segment (records between consecutive k_d jumps) the
    fractional change of record n is ||x(n) - x_mean|| / ||x_mean|| with
    x_mean the segment average; a transition's jump is the first
    post-transition x measured against the previous segment's mean.
    Returns one PhaseSegment per non-empty segment and one jump per
    detected transition; both empty when the trace has no transitions.
    """
    records = trace.records
    cuts = list(trace.transitions)
    if not cuts:
        return (), ()
    bounds = [0] + cuts + [len(records)]
    xs = [np.asarray(r.x, dtype=float) for r in records]

    segments: list[PhaseSegment] = []
    means: dict[tuple[int, int], np.ndarray] = {}
    for start, stop in zip(bounds[:-1], bounds[1:]):
        if stop <= start:
            continue
        mean = np.mean(xs[start:stop], axis=0)
        means[(start, stop)] = mean
        denom = max(float(np.linalg.norm(mean)), 1e-300)
        changes = [float(np.linalg.norm(x - mean)) / denom
                   for x in xs[start:stop]]
        segments.append(PhaseSegment(
            start=start,
            stop=stop,
            k_d=records[start].k_d,
            median_change=float(np.median(changes)),
            max_change=float(np.max(changes)),
        ))

    jumps: list[float] = []
    for idx, cut in enumerate(cuts):
        prev_start, prev_stop = bounds[idx], bounds[idx + 1]
        mean = means.get((prev_start, prev_stop))
        if mean is None:
            jumps.append(float("nan"))
            continue
        denom = max(float(np.linalg.norm(mean)), 1e-300)
        jumps.append(float(np.linalg.norm(xs[cut] - mean)) / denom)
    return tuple(segments), tuple(jumps)


def persistence_estimate(trace: AnnealTrace, k: int | None = None) -> PersistenceEstimate:
    """Estimate the true sparsity as the longest-lived interior k_d.

    Dwell length of a record is measured in log(1/T) (the natural clock of
    geometric cooling: every cooling step contributes log(1/beta)).  The
    k_d = 1 and k_d = k plateaus are schedule artifacts and are excluded;
    with no interior plateau observed the estimate is k, flagged low
    confidence.
    """
    records = trace.records
    if not records:
        raise DomainError("trace has no records")
    kd = [r.k_d for r in records]
    k_max = int(k) if k is not None else records[-1].Q.shape[1]
    dwell: dict[int, float] = {}
    for i in range(len(records) - 1):
        width = float(np.log(records[i].T / records[i + 1].T))
        dwell[kd[i]] = dwell.get(kd[i], 0.0) + width
    interior = {v: w for v, w in dwell.items() if 1 < v < k_max}
    ranking = tuple(sorted(dwell.items()))
    if not interior:
        return PersistenceEstimate(k_hat=k_max, low_confidence=True,
                                   dwell=ranking)
    # ties go to the smaller k_d, the earlier (wider-T) plateau
    k_hat = min(v for v, w in interior.items()
                if w >= max(interior.values()) - 1e-12)
    return PersistenceEstimate(k_hat=int(k_hat), low_confidence=False,
                               dwell=ranking)


def analyze_trace(
    trace: AnnealTrace,
    problem: Problem | None = None,
    k: int | None = None,
    col_tol: float = 1e-3,
    factor_two: bool = False,
) -> TransitionReport:
    """Assemble the full transition report for one annealing trace.

    Observed critical temperatures are the trace temperatures where k_d
    jumped.  When problem is given, each transition also gets an analytic
    estimate computed at the record just above it (failures are recorded
    in that estimate's warnings rather than raised, since late-trace
    states can sit too close to the binary boundary for differencing).
    """
    records = trace.records
    observed = tuple(
        (records[i].T, records[i - 1].k_d, records[i].k_d)
        for i in trace.transitions
    )
    mechanisms = tuple(
        "probe" if records[i].probe_adopted
        else "instability" if records[i].kicked
        else "drift"
        for i in trace.transitions
    )
    segments, jumps = fractional_change_stats(trace)
    persistence = persistence_estimate(trace, k=k)

    analytic = None
    if problem is not None:
        estimates = []
        for i in trace.transitions:
            above = records[i - 1]
            try:
                est = critical_temperature(problem, above.Q, above.T,
                                           col_tol=col_tol,
                                           factor_two=factor_two)
            except DomainError as exc:
                est = CriticalTemperatureEstimate(
                    value=None, blocks=(), factor_two=factor_two,
                    warnings=(str(exc),))
            estimates.append(est)
        analytic = tuple(estimates)

    return TransitionReport(
        critical_temperatures=observed,
        segments=segments,
        jumps=jumps,
        persistence=persistence,
        mechanisms=mechanisms,
        analytic=analytic,
    )
