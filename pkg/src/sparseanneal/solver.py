"""Deterministic annealing solver.

The solver alternates two closed-form stationarity maps at a fixed
temperature, coefficients by a k x k linear solve and probabilities by a
Gibbs (sigmoid) update of the exponent matrix, while a per-column
multiplier keeps every column of Q summing to one.  An outer loop cools
the temperature geometrically and finally rounds Q to a binary selection.
Everything is deterministic; no random numbers are drawn anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from sparseanneal.constraints import (
    GROUP_TIE,
    ConstraintSet,
    penalty_and_gradient,
    penalty_curvature,
    penalty_value,
    require_feasible,
    update_constraint_multipliers,
)
from sparseanneal.core import (
    EPS_CLIP,
    ConfigError,
    Problem,
    RelaxedState,
    SolverError,
    SparseSolution,
    _pencil_top_eig,
    _perturbation_basis,
    _stability_pencil,
    _xi_raw as core_xi,
    column_groups,
    entropy,
    relaxed_cost,
    xi_matrix,
)

AUTO = "auto"

# Saddle escape: size of the nudge along an unstable direction, and the cap
# on escape rounds per temperature.
_KICK_SIZE = 1e-3
_MAX_KICKS = 16
_PROBE_PATIENCE = 15

# Structural penalties follow the 1/T schedule only down to this weight.
# Past it the quadratic term already dwarfs any data-cost gap, while an
# uncapped weight makes the dual steps overshoot without bound and its
# curvature freezes the symmetry breaking.
_RHO_CAP = 10.0


def _penalty_rho(T: float) -> float:
    """Structural-penalty weight at temperature T: 1/T, saturating."""
    return min(1.0 / T, _RHO_CAP)


@dataclass(frozen=True)
class AnnealConfig:
    """Annealing schedule and tolerances.

    t_max may be the string "auto", in which case a starting temperature is
    found by doubling until the fixed point from uniform initialization
    stays uniform (see auto_tmax).  When t_min is None the run stops once
    every Q entry is within binary_stop_tol of {0, 1} or after
    max_cooling_steps temperatures, whichever comes first.

    seed does not influence the annealing path (which is deterministic);
    it is recorded so artifacts can tie a run to the instance generator.
    """

    t_max: float | str = AUTO
    t_min: float | None = None
    beta: float = 0.95
    inner_max_iters: int = 2000
    inner_tol: float = 1e-8
    damping: float = 0.5
    ridge_eps: float = 1e-10
    tol_stoch: float = 1e-6
    round_tol: float = 1e-3
    seed: int = 0
    binary_stop_tol: float = 1e-3
    max_cooling_steps: int = 500
    col_tol: float = 1e-3

    def validate(self) -> None:
        if not (0.0 < self.beta < 1.0):
            raise ConfigError(f"beta must be in (0,1), got {self.beta}")
        if not (0.0 < self.damping <= 1.0):
            raise ConfigError(f"damping must be in (0,1], got {self.damping}")
        for name in ("inner_tol", "ridge_eps", "tol_stoch", "round_tol",
                     "binary_stop_tol", "col_tol"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("inner_max_iters", "max_cooling_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.t_max != AUTO:
            if not float(self.t_max) > 0:
                raise ConfigError(f"t_max must be positive, got {self.t_max}")
            if self.t_min is not None and not float(self.t_min) < float(self.t_max):
                raise ConfigError("t_min must be below t_max")
        if self.t_min is not None and not float(self.t_min) > 0:
            raise ConfigError(f"t_min must be positive, got {self.t_min}")


@dataclass(frozen=True)
class TraceRecord:
    """State snapshot at one temperature, after the column sums are enforced.

    Two markers classify how the state was reached.  probe_adopted means a
    fresh equilibration replaced the tracked continuation: a k_d jump at
    such a record is a valley change, not a local instability.  kicked
    means the stability test rejected the tracked point and the state
    escaped along a descent direction; unstable_Q keeps the rejected point
    so the instability can be re-examined offline at neighboring
    temperatures.  A transition with neither marker came from plain
    equilibration drift and carries no local-instability claim.
    """

    T: float
    Q: np.ndarray
    x: np.ndarray
    relaxed_cost: float
    rounded_cost: float
    k_d: int
    stoch_residual: float
    inner_iterations: int
    inner_converged: bool
    probe_adopted: bool = False
    kicked: bool = False
    unstable_Q: np.ndarray | None = None


@dataclass(frozen=True)
class AnnealTrace:
    """Per-temperature records plus the indices where k_d jumped up."""

    records: tuple[TraceRecord, ...]
    transitions: tuple[int, ...]

    def temperatures(self) -> np.ndarray:
        return np.array([r.T for r in self.records])

    def kd_series(self) -> np.ndarray:
        return np.array([r.k_d for r in self.records], dtype=int)


# ---------------------------------------------------------------------------
# stationarity maps
# ---------------------------------------------------------------------------

def _update_x_raw(
    A: np.ndarray,
    Aty: np.ndarray,
    lam: np.ndarray,
    Q: np.ndarray,
    ridge_eps: float,
) -> np.ndarray:
    AQ = A @ Q
    M = AQ.T @ AQ + np.diag((Q * (1.0 - Q)).T @ lam)
    b = Q.T @ Aty
    # symmetric PSD system, so eigvalsh gives the exact condition number
    ev = np.linalg.eigvalsh(M)
    cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        M = M + ridge_eps * np.eye(Q.shape[1])
    try:
        x = np.linalg.solve(M, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(
            f"coefficient system singular even with ridge (cond={cond:.3e})"
        ) from exc
    if not np.all(np.isfinite(x)):
        raise SolverError(
            f"coefficient solve produced non-finite values (cond={cond:.3e})"
        )
    return x


def update_x(
    problem: Problem,
    Q: np.ndarray,
    mu: np.ndarray | None = None,
    ridge_eps: float = 1e-10,
) -> np.ndarray:
    """Coefficient update: solve [Q'A'AQ + diag(lambda_a'(Q o (1-Q)))] x = Q'A'y.

    The x stationarity condition does not involve mu; the argument is
    accepted so call sites can pass solver state uniformly.  A ridge term
    ridge_eps * I is added only when the condition estimate of the system
    exceeds 1e12 (e.g. two coincident columns of Q make it singular).
    """
    Q = np.asarray(Q, dtype=float)
    return _update_x_raw(problem.A, problem.A.T @ problem.y,
                         problem.column_norms_sq, Q, ridge_eps)


def _gibbs_raw(xi: np.ndarray, T: float) -> np.ndarray:
    if not np.all(np.isfinite(xi)):
        i, j = np.argwhere(~np.isfinite(xi))[0]
        raise SolverError(f"non-finite Gibbs exponent at entry ({i}, {j})")
    scale = 2.0 / T
    h_m = np.minimum(xi, 0.0)
    h_p = np.maximum(xi, 0.0)
    num = np.exp(scale * h_m)
    q = num / (num + np.exp(-scale * h_p))
    return np.clip(q, EPS_CLIP, 1.0 - EPS_CLIP)


def _solve_column_multipliers(
    C: np.ndarray,
    T: float,
    mu0: np.ndarray,
    tol: float,
    max_iter: int = 120,
) -> np.ndarray:
    """Per-column multipliers making sigmoid((2/T)(C - mu/2)) sum to one.

    s_j(mu) = sum_i sigmoid((2/T)(C_ij - mu_j/2)) is strictly decreasing in
    mu_j, and s_j = 1 forces the root into the analytic bracket
    [2 min_i C_ij + T log(d-1), 2 max_i C_ij + T log(d-1)], so a safeguarded
    Newton iteration (bisection fallback) always converges.  At very low T
    with exactly tied top entries s_j jumps over 1 and the bracket midpoint
    is returned, the best achievable value.
    """
    d, k = C.shape
    logd = float(np.log(max(d - 1, 1)))
    lo = 2.0 * C.min(axis=0) + T * logd - 1e-9
    hi = 2.0 * C.max(axis=0) + T * logd + 1e-9
    mu = np.clip(mu0, lo, hi)

    def residual(m):
        q = _gibbs_raw(C - 0.5 * m[None, :], T)
        return q.sum(axis=0) - 1.0, q

    f, q = residual(mu)
    for _ in range(max_iter):
        if float(np.abs(f).max()) <= tol:
            break
        lo = np.where(f > 0.0, mu, lo)
        hi = np.where(f < 0.0, mu, hi)
        slope = np.maximum(q.sum(axis=0) - (q * q).sum(axis=0), 1e-300)
        cand = mu + T * f / slope
        mid = 0.5 * (lo + hi)
        use_mid = (cand <= lo) | (cand >= hi) | ~np.isfinite(cand)
        mu = np.where(use_mid, mid, cand)
        f, q = residual(mu)
    return mu


def gibbs_update_q(
    problem: Problem,
    state: RelaxedState,
    penalty_gradient: np.ndarray | None = None,
) -> np.ndarray:
    """Probability update: elementwise stable sigmoid of (2/T) Xi.

    Splitting Xi into H_m = min(Xi, 0) and H_p = max(Xi, 0) keeps every
    exponent non-positive:

        Q+ = exp((2/T) H_m) / (exp((2/T) H_m) + exp(-(2/T) H_p))

    penalty_gradient, when given, is the gradient of the structural
    constraint penalty; it enters the exponent as Xi - penalty_gradient/2
    so that fixed points are stationary for the constrained free energy.
    """
    xi = xi_matrix(problem, state)
    if penalty_gradient is not None:
        xi = xi - 0.5 * penalty_gradient
    return _gibbs_raw(xi, state.T)


def _descent_objective(
    problem: Problem,
    Q: np.ndarray,
    x: np.ndarray,
    mu: np.ndarray,
    T: float,
    constraints: ConstraintSet | None,
) -> float:
    """The quantity one inner iteration descends: -T F_T up to the c0 shift.

    G = D + mu'g + (1/(2T))||g||^2 + penalty - T H(Q).  The multiplier is
    held fixed while the step length is chosen, which makes the Gibbs
    direction an exact descent direction for G;  the mu'g term cannot be
    dropped even though g is near zero, because mu grows like T log d and
    the product stays well above rounding noise.
    """
    g = Q.sum(axis=0) - 1.0
    val = relaxed_cost(problem, Q, x) + float(mu @ g) + 0.5 / T * float(g @ g)
    if constraints is not None and len(constraints):
        val += penalty_value(constraints, Q, _penalty_rho(T))
    return val - T * entropy(Q)


def _inner_raw(
    problem: Problem,
    Aty: np.ndarray,
    Q: np.ndarray,
    mu: np.ndarray,
    T: float,
    config: AnnealConfig,
    constraints: ConstraintSet | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, bool]:
    """Damped alternation of the two maps at fixed temperature.

    Each iteration refreshes x, rebuilds the Gibbs exponent, and solves the
    per-column multiplier so the proposal is column stochastic (the
    multiplier has a strictly monotone scalar equation per column, so this
    is always possible; see _solve_column_multipliers).  With the
    multiplier then held fixed, the proposal direction is an exact descent
    direction for the free energy objective, so the step starts at the
    configured damping and backtracks only if the objective fails to
    decrease.  That guard protects the low-temperature regime, where the
    plain iteration oscillates between column assignments.

    Convergence is declared on the undamped proposal residual
    max-norm(Q+ - Q) <= inner_tol.  Returns (Q, x, mu, iterations,
    converged).
    """
    A, lam = problem.A, problem.column_norms_sq
    rho = _penalty_rho(T)
    use_pen = constraints is not None and len(constraints) > 0
    zero_mu = np.zeros(Q.shape[1])
    mu = np.asarray(mu, dtype=float).copy()
    mu_tol = 0.1 * config.tol_stoch
    converged = False
    iters = 0
    best_resid = np.inf
    since_best = 0
    x = _update_x_raw(A, Aty, lam, Q, config.ridge_eps)
    for iters in range(1, config.inner_max_iters + 1):
        # cost part of the Gibbs exponent; the mu term is solved for below
        C = core_xi(A, problem.y, lam, Q, x, zero_mu, T)
        if use_pen:
            C = C - 0.5 * penalty_and_gradient(constraints, Q, rho)[1]
        mu = _solve_column_multipliers(C, T, mu, mu_tol)
        q_plus = _gibbs_raw(C - 0.5 * mu[None, :], T)
        direction = q_plus - Q
        resid = float(np.abs(direction).max())
        if resid <= config.inner_tol:
            converged = True
            break
        # a crawl whose residual stops shrinking will not reach the
        # tolerance; cut it off instead of grinding out the iteration cap
        if resid < 0.9 * best_resid:
            best_resid = resid
            since_best = 0
        else:
            since_best += 1
            if since_best >= 50:
                converged = resid <= 10.0 * config.inner_tol
                break
        # the objective is recomputed under this iteration's multiplier;
        # near the fixed point the true decrease is O(resid^2) and falls
        # below rounding noise on obj, so accept steps within that noise
        obj = _descent_objective(problem, Q, x, mu, T, constraints)
        slack = 1e-12 * (1.0 + abs(obj))
        alpha = config.damping
        stalled = True
        while alpha >= config.damping / 1024.0:
            q_try = Q + alpha * direction
            x_try = _update_x_raw(A, Aty, lam, q_try, config.ridge_eps)
            obj_try = _descent_objective(problem, q_try, x_try, mu, T,
                                         constraints)
            if obj_try < obj + slack:
                Q, x = q_try, x_try
                stalled = False
                break
            alpha *= 0.5
        if stalled:
            converged = resid <= 10.0 * config.inner_tol
            break
    return Q, x, mu, iters, converged


def inner_solve(
    problem: Problem,
    state: RelaxedState,
    config: AnnealConfig | None = None,
    constraints: ConstraintSet | None = None,
) -> RelaxedState:
    """Fixed point of the alternating maps at the state's temperature."""
    cfg = config or AnnealConfig()
    Q, x, mu, _, _ = _inner_raw(problem, problem.A.T @ problem.y,
                                state.Q.copy(), state.mu, state.T, cfg,
                                constraints)
    return RelaxedState(Q=Q, x=x, mu=mu, T=state.T, rho=state.rho)


def update_multiplier(mu: np.ndarray, rho: float, Q: np.ndarray) -> np.ndarray:
    """One dual ascent step on the column-sum residual: mu + rho (Q'1 - 1)."""
    return np.asarray(mu, dtype=float) + float(rho) * (
        np.asarray(Q, dtype=float).sum(axis=0) - 1.0
    )


def _equilibrate(
    problem: Problem,
    Q: np.ndarray,
    mu: np.ndarray,
    T: float,
    config: AnnealConfig,
    constraints: ConstraintSet | None,
) -> tuple[RelaxedState, int, bool, bool, np.ndarray | None]:
    """Solve one temperature to a stable column-stochastic fixed point.

    Below a critical temperature the continuation of the previous minimum
    turns into a saddle of the x-eliminated free energy (this is the phase
    transition mechanism), yet it remains a fixed point of the inner
    iteration: coincident column groups cannot separate under a map that
    preserves their symmetry, so without intervention the split happens
    late, seeded by rounding noise, and in an arbitrary direction.  The
    pencil T P - N detects the lost definiteness exactly, so each round
    tests the current point first: while it is unstable, the state is
    nudged along the unstable eigendirection with both signs, each nudge
    is equilibrated, and the lower branch is adopted (this is the branch
    choice of the transition).  A stable point is equilibrated once and
    re-tested, since x moves during equilibration.  The inner loop only
    ever descends, so an escape cannot fall back onto its saddle.

    Returns the state, the inner iterations spent, the convergence flag,
    whether an escape was adopted, and the first point the stability test
    rejected (None when none was).
    """
    A, lam = problem.A, problem.column_norms_sq
    Aty = A.T @ problem.y
    d, k = Q.shape
    C = _perturbation_basis(d) if d >= 2 else None
    total = 0
    converged = True
    equilibrated = False
    kicked = False
    unstable_Q = None
    x = _update_x_raw(A, Aty, lam, Q, config.ridge_eps)
    for _ in range(_MAX_KICKS + 1):
        unstable = False
        if C is not None:
            pen_terms = (penalty_curvature(constraints, Q, _penalty_rho(T))
                         if constraints is not None and len(constraints)
                         else None)
            P, N = _stability_pencil(A, problem.y, lam, Q, x,
                                     config.ridge_eps, pen_terms)
            lam_top, z = _pencil_top_eig(P, N)
            unstable = lam_top > T * (1.0 + 1e-9)
        if not unstable:
            if equilibrated:
                break
            Q, x, mu, iters, converged = _inner_raw(problem, Aty, Q, mu, T,
                                                    config, constraints)
            total += iters
            equilibrated = True
            continue
        flagged = Q.copy()
        Psi = C @ z.reshape(k, d - 1).T
        Psi = Psi / float(np.abs(Psi).max())
        # reference objective is only meaningful at an equilibrated point;
        # kicks from the incoming state of a new temperature are free
        ref = (_descent_objective(problem, Q, x, np.zeros(k), T, constraints)
               if equilibrated else None)
        best = None
        for sign in (1.0, -1.0):
            Qk = np.clip(Q + sign * _KICK_SIZE * Psi,
                         EPS_CLIP, 1.0 - EPS_CLIP)
            Qk, xk, muk, iters, conv = _inner_raw(problem, Aty, Qk, mu, T,
                                                  config, constraints)
            total += iters
            val = _descent_objective(problem, Qk, xk, np.zeros(k), T,
                                     constraints)
            if best is None or val < best[0]:
                best = (val, Qk, xk, muk, conv)
        if ref is not None and best[0] >= ref - 1e-9 * (1.0 + abs(ref)):
            break
        _, Q, x, mu, converged = best
        if not kicked:
            kicked = True
            unstable_Q = flagged
        equilibrated = True
    state = RelaxedState(Q=Q, x=x, mu=mu, T=T, rho=1.0 / T)
    return state, total, converged, kicked, unstable_Q


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------

def round_to_binary(Q: np.ndarray, round_tol: float = 1e-3) -> np.ndarray:
    """Per column, put 1 at the argmax row and 0 elsewhere.

    Ties go to the lowest row index.  round_tol does not change the output;
    it is the threshold used by rounding_is_soft for diagnostics.
    """
    Q = np.asarray(Q, dtype=float)
    V = np.zeros_like(Q)
    V[np.argmax(Q, axis=0), np.arange(Q.shape[1])] = 1.0
    return V


def rounding_is_soft(Q: np.ndarray, round_tol: float = 1e-3) -> bool:
    """True when some column's winning entry is still below 1 - round_tol."""
    return bool(np.asarray(Q, dtype=float).max(axis=0).min() < 1.0 - round_tol)


def refit_binary(problem: Problem, V: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact least squares on the rows selected by V.

    Returns (x, w, cost) with w = Vx exactly.  When several columns select
    the same row, the first column carries the coefficient and the
    duplicates get zero, so w stays consistent with the support.
    """
    selected = np.argmax(V, axis=0)
    support = sorted(set(int(i) for i in selected))
    coef, *_ = np.linalg.lstsq(problem.A[:, support], problem.y, rcond=None)
    x = np.zeros(V.shape[1])
    seen: set[int] = set()
    for j, row in enumerate(selected):
        row = int(row)
        if row not in seen:
            x[j] = coef[support.index(row)]
            seen.add(row)
    w = V @ x
    r = problem.y - problem.A @ w
    return x, w, float(r @ r)


def _support_matrix(support, d: int, k: int) -> np.ndarray:
    """Selection matrix covering the support, duplicating the first feature
    when the support is smaller than the column budget."""
    V = np.zeros((d, k))
    feats = sorted(int(i) for i in support)
    for j in range(k):
        V[feats[j] if j < len(feats) else feats[0], j] = 1.0
    return V


def resolve_ties(
    problem: Problem,
    constraints: ConstraintSet,
    V: np.ndarray,
) -> tuple[np.ndarray, bool]:
    """Resolve group ties the relaxation left undecided.

    A tie group can finish the anneal with its selection mass split evenly
    across its rows: the mass equality is satisfied without the group ever
    being chosen in or out, and the per-column argmax then selects only
    part of the group.  Every assignment of the violated ties (each group
    fully in or fully out) is tried: members are removed, or added with
    the now-overfull selection trimmed of its cheapest non-tied features,
    and freed budget is refilled with the best single feature that keeps
    the whole set feasible.  Returns the lowest-cost feasible candidate by
    exact refit and whether V changed; infeasibility other than a split
    tie is left for the caller to report.
    """
    d, k = V.shape
    base = set(int(i) for i in np.flatnonzero(V.sum(axis=1)))
    broken = [
        set(c.rows) for c in constraints.constraints
        if c.kind == GROUP_TIE and 0 < len(base & set(c.rows)) < len(c.rows)
    ]
    if not broken:
        return V, False

    def cost_of(sup) -> float:
        sub = problem.A[:, sorted(sup)]
        coef, *_ = np.linalg.lstsq(sub, problem.y, rcond=None)
        r = problem.y - sub @ coef
        return float(r @ r)

    tied_rows = set().union(*broken)
    candidates: set[frozenset[int]] = set()
    for mask in range(1 << len(broken)):
        sup = set(base)
        for b, group in enumerate(broken):
            if mask >> b & 1:
                sup |= group
            else:
                sup -= group
        over = len(sup) - k
        if over > 0:
            droppable = sorted(sup - tied_rows)
            if over > len(droppable):
                continue
            for drop in combinations(droppable, over):
                candidates.add(frozenset(sup - set(drop)))
        else:
            candidates.add(frozenset(sup))
            if len(sup) < k:
                for f in range(d):
                    if f not in sup:
                        candidates.add(frozenset(sup | {f}))

    best: tuple[float, frozenset[int]] | None = None
    for sup in candidates:
        if not sup or len(sup) > k:
            continue
        if not constraints.satisfied_by_support(sup):
            continue
        c = cost_of(sup)
        if best is None or c < best[0] - 1e-12:
            best = (c, sup)
    if best is None:
        return V, False
    return _support_matrix(best[1], d, k), True


# ---------------------------------------------------------------------------
# outer loop
# ---------------------------------------------------------------------------

def auto_tmax(problem: Problem, config: AnnealConfig | None = None) -> float:
    """Find a starting temperature whose fixed point is still uniform.

    Starts at 4 max_j(a_j'a_j) ||y||^2 and doubles until the equilibrated
    state from uniform initialization deviates from 1/d by at most 1e-4 in
    max-norm.  Doubling is capped at 60 steps.
    """
    cfg = config or AnnealConfig()
    candidate = 4.0 * float(problem.column_norms_sq.max()) * float(
        problem.y @ problem.y)
    if candidate <= 0.0:
        candidate = 1.0
    uniform = np.full((problem.d, problem.k), 1.0 / problem.d)
    for _ in range(61):
        state, _, _, _, _ = _equilibrate(
            problem, uniform.copy(), np.zeros(problem.k), candidate, cfg, None)
        if float(np.abs(state.Q - 1.0 / problem.d).max()) <= 1e-4:
            return candidate
        candidate *= 2.0
    raise ConfigError("auto t_max search exceeded 60 doublings")


def anneal(
    problem: Problem,
    constraints: ConstraintSet | None = None,
    config: AnnealConfig | None = None,
) -> tuple[SparseSolution, AnnealTrace]:
    """Full annealing run: cool from t_max, then round and refit.

    At each temperature the state is equilibrated (inner fixed point with
    column sums enforced) and compared against a fresh equilibration from
    the uniform state, keeping the lower free energy of the two; one trace
    record is appended and the structural constraint multipliers take one
    dual step with rho = 1/T, saturating once 1/T dwarfs the data-cost
    scale.  Cooling stops when Q is binary to within binary_stop_tol, when
    T falls below t_min (if given), or after max_cooling_steps
    temperatures.
    """
    cfg = config or AnnealConfig()
    cfg.validate()
    cset = constraints if constraints is not None else ConstraintSet()
    if len(cset):
        require_feasible(cset, problem.k, problem.d)
        cset = ConstraintSet(
            constraints=cset.constraints,
            multipliers=np.zeros(cset.n_scalars(problem.k)),
            penalty_weight=cset.penalty_weight,
        )

    T = auto_tmax(problem, cfg) if cfg.t_max == AUTO else float(cfg.t_max)
    if cfg.t_min is not None and cfg.t_min >= T:
        raise ConfigError(f"t_min={cfg.t_min} is not below the starting "
                          f"temperature {T}")

    uniform = np.full((problem.d, problem.k), 1.0 / problem.d)
    zero_mu = np.zeros(problem.k)
    Q = uniform.copy()
    mu = zero_mu.copy()
    records: list[TraceRecord] = []
    warnings: list[str] = []
    unconverged_temps: list[float] = []
    steps = 0
    probe_losses = 0
    while True:
        active = cset if len(cset) else None
        state, inner_iters, inner_converged, kicked, unstable_Q = _equilibrate(
            problem, Q, mu, T, cfg, active)
        # The continuation tracks one valley of the free energy, but a
        # deeper valley can be born elsewhere as T drops, with no local
        # signature at the tracked point.  A fresh equilibration from the
        # maximum-entropy state is an independent tracker; keep whichever
        # equilibrium has the lower free energy at this temperature.  Once
        # every column group has split and the probe keeps losing, the
        # landscape is committed and the probe retires.
        probe_won = False
        if probe_losses < _PROBE_PATIENCE:
            probe, probe_iters, probe_converged, _, _ = _equilibrate(
                problem, uniform.copy(), zero_mu.copy(), T, cfg, active)
            inner_iters += probe_iters
            f_cont = _descent_objective(problem, state.Q, state.x, zero_mu,
                                        T, active)
            f_probe = _descent_objective(problem, probe.Q, probe.x, zero_mu,
                                         T, active)
            if f_probe < f_cont - 1e-9 * (1.0 + abs(f_cont)):
                state, inner_converged = probe, probe_converged
                probe_won = True
                # the adopted state is not the tracked continuation, so the
                # continuation's instability (if any) does not describe it
                kicked, unstable_Q = False, None
        Q, mu = state.Q, state.mu
        if not inner_converged:
            unconverged_temps.append(T)
        gnorm = float(np.abs(state.stochasticity_residual()).max())
        _, _, rounded_cost = refit_binary(problem, round_to_binary(Q))
        k_d = len(column_groups(Q, cfg.col_tol))
        if probe_won or kicked:
            # a kick means the stability test is still rejecting states, so
            # the landscape is not committed and the probe stays useful
            probe_losses = 0
        elif k_d == problem.k:
            probe_losses += 1
        records.append(TraceRecord(
            T=T,
            Q=Q.copy(),
            x=state.x.copy(),
            relaxed_cost=relaxed_cost(problem, Q, state.x),
            rounded_cost=rounded_cost,
            k_d=k_d,
            stoch_residual=gnorm,
            inner_iterations=inner_iters,
            inner_converged=inner_converged,
            probe_adopted=probe_won,
            kicked=kicked,
            unstable_Q=unstable_Q,
        ))
        if len(cset):
            cset = update_constraint_multipliers(cset, Q, _penalty_rho(T))
        if float(np.abs(Q - np.round(Q)).max()) <= cfg.binary_stop_tol:
            break
        steps += 1
        if steps >= cfg.max_cooling_steps:
            warnings.append("cooling budget exhausted before Q became binary")
            break
        if cfg.t_min is not None and T * cfg.beta < cfg.t_min:
            break
        T = T * cfg.beta

    if unconverged_temps:
        warnings.append(
            f"inner loop stopped short of tolerance at {len(unconverged_temps)}"
            f" of {len(records)} temperatures (first at T="
            f"{unconverged_temps[0]:.6g})")
    final = records[-1]
    if final.stoch_residual > cfg.tol_stoch:
        warnings.append("column sums off by more than tol_stoch at the final "
                        "temperature")
    V = round_to_binary(final.Q, cfg.round_tol)
    soft = rounding_is_soft(final.Q, cfg.round_tol)
    if soft:
        warnings.append("rounded a column whose winning probability was below "
                        "1 - round_tol")
    if len(cset) and not cset.satisfied_by_binary(V):
        V, repaired = resolve_ties(problem, cset, V)
        if repaired:
            warnings.append("a group tie was left split by the relaxation and "
                            "was resolved at rounding by exact refit")
    x, w, cost = refit_binary(problem, V)
    feasible = True
    if len(cset) and not cset.satisfied_by_binary(V):
        feasible = False
        warnings.append("rounded selection violates the constraint set")
    solution = SparseSolution(
        V=V,
        x=x,
        w=w,
        cost=cost,
        effective_sparsity=int(np.count_nonzero(w)),
        residual_norm=float(np.sqrt(cost)),
        soft_rounding=soft,
        feasible=feasible,
        warnings=tuple(warnings),
    )
    kd = [r.k_d for r in records]
    transitions = tuple(
        i for i in range(1, len(kd)) if kd[i] > kd[i - 1]
    )
    return solution, AnnealTrace(records=tuple(records), transitions=transitions)
