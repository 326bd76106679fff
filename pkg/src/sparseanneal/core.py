"""Problem and state types plus the scalar functionals of the relaxation.

The solver package works on a probabilistic relaxation of exact-k subset
selection: instead of a binary selection matrix V (one selected feature per
column), it carries a matrix Q of per-entry selection probabilities and
anneals a free energy that trades the expected regression cost against the
Shannon entropy of Q.  This module holds the data types and the algebraic
forms (entropy, expected cost, free energy, Gibbs exponent) with their
gradients.  Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

# Entries of Q are kept away from {0, 1} before any log evaluation; the
# entropy and Gibbs expressions are singular at the boundary.
EPS_CLIP = 1e-12


class ShapeError(ValueError):
    """Inputs have inconsistent dimensions."""


class DomainError(ValueError):
    """A value lies outside its mathematical domain."""


class ConfigError(ValueError):
    """A configuration value is invalid or internally inconsistent."""


class DataIntegrityError(ValueError):
    """A data file failed an integrity check."""


class ConstraintInfeasibleError(ValueError):
    """A constraint set is structurally unsatisfiable."""


class SolverError(RuntimeError):
    """A linear solve or annealing run failed beyond recovery."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    """A sparse regression instance: min ||y - Aw||^2 with at most k features.

    Parameters
    ----------
    A : (n, d) ndarray
        Design matrix with feature columns a_1 .. a_d.
    y : (n,) ndarray
        Measurement vector.
    k : int
        Sparsity budget, 1 <= k <= d.
    column_norms_sq : (d,) ndarray, optional
        Precomputed squared column norms (the vector lambda_a).  Recomputed
        when omitted; validated to relative 1e-12 when supplied.
    feature_names : tuple of str, optional
        Human-readable column names for reporting.
    """

    A: np.ndarray
    y: np.ndarray
    k: int
    column_norms_sq: np.ndarray = None  # type: ignore[assignment]
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if A.ndim != 2:
            raise ShapeError(f"A must be 2-d, got shape {A.shape}")
        n, d = A.shape
        if y.shape != (n,):
            raise ShapeError(f"y must have shape ({n},), got {y.shape}")
        if n < 1:
            raise ShapeError("need at least one measurement row")
        if not (1 <= int(self.k) <= d):
            raise DomainError(f"k={self.k} outside [1, {d}]")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise DomainError("A and y must be finite")
        norms = np.einsum("ij,ij->j", A, A)
        if self.column_norms_sq is not None:
            given = np.asarray(self.column_norms_sq, dtype=float)
            scale = np.maximum(np.abs(norms), 1e-300)
            if given.shape != (d,) or np.any(np.abs(given - norms) > 1e-12 * scale):
                raise DomainError("column_norms_sq disagrees with A")
        if self.feature_names is not None and len(self.feature_names) != d:
            raise ShapeError("feature_names length must equal d")
        object.__setattr__(self, "A", _readonly(A))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "column_norms_sq", _readonly(norms))
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class RelaxedState:
    """Solver state: selection probabilities Q, coefficients x, multipliers mu.

    rho is the penalty weight on the column-sum residual Q^T 1 - 1; the
    annealing schedule slaves it to 1/T and free_energy enforces that tie.
    """

    Q: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    T: float
    rho: float

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q, dtype=float)
        x = np.asarray(self.x, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if Q.ndim != 2:
            raise ShapeError(f"Q must be 2-d, got shape {Q.shape}")
        k = Q.shape[1]
        if x.shape != (k,) or mu.shape != (k,):
            raise ShapeError("x and mu must be k-vectors matching Q")
        if not float(self.T) > 0:
            raise DomainError(f"temperature must be positive, got {self.T}")
        if not float(self.rho) > 0:
            raise DomainError(f"penalty weight must be positive, got {self.rho}")
        if np.any(Q < -1e-12) or np.any(Q > 1 + 1e-12):
            raise DomainError("Q entries outside [0, 1]")
        object.__setattr__(self, "Q", _readonly(np.clip(Q, EPS_CLIP, 1.0 - EPS_CLIP)))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "rho", float(self.rho))

    def stochasticity_residual(self) -> np.ndarray:
        """Column-sum residual g = Q^T 1_d - 1_k."""
        return self.Q.sum(axis=0) - 1.0


@dataclass(frozen=True)
class SparseSolution:
    """Final answer: binary selection V, coefficients x, and w = Vx.

    cost is the squared residual ||y - Aw||^2; residual_norm its square
    root (the scale most convenient for reporting).  soft_rounding flags a
    rounding step applied to a Q column whose winning entry was not yet
    within round_tol of 1; feasible records whether the rounded V satisfies
    every structural constraint exactly.
    """

    V: np.ndarray
    x: np.ndarray
    w: np.ndarray
    cost: float
    effective_sparsity: int
    residual_norm: float = 0.0
    soft_rounding: bool = False
    feasible: bool = True
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        V = np.asarray(self.V, dtype=float)
        x = np.asarray(self.x, dtype=float)
        w = np.asarray(self.w, dtype=float)
        d, k = V.shape
        if not np.all((V == 0.0) | (V == 1.0)):
            raise DomainError("V must be binary")
        if np.any(V.sum(axis=0) != 1.0):
            raise DomainError("every column of V must select exactly one row")
        if x.shape != (k,) or w.shape != (d,):
            raise ShapeError("x must be a k-vector and w a d-vector")
        if np.any(w != V @ x):
            raise DomainError("w must equal Vx exactly")
        if int(self.effective_sparsity) > k:
            raise DomainError("effective sparsity exceeds the budget k")
        object.__setattr__(self, "V", _readonly(V))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "w", _readonly(w))
        object.__setattr__(self, "cost", float(self.cost))
        object.__setattr__(self, "residual_norm", float(self.residual_norm))
        object.__setattr__(self, "effective_sparsity", int(self.effective_sparsity))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def support(self) -> tuple[int, ...]:
        """Sorted 0-based indices of the selected rows."""
        return tuple(sorted(set(int(i) for i in np.argmax(self.V, axis=0))))


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def entropy(Q: np.ndarray) -> float:
    """Shannon entropy of the independent-entry selection probabilities.

    H(Q) = -sum_ij [q log q + (1-q) log(1-q)], with 0 log 0 = 0.  Always in
    [0, d*k*log 2]: zero exactly at binary Q, maximal at the all-half matrix.
    """
    Q = np.asarray(Q, dtype=float)
    if np.any(Q < -1e-12) or np.any(Q > 1 + 1e-12):
        bad = np.argwhere((Q < -1e-12) | (Q > 1 + 1e-12))[0]
        raise DomainError(f"Q[{bad[0]},{bad[1]}] outside [0, 1]")
    Qc = np.clip(Q, 0.0, 1.0)
    # x log x with the 0 log 0 = 0 convention
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(Qc > 0.0, Qc * np.log(Qc), 0.0)
        h += np.where(Qc < 1.0, (1.0 - Qc) * np.log1p(-Qc), 0.0)
    return float(-h.sum())


def entropy_gradient(Q: np.ndarray) -> np.ndarray:
    """dH/dq = log((1-q)/q), evaluated away from the clamp boundary."""
    Qc = np.clip(np.asarray(Q, dtype=float), EPS_CLIP, 1.0 - EPS_CLIP)
    return np.log1p(-Qc) - np.log(Qc)


def relaxed_cost(problem: Problem, Q: np.ndarray, x: np.ndarray) -> float:
    """Expected squared residual under independent Bernoulli selections.

    D(Q, x) = ||y - A Q x||^2 + lambda_a^T [Q o (1-Q)] (x o x), where
    lambda_a holds the squared column norms.  Equals the exact expectation
    of ||y - A V x||^2 over independent entries v_ij ~ Bernoulli(q_ij).
    """
    Q = np.asarray(Q, dtype=float)
    x = np.asarray(x, dtype=float)
    d, k = problem.d, problem.k
    if Q.shape != (d, k):
        raise ShapeError(f"Q must have shape ({d}, {k}), got {Q.shape}")
    if x.shape != (k,):
        raise ShapeError(f"x must have shape ({k},), got {x.shape}")
    r = problem.y - problem.A @ (Q @ x)
    var = problem.column_norms_sq @ ((Q * (1.0 - Q)) @ (x * x))
    return float(r @ r + var)


def relaxed_cost_gradients(
    problem: Problem, Q: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of relaxed_cost with respect to Q and x."""
    Q = np.asarray(Q, dtype=float)
    x = np.asarray(x, dtype=float)
    r = problem.y - problem.A @ (Q @ x)
    lam = problem.column_norms_sq
    grad_q = -2.0 * np.outer(problem.A.T @ r, x) + np.outer(lam, x * x) * (1.0 - 2.0 * Q)
    grad_x = 2.0 * (Q.T @ (problem.A.T @ (problem.A @ (Q @ x) - problem.y)))
    grad_x += 2.0 * x * ((Q * (1.0 - Q)).T @ lam)
    return grad_q, grad_x


def free_energy(problem: Problem, state: RelaxedState, c0: float = 0.0) -> float:
    """Temperature-scaled free energy maximized at each annealing step.

    F_T = H(Q) - (1/T) [ (D - c0) + mu^T g + (rho/2) ||g||^2 ],
    g = Q^T 1_d - 1_k.

    The multiplier and penalty terms sit inside the 1/T factor; that is the
    scaling whose stationary points are exactly the Gibbs fixed points of
    gibbs exponent xi_matrix (dF_T/dQ = log((1-Q)/Q) + (2/T) Xi).  rho must
    equal 1/T to 1e-12 relative, matching the cooling schedule.
    """
    if state.T <= 0:
        raise DomainError("temperature must be positive")
    if abs(state.rho * state.T - 1.0) > 1e-12:
        raise DomainError(
            f"rho must be slaved to 1/T (rho*T = {state.rho * state.T!r})"
        )
    g = state.stochasticity_residual()
    bracket = relaxed_cost(problem, state.Q, state.x) - c0
    bracket += float(state.mu @ g) + 0.5 * state.rho * float(g @ g)
    return entropy(state.Q) - bracket / state.T


def free_energy_gradients(
    problem: Problem, state: RelaxedState, c0: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dF_T/dQ, dF_T/dx), matching central finite differences."""
    g = state.stochasticity_residual()
    grad_q_cost, grad_x_cost = relaxed_cost_gradients(problem, state.Q, state.x)
    bracket_q = grad_q_cost + state.mu[None, :] + state.rho * g[None, :]
    grad_q = entropy_gradient(state.Q) - bracket_q / state.T
    return grad_q, -grad_x_cost / state.T


def column_groups(Q: np.ndarray, col_tol: float = 1e-3) -> list[list[int]]:
    """Partition the columns of Q into groups of near-identical columns.

    Columns i and j are merged when max-norm(q_i - q_j) <= col_tol *
    max(max-norm(q_i), max-norm(q_j), 1e-300); the partition is the
    transitive closure of that relation (union-find).  Returned groups are
    sorted by their smallest member.
    """
    Q = np.asarray(Q, dtype=float)
    k = Q.shape[1]
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    norms = np.abs(Q).max(axis=0)
    for i in range(k):
        for j in range(i + 1, k):
            scale = max(norms[i], norms[j], 1e-300)
            if np.abs(Q[:, i] - Q[:, j]).max() <= col_tol * scale:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(i)
    return [groups[r] for r in sorted(groups)]


def _xi_raw(
    A: np.ndarray,
    y: np.ndarray,
    lam: np.ndarray,
    Q: np.ndarray,
    x: np.ndarray,
    mu: np.ndarray,
    T: float,
) -> np.ndarray:
    r = y - A @ (Q @ x)
    xi = np.outer(A.T @ r, x)
    xi -= 0.5 * np.outer(lam, x * x) * (1.0 - 2.0 * Q)
    xi -= 0.5 * mu[None, :]
    xi -= (0.5 / T) * (Q.sum(axis=0) - 1.0)[None, :]
    return xi


def xi_matrix(problem: Problem, state: RelaxedState) -> np.ndarray:
    """Gibbs exponent: the fixed points of Q = sigmoid((2/T) Xi) are the
    free-energy stationary points in Q.

    Xi = A^T (y - A Q x) x^T - (1/2) lambda_a (x o x)^T o (1 - 2Q)
         - (1/2) 1_d mu^T - (1/(2T)) 1_d 1_d^T Q + (1/(2T)) 1_d 1_k^T

    The last two terms are the penalty contribution with rho = 1/T wired in:
    together they equal -(1/(2T)) 1_d g^T.
    """
    return _xi_raw(problem.A, problem.y, problem.column_norms_sq,
                   state.Q, state.x, state.mu, state.T)


def _perturbation_basis(d: int) -> np.ndarray:
    """C = [I_{d-1}; 0] - (1/d) 1_{d x (d-1)}: columns span {v : 1'v = 0}.

    The last row absorbs the rounding of 1/d so every column sums to zero
    exactly, not merely to within an ulp.
    """
    C = np.vstack([np.eye(d - 1), np.zeros((1, d - 1))])
    C = C - np.ones((d, d - 1)) / d
    if d > 1:
        C[-1, :] = -C[:-1, :].sum(axis=0)
    return C


def _stability_pencil(
    A: np.ndarray,
    y: np.ndarray,
    lam: np.ndarray,
    Q: np.ndarray,
    x: np.ndarray,
    ridge_eps: float = 1e-10,
    penalty_terms: list[tuple[float, np.ndarray]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reduced Hessian of the x-eliminated free energy as a pencil T P - N.

    Feasible perturbations Psi = C Phi keep the column sums fixed; over
    z = vec(Phi) (column blocks of size d-1) the second derivative of
    D(Q, x(Q)) + penalty - T H(Q) is exactly linear in T:

      entropy:   T * blockdiag_j( C' diag(1/(q_j (1-q_j))) C )    =: T P
      cost:      2||A Psi x||^2 - 2 sum_ij lam_i x_j^2 psi_ij^2
                 - 2 u' M^{-1} u   (Schur correction from re-solving x),
      penalty:   + sum over active quadratic scalars of w (b' z)^2,

    and N collects the negated cost and penalty parts so that the state is
    a local minimum at temperature T exactly when T P - N is positive
    semidefinite.  u is the derivative of the x-stationarity residual along
    Psi and M the coefficient-solve matrix; penalty_terms supplies pairs
    (weight, coefficient matrix over Q entries) for the active scalars.
    """
    Q = np.asarray(Q, dtype=float)
    x = np.asarray(x, dtype=float)
    d, k = Q.shape
    C = _perturbation_basis(d)
    m = (d - 1) * k
    P = np.zeros((m, m))
    N = np.zeros((m, m))
    if m == 0:
        return P, N
    AC = A @ C
    r = y - A @ (Q @ x)
    AtA = A.T @ A
    M = Q.T @ AtA @ Q + np.diag((Q * (1.0 - Q)).T @ lam)
    ev = np.linalg.eigvalsh(M)
    if ev[0] <= 0 or ev[-1] / ev[0] > 1e12:
        M = M + ridge_eps * np.eye(k)
    QtAtAC = Q.T @ AtA @ C
    rAC = r @ AC
    U = np.zeros((k, m))
    W = np.zeros((A.shape[0], m))
    for j in range(k):
        sl = slice(j * (d - 1), (j + 1) * (d - 1))
        P[sl, sl] = C.T @ (C / (Q[:, j] * (1.0 - Q[:, j]))[:, None])
        N[sl, sl] = 2.0 * x[j] ** 2 * (C.T @ (C * lam[:, None]))
        U[:, sl] = x[j] * QtAtAC
        U[j, sl] += -rAC + x[j] * ((lam * (1.0 - 2.0 * Q[:, j])) @ C)
        W[:, sl] = x[j] * AC
    N += 2.0 * U.T @ np.linalg.solve(M, U)
    N -= 2.0 * W.T @ W
    for weight, coeff in penalty_terms or ():
        b = np.concatenate([coeff[:, j] @ C for j in range(k)])
        N -= weight * np.outer(b, b)
    return P, N


def _pencil_top_eig(P: np.ndarray, N: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest lambda with N z = lambda P z, plus its eigenvector z.

    P is symmetric positive definite (entropy curvature through the full
    rank basis C), so the pencil reduces to an ordinary symmetric problem
    by Cholesky.  The state is a local minimum at temperature T exactly
    when the returned lambda is at most T.
    """
    L = np.linalg.cholesky(P)
    S = np.linalg.solve(L, np.linalg.solve(L, N).T)
    vals, vecs = np.linalg.eigh(S)
    z = np.linalg.solve(L.T, vecs[:, -1])
    return float(vals[-1]), z
