"""Structural feature-selection constraints as linear forms over Q entries.

Three families are supported.  at_most_one / at_least_one bound the total
selection probability mass placed on a feature group; group_tie forces the
features of a group to be selected together by equating their selection
mass (row sums of Q).  Tying the rows entrywise would be wrong: two
selected features always occupy different columns, so their rows can never
be equal at a binary point.  All families enter the solver as
augmented-Lagrangian penalties sharing the annealing penalty weight
rho = 1/T (saturating at low temperature), with one multiplier per scalar
constraint.  Every scalar is affine in the row sums of Q.

Feature indices are 0-based throughout the Python API.  The JSON schema
(see constraints_to_json) uses 1-based indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import json

import numpy as np

from sparseanneal.core import ConstraintInfeasibleError, DomainError, ShapeError

AT_MOST_ONE = "at_most_one"
AT_LEAST_ONE = "at_least_one"
GROUP_TIE = "group_tie"

_KINDS = (AT_MOST_ONE, AT_LEAST_ONE, GROUP_TIE)


@dataclass(frozen=True)
class LinearConstraint:
    """One structural constraint over the rows listed in ``rows``.

    at_most_one  : sum_{t, i in rows} q_it <= 1
    at_least_one : sum_{t, i in rows} q_it >= 1
    group_tie    : sum_t q_{rows[0], t} = sum_t q_{rows[m], t} for m >= 1
    """

    kind: str
    rows: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise DomainError(f"unknown constraint kind {self.kind!r}")
        rows = tuple(int(i) for i in self.rows)
        if len(rows) < 2:
            raise DomainError("a constraint needs at least two features")
        if len(set(rows)) != len(rows):
            raise DomainError(f"duplicate feature index in {rows}")
        if any(i < 0 for i in rows):
            raise DomainError("feature indices must be non-negative")
        object.__setattr__(self, "rows", rows)

    def n_scalars(self, k: int) -> int:
        """Number of scalar constraint functions this expands to."""
        if self.kind == GROUP_TIE:
            return len(self.rows) - 1
        return 1

    def scalar_values(self, Q: np.ndarray) -> np.ndarray:
        """Normalized constraint values, feasible iff <= 0 (inequalities) or
        = 0 (tie equalities).  Tie scalars pair rows[0] with each later row
        in declaration order."""
        if self.kind == AT_MOST_ONE:
            return np.array([Q[list(self.rows), :].sum() - 1.0])
        if self.kind == AT_LEAST_ONE:
            return np.array([1.0 - Q[list(self.rows), :].sum()])
        s = Q.sum(axis=1)
        first = self.rows[0]
        return np.array([s[first] - s[other] for other in self.rows[1:]])

    def scalar_values_binary(self, V: np.ndarray) -> np.ndarray:
        return self.scalar_values(V)

    def accumulate_gradient(self, out: np.ndarray, coefs: np.ndarray) -> None:
        """Add sum_c coefs[c] * grad(scalar_c) onto out in place."""
        if self.kind == AT_MOST_ONE:
            out[list(self.rows), :] += coefs[0]
            return
        if self.kind == AT_LEAST_ONE:
            out[list(self.rows), :] -= coefs[0]
            return
        first = self.rows[0]
        for m, other in enumerate(self.rows[1:]):
            out[first, :] += coefs[m]
            out[other, :] -= coefs[m]

    def is_equality(self) -> bool:
        return self.kind == GROUP_TIE

    def satisfied_by_support(self, support: set[int]) -> bool:
        """Feasibility of a plain feature subset (used by the exhaustive
        oracle and by rounding checks)."""
        hit = len(support.intersection(self.rows))
        if self.kind == AT_MOST_ONE:
            return hit <= 1
        if self.kind == AT_LEAST_ONE:
            return hit >= 1
        return hit == 0 or hit == len(self.rows)


def at_most_one(features) -> LinearConstraint:
    """At most one of the listed features may be selected."""
    return LinearConstraint(kind=AT_MOST_ONE, rows=tuple(features))


def at_least_one(features) -> LinearConstraint:
    """At least one of the listed features must be selected."""
    return LinearConstraint(kind=AT_LEAST_ONE, rows=tuple(features))


def group_tie(features) -> LinearConstraint:
    """The listed features are selected together or not at all."""
    return LinearConstraint(kind=GROUP_TIE, rows=tuple(features))


@dataclass(frozen=True)
class ConstraintSet:
    """An immutable bundle of constraints plus their penalty multipliers.

    multipliers is laid out constraint by constraint in declaration order,
    each expanded to its scalar functions (see LinearConstraint).  None
    means all-zero.  Multiplier updates return a new set; see
    update_constraint_multipliers.
    """

    constraints: tuple[LinearConstraint, ...] = ()
    multipliers: np.ndarray | None = None
    penalty_weight: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if float(self.penalty_weight) <= 0:
            raise DomainError("penalty_weight must be positive")
        if self.multipliers is not None:
            m = np.array(self.multipliers, dtype=float, copy=True)
            m.flags.writeable = False
            object.__setattr__(self, "multipliers", m)

    def __len__(self) -> int:
        return len(self.constraints)

    def n_scalars(self, k: int) -> int:
        return sum(c.n_scalars(k) for c in self.constraints)

    def resolved_multipliers(self, k: int) -> np.ndarray:
        n = self.n_scalars(k)
        if self.multipliers is None:
            return np.zeros(n)
        if self.multipliers.shape != (n,):
            raise ShapeError(
                f"multiplier vector has length {self.multipliers.shape[0]}, "
                f"expected {n} for k={k}"
            )
        return self.multipliers

    def scalar_values(self, Q: np.ndarray) -> np.ndarray:
        if not self.constraints:
            return np.zeros(0)
        return np.concatenate([c.scalar_values(Q) for c in self.constraints])

    def equality_mask(self, k: int) -> np.ndarray:
        parts = [np.full(c.n_scalars(k), c.is_equality()) for c in self.constraints]
        if not parts:
            return np.zeros(0, dtype=bool)
        return np.concatenate(parts)

    def satisfied_by_support(self, support) -> bool:
        s = set(int(i) for i in support)
        return all(c.satisfied_by_support(s) for c in self.constraints)

    def satisfied_by_binary(self, V: np.ndarray, tol: float = 1e-9) -> bool:
        """Exact feasibility of a rounded selection matrix."""
        for c in self.constraints:
            v = c.scalar_values_binary(V)
            if c.is_equality():
                if np.any(np.abs(v) > tol):
                    return False
            elif np.any(v > tol):
                return False
        return True


def validate(cset: ConstraintSet, k: int, d: int) -> str | None:
    """Structural feasibility pre-check.  Returns None when no problem is
    found, otherwise a human-readable report of the first violation.

    The disjoint-set counting is a sound sufficient test (greedy family of
    pairwise disjoint at_least_one sets), not a complete feasibility
    decision procedure.
    """
    for c in cset.constraints:
        if any(i >= d for i in c.rows):
            return f"constraint {c.kind} references feature {max(c.rows)} but d={d}"
    # pigeonhole: pairwise disjoint at_least_one sets each consume a slot
    alo = [set(c.rows) for c in cset.constraints if c.kind == AT_LEAST_ONE]
    alo.sort(key=len)
    taken: set[int] = set()
    disjoint = 0
    for s in alo:
        if not (s & taken):
            disjoint += 1
            taken |= s
    if disjoint > k:
        return (f"{disjoint} pairwise disjoint at_least_one groups cannot all "
                f"be covered with k={k} features")
    # a tie group forced in by an at_least_one subset must fit the budget
    for c in cset.constraints:
        if c.kind != GROUP_TIE or len(c.rows) <= k:
            continue
        g = set(c.rows)
        for s in alo:
            if s <= g:
                return (f"group_tie over {len(c.rows)} features is forced by an "
                        f"at_least_one subset but exceeds k={k}")
    return None


def require_feasible(cset: ConstraintSet, k: int, d: int) -> None:
    report = validate(cset, k, d)
    if report is not None:
        raise ConstraintInfeasibleError(report)


class _PenaltyStruct:
    """Flattened constraint structure for vectorized penalty evaluation.

    Every scalar is affine in the row sums of Q: v = W (Q 1) + offsets,
    one W row per scalar in the declaration order of the multiplier
    layout.  Tie scalars carry +1/-1 on the paired rows and no offset.
    """

    def __init__(self, constraints: tuple[LinearConstraint, ...], k: int):
        w_rows, offs, eq = [], [], []
        d = 1 + max((max(c.rows) for c in constraints), default=0)
        for c in constraints:
            if c.kind == GROUP_TIE:
                for other in c.rows[1:]:
                    row = np.zeros(d)
                    row[c.rows[0]] = 1.0
                    row[other] = -1.0
                    w_rows.append(row)
                    offs.append(0.0)
                    eq.append(True)
            else:
                row = np.zeros(d)
                sign = 1.0 if c.kind == AT_MOST_ONE else -1.0
                row[list(c.rows)] = sign
                w_rows.append(row)
                offs.append(-sign)
                eq.append(False)
        self.n = len(w_rows)
        self.d_min = d
        self.W = np.array(w_rows) if w_rows else np.zeros((0, d))
        self.offsets = np.array(offs)
        self.eq_mask = np.array(eq, dtype=bool)

    def values(self, Q: np.ndarray) -> np.ndarray:
        # W is sized to the highest constrained feature; rows past it have
        # zero weight in every scalar
        return self.W @ Q[:self.d_min].sum(axis=1) + self.offsets

    def add_gradient(self, grad: np.ndarray, coefs: np.ndarray) -> None:
        grad[:self.d_min] += (self.W.T @ coefs)[:, None]


_STRUCT_CACHE: dict[tuple[int, int], tuple[object, _PenaltyStruct]] = {}


def _penalty_struct(cset: ConstraintSet, k: int) -> _PenaltyStruct:
    key = (id(cset.constraints), k)
    hit = _STRUCT_CACHE.get(key)
    if hit is not None and hit[0] is cset.constraints:
        return hit[1]
    struct = _PenaltyStruct(cset.constraints, k)
    if len(_STRUCT_CACHE) > 128:
        _STRUCT_CACHE.clear()
    _STRUCT_CACHE[key] = (cset.constraints, struct)
    return struct


def _penalty_parts(
    cset: ConstraintSet, Q: np.ndarray, rho: float
) -> tuple[float, np.ndarray, _PenaltyStruct]:
    k = Q.shape[1]
    struct = _penalty_struct(cset, k)
    mult = cset.resolved_multipliers(k)
    v = struct.values(Q)
    viol = np.where(struct.eq_mask, v, np.maximum(0.0, v))
    rho_eff = float(rho) * cset.penalty_weight
    total = float(mult @ v) + 0.5 * rho_eff * float(viol @ viol)
    coefs = mult + rho_eff * viol
    return total, coefs, struct


def penalty_value(cset: ConstraintSet, Q: np.ndarray, rho: float) -> float:
    """Augmented-Lagrangian contribution of the constraint set at Q."""
    return _penalty_parts(cset, Q, rho)[0]


def penalty_and_gradient(
    cset: ConstraintSet, Q: np.ndarray, rho: float
) -> tuple[float, np.ndarray]:
    """Augmented-Lagrangian contribution of the constraint set at Q.

    For an inequality scalar g (feasible g <= 0) with multiplier mu:
    mu*g + (rho/2)*max(0, g)^2.  For a tie equality h: mu*h + (rho/2)*h^2.
    Returns the summed contribution and its gradient in Q.
    """
    total, coefs, struct = _penalty_parts(cset, Q, rho)
    grad = np.zeros_like(Q, dtype=float)
    struct.add_gradient(grad, coefs)
    return total, grad


def penalty_curvature(
    cset: ConstraintSet, Q: np.ndarray, rho: float
) -> list[tuple[float, np.ndarray]]:
    """Second-derivative structure of the penalty at Q.

    Each active quadratic scalar (every tie equality, and each inequality
    currently violated) contributes weight * (dv/dQ) as a rank-one term;
    the multiplier parts are linear in Q and add no curvature.  Returns
    (weight, coefficient matrix) pairs.
    """
    k = Q.shape[1]
    rho = float(rho) * cset.penalty_weight
    out: list[tuple[float, np.ndarray]] = []
    for c in cset.constraints:
        n = c.n_scalars(k)
        v = c.scalar_values(Q)
        for s in range(n):
            if not c.is_equality() and v[s] <= 0.0:
                continue
            coeff = np.zeros_like(Q, dtype=float)
            one = np.zeros(n)
            one[s] = 1.0
            c.accumulate_gradient(coeff, one)
            out.append((rho, coeff))
    return out


def update_constraint_multipliers(
    cset: ConstraintSet, Q: np.ndarray, rho: float
) -> ConstraintSet:
    """One dual ascent step: mu <- max(0, mu + rho*g) for inequalities,
    mu <- mu + rho*h for tie equalities.  Returns a new ConstraintSet."""
    k = Q.shape[1]
    mult = cset.resolved_multipliers(k).copy()
    rho = float(rho) * cset.penalty_weight
    vals = cset.scalar_values(Q)
    eq = cset.equality_mask(k)
    mult = mult + rho * vals
    mult[~eq] = np.maximum(0.0, mult[~eq])
    return replace(cset, multipliers=mult)


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------

_JSON_KIND = {AT_MOST_ONE: "at_most_one", AT_LEAST_ONE: "at_least_one",
              GROUP_TIE: "group"}
_JSON_KIND_INV = {v: k for k, v in _JSON_KIND.items()}


def constraints_to_json(cset: ConstraintSet) -> str:
    """Serialize as a list of {"kind": ..., "features": [1-based]} objects."""
    items = [
        {"kind": _JSON_KIND[c.kind], "features": [i + 1 for i in c.rows]}
        for c in cset.constraints
    ]
    return json.dumps(items, sort_keys=True, separators=(",", ":")) + "\n"


def constraints_from_json(text: str) -> ConstraintSet:
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DomainError(f"constraint file is not valid JSON: {exc}") from exc
    if not isinstance(items, list):
        raise DomainError("constraint JSON must be a list")
    out = []
    for item in items:
        if not isinstance(item, dict) or set(item) != {"kind", "features"}:
            raise DomainError(f"bad constraint entry {item!r}")
        kind = _JSON_KIND_INV.get(item["kind"])
        if kind is None:
            raise DomainError(f"unknown constraint kind {item['kind']!r}")
        feats = item["features"]
        if not isinstance(feats, list) or any(
            not isinstance(i, int) or i < 1 for i in feats
        ):
            raise DomainError(f"features must be positive 1-based integers, got {feats!r}")
        out.append(LinearConstraint(kind=kind, rows=tuple(i - 1 for i in feats)))
    return ConstraintSet(constraints=tuple(out))
