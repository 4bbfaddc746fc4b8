"""Lagrangian dual machinery for budget-constrained coupon assignment.

The primal picks one coupon per opportunity to maximize expected completions
subject to spend <= budget_rate * earned GMV. Relaxing the budget constraint
with a multiplier decomposes the problem per opportunity; the dual is concave
piecewise linear in the multiplier and is maximized by ternary search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class AllocationProblem:
    """One batch allocation instance.

    z: (N, H) completion probabilities, g: (N,) base prices,
    d: (H,) coupon levels with d[0] == 0, budget_rate in (0, 1].
    """

    z: np.ndarray
    g: np.ndarray
    d: np.ndarray
    budget_rate: float

    def __post_init__(self) -> None:
        z = np.asarray(self.z, dtype=float)
        g = np.asarray(self.g, dtype=float)
        d = np.asarray(self.d, dtype=float)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "d", d)
        if z.ndim != 2 or z.shape != (g.size, d.size):
            raise ValueError("z must be (N, H) matching g and d")
        if d.size < 2:
            raise ValueError("need at least two coupon levels (H >= 2)")
        if d[0] != 0.0 or (np.diff(d) <= 0).any() or d[-1] > 1.0:
            raise ValueError("coupon levels must be strictly increasing from d[0]=0 within [0, 1]")
        if (g <= 0).any():
            raise ValueError("base prices must be positive")
        if not np.isfinite(z).all():
            raise ValueError("z must be finite")
        if not 0.0 < self.budget_rate <= 1.0:
            raise ValueError("budget_rate must be in (0, 1]")

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def h(self) -> int:
        return self.d.size


@dataclass
class LambdaState:
    """Current multiplier, its bounds and the previous change margin."""

    lam: float
    lb: float
    ub: float
    delta_prev: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lb < self.ub:
            raise ValueError("bounds must satisfy 0 <= lb < ub")
        if not self.lb <= self.lam <= self.ub:
            raise ValueError("lambda outside its bounds")


def decision_score(z, g, d, budget_rate: float, lam: float):
    """Per-cell dual objective contribution z * (lam*g*d - lam*g*B - 1)."""
    return z * (lam * g * d - lam * g * budget_rate - 1.0)


def score_matrix(problem: AllocationProblem, lam: float) -> np.ndarray:
    return decision_score(
        problem.z, problem.g[:, None], problem.d[None, :], problem.budget_rate, lam
    )


def optimal_coupon(problem: AllocationProblem, i: int, lam: float) -> int:
    """Greedy per-opportunity argmin; ties resolve to the cheaper coupon."""
    if not 0 <= i < problem.n:
        raise ValueError("opportunity index out of range")
    row = decision_score(problem.z[i], problem.g[i], problem.d, problem.budget_rate, lam)
    return int(np.argmin(row))


def assign(problem: AllocationProblem, lam: float) -> np.ndarray:
    """Vectorized optimal_coupon over all opportunities."""
    return np.argmin(score_matrix(problem, lam), axis=1)


def dual_value(problem: AllocationProblem, lam: float) -> float:
    return float(score_matrix(problem, lam).min(axis=1).sum())


def default_lambda_bounds(problem: AllocationProblem) -> tuple[float, float]:
    """[0, ub] with ub past the last breakpoint where any coupon beats d=0."""
    positive = problem.d[problem.d > 0]
    ub = 10.0 / (problem.budget_rate * problem.g.min() * positive.min())
    return 0.0, float(ub)


def ternary_search(f, lb: float, ub: float, tol: float = 1e-8, max_iter: int = 500) -> float:
    """Maximize a concave function on [lb, ub] to interval width tol.

    Exact probe ties shrink the right side, so plateaus resolve to the left
    endpoint of the optimal plateau.
    """
    if not lb < ub:
        raise ValueError("need lb < ub")
    if tol <= 0:
        raise ValueError("tol must be positive")
    for _ in range(max_iter):
        if ub - lb <= tol:
            break
        m1 = lb + (ub - lb) / 3.0
        m2 = ub - (ub - lb) / 3.0
        f1, f2 = f(m1), f(m2)
        if not (np.isfinite(f1) and np.isfinite(f2)):
            raise ArithmeticError("non-finite objective value during ternary search")
        if f1 < f2:
            lb = m1
        else:
            ub = m2
    return lb


def ternary_search_lambda(
    problem: AllocationProblem,
    lb: float | None = None,
    ub: float | None = None,
    tol: float = 1e-8,
) -> float:
    """Multiplier maximizing the dual on [lb, ub]."""
    if lb is None or ub is None:
        d_lb, d_ub = default_lambda_bounds(problem)
        lb = d_lb if lb is None else lb
        ub = d_ub if ub is None else ub
    return ternary_search(lambda lam: dual_value(problem, lam), lb, ub, tol=tol)


def spend_summary(problem: AllocationProblem, assignment: np.ndarray) -> tuple[float, float, float]:
    """(expected completions, expected cost, expected gmv) of an assignment."""
    assignment = np.asarray(assignment, dtype=int)
    rows = np.arange(problem.n)
    z = problem.z[rows, assignment]
    completions = float(z.sum())
    cost = float((z * problem.g * problem.d[assignment]).sum())
    gmv = float((z * problem.g).sum())
    return completions, cost, gmv


def is_feasible(problem: AllocationProblem, assignment: np.ndarray, atol: float = 1e-12) -> bool:
    _, cost, gmv = spend_summary(problem, assignment)
    return cost <= problem.budget_rate * gmv + atol


def brute_force_oracle(
    problem: AllocationProblem, max_nodes: int = 10_000_000
) -> tuple[np.ndarray, float]:
    """Exhaustive optimum over all feasible integral assignments.

    Ties keep the first assignment in lexicographic coupon order, so an
    all-zero z instance returns the all-d0 assignment.
    """
    if problem.h ** problem.n > max_nodes:
        raise ValueError("instance too large for exhaustive enumeration")
    best_assign: tuple[int, ...] | None = None
    best_value = -np.inf
    for combo in itertools.product(range(problem.h), repeat=problem.n):
        arr = np.asarray(combo, dtype=int)
        if not is_feasible(problem, arr):
            continue
        value, _, _ = spend_summary(problem, arr)
        if value > best_value:
            best_value = value
            best_assign = combo
    assert best_assign is not None  # all-d0 is always feasible
    return np.asarray(best_assign, dtype=int), float(best_value)


def oracle_csv_row(problem: AllocationProblem, tol: float = 1e-8) -> dict:
    """Debug record (instance hash, lambda*, primal, dual) for CSV dumps."""
    payload = np.concatenate(
        [problem.z.ravel(), problem.g, problem.d, [problem.budget_rate]]
    )
    instance_hash = f"{abs(hash(payload.tobytes())):016x}"
    lam_star = ternary_search_lambda(problem, tol=tol)
    _, primal = brute_force_oracle(problem)
    return {
        "instance": instance_hash,
        "lambda_star": lam_star,
        "primal": primal,
        "dual": dual_value(problem, lam_star),
    }
