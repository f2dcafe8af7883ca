"""Quantitative checks: cost-ratio formula, gradient-norm bounds, constant estimators.

The bound machinery targets the no-momentum two-group iteration
    theta[fast] advances with a fresh per-sample gradient every step,
    theta[slow] advances with a gradient refreshed every k steps (held stale
    in between, evaluated where and when it was refreshed),
both at stepsize h. The certified quantity is the running mean of squared
full-batch gradient norms over T steps, which for smooth losses with bounded
per-sample gradients stays below

    2 (f0 - fstar) / (h T) + h L M n_groups (h L k^2 / 3 + 1)

and below 2 (f0 - fstar) / (h T) + h L M / 2 for the k = 1 (plain SGD) case.
L and M are measured, not assumed: a power-iteration/analytic smoothness
constant and a max-over-samples-and-iterates second moment, each padded with a
1.5 safety factor where estimated from samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "speedup_ratio",
    "speedup_limit",
    "BoundInputs",
    "multirate_bound",
    "sgd_bound",
    "QuadraticProblem",
    "LogisticRegressionProblem",
    "make_logistic_problem",
    "pair_smoothness_estimate",
    "estimate_smoothness",
    "estimate_grad_second_moment",
    "solve_reference_minimum",
    "multirate_trajectory",
    "verify_bound",
]


def speedup_ratio(k, n_layers, n_fast):
    """Cost of full-net training over cost of suffix-fast training, per k steps.

    Both costs are in backward+forward layer-visit units: full training does
    2*k*L visits, the partitioned scheme k*L forward plus L + (k-1)*n_fast
    backward.
    """
    if not 1 <= n_fast <= n_layers:
        raise DomainError(f"n_fast must be in [1, {n_layers}], got {n_fast}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    return (2 * k * n_layers) / ((k + 1) * n_layers + (k - 1) * n_fast)


def speedup_limit(n_layers, n_fast):
    """Large-k limit of speedup_ratio."""
    if not 1 <= n_fast <= n_layers:
        raise DomainError(f"n_fast must be in [1, {n_layers}], got {n_fast}")
    return 2 * n_layers / (n_layers + n_fast)


@dataclass(frozen=True)
class BoundInputs:
    """Everything the gradient-norm bounds consume.

    n_groups is the number of parameter groups the update splits into (2 for
    one fast plus one slow tier). n_steps must be a multiple of k so the run
    covers whole refresh cycles.
    """

    h: float
    n_steps: int
    k: int
    smoothness: float
    second_moment: float
    n_groups: int
    f0: float
    fstar: float

    def __post_init__(self):
        if self.h <= 0 or self.smoothness <= 0:
            raise DomainError("h and smoothness must be > 0")
        if self.second_moment < 0:
            raise DomainError(f"second moment must be >= 0, got {self.second_moment}")
        if self.k < 1 or self.n_steps < 1 or self.n_steps % self.k != 0:
            raise DomainError(
                f"n_steps must be a positive multiple of k, got {self.n_steps}, k={self.k}"
            )
        if self.n_groups < 1:
            raise DomainError(f"n_groups must be >= 1, got {self.n_groups}")
        if self.f0 < self.fstar:
            raise DomainError(f"f0 {self.f0} below fstar {self.fstar}")


def multirate_bound(b):
    """Upper bound on the mean squared gradient norm of the two-rate iteration."""
    noise = b.h * b.smoothness * b.second_moment * b.n_groups * (
        b.h * b.smoothness * b.k * b.k / 3.0 + 1.0
    )
    return 2.0 * (b.f0 - b.fstar) / (b.h * b.n_steps) + noise


def sgd_bound(b):
    """Same quantity for plain SGD (k = 1): the noise floor drops to h*L*M/2."""
    return 2.0 * (b.f0 - b.fstar) / (b.h * b.n_steps) + b.h * b.smoothness * b.second_moment / 2.0


class QuadraticProblem:
    """f(theta) = 0.5 theta' A theta for symmetric positive semidefinite A."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ShapeError(f"A must be square, got {self.a.shape}")
        self.dim = self.a.shape[0]
        self.n_samples = 1

    def f(self, theta):
        return float(0.5 * theta @ self.a @ theta)

    def grad(self, theta):
        return self.a @ theta

    def sample_grad(self, theta, i):
        return self.grad(theta)

    def sample_grads(self, theta):
        return self.grad(theta)[None, :]

    def smoothness(self):
        return _power_iteration(self.a)


class LogisticRegressionProblem:
    """L2-regularized logistic regression with +-1 labels.

    f(theta) = mean_i log(1 + exp(-y_i x_i·theta)) + 0.5 lam ||theta||^2
    """

    def __init__(self, x, y, lam):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ShapeError(f"bad shapes: x {self.x.shape}, y {self.y.shape}")
        if not np.all(np.abs(self.y) == 1.0):
            raise DomainError("labels must be +-1")
        if lam < 0:
            raise DomainError(f"lam must be >= 0, got {lam}")
        self.lam = float(lam)
        self.n_samples, self.dim = self.x.shape

    def _margins(self, theta):
        return self.y * (self.x @ theta)

    def f(self, theta):
        return float(np.logaddexp(0.0, -self._margins(theta)).mean()) + 0.5 * self.lam * float(
            theta @ theta
        )

    def grad(self, theta):
        s = _sigmoid(-self._margins(theta))
        return -((self.y * s) @ self.x) / self.n_samples + self.lam * theta

    def sample_grad(self, theta, i):
        t = self.y[i] * (self.x[i] @ theta)
        return -self.y[i] * _sigmoid(-t) * self.x[i] + self.lam * theta

    def sample_grads(self, theta):
        """All per-sample gradients as an (n, d) matrix."""
        s = _sigmoid(-self._margins(theta))
        return -(self.y * s)[:, None] * self.x + self.lam * theta[None, :]

    def smoothness(self):
        """Analytic curvature cap: operator norm of X'X / (4n) plus lam."""
        return _power_iteration(self.x.T @ self.x) / (4.0 * self.n_samples) + self.lam


def _sigmoid(t):
    out = np.empty_like(t, dtype=np.float64) if isinstance(t, np.ndarray) else None
    if out is None:
        return 1.0 / (1.0 + np.exp(-t)) if t >= 0 else np.exp(t) / (1.0 + np.exp(t))
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _power_iteration(a, tol=1e-6, max_iter=10_000):
    """Largest eigenvalue of a symmetric PSD matrix."""
    n = a.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(max_iter):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ a @ v)
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return lam


def make_logistic_problem(n, d, lam, rng):
    """Random standardized-feature instance with labels from a planted model."""
    x = rng.normal(0.0, 1.0, (n, d))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    w = rng.normal(0.0, 1.0, d)
    p = _sigmoid(x @ w)
    y = np.where(rng.random(n) < p, 1.0, -1.0)
    return LogisticRegressionProblem(x, y, lam)


def pair_smoothness_estimate(grad, dim, rng, n_pairs=200, spread=1.0, safety=1.5):
    """Generic smoothness probe: max gradient-difference ratio over random pairs."""
    best = 0.0
    for _ in range(n_pairs):
        a = rng.normal(0.0, spread, dim)
        b = rng.normal(0.0, spread, dim)
        gap = np.linalg.norm(a - b)
        if gap == 0.0:
            continue
        best = max(best, float(np.linalg.norm(grad(a) - grad(b)) / gap))
    return best * safety


def estimate_smoothness(problem, rng=None, n_pairs=200, spread=1.0, safety=1.5):
    """Analytic constant when the problem provides one, sampled estimate otherwise."""
    if hasattr(problem, "smoothness"):
        return problem.smoothness()
    if rng is None:
        raise ContractError("sampled smoothness estimation needs an rng")
    return pair_smoothness_estimate(problem.grad, problem.dim, rng, n_pairs, spread, safety)


def estimate_grad_second_moment(problem, iterates, safety=1.5):
    """Max squared per-sample gradient norm over the visited iterates, padded."""
    worst = 0.0
    for theta in iterates:
        g = problem.sample_grads(theta)
        worst = max(worst, float((g * g).sum(axis=1).max()))
    return worst * safety


def solve_reference_minimum(problem, n_steps=100_000, h=None):
    """Best-known loss from a long full-batch gradient descent run."""
    if h is None:
        h = 1.0 / estimate_smoothness(problem)
    theta = np.zeros(problem.dim)
    for _ in range(n_steps):
        theta -= h * problem.grad(theta)
    return problem.f(theta), theta


def multirate_trajectory(problem, h, k, n_steps, slow_mask, rng, theta0=None):
    """Run the no-momentum two-group iteration; returns (lhs, iterates).

    lhs is the mean over steps of the squared full-batch gradient norm at the
    pre-update iterate. The slow coordinates reuse the per-sample gradient
    drawn at their last refresh step.
    """
    slow_mask = np.asarray(slow_mask, dtype=bool)
    if slow_mask.shape != (problem.dim,):
        raise ShapeError(f"slow_mask shape {slow_mask.shape}, expected ({problem.dim},)")
    theta = np.zeros(problem.dim) if theta0 is None else np.array(theta0, dtype=np.float64)
    iterates = np.empty((n_steps, problem.dim))
    total = 0.0
    stale_slow = None
    for t in range(n_steps):
        iterates[t] = theta
        g_full = problem.grad(theta)
        total += float(g_full @ g_full)
        i = int(rng.integers(problem.n_samples))
        g = problem.sample_grad(theta, i)
        if t % k == 0:
            stale_slow = g[slow_mask]
        step = h * g
        theta = theta - np.where(slow_mask, 0.0, step)
        theta[slow_mask] -= h * stale_slow
    return total / n_steps, iterates


def verify_bound(problem, h, k, n_steps, slow_mask, seeds, theta0=None):
    """Run the iteration per seed and compare against the bounds.

    Validates the stepsize stability condition 1 - h L >= 0 with the measured
    smoothness before running. The report carries per-seed and seed-mean lhs
    values, both bounds (the SGD one only when k == 1), and a holds flag that
    requires every seed to sit below the applicable bound.
    """
    if not seeds:
        raise DomainError("need at least one seed")
    smooth = estimate_smoothness(problem)
    if 1.0 - h * smooth < 0.0:
        raise DomainError(
            f"stepsize {h} unstable for smoothness {smooth:.6g}: need h <= {1.0 / smooth:.6g}"
        )
    fstar, _ = solve_reference_minimum(problem)
    start = np.zeros(problem.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    f0 = problem.f(start)
    lhs = []
    worst_moment = 0.0
    from .linalg import RngStream

    for seed in seeds:
        rng = RngStream(seed, 0)
        value, iterates = multirate_trajectory(problem, h, k, n_steps, slow_mask, rng, start)
        lhs.append(value)
        worst_moment = max(worst_moment, estimate_grad_second_moment(problem, iterates, safety=1.0))
    moment = worst_moment * 1.5
    b = BoundInputs(
        h=h,
        n_steps=n_steps,
        k=k,
        smoothness=smooth,
        second_moment=moment,
        n_groups=2,
        f0=f0,
        fstar=fstar,
    )
    rhs = multirate_bound(b)
    rhs_sgd = sgd_bound(b) if k == 1 else None
    tightest = rhs if rhs_sgd is None else min(rhs, rhs_sgd)
    holds = [v <= tightest for v in lhs]
    return {
        "h": h,
        "k": k,
        "n_steps": n_steps,
        "n_groups": 2,
        "seeds": list(seeds),
        "smoothness": smooth,
        "second_moment": moment,
        "f0": f0,
        "fstar": fstar,
        "lhs_per_seed": lhs,
        "lhs_mean": float(np.mean(lhs)),
        "rhs": rhs,
        "rhs_sgd": rhs_sgd,
        "holds_per_seed": holds,
        "holds": all(holds) and float(np.mean(lhs)) <= tightest,
    }
