"""Sparsity search with Gaussian-process acquisition functions.

Stage 1 looks for the largest sparsity whose accuracy stays on or above the
level ``baseline - epsilon``. It scores candidates with the domain-restricted
level-set UCB: each feasible sample becomes the new lower bound of the
search interval. Stage 2 optimizes a user objective on ``(0, s_acc]`` with
plain UCB (maximize) or LCB (minimize).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, clone

from netcompress.exceptions import SearchError
from netcompress.gp import GPRegressor

DEFAULT_KAPPA = 2.576


def dr_ucb_score(mu, sigma, level, gamma):
    """``(1 - gamma) * sigma - gamma * |mu - level|``."""
    return (1.0 - gamma) * np.asarray(sigma) - gamma * np.abs(np.asarray(mu) - level)


# the level-set score is the same; only the search driver differs
ils_ucb_score = dr_ucb_score


def ucb_score(mu, sigma, kappa=DEFAULT_KAPPA):
    return np.asarray(mu) + kappa * np.asarray(sigma)


def lcb_score(mu, sigma, kappa=DEFAULT_KAPPA):
    return np.asarray(mu) - kappa * np.asarray(sigma)


@dataclass(frozen=True)
class LevelSetConfig:
    epsilon: float = 0.02
    gamma: float = 0.95
    T: int = 10
    grid_size: int = 1024
    kappa: float = DEFAULT_KAPPA
    restrict_domain: bool = True

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")


class BlackBox:
    """Memoizing wrapper around an expensive ``s -> y`` function.

    Keys are ``s`` rounded to 12 decimals, so a repeated request for the
    same grid point costs nothing and is not counted.
    """

    def __init__(self, fn: Callable[[float], float], name: str = "blackbox"):
        self.fn = fn
        self.name = name
        self.cache: dict[float, float] = {}
        self.calls = 0

    def __call__(self, s: float) -> float:
        key = round(float(s), 12)
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = float(self.fn(float(s)))
        return self.cache[key]


@dataclass
class SearchState:
    samples: list[tuple[float, float]] = field(default_factory=list)
    domain: tuple[float, float] = (0.0, 1.0)
    s_acc: float | None = None
    posterior: GPRegressor | None = None
    level: float | None = None
    trace: list[dict] = field(default_factory=list)
    domain_history: list[float] = field(default_factory=list)

    @property
    def feasible(self) -> list[tuple[float, float]]:
        return [(r["s"], r["y"]) for r in self.trace if r["feasible"]]


def candidate_grid(lo: float, hi: float, grid_size: int, include_hi: bool = False) -> np.ndarray:
    """``grid_size`` evenly spaced points strictly inside ``(lo, hi)``, or on ``(lo, hi]``."""
    if not hi > lo:
        raise SearchError(f"empty domain ({lo}, {hi})")
    if include_hi:
        return np.linspace(lo, hi, grid_size + 1)[1:]
    return np.linspace(lo, hi, grid_size + 2)[1:-1]


def next_sample(posterior, domain, evaluated, score: Callable, grid_size: int = 1024,
                include_hi: bool = False):
    """Grid argmax of ``score(mu, sigma)`` over the domain, skipping evaluated points.

    Returns ``(s, score_value)``. Ties go to the lowest ``s``. With no
    posterior the prior is flat, so every candidate ties.
    """
    lo, hi = domain
    grid = candidate_grid(lo, hi, grid_size, include_hi)
    spacing = (hi - lo) / (grid_size + (0 if include_hi else 1))
    if len(evaluated):
        ev = np.asarray(list(evaluated), dtype=np.float64)
        taken = np.min(np.abs(grid[:, None] - ev[None, :]), axis=1) < 0.5 * spacing
        grid = grid[~taken]
    if grid.size == 0:
        raise SearchError("domain exhausted")
    if posterior is None:
        mu, sigma = np.zeros_like(grid), np.ones_like(grid)
    else:
        mu, sigma = posterior.predict(grid, return_std=True)
    values = np.asarray(score(mu, sigma), dtype=np.float64)
    best = int(np.argmax(values))
    return float(grid[best]), float(values[best])


def _refit(gp, samples):
    X = np.array([s for s, _ in samples])
    y = np.array([v for _, v in samples])
    return clone(gp).fit(X, y)


def stage1_level_set(blackbox, baseline_acc: float, cfg: LevelSetConfig = LevelSetConfig(),
                     gp: GPRegressor | None = None):
    """Find the largest sparsity with accuracy at or above ``baseline_acc - epsilon``.

    The first two evaluations go to ``0.25`` and ``0.75`` of the initial
    domain; the rest maximize the level-set score. Returns ``(s_acc, state)``
    where ``s_acc`` is the largest evaluated sparsity that met the level.
    """
    gp = GPRegressor() if gp is None else gp
    level = baseline_acc - cfg.epsilon
    state = SearchState(level=level)
    lo, hi = 0.0, 1.0
    seeds = [0.25 * hi, 0.75 * hi]
    best_feasible = None

    def score(mu, sigma):
        return dr_ucb_score(mu, sigma, level, cfg.gamma)

    for t in range(cfg.T):
        if t < len(seeds):
            s, acq = seeds[t], float("nan")
        else:
            try:
                s, acq = next_sample(state.posterior, (lo, hi), [x for x, _ in state.samples],
                                     score, cfg.grid_size)
            except SearchError:
                break
        y = blackbox(s)
        if not math.isfinite(y):
            raise SearchError(f"black box returned non-finite value {y} at s={s}", state.trace)
        feasible = y >= level and (best_feasible is None or s > best_feasible)
        if feasible:
            best_feasible = s
            if cfg.restrict_domain:
                lo = s
        state.samples.append((s, y))
        state.domain = (lo, hi)
        state.domain_history.append(lo)
        state.trace.append({"stage": 1, "t": t, "s": s, "y": y, "domain_lo": lo,
                            "acq_value": acq, "feasible": feasible})
        state.posterior = _refit(gp, state.samples)
    if best_feasible is None:
        raise SearchError(f"no sparsity reached the level {level:.6g} in {len(state.samples)} "
                          "evaluations", state.trace)
    state.s_acc = best_feasible
    return best_feasible, state


def stage2_optimize(blackbox, s_acc: float, direction: str = "max",
                    cfg: LevelSetConfig = LevelSetConfig(), gp: GPRegressor | None = None):
    """Optimize an objective over ``(0, s_acc]`` with UCB (max) or LCB (min).

    The last evaluation is spent on ``s_acc`` itself unless it was already
    sampled. Returns ``(s_star, state)``, ``s_star`` being the best observed
    point (earliest on ties).
    """
    if direction not in ("max", "min"):
        raise ValueError("direction must be 'max' or 'min'")
    gp = GPRegressor() if gp is None else gp
    sign = 1.0 if direction == "max" else -1.0
    state = SearchState(domain=(0.0, s_acc), s_acc=s_acc)
    seeds = [0.25 * s_acc, 0.75 * s_acc]

    def score(mu, sigma):
        if direction == "max":
            return ucb_score(mu, sigma, cfg.kappa)
        return -lcb_score(mu, sigma, cfg.kappa)

    evaluated = []
    for t in range(cfg.T):
        last = t == cfg.T - 1
        if last and not any(abs(s - s_acc) < 1e-12 for s in evaluated):
            s, acq = s_acc, float("nan")
        elif t < len(seeds):
            s, acq = seeds[t], float("nan")
        else:
            try:
                s, acq = next_sample(state.posterior, (0.0, s_acc), evaluated, score,
                                     cfg.grid_size, include_hi=True)
            except SearchError:
                break
        y = blackbox(s)
        evaluated.append(s)
        state.samples.append((s, y))
        state.trace.append({"stage": 2, "t": t, "s": s, "y": y, "domain_lo": 0.0,
                            "acq_value": acq, "feasible": None})
        state.posterior = _refit(gp, state.samples)
    best = max(range(len(state.samples)), key=lambda i: (sign * state.samples[i][1], -i))
    return state.samples[best][0], state


class TwoStageSearch(BaseEstimator):
    """Estimator front-end for the two-stage sparsity search.

    ``fit(accuracy_fn, objective_fn, baseline_accuracy)`` sets ``s_acc_``,
    ``s_star_``, ``stage1_`` and ``stage2_``. ``objective_fn=None`` skips
    stage 2 and returns ``s_star_ = s_acc_``.
    """

    def __init__(self, epsilon=0.02, gamma=0.95, T=10, grid_size=1024, kappa=DEFAULT_KAPPA,
                 direction="min", restrict_domain=True, length_scale=1.0, alpha=0.1,
                 jitter=1e-6):
        self.epsilon = epsilon
        self.gamma = gamma
        self.T = T
        self.grid_size = grid_size
        self.kappa = kappa
        self.direction = direction
        self.restrict_domain = restrict_domain
        self.length_scale = length_scale
        self.alpha = alpha
        self.jitter = jitter

    def config(self) -> LevelSetConfig:
        return LevelSetConfig(self.epsilon, self.gamma, self.T, self.grid_size, self.kappa,
                              self.restrict_domain)

    def fit(self, accuracy_fn, objective_fn=None, baseline_accuracy=None):
        cfg = self.config()
        gp = GPRegressor(length_scale=self.length_scale, alpha=self.alpha, jitter=self.jitter)
        acc = accuracy_fn if isinstance(accuracy_fn, BlackBox) else BlackBox(accuracy_fn, "accuracy")
        if baseline_accuracy is None:
            raise ValueError("baseline_accuracy is required")
        self.s_acc_, self.stage1_ = stage1_level_set(acc, baseline_accuracy, cfg, gp)
        if objective_fn is None:
            self.s_star_, self.stage2_ = self.s_acc_, None
        else:
            obj = objective_fn if isinstance(objective_fn, BlackBox) else BlackBox(objective_fn,
                                                                                  "objective")
            self.s_star_, self.stage2_ = stage2_optimize(obj, self.s_acc_, self.direction, cfg, gp)
        return self

    @property
    def trace_(self) -> list[dict]:
        rows = list(self.stage1_.trace)
        if self.stage2_ is not None:
            rows += self.stage2_.trace
        return rows
