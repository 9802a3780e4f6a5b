"""Learning-compression (L-C) accuracy recovery.

Alternates a learning step, which trains ``w`` on the loss plus the
quadratic penalty ``(mu/2) * ||w - D(theta) - lam/mu||^2``, with a compression
step that projects ``w - lam/mu`` onto the scheme's feasible set. The
penalty weight grows geometrically, ``mu_j = mu0 * a**j``.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from netcompress.exceptions import NumericError
from netcompress.schemes import CompressedState, Scheme, decompress, project
from netcompress.tensor_net import Model, evaluate, iterate_minibatches, loss_and_grad, sgd_step

MULTIPLIER_MODES = ("augmented_lagrangian", "penalty_only")
TRACE_COLUMNS = ("iter", "mu", "loss", "constraint_gap", "val_accuracy")


@dataclass(frozen=True)
class LcConfig:
    mu0: float = 1e-3
    a: float = 1.1
    outer_iters: int = 150
    l_step_batches: int = 50
    first_l_step_batches: int = 300
    lr_hi: float = 0.1
    lr_lo: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 32
    multiplier_mode: str = "augmented_lagrangian"
    finetune_batches: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not self.a >= 1:
            raise ValueError("a must be >= 1")
        if not self.lr_hi >= self.lr_lo > 0:
            raise ValueError("need lr_hi >= lr_lo > 0")
        if self.outer_iters < 1 or self.l_step_batches < 0 or self.first_l_step_batches < 0:
            raise ValueError("iteration counts must be non-negative (outer_iters >= 1)")
        if self.multiplier_mode not in MULTIPLIER_MODES:
            raise ValueError(f"multiplier_mode must be one of {MULTIPLIER_MODES}")


def mu_schedule(cfg: LcConfig, j: int) -> float:
    if j < 0:
        raise ValueError("iteration index must be >= 0")
    return cfg.mu0 * cfg.a ** j


def lr_schedule(cfg: LcConfig, j: int) -> float:
    """Geometric decay from ``lr_hi`` at the first to ``lr_lo`` at the last outer iteration."""
    if cfg.outer_iters == 1:
        return cfg.lr_hi
    return cfg.lr_hi * (cfg.lr_lo / cfg.lr_hi) ** (j / (cfg.outer_iters - 1))


@dataclass
class LcState:
    w: dict[str, np.ndarray]
    theta: CompressedState
    lam: dict[str, np.ndarray]
    j: int = 0
    best_val: float = -1.0
    best_theta: CompressedState | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def mu(self, cfg: LcConfig) -> float:
        return mu_schedule(cfg, self.j)


def penalty_grad(w, target, lam, mu, keys):
    """Gradient of ``(mu/2)||w - target||^2 - <lam, w - target>`` on the constrained keys."""
    return {k: mu * (w[k] - target[k]) - lam[k] for k in keys}


def penalty_value(w, target, lam, mu, keys) -> float:
    total = 0.0
    for k in keys:
        d = w[k] - target[k]
        total += 0.5 * mu * float(np.sum(d * d)) - float(np.sum(lam[k] * d))
    return total


def constraint_gap(w, target, keys) -> float:
    return max((float(np.max(np.abs(w[k] - target[k]))) for k in keys), default=0.0)


def l_step(state: LcState, model: Model, dataset, cfg: LcConfig, n_batches: int | None = None,
           lr: float | None = None, loss_fn=None):
    """Run SGD on loss + penalty with ``theta`` held fixed. Returns mean data loss.

    ``loss_fn(params, X, y) -> (loss, grads)`` replaces the network loss; it
    defaults to softmax cross-entropy through ``model``.
    """
    if n_batches is None:
        n_batches = cfg.first_l_step_batches if state.j == 0 else cfg.l_step_batches
    lr = lr_schedule(cfg, state.j) if lr is None else lr
    mu = state.mu(cfg)
    target = decompress(state.theta)
    keys = sorted(state.theta.compressed_keys)
    X, y = dataset.train
    if loss_fn is None:
        def loss_fn(params, xb, yb):
            return loss_and_grad(model, xb, yb, params)
    velocity = None
    losses = []
    batches = _batch_stream(len(y), cfg.batch_size, state.rng)
    for b in range(n_batches):
        idx = next(batches)
        loss, grads = loss_fn(state.w, X[idx], y[idx])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss in L-step (j={state.j}, batch={b})",
                               j=state.j, batch=b)
        pen = penalty_grad(state.w, target, state.lam, mu, keys)
        for k, g in pen.items():
            grads[k] = grads[k] + g
        state.w, velocity = sgd_step(state.w, grads, lr, cfg.momentum, velocity)
        losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def _batch_stream(n, batch_size, rng):
    while True:
        yield from iterate_minibatches(n, batch_size, rng)


def c_step(state: LcState, model: Model, scheme: Scheme, s: float, cfg: LcConfig) -> LcState:
    """Project ``w - lam/mu`` and, in augmented-Lagrangian mode, update ``lam``."""
    mu = state.mu(cfg)
    shifted = {k: v - state.lam[k] / mu for k, v in state.w.items()}
    state.theta = project(model, scheme, s, shifted)
    if cfg.multiplier_mode == "augmented_lagrangian":
        target = decompress(state.theta)
        for k in state.theta.compressed_keys:
            state.lam[k] = state.lam[k] - mu * (state.w[k] - target[k])
    return state


def compressed_model(model: Model, theta: CompressedState) -> Model:
    out = model.with_parameters(decompress(theta))
    out.quantized = frozenset(theta.quantized_keys)
    return out


def direct_compression(model: Model, scheme: Scheme, s: float, dataset):
    """Project the reference weights once, no retraining. Returns ``(model, val_accuracy)``."""
    theta = project(model, scheme, s)
    out = compressed_model(model, theta)
    return out, evaluate(out, *dataset.val)


def lc_run(model: Model, scheme: Scheme, s: float, dataset, cfg: LcConfig = LcConfig()):
    """Compress ``model`` at sparsity ``s`` with L-C accuracy recovery.

    Returns ``(compressed_model, val_accuracy, trace)``. The model is the
    decompressed feasible point with the best validation accuracy seen after
    any C-step. ``trace`` has one row per outer iteration.
    """
    w = {k: v.copy() for k, v in model.parameters().items()}
    theta = project(model, scheme, s, w)
    state = LcState(w=w, theta=theta, lam={k: np.zeros_like(v) for k, v in w.items()},
                    rng=np.random.default_rng(cfg.seed))
    Xv, yv = dataset.val
    trace = []
    for j in range(cfg.outer_iters):
        state.j = j
        loss = l_step(state, model, dataset, cfg)
        c_step(state, model, scheme, s, cfg)
        target = decompress(state.theta)
        gap = constraint_gap(state.w, target, state.theta.compressed_keys)
        acc = evaluate(model, Xv, yv, target)
        if acc > state.best_val:
            state.best_val, state.best_theta = acc, state.theta
        trace.append({"iter": j, "mu": state.mu(cfg), "loss": loss, "constraint_gap": gap,
                      "val_accuracy": acc})
    best = state.best_theta
    if cfg.finetune_batches:
        best, acc = _finetune(model, best, dataset, cfg, state.rng)
        if acc > state.best_val:
            state.best_val = acc
        else:
            best = state.best_theta
    return compressed_model(model, best), state.best_val, trace


def _finetune(model, theta, dataset, cfg, rng):
    """Train surviving weights only, then restore binary16 values where present."""
    params = decompress(theta)
    masks = {k: p.mask for k, p in theta.params.items() if p.mask is not None}
    X, y = dataset.train
    velocity = None
    batches = _batch_stream(len(y), cfg.batch_size, rng)
    for _ in range(cfg.finetune_batches):
        idx = next(batches)
        _, grads = loss_and_grad(model, X[idx], y[idx], params)
        for k, m in masks.items():
            grads[k] = grads[k] * m
        params, velocity = sgd_step(params, grads, cfg.lr_lo, cfg.momentum, velocity)
    new = CompressedState({}, theta.sparsity, theta.structured, theta.structure_layers,
                          theta.compressed_keys)
    for k, p in theta.params.items():
        vals = params[k].astype(np.float16) if p.quantized else params[k]
        new.params[k] = type(p)(vals, None if p.mask is None else p.mask.copy())
    return new, evaluate(model, *dataset.val, decompress(new))


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                             for k in TRACE_COLUMNS})


class LCCompressor(BaseEstimator):
    """Estimator wrapper around :func:`lc_run`.

    ``fit(model, dataset)`` sets ``model_``, ``accuracy_`` and ``trace_``.
    """

    def __init__(self, scheme=None, sparsity=0.5, mu0=1e-3, a=1.1, outer_iters=150,
                 l_step_batches=50, first_l_step_batches=300, lr_hi=0.1, lr_lo=1e-5,
                 momentum=0.9, batch_size=32, multiplier_mode="augmented_lagrangian",
                 finetune_batches=0, seed=0):
        self.scheme = scheme
        self.sparsity = sparsity
        self.mu0 = mu0
        self.a = a
        self.outer_iters = outer_iters
        self.l_step_batches = l_step_batches
        self.first_l_step_batches = first_l_step_batches
        self.lr_hi = lr_hi
        self.lr_lo = lr_lo
        self.momentum = momentum
        self.batch_size = batch_size
        self.multiplier_mode = multiplier_mode
        self.finetune_batches = finetune_batches
        self.seed = seed

    def config(self) -> LcConfig:
        fields = LcConfig.__dataclass_fields__
        return LcConfig(**{k: v for k, v in self.get_params().items() if k in fields})

    def fit(self, model, dataset):
        if self.scheme is None:
            raise ValueError("scheme is required")
        self.model_, self.accuracy_, self.trace_ = lc_run(model, self.scheme, self.sparsity,
                                                          dataset, self.config())
        return self


def config_from_dict(d: dict | None) -> LcConfig:
    return replace(LcConfig(), **(d or {}))


def config_to_dict(cfg: LcConfig) -> dict:
    return asdict(cfg)
