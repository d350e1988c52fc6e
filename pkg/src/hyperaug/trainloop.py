"""Bilevel training: ``s`` inner SGD steps on policy-augmented batches, then
one RMSprop step on the policy from the validation hypergradient."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import ModelParams, NodeMonitor, Tape, flat_grad, get_default_dtype, grad
from .data import CyclicBatches, Dataset, baseline_augment, iterate_batches
from .hypergrad import (
    ConfigError,
    HypergradConfig,
    NeumannDivergenceError,
    hypergradient,
    unrolled_hypergradient,
)
from .models import ModelSpec, error_rate, forward, init_params, loss_ce
from .policy import PolicyParams, draw_noise, init_policy, sample_and_apply, snapshot

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "RunMetrics",
    "TrainingError",
    "inner_step",
    "outer_step",
    "sgd_momentum_update",
    "rmsprop_update",
    "evaluate",
    "run",
    "METHODS",
]

log = logging.getLogger(__name__)

METHODS = ("madao", "fixed-policy", "no-aug")


class TrainingError(RuntimeError):
    """Fatal training failure, with the epoch and global step it happened at."""

    def __init__(self, message: str, epoch: int | None = None, step: int | None = None, diagnostics=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.epoch = epoch
        self.step = step
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    inner_steps: int = 30
    warmup_epochs: int = 20
    inner_lr: float = 0.05
    momentum: float = 0.9
    policy_lr: float = 1e-2
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    hypergrad: HypergradConfig = field(default_factory=HypergradConfig)
    seed: int = 0
    method: str = "madao"
    k_stages: int = 2
    temperature: float = 0.05
    baseline_augment: bool = True
    dataset_kind: str = "mnist"
    drop_last: bool = False
    on_divergence: str = "skip"
    eval_batch_size: int = 500
    record_wall_time: bool = True

    def __post_init__(self):
        for key in ("epochs", "batch_size", "inner_steps", "warmup_epochs", "k_stages", "eval_batch_size"):
            v = getattr(self, key)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(key, f"must be an integer, got {v!r}")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps", f"must be >= 1, got {self.inner_steps}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs", f"must be >= 0, got {self.warmup_epochs}")
        if self.k_stages < 1:
            raise ConfigError("k_stages", "must be >= 1")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", "must be >= 1")
        for key in ("inner_lr", "policy_lr", "temperature", "rmsprop_eps"):
            v = getattr(self, key)
            if not (isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v) and v > 0):
                raise ConfigError(key, f"must be a positive number, got {v!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must lie in [0, 1), got {self.momentum!r}")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ConfigError("rmsprop_decay", f"must lie in (0, 1), got {self.rmsprop_decay!r}")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}, got {self.method!r}")
        if self.on_divergence not in ("skip", "abort"):
            raise ConfigError("on_divergence", f"must be 'skip' or 'abort', got {self.on_divergence!r}")
        if not isinstance(self.hypergrad, HypergradConfig):
            raise ConfigError("hypergrad", "must be a HypergradConfig")


@dataclass
class OptimizerState:
    """SGD momentum buffers for theta and RMSprop accumulators for phi."""

    momentum: list
    square_avg: list
    inner_count: int = 0
    outer_count: int = 0

    @classmethod
    def create(cls, params: ModelParams, policy: ModelParams) -> "OptimizerState":
        return cls(
            momentum=[np.zeros_like(np.asarray(a)) for a in params.arrays()],
            square_avg=[np.zeros_like(np.asarray(a)) for a in policy.arrays()],
        )


@dataclass
class RunMetrics:
    """Per-epoch records plus the final state of a run."""

    records: list = field(default_factory=list)
    params: ModelParams | None = None
    policy: PolicyParams | None = None
    outer_log: list = field(default_factory=list)

    def append(self, record: dict):
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch numbers must increase")
        self.records.append(record)


# ---------------------------------------------------------------- optimizers
def sgd_momentum_update(params: ModelParams, grads: list, buffers: list, lr: float, momentum: float) -> ModelParams:
    """``b <- momentum * b + g``; ``theta <- theta - lr * b``.  Buffers update in place."""
    out = []
    for p, g, b in zip(params.arrays(), grads, buffers):
        if momentum:
            b *= momentum
            b += g
            step = b
        else:
            step = g
        out.append(np.asarray(p) - lr * step)
    return params.replace(out)


def rmsprop_update(params: ModelParams, grads: list, square_avg: list, lr: float, decay: float, eps: float) -> ModelParams:
    """``v <- decay * v + (1 - decay) g^2``; ``p <- p - lr * g / (sqrt(v) + eps)``."""
    out = []
    for p, g, v in zip(params.arrays(), grads, square_avg):
        v *= decay
        v += (1.0 - decay) * g * g
        out.append(np.asarray(p) - lr * g / (np.sqrt(v) + eps))
    return params.replace(out)


# ---------------------------------------------------------------- objectives
def _train_objective(spec: ModelSpec, x, y, noise, augment: bool) -> Callable:
    def f(theta, phi):
        inputs = sample_and_apply(phi, x, noise=noise) if augment else x
        return loss_ce(forward(spec, theta, inputs), y)

    return f


def _val_objective(spec: ModelSpec, x, y) -> Callable:
    def g(theta):
        return loss_ce(forward(spec, theta, x), y)

    return g


def inner_step(
    params: ModelParams,
    policy: PolicyParams,
    batch,
    opt: OptimizerState,
    cfg: TrainConfig,
    spec: ModelSpec,
    augment: bool = True,
    noise: dict | None = None,
) -> tuple[ModelParams, dict]:
    """One SGD-with-momentum step on the (optionally) policy-augmented batch.

    The policy enters as constants here; only theta is on the tape.
    """
    x, y = batch
    if augment and noise is None:
        raise ValueError("inner_step: augmentation needs a noise draw")
    with NodeMonitor() as mon:
        tape = Tape()
        theta_view, theta = params.as_variables(tape)
        f = _train_objective(spec, x, y, noise, augment)(theta_view, policy)
        loss = float(f.data)
        if not np.isfinite(loss):
            raise TrainingError("non-finite training loss", diagnostics={"loss": loss})
        grads = [g.data for g in grad(f, theta)]
        del tape, f, theta_view, theta
    new = sgd_momentum_update(params, grads, opt.momentum, cfg.inner_lr, cfg.momentum)
    opt.inner_count += 1
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    return new, {"loss": loss, "grad_norm": gnorm, "peak_tape_nodes": mon.peak}


def outer_step(
    params: ModelParams,
    policy: PolicyParams,
    val_batch,
    opt: OptimizerState,
    cfg: TrainConfig,
    spec: ModelSpec,
    train_batch,
    noise: dict,
) -> tuple[PolicyParams, dict]:
    """One RMSprop step on the raw policy from the implicit hypergradient.

    ``f`` is the training loss on ``train_batch`` augmented with ``noise``
    (the last inner batch); ``g`` is the plain validation loss.
    """
    if opt.inner_count == 0:
        raise TrainingError("outer_step needs at least one inner_step since the last policy update")
    x, y = train_batch
    f = _train_objective(spec, x, y, noise, True)
    g = _val_objective(spec, *val_batch)
    try:
        res = hypergradient(f, g, params, policy, cfg.hypergrad)
    except NeumannDivergenceError as exc:
        if cfg.on_divergence == "abort":
            raise
        log.warning("skipping policy update: %s", exc)
        opt.inner_count = 0
        return policy, {"skipped": True, "error": str(exc), "hypergrad_norm": float("nan"), "peak_tape_nodes": 0}
    new = _apply_policy_grad(policy, res.grad_phi, opt, cfg)
    info = {k: v for k, v in res.diagnostics.items() if k != "term_norms"}
    info.update(skipped=False, hypergrad_norm=res.norm)
    return new, info


def _apply_policy_grad(policy: PolicyParams, grad_phi: np.ndarray, opt: OptimizerState, cfg: TrainConfig) -> PolicyParams:
    grads = policy.split(np.asarray(grad_phi, dtype=get_default_dtype()))
    new = rmsprop_update(policy, grads, opt.square_avg, cfg.policy_lr, cfg.rmsprop_decay, cfg.rmsprop_eps)
    opt.inner_count = 0
    opt.outer_count += 1
    return new


def _unrolled_block(theta_start, policy, pending, val_batch, opt, cfg, spec):
    """Replay the last ``s`` plain SGD steps on one tape and update the policy.

    ``pending`` holds the (batch, noise) pairs those steps used, in order.
    """
    builders = [_train_objective(spec, x, y, n, True) for (x, y), n in pending]
    res = unrolled_hypergradient(
        builders,
        _val_objective(spec, *val_batch),
        theta_start,
        policy,
        steps=len(builders),
        lr=cfg.inner_lr,
        cache_cap=cfg.hypergrad.unroll_cache_cap,
    )
    new_policy = _apply_policy_grad(policy, res.grad_phi, opt, cfg)
    info = {k: v for k, v in res.diagnostics.items() if k not in ("theta_final", "f_values")}
    info.update(skipped=False, hypergrad_norm=res.norm)
    return new_policy, info


# ---------------------------------------------------------------- evaluation
def evaluate(spec: ModelSpec, params: ModelParams, dataset: Dataset, batch_size: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and error rate over a whole dataset, unaugmented."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    dtype = get_default_dtype()
    loss_sum, wrong = 0.0, 0.0
    for x, y in iterate_batches(dataset, batch_size):
        logits = forward(spec, params, x.astype(dtype, copy=False))
        loss_sum += float(loss_ce(logits, y).data) * len(y)
        wrong += error_rate(logits, y) * len(y)
    return loss_sum / len(dataset), wrong / len(dataset)


# ---------------------------------------------------------------- driver
def _mean(values):
    return float(np.mean(values)) if values else None


def run(
    cfg: TrainConfig,
    spec: ModelSpec,
    train: Dataset,
    val: Dataset,
    test: Dataset | None = None,
    sink: Callable[[dict], None] | None = None,
    params: ModelParams | None = None,
    policy: PolicyParams | None = None,
    augment_hook: Callable | None = None,
) -> RunMetrics:
    """Train for ``cfg.epochs`` epochs and return the per-epoch metrics.

    The record for epoch 0 describes the initial state.  ``sink`` receives
    each record as soon as it is complete.  ``augment_hook`` (testing aid)
    is called once per policy augmentation of an inner batch.
    """
    dtype = get_default_dtype()
    train, val = train.astype(dtype), val.astype(dtype)
    test = test.astype(dtype) if test is not None else None
    params = params if params is not None else init_params(spec, cfg.seed)
    policy = policy if policy is not None else init_policy(cfg.k_stages, temperature=cfg.temperature)
    opt = OptimizerState.create(params, policy)
    metrics = RunMetrics()
    unrolled = cfg.hypergrad.method == "unrolled"

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    data_rng = np.random.default_rng(seeds[0])
    aug_rng = np.random.default_rng(seeds[1])
    # drop_last applies to training batches only; a small validation split must still yield
    val_batches = CyclicBatches(val, cfg.batch_size, int(seeds[2].generate_state(1)[0]))

    def emit(epoch, t0, train_loss, gnorms, hnorms, peak, extra):
        val_loss, val_err = evaluate(spec, params, val, cfg.eval_batch_size)
        test_err = evaluate(spec, params, test, cfg.eval_batch_size)[1] if test is not None else None
        rec = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_error": val_err,
            "test_error": test_err,
            "grad_norm_theta": _mean(gnorms),
            "hypergrad_norm": _mean(hnorms),
            "policy_snapshot": snapshot(policy, epoch).to_dict(),
            "peak_tape_nodes": int(peak),
            **extra,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if cfg.record_wall_time else 0.0,
        }
        metrics.append(rec)
        if sink is not None:
            sink(rec)

    t0 = time.perf_counter()
    emit(0, t0, evaluate(spec, params, train, cfg.eval_batch_size)[0], [], [], 0, {"outer_steps": 0, "skipped_outer": 0})

    # the unrolled baseline differentiates through plain SGD, so theta follows plain SGD too
    step_cfg = replace(cfg, momentum=0.0) if unrolled else cfg
    step = 0
    pending, theta_start = [], None  # unrolled mode: (batch, noise) since the last policy update
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        warm = epoch <= cfg.warmup_epochs
        augment = cfg.method != "no-aug" and not warm
        learn = cfg.method == "madao" and not warm
        losses, gnorms, hnorms = [], [], []
        peak, n_outer, n_skipped = 0, 0, 0
        for x, y in iterate_batches(train, cfg.batch_size, data_rng, cfg.drop_last):
            step += 1
            if cfg.baseline_augment:
                x = baseline_augment(x, cfg.dataset_kind, aug_rng)
            noise = draw_noise(policy.k_stages, len(y), aug_rng) if augment else None
            if augment and augment_hook is not None:
                augment_hook(epoch, step)
            if learn and unrolled and not pending:
                theta_start = params
            try:
                params, info = inner_step(params, policy, (x, y), opt, step_cfg, spec, augment, noise)
            except TrainingError as exc:
                raise TrainingError("non-finite training loss", epoch, step, exc.diagnostics) from exc
            losses.append(info["loss"])
            gnorms.append(info["grad_norm"])
            peak = max(peak, info["peak_tape_nodes"])
            if not learn:
                continue
            if unrolled:
                pending.append(((x, y), noise))
                if len(pending) < cfg.inner_steps:
                    continue
                try:
                    policy, oinfo = _unrolled_block(theta_start, policy, pending, next(val_batches), opt, cfg, spec)
                except MemoryError as exc:
                    raise TrainingError(str(exc), epoch, step) from exc
                pending = []
            elif opt.inner_count >= cfg.inner_steps:
                try:
                    policy, oinfo = outer_step(params, policy, next(val_batches), opt, cfg, spec, (x, y), noise)
                except NeumannDivergenceError as exc:
                    raise TrainingError(str(exc), epoch, step) from exc
            else:
                continue
            n_outer += 1
            n_skipped += int(oinfo["skipped"])
            if not oinfo["skipped"]:
                hnorms.append(oinfo["hypergrad_norm"])
            peak = max(peak, oinfo["peak_tape_nodes"])
            metrics.outer_log.append({"epoch": epoch, "step": step, **oinfo})
        emit(epoch, t0, _mean(losses), gnorms, hnorms, peak, {"outer_steps": n_outer, "skipped_outer": n_skipped})

    metrics.params = params
    metrics.policy = policy
    return metrics


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    """``dataclasses.replace`` that also accepts ``hypergrad_*`` keys."""
    hg = {k[len("hypergrad_"):]: changes.pop(k) for k in list(changes) if k.startswith("hypergrad_")}
    if hg:
        changes["hypergrad"] = replace(cfg.hypergrad, **hg)
    return replace(cfg, **changes)
