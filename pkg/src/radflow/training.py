"""SMAPE objective, AdamW, learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .batching import NetworkData, Split
from .model import Radflow, WindowBatch
from .recurrent import ConfigError

DELTA = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    peak_lr: float = 1e-4
    warmup_steps: int = 5000
    epochs: int = 10
    steps_per_epoch: int = 10000
    clip_norm: float = 0.1
    batch_size: int = 64
    seed: int = 0
    # 'teacher' trains on one-step-ahead predictions with true ego inputs;
    # 'own' differentiates through the autoregressive rollout.
    train_feedback: str = "teacher"
    # arithmetic precision of the training run; checkpoints always store float64
    precision: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("eps", "epochs", "steps_per_epoch", "clip_norm", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        # a zero learning rate is allowed as a frozen-parameter control run
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("weight_decay and warmup_steps must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps exceeds the total number of steps")
        if self.train_feedback not in ("teacher", "own"):
            raise ConfigError("train_feedback must be 'teacher' or 'own'")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision must be 'float64' or 'float32'")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


# --------------------------------------------------------------------------
# objective and schedule


def smape_loss(pred_raw, truth_raw) -> T.Tensor:
    """Mean of 100 |v - v_hat| / (0.5 (|v| + |v_hat|) + delta)."""
    pred_raw = T._as_tensor(pred_raw)
    truth = np.asarray(truth_raw, dtype=pred_raw.data.dtype)
    if pred_raw.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred_raw.shape} vs {truth.shape}")
    num = T.abs_(T.sub(pred_raw, truth))
    den = T.add(T.mul(T.add(T.abs_(pred_raw), np.abs(truth)), 0.5), DELTA)
    return T.mul(T.mean(T.div(num, den)), 100.0)


def smape_loss_log(pred_log, truth_raw) -> T.Tensor:
    """SMAPE of a log-space forecast mapped back through expm1 and clamped
    at zero, so the value equals the reported metric.

    SMAPE is flat (200) for any negative prediction against a positive
    truth, so a plain clamp or no clamp at all leaves a model whose outputs
    start below zero with no gradient. The clamp passes gradients straight
    through instead; at a clamped zero the loss slopes towards the truth.
    """
    return smape_loss(T.clamp_min_straight(T.expm1(pred_log), 0.0), truth_raw)


def lr_at(step: int, cfg: OptimConfig) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    decay = cfg.total_steps - cfg.warmup_steps
    left = max(cfg.total_steps - step, 0)
    return cfg.peak_lr * left / decay


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: OptimConfig) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    shrink = 1.0 - lr * cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data * shrink - lr * update


# --------------------------------------------------------------------------
# training loop


def batch_loss(model: Radflow, batch: WindowBatch, feedback: str, rng=None, training=True) -> T.Tensor:
    if feedback == "teacher":
        pred = model.teacher_forecast(batch, training=training, rng=rng)[0]
    else:
        preds = model.forecast(batch, feedback="own", training=training, rng=rng, keep_tensors=True)
        pred = T.stack(preds, axis=1)
    return smape_loss_log(pred, batch.target)


def gradients(model: Radflow, batch: WindowBatch, feedback: str = "teacher", rng=None, training=True):
    """Loss value and gradients keyed by parameter name."""
    with T.Tape() as tape:
        loss = batch_loss(model, batch, feedback, rng, training)
    g = T.backward(tape, loss, model.parameters())
    return loss.item(), {name: g[p] for name, p in model.params.items()}


@dataclass
class FitResult:
    model: Radflow
    best_epoch: int
    val_history: list
    log: list


def fit(
    model: Radflow,
    data: NetworkData,
    split: Split,
    cfg: OptimConfig,
    nodes=None,
    validate: Callable[[Radflow], float] | None = None,
    log_path=None,
    checkpoint_dir=None,
    on_step: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train ``model`` in place and return the checkpoint with the lowest
    validation SMAPE. ``nodes`` restricts the egos sampled for training."""
    mc = model.config
    B, F = mc.backcast, mc.horizon
    split.check(data.T, B, F)
    nodes = np.arange(data.N) if nodes is None else np.asarray(nodes, dtype=np.int64)
    if validate is None:
        from .evaluation import evaluate

        def validate(m):
            return evaluate(m, data, split.val_origin, setting="imputation", nodes=nodes).smape

    # separate streams so models with and without aggregation see the same windows
    rng_windows = np.random.default_rng([cfg.seed, 0])
    rng_neighbors = np.random.default_rng([cfg.seed, 1])
    rng_dropout = np.random.default_rng([cfg.seed, 2])
    state = OptimizerState()
    prev_dtype = T.get_default_dtype()
    T.set_default_dtype(np.dtype(cfg.precision))
    for p in model.params.values():
        p.data = p.data.astype(cfg.precision)
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    log: list[dict] = []
    best_val, best_epoch, best_params = math.inf, -1, None
    val_history = []
    # the epoch boundaries count from the end of warmup
    epoch_ends = {cfg.warmup_steps + (e + 1) * cfg.steps_per_epoch for e in range(cfg.epochs)}
    try:
        for step in range(cfg.total_steps):
            t0 = time.perf_counter()
            egos = nodes[rng_windows.integers(len(nodes), size=cfg.batch_size)]
            origins = rng_windows.integers(B, split.train_end - F + 1, size=cfg.batch_size)
            batch = data.batch(egos, origins, mc, mc.hops, rng=rng_neighbors)
            try:
                loss, grads = gradients(model, batch, cfg.train_feedback, rng_dropout)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss is {loss} at step {step}")
            gnorm = T.global_norm(grads)
            grads = T.clip_global_norm(grads, cfg.clip_norm)
            lr = lr_at(step, cfg)
            adamw_step(model.params, grads, state, lr, cfg)
            rec = {"step": step, "lr": lr, "loss": loss, "grad_norm": gnorm,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if step + 1 in epoch_ends:
                epoch = len(val_history)
                val = float(validate(model))
                val_history.append(val)
                if checkpoint_dir:
                    model.save(Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
                if val < best_val:
                    best_val, best_epoch = val, epoch
                    best_params = {k: p.data.copy() for k, p in model.params.items()}
    finally:
        if log_fh:
            log_fh.close()
        T.set_default_dtype(prev_dtype)
        if best_params is not None:
            for k, p in model.params.items():
                p.data = best_params[k]
        for p in model.params.values():
            p.data = p.data.astype(np.float64)
    return FitResult(model, best_epoch, val_history, log)
