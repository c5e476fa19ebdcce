"""Two-stage training: rank learning on synthesized chains, then L1 fine-tuning.

The optimizer is AdamW with decoupled weight decay:

    m <- b1 m + (1 - b1) g            v <- b2 v + (1 - b2) g^2
    p <- p - lr * wd * p              (weight matrices only)
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)

with bias-corrected moments and a cosine learning-rate decay to zero over the
whole run, optionally preceded by a linear warmup (off in the full-scale
profile). Gradients are clipped to a global L2 norm first.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tk
from .losses import DEFAULT_ALPHA, DEFAULT_MARGIN, ft_loss, joint_loss, rank_loss
from .model import FluNetParams, ModelConfig, forward, init_params, predict
from .synth import EditSchedule, SynthSpec, plan_schedule

log = logging.getLogger(__name__)

STAGES = ("rank", "finetune", "joint")
EPOCH_SEED_STRIDE = 100_003


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during training."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "rank"
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    alpha: float = DEFAULT_ALPHA
    margin: float = DEFAULT_MARGIN
    drop_rates: tuple[float, ...] = (0.1, 0.5, 0.9)
    intervals: int = 5
    seed: int = 0
    cosine: bool = True
    warmup_steps: int = 0
    grad_clip: float = 5.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "drop_rates", tuple(float(r) for r in self.drop_rates))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ValueError("epochs and warmup_steps must be >= 0, batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("lr and weight_decay must be >= 0, grad_clip > 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @property
    def levels(self) -> int:
        return len(self.drop_rates)

    @classmethod
    def paper(cls, stage: str = "rank") -> "TrainConfig":
        """Full-scale hyperparameters: rank 30 epochs at 3e-4, fine-tune 60 at 1e-5."""
        if stage == "finetune":
            return cls(stage=stage, epochs=60, batch_size=16, lr=1e-5, weight_decay=0.05,
                       drop_rates=(0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9))
        return cls(stage=stage, epochs=30, batch_size=16, lr=3e-4, weight_decay=0.01,
                   drop_rates=(0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9))

    @classmethod
    def toy(cls, stage: str = "rank") -> "TrainConfig":
        """Desk-scale profile for the toy model: K=3, batch 4, short warmup."""
        if stage == "finetune":
            return cls(stage=stage, epochs=500, batch_size=1, lr=1e-3, weight_decay=0.0)
        return cls(stage=stage, epochs=30, batch_size=4, lr=5e-4, weight_decay=0.01,
                   warmup_steps=20, drop_rates=(0.1, 0.5, 0.9))

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: FluNetParams
    config: ModelConfig
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int = 0) -> "TrainState":
        return cls(init_params(config, seed), config)


# ---------------------------------------------------------------- optimizer


def _decays(name: str, p: tk.Tensor) -> bool:
    return p.ndim >= 2 and not name.endswith("bias_table")


def cosine_lr(base: float, step: int, total: int, enabled: bool = True, warmup: int = 0) -> float:
    """Rate for 0-based ``step`` of ``total``; warmup scales it by (step + 1) / warmup."""
    lr = base
    if enabled and total > 0:
        lr = 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
    if warmup > 0 and step < warmup:
        lr *= (step + 1) / warmup
    return lr


def adamw_step(state: TrainState, grads: list[np.ndarray], lr: float, cfg: TrainConfig) -> float:
    """Clip, then apply one AdamW update in place. Returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step}")
    scale = min(1.0, cfg.grad_clip / (norm + 1e-12))
    named = list(state.params.named_parameters())
    if not state.m:
        state.m = [np.zeros_like(p.data) for _, p in named]
        state.v = [np.zeros_like(p.data) for _, p in named]
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, ((name, p), g) in enumerate(zip(named, grads)):
        if scale < 1.0:
            g = g * scale
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if cfg.weight_decay and _decays(name, p):
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if not np.isfinite(p.data).all():
            raise TrainingError(f"parameter {name} became non-finite at step {state.step}")
    return norm


# ---------------------------------------------------------------- chains


@dataclass
class Chain:
    anchor: np.ndarray
    schedules: list[EditSchedule]

    def videos(self) -> np.ndarray:
        out = [self.anchor] + [self.anchor[s.source_index()] for s in self.schedules]
        return np.stack(out)


def build_chains(anchors: Sequence[np.ndarray], cfg: TrainConfig, seed_offset: int = 0) -> list[Chain]:
    chains = []
    for i, a in enumerate(anchors):
        spec = SynthSpec(frames=a.shape[0], drop_rates=cfg.drop_rates, intervals=cfg.intervals,
                         seed=cfg.seed * 1_000_003 + seed_offset + i)
        chains.append(Chain(a, [plan_schedule(spec, k) for k in range(1, spec.levels + 1)]))
    return chains


def epoch_chains(anchors: Sequence[np.ndarray], cfg: TrainConfig, epoch: int) -> list[Chain]:
    return build_chains(anchors, cfg, seed_offset=epoch * EPOCH_SEED_STRIDE)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


LossFn = Callable[[np.ndarray, int], tk.Tensor]


def _run(state: TrainState, n_items: int, loss_for_batch: LossFn, cfg: TrainConfig,
         on_step: Callable[[dict], None] | None) -> TrainState:
    rng = np.random.default_rng([cfg.seed, 7])
    steps_per_epoch = -(-n_items // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    params = state.params.parameters()
    start = state.step
    for epoch in range(cfg.epochs):
        for idx in _batches(n_items, cfg.batch_size, rng):
            loss = loss_for_batch(idx, state.epoch + epoch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at step {state.step}")
            grads = tk.backward(loss, params)
            lr = cosine_lr(cfg.lr, state.step - start, total, cfg.cosine, cfg.warmup_steps)
            norm = adamw_step(state, grads, lr, cfg)
            record = {"step": state.step, "epoch": state.epoch + epoch, "loss": value,
                      "lr": lr, "grad_norm": norm}
            state.history.append(record)
            if on_step is not None:
                on_step(record)
        log.debug("epoch %d done, last loss %.6f", epoch, state.history[-1]["loss"])
    state.epoch += cfg.epochs
    return state


def train_rank(anchors: Sequence[np.ndarray], cfg: TrainConfig, config: ModelConfig | None = None,
               state: TrainState | None = None, on_step=None) -> TrainState:
    """Rank learning: each chain is anchor followed by its stuttered levels.

    Stutter schedules are re-drawn every epoch (``epoch_chains``).
    """
    if not anchors:
        raise ValueError("need at least one anchor")
    if state is None:
        state = TrainState.fresh(config or ModelConfig(), cfg.seed)
    k1 = cfg.levels + 1
    cache: dict[int, list[Chain]] = {}

    def loss_for_batch(idx, epoch):
        if epoch not in cache:
            cache.clear()
            cache[epoch] = epoch_chains(anchors, cfg, epoch)
        chains = cache[epoch]
        videos = np.concatenate([chains[i].videos() for i in idx])
        scores = forward(videos, state.params, state.config)
        return rank_loss(tk.reshape(scores, (len(idx), k1)), cfg.margin)

    return _run(state, len(anchors), loss_for_batch, cfg, on_step)


def finetune(labeled: Sequence[tuple[np.ndarray, float]], cfg: TrainConfig,
             init: TrainState, on_step=None) -> TrainState:
    """L1 regression on labelled videos, continuing from ``init``."""
    _check_labels(labeled)
    videos = np.stack([v for v, _ in labeled])
    targets = np.array([y for _, y in labeled], dtype=np.float64)

    def loss_for_batch(idx, epoch):
        return ft_loss(forward(videos[idx], init.params, init.config), targets[idx])

    return _run(init, len(labeled), loss_for_batch, cfg, on_step)


def train_joint(labeled: Sequence[tuple[np.ndarray, float]], cfg: TrainConfig,
                config: ModelConfig | None = None, state: TrainState | None = None,
                on_step=None) -> TrainState:
    """ft + alpha * rank with chains synthesized from the labelled anchors.

    Anchors are scored in their own forward pass so that the fine-tune term
    is computed exactly as in ``finetune``.
    """
    _check_labels(labeled)
    if state is None:
        state = TrainState.fresh(config or ModelConfig(), cfg.seed)
    videos = np.stack([v for v, _ in labeled])
    targets = np.array([y for _, y in labeled], dtype=np.float64)
    k = cfg.levels
    cache: dict[int, list[Chain]] = {}

    def loss_for_batch(idx, epoch):
        if epoch not in cache:
            cache.clear()
            cache[epoch] = epoch_chains(list(videos), cfg, epoch)
        chains = cache[epoch]
        anchor_scores = forward(videos[idx], state.params, state.config)
        ft = ft_loss(anchor_scores, targets[idx])
        variants = np.concatenate([chains[i].videos()[1:] for i in idx])
        var_scores = tk.reshape(forward(variants, state.params, state.config), (len(idx), k))
        scores = tk.concat([tk.reshape(anchor_scores, (len(idx), 1)), var_scores], axis=1)
        return joint_loss(ft, rank_loss(scores, cfg.margin), cfg.alpha)

    return _run(state, len(labeled), loss_for_batch, cfg, on_step)


def _check_labels(labeled) -> None:
    if not labeled:
        raise ValueError("need at least one labelled video")
    for _, y in labeled:
        if not 1.0 <= float(y) <= 5.0:
            raise ValueError(f"label {y} outside [1, 5]")


# ---------------------------------------------------------------- evaluation


def chain_scores(params: FluNetParams, config: ModelConfig, chains: Sequence[Chain],
                 batch_size: int = 16) -> np.ndarray:
    """(n_chains, K+1) predicted scores."""
    k1 = len(chains[0].schedules) + 1
    videos = np.concatenate([c.videos() for c in chains])
    return predict(videos, params, config, batch_size).reshape(len(chains), k1)


def rank_accuracy(scores: np.ndarray) -> float:
    """Fraction of adjacent (level i, level i+1) pairs ordered correctly."""
    scores = np.asarray(scores, dtype=np.float64)
    return float((scores[:, :-1] > scores[:, 1:]).mean())


def eval_rank_accuracy(state: TrainState, anchors: Sequence[np.ndarray], cfg: TrainConfig,
                       seed_offset: int = 10_000_000) -> float:
    chains = build_chains(anchors, cfg, seed_offset)
    return rank_accuracy(chain_scores(state.params, state.config, chains))


def eval_rank_loss(state: TrainState, anchors: Sequence[np.ndarray], cfg: TrainConfig,
                   seed_offset: int = 0) -> float:
    chains = build_chains(anchors, cfg, seed_offset)
    scores = chain_scores(state.params, state.config, chains)
    return rank_loss(scores, cfg.margin).item()


def write_log(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
