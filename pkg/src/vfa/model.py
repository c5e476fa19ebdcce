"""FluNet: patch embedding, four-stage windowed-attention encoder, score head.

Video (T, H, W, 3) -> (2, 4, 4) patch embedding -> (T/2, H/4, W/4, C)
-> four stages of pre-norm attention blocks with 2x2 spatial patch merging
in between -> (T/2, H/32, W/32, 8C) -> two point-wise layers -> mean -> score.

Stages flagged in ``tpsa_stages`` use the configured compression factor; the
others run plain window attention (compression 1).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tk
from .attention import (ConfigError, TPSAConfig, TPSAParams, init_tpsa_params,
                        tpsa_forward, trunc_normal)
from .tensor import Tensor

NUM_STAGES = 4


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 24
    depths: tuple[int, ...] = (1, 1, 2, 1)
    frames: int = 16
    height: int = 56
    width: int = 56
    window: tuple[int, int, int] = (4, 7, 7)
    compression: int = 2
    heads: tuple[int, ...] = (3, 6, 12, 24)
    tpsa_stages: tuple[bool, ...] = (True, True, True, True)
    shifted_windows: bool = True
    shared_bias: bool = False
    patch: tuple[int, int, int] = (2, 4, 4)
    mlp_ratio: int = 4
    head_hidden: int = 64
    activation: str = "gelu"
    init_std: float = 0.02
    patch_norm: bool = True
    pixel_mean: float = 0.45
    pixel_std: float = 0.225

    def __post_init__(self):
        for name in ("depths", "window", "heads", "tpsa_stages", "patch"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.depths) != NUM_STAGES or len(self.heads) != NUM_STAGES:
            raise ConfigError("depths and heads need one entry per stage")
        if len(self.tpsa_stages) != NUM_STAGES:
            raise ConfigError("tpsa_stages needs one entry per stage")
        if self.window[1] != self.window[2]:
            raise ConfigError(f"spatial window must be square, got {self.window}")
        if self.activation != "gelu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        for s in range(NUM_STAGES):
            self.stage_config(s)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-scale geometry: 128 frames of 224x224, C=96, depths (2,2,6,2)."""
        base = dict(channels=96, depths=(2, 2, 6, 2), frames=128, height=224, width=224,
                    window=(32, 7, 7), compression=2)
        base.update(overrides)
        return cls(**base)

    def stage_channels(self, stage: int) -> int:
        return self.channels * 2 ** min(stage, NUM_STAGES - 1)

    def stage_heads(self, stage: int) -> int:
        return max(1, min(self.heads[stage], self.stage_channels(stage) // 8))

    def stage_config(self, stage: int) -> TPSAConfig:
        return TPSAConfig(
            channels=self.stage_channels(stage),
            heads=self.stage_heads(stage),
            window_t=self.window[0],
            window_s=self.window[1],
            compression=self.compression if self.tpsa_stages[stage] else 1,
            shared_bias=self.shared_bias,
        )

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def feature_shapes(config: ModelConfig, frames=None, height=None, width=None) -> list[tuple[int, int, int, int]]:
    """(T, H, W, C) of the feature map entering each stage, plus the encoder output."""
    t = frames or config.frames
    h = height or config.height
    w = width or config.width
    kt, kh, kw = config.patch
    t, h, w = -(-t // kt), -(-h // kh), -(-w // kw)
    shapes = [(t, h, w, config.stage_channels(0))]
    for s in range(1, NUM_STAGES):
        h, w = -(-h // 2), -(-w // 2)
        shapes.append((t, h, w, config.stage_channels(s)))
    shapes.append(shapes[-1])
    return shapes


# ---------------------------------------------------------------- parameters


@dataclass
class BlockParams:
    norm1_weight: Tensor
    norm1_bias: Tensor
    attn: TPSAParams
    norm2_weight: Tensor
    norm2_bias: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor

    def named(self):
        yield "norm1.weight", self.norm1_weight
        yield "norm1.bias", self.norm1_bias
        for n, t in self.attn.named():
            yield f"attn.{n}", t
        yield "norm2.weight", self.norm2_weight
        yield "norm2.bias", self.norm2_bias
        yield "mlp.fc1.weight", self.fc1_weight
        yield "mlp.fc1.bias", self.fc1_bias
        yield "mlp.fc2.weight", self.fc2_weight
        yield "mlp.fc2.bias", self.fc2_bias


@dataclass
class MergeParams:
    norm_weight: Tensor
    norm_bias: Tensor
    reduction: Tensor

    def named(self):
        yield "norm.weight", self.norm_weight
        yield "norm.bias", self.norm_bias
        yield "reduction.weight", self.reduction


@dataclass
class FluNetParams:
    patch_weight: Tensor
    patch_bias: Tensor
    patch_norm_weight: Tensor | None
    patch_norm_bias: Tensor | None
    stages: list[list[BlockParams]]
    merges: list[MergeParams]
    norm_weight: Tensor
    norm_bias: Tensor
    head_fc1_weight: Tensor
    head_fc1_bias: Tensor
    head_fc2_weight: Tensor
    head_fc2_bias: Tensor
    _index: dict = field(default=None, init=False, repr=False)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "patch_embed.weight", self.patch_weight
        yield "patch_embed.bias", self.patch_bias
        if self.patch_norm_weight is not None:
            yield "patch_embed.norm.weight", self.patch_norm_weight
            yield "patch_embed.norm.bias", self.patch_norm_bias
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for n, t in block.named():
                    yield f"stages.{s}.blocks.{b}.{n}", t
            if s < len(self.merges):
                for n, t in self.merges[s].named():
                    yield f"stages.{s}.merge.{n}", t
        yield "norm.weight", self.norm_weight
        yield "norm.bias", self.norm_bias
        yield "head.fc1.weight", self.head_fc1_weight
        yield "head.fc1.bias", self.head_fc1_bias
        yield "head.fc2.weight", self.head_fc2_weight
        yield "head.fc2.bias", self.head_fc2_bias

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def __getitem__(self, name: str) -> Tensor:
        if self._index is None:
            self._index = dict(self.named_parameters())
        return self._index[name]

    def count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        names = [n for n, _ in self.named_parameters()]
        missing = set(names) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for n, t in self.named_parameters():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise tk.DimensionError(f"{n}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()


def init_params(config: ModelConfig, seed: int | np.random.Generator = 0) -> FluNetParams:
    """Truncated-normal weights, zero biases, unit norm scales."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = config.init_std
    P = tk.parameter

    def w(*shape):
        return P(trunc_normal(rng, shape, std))

    def zeros(n):
        return P(np.zeros(n))

    def ones(n):
        return P(np.ones(n))

    c0 = config.channels
    kt, kh, kw = config.patch
    stages, merges = [], []
    for s in range(NUM_STAGES):
        cfg = config.stage_config(s)
        c = cfg.channels
        hidden = c * config.mlp_ratio
        blocks = []
        for _ in range(config.depths[s]):
            blocks.append(BlockParams(
                norm1_weight=ones(c), norm1_bias=zeros(c),
                attn=init_tpsa_params(cfg, rng, std),
                norm2_weight=ones(c), norm2_bias=zeros(c),
                fc1_weight=w(c, hidden), fc1_bias=zeros(hidden),
                fc2_weight=w(hidden, c), fc2_bias=zeros(c),
            ))
        stages.append(blocks)
        if s < NUM_STAGES - 1:
            merges.append(MergeParams(norm_weight=ones(4 * c), norm_bias=zeros(4 * c),
                                      reduction=w(4 * c, 2 * c)))
    c_last = config.stage_channels(NUM_STAGES - 1)
    return FluNetParams(
        patch_weight=w(kt * kh * kw * 3, c0), patch_bias=zeros(c0),
        patch_norm_weight=ones(c0) if config.patch_norm else None,
        patch_norm_bias=zeros(c0) if config.patch_norm else None,
        stages=stages, merges=merges,
        norm_weight=ones(c_last), norm_bias=zeros(c_last),
        head_fc1_weight=w(c_last, config.head_hidden), head_fc1_bias=zeros(config.head_hidden),
        head_fc2_weight=w(config.head_hidden, 1), head_fc2_bias=zeros(1),
    )


# ---------------------------------------------------------------- forward


def _as_batch(video) -> tuple[Tensor, bool]:
    v = video if isinstance(video, Tensor) else Tensor(np.asarray(video, dtype=np.float64))
    if v.ndim == 4:
        return tk.reshape(v, (1,) + v.shape), False
    if v.ndim != 5:
        raise ValueError(f"video must be (T, H, W, 3) or (B, T, H, W, 3), got {v.shape}")
    return v, True


def patch_embed(video, params: FluNetParams, config: ModelConfig) -> Tensor:
    """(B, T, H, W, 3) -> (B, ceil(T/2), ceil(H/4), ceil(W/4), C).

    Pixels are standardised with the configured mean/std before the patch
    convolution, and the embedding is layer-normed when ``patch_norm`` is set.
    """
    v, batched = _as_batch(video)
    if v.size == 0:
        raise ValueError("empty video")
    if v.shape[-1] != 3:
        raise tk.DimensionError(f"video must have 3 colour channels, got {v.shape[-1]}")
    if config.pixel_mean != 0.0 or config.pixel_std != 1.0:
        v = (v - config.pixel_mean) * (1.0 / config.pixel_std)
    x = tk.conv3d_as_patches(v, params.patch_weight, params.patch_bias, config.patch)
    if params.patch_norm_weight is not None:
        x = tk.layer_norm(x, params.patch_norm_weight, params.patch_norm_bias)
    return x if batched else tk.reshape(x, x.shape[1:])


def block_forward(x: Tensor, bp: BlockParams, cfg: TPSAConfig, shifted: bool) -> Tensor:
    h = tk.layer_norm(x, bp.norm1_weight, bp.norm1_bias)
    x = x + tpsa_forward(h, bp.attn, cfg, shifted)
    h = tk.layer_norm(x, bp.norm2_weight, bp.norm2_bias)
    h = tk.gelu(tk.linear(h, bp.fc1_weight, bp.fc1_bias))
    return x + tk.linear(h, bp.fc2_weight, bp.fc2_bias)


def patch_merge(x: Tensor, mp: MergeParams) -> Tensor:
    """2x2 spatial merge: (B, T, H, W, C) -> (B, T, ceil(H/2), ceil(W/2), 2C)."""
    b, t, h, w, c = x.shape
    x = tk.pad_trailing(x, (0, 0, h % 2, w % 2, 0))
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    x = tk.reshape(x, (b, t, h2, 2, w2, 2, c))
    x = tk.permute(x, (0, 1, 2, 4, 5, 3, 6))
    x = tk.reshape(x, (b, t, h2, w2, 4 * c))
    x = tk.layer_norm(x, mp.norm_weight, mp.norm_bias)
    return tk.linear(x, mp.reduction)


def encode(x_p: Tensor, params: FluNetParams, config: ModelConfig) -> Tensor:
    batched = x_p.ndim == 5
    x = x_p if batched else tk.reshape(x_p, (1,) + x_p.shape)
    if x.shape[-1] != config.channels:
        raise ConfigError(f"feature channels {x.shape[-1]} != configured {config.channels}")
    for s in range(NUM_STAGES):
        cfg = config.stage_config(s)
        for j, bp in enumerate(params.stages[s]):
            x = block_forward(x, bp, cfg, shifted=config.shifted_windows and j % 2 == 1)
        if s < NUM_STAGES - 1:
            x = patch_merge(x, params.merges[s])
    x = tk.layer_norm(x, params.norm_weight, params.norm_bias)
    return x if batched else tk.reshape(x, x.shape[1:])


def head_score(x_e: Tensor, params: FluNetParams) -> Tensor:
    """Point-wise layer, GELU, point-wise layer to one channel, then global mean."""
    if x_e.shape[-1] != params.head_fc1_weight.shape[0]:
        raise tk.DimensionError(f"head expects {params.head_fc1_weight.shape[0]} channels, got {x_e.shape[-1]}")
    h = tk.gelu(tk.linear(x_e, params.head_fc1_weight, params.head_fc1_bias))
    h = tk.linear(h, params.head_fc2_weight, params.head_fc2_bias)
    lead = h.ndim - 4       # 1 when batched
    return tk.mean(tk.reshape(h, h.shape[:-1]), axis=tuple(range(lead, h.ndim - 1)))


def forward(video, params: FluNetParams, config: ModelConfig) -> Tensor:
    """Fluency score per video: shape (B,) for a batch, scalar for one video."""
    v, batched = _as_batch(video)
    y = head_score(encode(patch_embed(v, params, config), params, config), params)
    return y if batched else tk.reshape(y, ())


def predict(videos, params: FluNetParams, config: ModelConfig, batch_size: int = 8) -> np.ndarray:
    """Scores for a stack of videos without recording a graph."""
    videos = np.asarray(videos, dtype=np.float64)
    if videos.ndim == 4:
        videos = videos[None]
    out = []
    with tk.no_grad():
        for i in range(0, len(videos), batch_size):
            out.append(forward(videos[i:i + batch_size], params, config).data)
    return np.concatenate(out)
