"""Temporal permuted window self-attention.

Keys and values are projected to ``C / compression`` channels, then each run
of ``compression`` consecutive temporal tokens at one spatial site is folded
into the channel axis. Queries keep the full ``(D, S, S)`` window while keys
and values live on a ``(D / compression, S, S)`` grid with ``C`` channels, so
the score matrix shrinks by the compression factor.

Relative positional bias: a folded key group takes the temporal coordinate of
its first member frame, so temporal offsets span ``[-(D - compression), D - 1]``
and the table holds ``(2D - compression) * (2S - 1)**2`` rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tk
from .tensor import Tensor

# Additive score for excluded keys; exp() of it underflows to exactly 0.
MASK_VALUE = -1e9


class ConfigError(ValueError):
    """Invalid attention or model geometry."""


@dataclass(frozen=True)
class TPSAConfig:
    channels: int
    heads: int
    window_t: int
    window_s: int
    compression: int = 1
    shared_bias: bool = False

    def __post_init__(self):
        if min(self.channels, self.heads, self.window_t, self.window_s, self.compression) < 1:
            raise ConfigError(f"all config entries must be positive: {self}")
        if self.window_t % self.compression:
            raise ConfigError(f"temporal window {self.window_t} not divisible by compression {self.compression}")
        if self.channels % self.compression:
            raise ConfigError(f"channels {self.channels} not divisible by compression {self.compression}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def kv_channels(self) -> int:
        return self.channels // self.compression

    @property
    def bias_rows(self) -> int:
        return (2 * self.window_t - self.compression) * (2 * self.window_s - 1) ** 2

    @property
    def bias_width(self) -> int:
        return 1 if self.shared_bias else self.heads


@dataclass
class TPSAParams:
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    out_weight: Tensor
    out_bias: Tensor
    bias_table: Tensor

    FIELDS = ("q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias",
              "out_weight", "out_bias", "bias_table")

    def named(self):
        for name in self.FIELDS:
            yield name, getattr(self, name)

    def check(self, cfg: TPSAConfig) -> None:
        c, ck = cfg.channels, cfg.kv_channels
        expected = {
            "q_weight": (c, c), "q_bias": (c,),
            "k_weight": (c, ck), "k_bias": (ck,),
            "v_weight": (c, ck), "v_bias": (ck,),
            "out_weight": (c, c), "out_bias": (c,),
            "bias_table": (cfg.bias_rows, cfg.bias_width),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise tk.DimensionError(f"{name}: expected {shape}, got {got}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_tpsa_params(cfg: TPSAConfig, rng: np.random.Generator, std: float = 0.02) -> TPSAParams:
    c, ck = cfg.channels, cfg.kv_channels
    p = tk.parameter
    return TPSAParams(
        q_weight=p(trunc_normal(rng, (c, c), std)), q_bias=p(np.zeros(c)),
        k_weight=p(trunc_normal(rng, (c, ck), std)), k_bias=p(np.zeros(ck)),
        v_weight=p(trunc_normal(rng, (c, ck), std)), v_bias=p(np.zeros(ck)),
        out_weight=p(trunc_normal(rng, (c, c), std)), out_bias=p(np.zeros(c)),
        bias_table=p(trunc_normal(rng, (cfg.bias_rows, cfg.bias_width), std)),
    )


# ---------------------------------------------------------------- geometry


def resolve_window(extent: tuple[int, int, int], cfg: TPSAConfig, shifted: bool):
    """Effective window and cyclic shift for a (T, H, W) feature grid.

    A window side larger than the grid is clipped to the grid (the temporal
    side is then rounded up to a multiple of the compression factor), and
    no shift is applied along such an axis.
    """
    g = cfg.compression
    sides = (cfg.window_t, cfg.window_s, cfg.window_s)
    window, shift = [], []
    for axis, (n, side) in enumerate(zip(extent, sides)):
        if n <= side:
            w = -(-n // g) * g if axis == 0 else n
            s = 0
        else:
            w = side
            s = side // 2 if shifted else 0
            if axis == 0:
                s -= s % g
        window.append(w)
        shift.append(s)
    return tuple(window), tuple(shift)


@dataclass
class WindowSet:
    windows: Tensor                  # (B, N, L, C)
    extent: tuple[int, int, int]     # unpadded (T, H, W)
    padded: tuple[int, int, int]
    window: tuple[int, int, int]
    shift: tuple[int, int, int]
    batched: bool = True
    key_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_windows(self) -> int:
        return self.windows.shape[1]

    @property
    def pad(self) -> tuple[int, int, int]:
        return tuple(p - n for p, n in zip(self.padded, self.extent))


def _window_grid(padded, window):
    return tuple(p // w for p, w in zip(padded, window))


def _region_labels(n: int, window: int, shift: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    if shift:
        labels[n - window:n - shift] = 1
        labels[n - shift:] = 2
    return labels


def _token_layout(extent, padded, window, shift):
    """Per-token (valid, region-label) on the rolled grid, in window order."""
    maps = []
    for axis in range(3):
        valid = np.arange(padded[axis]) < extent[axis]
        maps.append((np.roll(valid, -shift[axis]), _region_labels(padded[axis], window[axis], shift[axis])))
    valid = maps[0][0][:, None, None] & maps[1][0][None, :, None] & maps[2][0][None, None, :]
    label = maps[0][1][:, None, None] * 9 + maps[1][1][None, :, None] * 3 + maps[2][1][None, None, :]
    grid = _window_grid(padded, window)

    def to_windows(a):
        a = a.reshape(grid[0], window[0], grid[1], window[1], grid[2], window[2])
        return a.transpose(0, 2, 4, 1, 3, 5).reshape(-1, window[0] * window[1] * window[2])

    return to_windows(valid), to_windows(label)


def build_key_mask(extent, padded, window, shift, compression: int) -> np.ndarray | None:
    """Additive (N, L, L / compression) mask or None when nothing is excluded.

    A key group is excluded when all its member tokens are padding, or when
    its region label (taken from its first member) differs from the query's.
    """
    if not any(shift) and tuple(extent) == tuple(padded):
        return None
    valid, label = _token_layout(extent, padded, window, shift)
    n, L = valid.shape
    g = compression
    wt, wh, ww = window
    grp_valid = valid.reshape(n, wt // g, g, wh, ww).any(axis=2).reshape(n, -1)
    grp_label = label.reshape(n, wt // g, g, wh, ww)[:, :, 0].reshape(n, -1)
    allowed = (label[:, :, None] == grp_label[:, None, :]) & grp_valid[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE)


def relative_index(window: tuple[int, int, int], cfg: TPSAConfig) -> np.ndarray:
    """(L, L / compression) row indices into the bias table."""
    g = cfg.compression
    wt, wh, ww = window
    t, y, x = np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww), indexing="ij")
    t, y, x = t.ravel(), y.ravel(), x.ravel()
    kt, ky, kx = np.meshgrid(np.arange(0, wt, g), np.arange(wh), np.arange(ww), indexing="ij")
    kt, ky, kx = kt.ravel(), ky.ravel(), kx.ravel()
    side = 2 * cfg.window_s - 1
    dt = t[:, None] - kt[None, :] + cfg.window_t - g
    dy = y[:, None] - ky[None, :] + cfg.window_s - 1
    dx = x[:, None] - kx[None, :] + cfg.window_s - 1
    return (dt * side + dy) * side + dx


def partition_windows(x: Tensor, cfg: TPSAConfig, shifted: bool = False,
                      window: tuple | None = None, shift: tuple | None = None) -> WindowSet:
    """Pad, cyclically roll, and cut a (B, T, H, W, C) map into windows."""
    batched = x.ndim == 5
    if not batched:
        x = tk.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise tk.DimensionError(f"expected (T, H, W, C) or (B, T, H, W, C), got {x.shape}")
    b, t, h, w, c = x.shape
    extent = (t, h, w)
    if window is None or shift is None:
        window, shift = resolve_window(extent, cfg, shifted)
    padded = tuple(-(-n // k) * k for n, k in zip(extent, window))
    x = tk.pad_trailing(x, [0] + [p - n for p, n in zip(padded, extent)] + [0])
    x = tk.roll(x, [-s for s in shift], (1, 2, 3))
    grid = _window_grid(padded, window)
    x = tk.reshape(x, (b, grid[0], window[0], grid[1], window[1], grid[2], window[2], c))
    x = tk.permute(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = tk.reshape(x, (b, grid[0] * grid[1] * grid[2], window[0] * window[1] * window[2], c))
    mask = build_key_mask(extent, padded, window, shift, cfg.compression)
    return WindowSet(x, extent, padded, tuple(window), tuple(shift), batched, mask)


def merge_windows(ws: WindowSet, windows: Tensor | None = None) -> Tensor:
    """Inverse of ``partition_windows``; channel count may differ."""
    win = ws.windows if windows is None else windows
    b, _, _, c = win.shape
    grid = _window_grid(ws.padded, ws.window)
    wt, wh, ww = ws.window
    x = tk.reshape(win, (b, grid[0], grid[1], grid[2], wt, wh, ww, c))
    x = tk.permute(x, (0, 1, 4, 2, 5, 3, 6, 7))
    x = tk.reshape(x, (b,) + tuple(ws.padded) + (c,))
    x = tk.roll(x, ws.shift, (1, 2, 3))
    x = tk.crop_leading(x, (b,) + tuple(ws.extent) + (c,))
    if not ws.batched:
        x = tk.reshape(x, x.shape[1:])
    return x


# ---------------------------------------------------------------- operator


def project_qkv(ws: WindowSet, p: TPSAParams):
    x = ws.windows
    if x.shape[-1] != p.q_weight.shape[0]:
        raise tk.DimensionError(f"window channels {x.shape[-1]} != projection input {p.q_weight.shape[0]}")
    q = tk.linear(x, p.q_weight, p.q_bias)
    k = tk.linear(x, p.k_weight, p.k_bias)
    v = tk.linear(x, p.v_weight, p.v_bias)
    return q, k, v


def permute_temporal(k: Tensor, window: tuple[int, int, int], compression: int) -> Tensor:
    """Fold each run of ``compression`` temporal tokens into channels.

    Token axis is second to last, laid out (t, h, w). Group ``g`` owns
    temporal indices ``[g*compression, (g+1)*compression)`` and its channels
    are the members' channels concatenated in temporal order.
    """
    g = compression
    wt, wh, ww = window
    if wt % g:
        raise ConfigError(f"temporal window {wt} not divisible by compression {g}")
    if g == 1:
        return k
    lead, (L, c) = k.shape[:-2], k.shape[-2:]
    if L != wt * wh * ww:
        raise tk.DimensionError(f"token count {L} does not match window {window}")
    n = len(lead)
    k = tk.reshape(k, lead + (wt // g, g, wh, ww, c))
    k = tk.permute(k, tuple(range(n)) + (n, n + 2, n + 3, n + 1, n + 4))
    return tk.reshape(k, lead + ((wt // g) * wh * ww, g * c))


def unpermute_temporal(kp: Tensor, window: tuple[int, int, int], compression: int) -> Tensor:
    g = compression
    if g == 1:
        return kp
    wt, wh, ww = window
    lead, c = kp.shape[:-2], kp.shape[-1] // g
    n = len(lead)
    k = tk.reshape(kp, lead + (wt // g, wh, ww, g, c))
    k = tk.permute(k, tuple(range(n)) + (n, n + 3, n + 1, n + 2, n + 4))
    return tk.reshape(k, lead + (wt * wh * ww, c))


def attention_weights(q: Tensor, kp: Tensor, p: TPSAParams, cfg: TPSAConfig, ws: WindowSet) -> Tensor:
    """Softmax(Q K_p^T / sqrt(d) + B + mask): (B, N, heads, L, L / compression)."""
    b, n, L, c = q.shape
    h, d = cfg.heads, cfg.head_dim
    lk = kp.shape[2]
    qh = tk.permute(tk.reshape(q * (1.0 / math.sqrt(d)), (b, n, L, h, d)), (0, 1, 3, 2, 4))
    kh = tk.permute(tk.reshape(kp, (b, n, lk, h, d)), (0, 1, 3, 4, 2))
    scores = tk.matmul(qh, kh)
    idx = relative_index(ws.window, cfg)
    bias = tk.permute(tk.take_rows(p.bias_table, idx), (2, 0, 1))   # (heads|1, L, Lk)
    scores = scores + bias
    if ws.key_mask is not None:
        scores = scores + ws.key_mask[:, None, :, :]
    return tk.softmax_lastdim(scores)


def tpsa_forward(x: Tensor, p: TPSAParams, cfg: TPSAConfig, shifted: bool = False,
                 return_weights: bool = False):
    """Temporal permuted self-attention over (B, T, H, W, C) or (T, H, W, C)."""
    if x.shape[-1] != cfg.channels:
        raise tk.DimensionError(f"input channels {x.shape[-1]} != configured {cfg.channels}")
    ws = partition_windows(x, cfg, shifted)
    q, k, v = project_qkv(ws, p)
    kp = permute_temporal(k, ws.window, cfg.compression)
    vp = permute_temporal(v, ws.window, cfg.compression)
    attn = attention_weights(q, kp, p, cfg, ws)
    b, n, L, c = q.shape
    h, d = cfg.heads, cfg.head_dim
    vh = tk.permute(tk.reshape(vp, (b, n, vp.shape[2], h, d)), (0, 1, 3, 2, 4))
    out = tk.matmul(attn, vh)
    out = tk.reshape(tk.permute(out, (0, 1, 3, 2, 4)), (b, n, L, c))
    out = tk.linear(out, p.out_weight, p.out_bias)
    y = merge_windows(ws, out)
    return (y, attn) if return_weights else y
