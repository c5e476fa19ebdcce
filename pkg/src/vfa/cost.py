"""Closed-form compute and parameter accounting.

Counts follow what the implementation actually executes: attention runs on
the padded window grid, everything else on the unpadded token grid.

Two counting conventions are supported:

``"fma2"``
    one multiply-add = 2 FLOPs, plus per-element costs for normalisation,
    activation, softmax, bias/mask addition and residual adds.
``"mac"``
    one multiply-add = 1 operation and element-wise work is ignored. This is
    the convention of the common profilers that video transformer papers
    quote as "FLOPs".
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .attention import TPSAConfig, resolve_window
from .model import NUM_STAGES, ModelConfig, feature_shapes

CONVENTIONS = ("fma2", "mac")

# per-element costs used by the "fma2" convention
NORM_FLOPS = 7       # mean, centre, square, variance, scale, weight, bias
GELU_FLOPS = 8
SOFTMAX_FLOPS = 4    # max-subtract, exp, sum, divide
ADD_FLOPS = 1


@dataclass
class Cost:
    macs: int = 0
    elementwise: int = 0
    params: int = 0
    parts: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, macs: int = 0, elementwise: int = 0, params: int = 0) -> None:
        self.macs += macs
        self.elementwise += elementwise
        self.params += params
        self.parts[name] = self.parts.get(name, 0) + macs

    def __iadd__(self, other: "Cost") -> "Cost":
        self.macs += other.macs
        self.elementwise += other.elementwise
        self.params += other.params
        for k, v in other.parts.items():
            self.parts[k] = self.parts.get(k, 0) + v
        return self

    def flops(self, convention: str = "fma2") -> int:
        if convention == "fma2":
            return 2 * self.macs + self.elementwise
        if convention == "mac":
            return self.macs
        raise ValueError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")


def _padded(extent, window):
    return tuple(-(-n // w) * w for n, w in zip(extent, window))


def attention_params(cfg: TPSAConfig) -> int:
    c, ckv = cfg.channels, cfg.kv_channels
    return (c * c + c) + 2 * (c * ckv + ckv) + (c * c + c) + cfg.bias_rows * cfg.bias_width


def count_cost(cfg: TPSAConfig, extent: tuple[int, int, int], shifted: bool = False) -> Cost:
    """Cost of one attention call on a (T, H, W) grid, batch size 1."""
    window, shift = resolve_window(extent, cfg, shifted)
    padded = _padded(extent, window)
    n_windows = (padded[0] // window[0]) * (padded[1] // window[1]) * (padded[2] // window[2])
    q_len = window[0] * window[1] * window[2]
    k_len = (window[0] // cfg.compression) * window[1] * window[2]
    tokens = n_windows * q_len
    c, ckv = cfg.channels, cfg.kv_channels
    scores = n_windows * cfg.heads * q_len * k_len
    masked = any(shift) or padded != tuple(extent)

    out = Cost()
    out.add("attn.q_proj", macs=tokens * c * c, elementwise=tokens * c)
    out.add("attn.kv_proj", macs=2 * tokens * c * ckv, elementwise=2 * tokens * ckv)
    out.add("attn.scores", macs=n_windows * q_len * k_len * c,
            elementwise=scores * (2 + (1 if masked else 0)))
    out.add("attn.softmax", elementwise=scores * SOFTMAX_FLOPS)
    out.add("attn.values", macs=n_windows * q_len * k_len * c)
    out.add("attn.out_proj", macs=tokens * c * c, elementwise=tokens * c)
    out.params = attention_params(cfg)
    return out


def _block_cost(cfg: TPSAConfig, extent, shifted: bool, mlp_ratio: int) -> Cost:
    c = cfg.channels
    hidden = mlp_ratio * c
    tokens = extent[0] * extent[1] * extent[2]
    out = Cost()
    out.add("norm", elementwise=2 * tokens * c * NORM_FLOPS, params=4 * c)
    out += count_cost(cfg, extent, shifted)
    out.add("mlp", macs=tokens * c * hidden * 2,
            elementwise=tokens * (hidden + c + hidden * GELU_FLOPS),
            params=c * hidden + hidden + hidden * c + c)
    out.add("residual", elementwise=2 * tokens * c * ADD_FLOPS)
    return out


def model_cost_breakdown(config: ModelConfig) -> Cost:
    shapes = feature_shapes(config)
    kt, kh, kw = config.patch
    total = Cost()
    t, h, w, c0 = shapes[0]
    tokens = t * h * w
    patch_in = kt * kh * kw * 3
    total.add("patch_embed", macs=tokens * patch_in * c0, elementwise=tokens * c0,
              params=patch_in * c0 + c0)
    if config.patch_norm:
        total.add("norm", elementwise=tokens * c0 * NORM_FLOPS, params=2 * c0)
    for s in range(NUM_STAGES):
        t, h, w, c = shapes[s]
        cfg = config.stage_config(s)
        for b in range(config.depths[s]):
            shifted = config.shifted_windows and b % 2 == 1
            total += _block_cost(cfg, (t, h, w), shifted, config.mlp_ratio)
        if s < NUM_STAGES - 1:
            t2, h2, w2, c2 = shapes[s + 1]
            out_tokens = t2 * h2 * w2
            total.add("patch_merge", macs=out_tokens * 4 * c * c2,
                      elementwise=out_tokens * 4 * c * NORM_FLOPS,
                      params=8 * c + 4 * c * c2)
    t, h, w, c = shapes[-1]
    tokens = t * h * w
    hid = config.head_hidden
    total.add("norm", elementwise=tokens * c * NORM_FLOPS, params=2 * c)
    total.add("head", macs=tokens * (c * hid + hid),
              elementwise=tokens * (hid * (1 + GELU_FLOPS) + 1) + tokens,
              params=c * hid + hid + hid + 1)
    return total


def model_cost(config: ModelConfig, convention: str = "fma2") -> tuple[float, int]:
    """(GFLOPs, parameter count) for one video at the configured size."""
    cost = model_cost_breakdown(config)
    return cost.flops(convention) / 1e9, cost.params


def cost_rows(configs, convention: str = "fma2") -> list[dict]:
    rows = []
    for cfg in configs:
        gflops, params = model_cost(cfg, convention)
        rows.append({"frames": cfg.frames, "window": list(cfg.window), "compression": cfg.compression,
                     "tpsa_stages": list(cfg.tpsa_stages), "gflops": gflops, "params": params,
                     "convention": convention})
    return rows


def format_cost_table(rows: list[dict]) -> str:
    lines = [f"{'frames':>6}  {'window':<12}  {'T-PSA stages':<12}  {'GFLOPs':>10}  {'params':>12}"]
    for r in rows:
        window = "(" + ",".join(str(v) for v in r["window"]) + ")"
        stages = "".join("x" if f else "." for f in r["tpsa_stages"])
        lines.append(f"{r['frames']:>6}  {window:<12}  {stages:<12}  {r['gflops']:>10.1f}  {r['params']:>12,d}")
    return "\n".join(lines) + "\n"
