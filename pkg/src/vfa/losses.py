"""Rank, fine-tune, and joint training objectives."""
from __future__ import annotations

import numpy as np

from . import tensor as tk
from .tensor import Tensor

DEFAULT_MARGIN = 0.4
DEFAULT_ALPHA = 0.3


def _difference_matrix(n: int) -> np.ndarray:
    # column i holds e_{i+1} - e_i, so scores @ D gives adjacent differences
    d = np.zeros((n, n - 1))
    idx = np.arange(n - 1)
    d[idx, idx] = -1.0
    d[idx + 1, idx] = 1.0
    return d


def _row_mean(x: Tensor) -> Tensor:
    # mean taken relative to the first entry, so constant rows average exactly
    first = tk.crop_leading(x, (x.shape[0], 1))
    return tk.reshape(first, (x.shape[0],)) + tk.mean(x - first, axis=1)


def rank_loss(scores, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Margin ranking loss over chains ordered from most to least fluent.

    ``scores`` is (K+1,) for one chain or (B, K+1) for a batch. Per chain
    the loss is mean_i max(0, s[i+1] - s[i] + margin); chains are averaged.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    if s.ndim not in (1, 2):
        raise ValueError(f"scores must be (K+1,) or (B, K+1), got {s.shape}")
    n = s.shape[-1]
    if n < 2:
        raise ValueError("a rank chain needs at least two scores (K >= 1)")
    if margin < 0:
        raise ValueError("margin must be non-negative")
    s2 = s if s.ndim == 2 else tk.reshape(s, (1, n))
    hinge = tk.relu(tk.matmul(s2, Tensor(_difference_matrix(n))) + margin)
    per_chain = _row_mean(hinge)
    return tk.reshape(_row_mean(tk.reshape(per_chain, (1, per_chain.shape[0]))), ())


def ft_loss(pred, target) -> Tensor:
    """Mean absolute error over the batch."""
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    y = np.asarray(target, dtype=np.float64)
    if p.ndim == 0:
        p = tk.reshape(p, (1,))
    y = y.reshape(-1)
    if p.shape != y.shape or y.size == 0:
        raise ValueError(f"prediction {p.shape} and target {y.shape} must be equal-length and non-empty")
    return tk.mean(tk.absolute(p - y))


def joint_loss(ft, rank, alpha: float = DEFAULT_ALPHA):
    """ft + alpha * rank; works on Tensors or plain floats."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return ft + rank * alpha
