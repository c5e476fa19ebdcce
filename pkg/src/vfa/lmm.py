"""Level-token softmax scorer.

Turns an assessor's logits for the five rating words (bad, poor, fair,
good, excellent) into a score in (1, 5): the expectation of the level index
under a softmax restricted to those five tokens.
"""
from __future__ import annotations

import numpy as np

LEVELS = ("bad", "poor", "fair", "good", "excellent")
_WEIGHTS = np.arange(1, len(LEVELS) + 1, dtype=np.float64)


def _check(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(LEVELS):
        raise ValueError(f"{what} need exactly {len(LEVELS)} entries per row, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{what} must be finite")
    return x


def softmax_score(logits) -> float | np.ndarray:
    """sum_i i * softmax(logits)_i; accepts (5,) or (N, 5)."""
    x = _check(logits, "logits")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)
    out = p @ _WEIGHTS
    return float(out) if out.ndim == 0 else out


def probability_score(probs) -> float | np.ndarray:
    """Same expectation for an already-normalised distribution over the levels."""
    p = _check(probs, "probabilities")
    if (p < 0).any():
        raise ValueError("probabilities must be non-negative")
    total = p.sum(axis=-1)
    if not np.allclose(total, 1.0, atol=1e-9):
        raise ValueError("probabilities must sum to 1")
    out = (p @ _WEIGHTS) / total
    return float(out) if out.ndim == 0 else out
