"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from vfa import tensor as tk

STEP = 1e-5
REL_TOL = 1e-4
# central differences at STEP carry ~1e-10 absolute noise; the floor keeps
# structurally-zero gradients from reading as large relative errors
FLOOR = 1e-5


def rel_error(a: float, b: float, floor: float = FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check(loss_fn, tensors, coords_per_tensor=None, rng=None, step=STEP):
    """Compare gradients of ``loss_fn()`` w.r.t. ``tensors`` with central differences.

    ``coords_per_tensor`` limits how many entries of each tensor are probed
    (all when None). Returns (worst relative error, number of coordinates).
    """
    rng = rng or np.random.default_rng(0)
    loss = loss_fn()
    grads = tk.backward(loss, tensors)
    worst, count = 0.0, 0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if coords_per_tensor is None or coords_per_tensor >= n \
            else rng.choice(n, coords_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with tk.no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with tk.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, rel_error(numeric, float(g.reshape(-1)[i])))
            count += 1
    return worst, count
