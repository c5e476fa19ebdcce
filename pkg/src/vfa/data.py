"""Procedural anchor videos.

Each anchor pans a textured gradient background and moves a few coloured
Gaussian blobs at constant velocity, so consecutive genuine frames always
differ and any duplicated frame is a true freeze. The texture is strong and
the pan fast by default, so a frozen frame changes local motion energy by a
clearly visible amount.
"""
from __future__ import annotations

import numpy as np


def procedural_anchor(rng: np.random.Generator, frames: int = 16, height: int = 56,
                      width: int = 56, blobs: int = 3, noise: float = 0.01, texture: float = 0.4,
                      pan_speed: tuple[float, float] = (3.0, 5.0),
                      blob_speed: tuple[float, float] = (1.5, 3.5)) -> np.ndarray:
    """(frames, height, width, 3) float video with values roughly in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.2, 0.6, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(2, 3))
    kx, ky = rng.uniform(0.3, 0.8, size=2) * rng.choice([-1, 1], size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    pan_angle = rng.uniform(0, 2 * np.pi)
    pan = rng.uniform(*pan_speed) * np.array([np.cos(pan_angle), np.sin(pan_angle)])

    pos = rng.uniform([0, 0], [height, width], size=(blobs, 2))
    speed = rng.uniform(*blob_speed, size=blobs)
    angle = rng.uniform(0, 2 * np.pi, size=blobs)
    vel = np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1)
    radius = rng.uniform(4.0, 9.0, size=blobs)
    color = rng.uniform(-0.5, 0.5, size=(blobs, 3))

    video = np.empty((frames, height, width, 3))
    for t in range(frames):
        oy, ox = pan * t
        v = (yy - oy) / height
        u = (xx - ox) / width
        frame = base + v[..., None] * tilt[0] + u[..., None] * tilt[1]
        pattern = texture * np.sin(kx * (xx - ox) + phase[0]) * np.cos(ky * (yy - oy) + phase[1])
        frame = frame + pattern[..., None]
        for b in range(blobs):
            cy, cx = pos[b] + vel[b] * t
            # wrap so blobs stay in view
            cy, cx = cy % height, cx % width
            dy = np.minimum(np.abs(yy - cy), height - np.abs(yy - cy))
            dx = np.minimum(np.abs(xx - cx), width - np.abs(xx - cx))
            g = np.exp(-(dy ** 2 + dx ** 2) / (2 * radius[b] ** 2))
            frame = frame + g[..., None] * color[b]
        video[t] = frame + noise * rng.standard_normal(frame.shape)
    return video


def procedural_anchors(count: int, seed: int = 0, **kwargs) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [procedural_anchor(rng, **kwargs) for _ in range(count)]
