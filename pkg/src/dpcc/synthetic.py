"""Small synthetic dynamic point clouds for tests and demos."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from dpcc.sparse_tensor import unique_coords

__all__ = ["rigid_shape", "translating_sequence", "translating_sequences"]


def rigid_shape(depth: int = 6, size: float = 0.2) -> np.ndarray:
    """Surface voxels of an ellipsoid shell fused with a box shell, centred on
    the origin.  ``size`` scales the object relative to the grid side."""
    side = 1 << depth
    r = size * side
    radii = np.array([1.0, 0.75, 0.6]) * r
    span = int(np.ceil(1.6 * r)) + 2
    g = np.arange(-span, span + 1)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)

    # ellipsoid shell one voxel thick
    q = np.sqrt(((pts / radii) ** 2).sum(axis=1)) * r
    shell = np.abs(q - r) <= 0.5 * np.sqrt(2)

    # hollow bar sticking out along +x
    lo = np.array([0.3 * r, -0.25 * r, -0.25 * r])
    hi = np.array([1.5 * r, 0.25 * r, 0.25 * r])
    inside = np.all((pts >= lo) & (pts <= hi), axis=1)
    inner = np.all((pts >= lo + 1) & (pts <= hi - 1), axis=1)
    bar = inside & ~inner & (q > r)
    return unique_coords(pts[shell | bar])


def translating_sequence(num_frames: int, depth: int = 6, step: Sequence[int] = (1, 2),
                         seed: int = 0, size: float = 0.2) -> List[np.ndarray]:
    """Frames of :func:`rigid_shape` moving by ``step`` voxels per frame
    along a randomly chosen axis, bouncing off the grid walls."""
    rng = np.random.default_rng(seed)
    shape = rigid_shape(depth, size)
    side = 1 << depth
    lo, hi = -shape.min(axis=0), side - 1 - shape.max(axis=0)
    if np.any(hi < lo):
        raise ValueError("shape does not fit the grid")
    pos = (lo + hi) // 2 + rng.integers(-2, 3, size=3)
    pos = np.clip(pos, lo, hi)
    frames = []
    direction = rng.choice([-1, 1], size=3)
    for _ in range(num_frames):
        frames.append(shape + pos)
        axis = int(rng.integers(3))
        amount = int(rng.integers(min(step), max(step) + 1))
        nxt = pos[axis] + direction[axis] * amount
        if nxt < lo[axis] or nxt > hi[axis]:
            direction[axis] *= -1
            nxt = pos[axis] + direction[axis] * amount
        pos = pos.copy()
        pos[axis] = int(np.clip(nxt, lo[axis], hi[axis]))
    return frames


def translating_sequences(count: int = 16, num_frames: int = 9, depth: int = 6,
                          seed: int = 100, **kwargs) -> List[List[np.ndarray]]:
    """``count`` independent sequences with seeds ``seed, seed + 1, ...``.

    A single short sequence gives too few distinct frame pairs to train on;
    the model memorizes its positions and P-frames generalize badly.
    """
    return [translating_sequence(num_frames, depth, seed=seed + i, **kwargs) for i in range(count)]
