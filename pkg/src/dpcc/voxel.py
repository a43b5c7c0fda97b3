"""Voxelization and kd-tree block partitioning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from dpcc.sparse_tensor import unique_coords

__all__ = ["Partition", "apply_same_partition", "kdtree_partition", "voxelize"]


def voxelize(points, depth: int, return_transform: bool = False):
    """Map real points onto a ``2**depth`` grid.

    Points are shifted to a zero min-corner and scaled uniformly so the
    largest extent becomes ``2**depth - 1``, then rounded and deduplicated.
    A degenerate cloud (all points equal) collapses to the origin voxel.
    """
    if not 1 <= depth <= 16:
        raise ValueError("depth must be in [1, 16]")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    top = (1 << depth) - 1
    shift = np.zeros(3)
    scale = 1.0
    if pts.size:
        shift = pts.min(axis=0)
        extent = float((pts.max(axis=0) - shift).max())
        scale = top / extent if extent > 0 else 1.0
    coords = unique_coords(np.round((pts - shift) * scale).astype(np.int64))
    if return_transform:
        return coords, shift, scale
    return coords


@dataclass(frozen=True)
class Partition:
    """Split planes of a complete binary kd-tree in heap order.

    Node ``i`` sends points with ``coord[axis] < threshold`` to child
    ``2i + 1`` and the rest to ``2i + 2``.
    """

    axes: Tuple[int, ...]
    thresholds: Tuple[float, ...]
    num_blocks: int

    def assign(self, cloud: np.ndarray) -> np.ndarray:
        """Leaf (block) index of every point."""
        cloud = np.asarray(cloud).reshape(-1, 3)
        node = np.zeros(cloud.shape[0], dtype=np.int64)
        internal = self.num_blocks - 1
        while internal and np.any(node < internal):
            axis = np.asarray(self.axes)[node]
            thr = np.asarray(self.thresholds)[node]
            go_left = cloud[np.arange(cloud.shape[0]), axis] < thr
            node = np.where(go_left, 2 * node + 1, 2 * node + 2)
        return node - internal

    def apply(self, cloud: np.ndarray) -> List[np.ndarray]:
        cloud = np.asarray(cloud).reshape(-1, 3)
        leaf = self.assign(cloud)
        return [cloud[leaf == b] for b in range(self.num_blocks)]


def kdtree_partition(cloud: np.ndarray, num_blocks: int):
    """Recursive median split along the widest axis.

    Returns ``(blocks, partition)``; ``partition.apply`` cuts another cloud
    with exactly the same planes.
    """
    if num_blocks < 1 or num_blocks & (num_blocks - 1):
        raise ValueError("num_blocks must be a power of two")
    cloud = np.asarray(cloud).reshape(-1, 3)
    internal = num_blocks - 1
    axes = [0] * internal
    thresholds = [np.inf] * internal
    members = {0: np.arange(cloud.shape[0])}
    for node in range(internal):
        idx = members.pop(node)
        pts = cloud[idx]
        if pts.shape[0] >= 2:
            extent = pts.max(axis=0) - pts.min(axis=0)
            axis = int(np.argmax(extent))
            vals = np.sort(pts[:, axis])
            half = vals.shape[0] // 2
            axes[node] = axis
            thresholds[node] = (float(vals[half - 1]) + float(vals[half])) / 2.0
        left = cloud[idx, axes[node]] < thresholds[node]
        members[2 * node + 1] = idx[left]
        members[2 * node + 2] = idx[~left]
    part = Partition(tuple(axes), tuple(thresholds), num_blocks)
    return part.apply(cloud), part


def apply_same_partition(other: np.ndarray, partition: Partition) -> List[np.ndarray]:
    return partition.apply(other)
