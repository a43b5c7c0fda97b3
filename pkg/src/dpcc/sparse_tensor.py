"""Sparse voxel tensors and the coordinate-indexed convolutions built on them.

Coordinates live in numpy ``int64`` arrays of shape ``(N, 3)`` and are kept in
canonical (lexicographic ``x, y, z``) order.  Features are torch tensors so the
same code serves inference and training; coordinates never carry gradients.

Every convolution goes through a kernel map: for each kernel offset, the list
of ``(input_row, output_row)`` pairs it connects.  The compute path turns the
map into a dense ``(M, K)`` neighbour table and does a single gather + matmul,
which is deterministic on CPU.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from dpcc.errors import CoordinateRangeError, EmptyInputError, ShapeError

__all__ = [
    "ConvSpec",
    "KernelMap",
    "SparseTensor",
    "build_tensor",
    "cat_features",
    "coord_keys",
    "decode_keys",
    "downsample_coords",
    "kernel_map",
    "kernel_offsets",
    "prune",
    "select_rows",
    "sparse_conv",
    "topk_rows",
    "transpose_conv_up",
    "unique_coords",
]

_KEY_BITS = 21
_KEY_BIAS = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def coord_keys(coords: np.ndarray) -> np.ndarray:
    """Pack integer triples into int64 keys whose order is lexicographic."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3) + _KEY_BIAS
    return (c[:, 0] << (2 * _KEY_BITS)) | (c[:, 1] << _KEY_BITS) | c[:, 2]


def decode_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _KEY_BITS)) & _KEY_MASK
    out[:, 1] = (keys >> _KEY_BITS) & _KEY_MASK
    out[:, 2] = keys & _KEY_MASK
    return out - _KEY_BIAS


def _keyable(coords: np.ndarray) -> np.ndarray:
    return np.all((coords >= -_KEY_BIAS) & (coords < _KEY_BIAS), axis=1)


def unique_coords(coords: np.ndarray) -> np.ndarray:
    """Deduplicate and sort a coordinate array into canonical order."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return decode_keys(np.unique(coord_keys(coords)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.int64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Occupied voxel coordinates with one feature row per coordinate.

    ``scale`` counts how many stride-2 downsamplings produced the grid, so the
    valid range on every axis is ``[0, 2**(depth - scale))``.
    """

    coords: np.ndarray
    feats: torch.Tensor
    scale: int = 0
    depth: int = 10

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.feats.shape[1])

    @functools.cached_property
    def keys(self) -> np.ndarray:
        return coord_keys(self.coords)

    def with_feats(self, feats: torch.Tensor) -> "SparseTensor":
        if feats.shape[0] != len(self):
            raise ShapeError(f"expected {len(self)} feature rows, got {feats.shape[0]}")
        out = SparseTensor(self.coords, feats, self.scale, self.depth)
        if "keys" in self.__dict__:
            out.__dict__["keys"] = self.keys
        return out

    def __repr__(self) -> str:
        return (
            f"SparseTensor(n={len(self)}, channels={self.channels}, "
            f"scale={self.scale}, depth={self.depth})"
        )


def _canonical(coords, feats, scale, depth) -> SparseTensor:
    return SparseTensor(_frozen(coords), feats, scale, depth)


def build_tensor(
    points,
    feats=None,
    depth: int = 10,
    scale: int = 0,
    *,
    allow_empty: bool = True,
    dtype: torch.dtype = torch.float32,
) -> SparseTensor:
    """Create a tensor from raw points, merging duplicates by averaging.

    With ``feats=None`` every occupied voxel gets the single feature ``1``
    (geometry-only input).
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 3)
    n = pts.shape[0]
    if feats is None:
        feats = torch.ones((n, 1), dtype=dtype)
    elif not isinstance(feats, torch.Tensor):
        feats = torch.as_tensor(np.asarray(feats), dtype=dtype)
    if feats.dim() != 2 or feats.shape[0] != n:
        raise ShapeError(f"{n} points but features of shape {tuple(feats.shape)}")
    if n == 0:
        if not allow_empty:
            raise EmptyInputError("empty point set")
        return _canonical(np.zeros((0, 3), np.int64), feats, scale, depth)

    side = 1 << (depth - scale)
    if pts.min() < 0 or pts.max() >= side:
        raise CoordinateRangeError(
            f"coordinates must lie in [0, {side}) at depth {depth}, scale {scale}"
        )
    keys = coord_keys(pts)
    uniq, inverse = np.unique(keys, return_inverse=True)
    if uniq.shape[0] == n:
        order = np.argsort(keys, kind="stable")
        feats = feats[torch.from_numpy(order)]
    else:
        idx = torch.from_numpy(inverse.reshape(-1).astype(np.int64))
        summed = torch.zeros((uniq.shape[0], feats.shape[1]), dtype=feats.dtype)
        summed = summed.index_add(0, idx, feats)
        counts = torch.bincount(idx, minlength=uniq.shape[0]).to(feats.dtype)
        feats = summed / counts[:, None]
    return _canonical(decode_keys(uniq), feats, scale, depth)


def downsample_coords(coords: np.ndarray, times: int = 1) -> np.ndarray:
    """``unique(floor(c / 2**times))`` in canonical order."""
    if times < 1:
        raise ValueError("times must be >= 1")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return unique_coords(coords >> times)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offsets of a cubic kernel, lexicographic. Odd sizes are centred,
    ``k = 2`` covers ``{0, 1}^3``."""
    if kernel_size < 1:
        raise ValueError("kernel_size must be positive")
    if kernel_size % 2:
        r = np.arange(-(kernel_size // 2), kernel_size // 2 + 1)
    else:
        r = np.arange(-(kernel_size // 2 - 1), kernel_size // 2 + 1)
    g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.int64)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel_size < 1:
            raise ValueError("channels and kernel size must be positive")

    @property
    def offsets(self) -> np.ndarray:
        return kernel_offsets(self.kernel_size)

    @property
    def volume(self) -> int:
        return self.kernel_size**3

    @property
    def weight_shape(self) -> tuple:
        return (self.volume, self.in_channels, self.out_channels)


@dataclass(frozen=True)
class KernelMap:
    """Per-offset ``(input_row, output_row)`` index pairs."""

    offsets: np.ndarray
    in_rows: tuple
    out_rows: tuple
    num_in: int
    num_out: int

    def pairs(self, k: int) -> list:
        return list(zip(self.in_rows[k].tolist(), self.out_rows[k].tolist()))

    def table(self) -> np.ndarray:
        """Dense ``(num_out, K)`` neighbour table; ``num_in`` marks "no input"."""
        tab = np.full((self.num_out, len(self.offsets)), self.num_in, dtype=np.int64)
        for k, (i, j) in enumerate(zip(self.in_rows, self.out_rows)):
            tab[j, k] = i
        return tab


def kernel_map(in_coords: np.ndarray, out_coords: np.ndarray, spec: ConvSpec) -> KernelMap:
    """Link input and output coordinates through every kernel offset.

    Regular conv: ``in = stride * out + o``.  Transposed conv:
    ``stride * in + o = out``.  ``in_coords`` must be canonical.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64).reshape(-1, 3)
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
    in_keys = coord_keys(in_coords)
    s = spec.stride
    ins, outs = [], []
    for o in spec.offsets:
        if spec.transposed:
            q = out_coords - o
            ok = np.all(q % s == 0, axis=1)
            q = q // s
        else:
            q = out_coords * s + o
            ok = np.ones(q.shape[0], dtype=bool)
        ok &= _keyable(q)
        qk = coord_keys(np.where(ok[:, None], q, 0))
        pos = np.searchsorted(in_keys, qk)
        pos = np.minimum(pos, max(len(in_keys) - 1, 0))
        if len(in_keys):
            hit = ok & (in_keys[pos] == qk)
        else:
            hit = np.zeros_like(ok)
        j = np.nonzero(hit)[0]
        ins.append(pos[j])
        outs.append(j)
    return KernelMap(spec.offsets, tuple(ins), tuple(outs), len(in_coords), len(out_coords))


def _output_coords(x: SparseTensor, spec: ConvSpec, target_coords) -> tuple:
    if target_coords is not None:
        return unique_coords(target_coords), x.scale + (spec.stride == 2)
    if spec.stride == 1:
        return x.coords, x.scale
    return downsample_coords(x.coords, 1), x.scale + 1


def _check_weight(x: SparseTensor, spec: ConvSpec, weight: torch.Tensor):
    if x.channels != spec.in_channels:
        raise ShapeError(f"input has {x.channels} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")


def sparse_conv(
    x: SparseTensor,
    spec: ConvSpec,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    target_coords: Optional[np.ndarray] = None,
) -> SparseTensor:
    """Generalized sparse convolution.

    Output rows are evaluated only at the output coordinates: ``target_coords``
    when given (convolution on target coordinates), otherwise the input
    coordinates (stride 1) or their parents (stride 2).  Rows with no
    contributing input receive ``bias`` only.
    """
    if spec.transposed:
        raise ValueError("use transpose_conv_up for transposed kernels")
    _check_weight(x, spec, weight)
    out_coords, out_scale = _output_coords(x, spec, target_coords)
    m = out_coords.shape[0]
    kmap = kernel_map(x.coords, out_coords, spec)
    table = torch.from_numpy(kmap.table())
    padded = torch.cat([x.feats, x.feats.new_zeros((1, spec.in_channels))], dim=0)
    cols = padded[table].reshape(m, spec.volume * spec.in_channels)
    out = cols @ weight.reshape(spec.volume * spec.in_channels, spec.out_channels)
    if bias is not None:
        out = out + bias
    return _canonical(out_coords, out, out_scale, x.depth)


def transpose_conv_up(
    x: SparseTensor,
    spec: ConvSpec,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> SparseTensor:
    """Generative k=2, s=2 transposed convolution: every occupied voxel spawns
    all eight children."""
    if not (spec.transposed and spec.kernel_size == 2 and spec.stride == 2):
        raise ValueError("transpose_conv_up needs a k=2, s=2 transposed spec")
    if x.scale < 1:
        raise ValueError("cannot upsample a scale-0 tensor")
    _check_weight(x, spec, weight)
    n, cin, cout = len(x), spec.in_channels, spec.out_channels
    children = (x.coords[:, None, :] * 2 + spec.offsets[None, :, :]).reshape(-1, 3)
    order = np.argsort(coord_keys(children), kind="stable")
    # (N, Cin) @ (Cin, 8*Cout): one product per parent and child slot
    w = weight.permute(1, 0, 2).reshape(cin, 8 * cout)
    y = (x.feats @ w).reshape(n * 8, cout)
    out = y[torch.from_numpy(order)]
    if bias is not None:
        out = out + bias
    return _canonical(children[order], out, x.scale - 1, x.depth)


def topk_rows(logits, k: int) -> np.ndarray:
    """Row indices of the ``k`` largest logits, ties to the lower index,
    returned in ascending (canonical) order."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if k <= 0:
        raise ValueError("k must be positive")
    if k >= logits.shape[0]:
        return np.arange(logits.shape[0])
    order = np.lexsort((np.arange(logits.shape[0]), -logits))
    return np.sort(order[:k])


def select_rows(x: SparseTensor, rows: np.ndarray) -> SparseTensor:
    rows = np.asarray(rows, dtype=np.int64)
    return _canonical(x.coords[rows], x.feats[torch.from_numpy(rows)], x.scale, x.depth)


def prune(x: SparseTensor, occupancy_logits, k: int) -> SparseTensor:
    """Keep the ``min(k, len(x))`` rows with the largest occupancy logits."""
    n_logits = occupancy_logits.shape[0] if hasattr(occupancy_logits, "shape") else len(occupancy_logits)
    if n_logits != len(x):
        raise ShapeError(f"{n_logits} logits for {len(x)} coordinates")
    return select_rows(x, topk_rows(occupancy_logits, k))


def cat_features(tensors: Sequence[SparseTensor]) -> SparseTensor:
    """Channel-wise concatenation of tensors sharing one coordinate set."""
    first = tensors[0]
    for t in tensors[1:]:
        if len(t) != len(first) or not np.array_equal(t.coords, first.coords):
            raise ShapeError("cannot concatenate tensors with different coordinates")
    return first.with_feats(torch.cat([t.feats for t in tensors], dim=1))
