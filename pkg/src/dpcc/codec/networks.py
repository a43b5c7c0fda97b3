"""Encoder, decoder and inter-frame predictor networks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from dpcc.config import Config
from dpcc.entropy_model import FactorizedPrior
from dpcc.errors import EmptyInputError, ShapeError
from dpcc.nn import IRBlock, OccupancyHead, ReLU, SparseConv, SparseSequential, TransposeConv, relu
from dpcc.sparse_tensor import (
    SparseTensor,
    cat_features,
    coord_keys,
    downsample_coords,
    select_rows,
    topk_rows,
)

__all__ = [
    "Decoder",
    "DecoderStage",
    "Encoder",
    "MultiscaleFeatures",
    "PointCounts",
    "Predictor",
    "CodecModel",
    "occupancy_labels",
]


class MultiscaleFeatures(NamedTuple):
    """Encoder outputs at scales 0..3 for one frame."""

    p0: SparseTensor
    p1: SparseTensor
    p2: SparseTensor
    p3: SparseTensor


@dataclass(frozen=True)
class PointCounts:
    """Ground-truth point counts that drive the decoder's top-k pruning."""

    n_full: int
    n_1ds: int
    n_2ds: int

    @classmethod
    def of(cls, coords: np.ndarray) -> "PointCounts":
        return cls(
            len(coords),
            len(downsample_coords(coords, 1)),
            len(downsample_coords(coords, 2)),
        )

    def per_stage(self) -> tuple:
        """Counts in decoder order (scale 2, 1, 0)."""
        return (self.n_2ds, self.n_1ds, self.n_full)


def _irb_stack(channels: int, blocks: int) -> List[nn.Module]:
    return [IRBlock(channels) for _ in range(blocks)]


class Encoder(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        c0, c1, c2 = cfg.enc_channels
        n = cfg.irb_blocks
        self.stem = SparseSequential(SparseConv(1, c0, 3), ReLU(), SparseConv(c0, c0, 3), ReLU())
        self.down1 = SparseSequential(SparseConv(c0, c1, 2, 2), ReLU(), *_irb_stack(c1, n))
        self.down2 = SparseSequential(SparseConv(c1, c2, 2, 2), ReLU(), *_irb_stack(c2, n))
        self.down3 = SparseSequential(
            SparseConv(c2, c2, 2, 2), ReLU(), *_irb_stack(c2, n), SparseConv(c2, cfg.bottleneck, 3)
        )

    def forward(self, x: SparseTensor) -> MultiscaleFeatures:
        if len(x) == 0:
            raise EmptyInputError("cannot encode an empty frame")
        if x.scale != 0 or x.channels != 1:
            raise ShapeError("encoder expects a geometry-only scale-0 tensor")
        p0 = self.stem(x)
        p1 = self.down1(p0)
        p2 = self.down2(p1)
        p3 = self.down3(p2)
        return MultiscaleFeatures(p0, p1, p2, p3)


class Predictor(nn.Module):
    """Maps the previous frame's multiscale features onto the current
    frame's scale-3 coordinates.

    The previous frame's scale-0 features are downscaled three times; after
    every downscale the matching encoder scale is concatenated in.  A final
    3x3x3 convolution evaluated on the target coordinates produces the
    predicted bottleneck features.
    """

    def __init__(self, cfg: Config):
        super().__init__()
        c0, c1, c2 = cfg.enc_channels
        h, n = cfg.predictor_hidden, cfg.irb_blocks
        self.down = nn.ModuleList([SparseConv(c0, h, 2, 2), SparseConv(h, h, 2, 2), SparseConv(h, h, 2, 2)])
        self.fuse = nn.ModuleList(
            [SparseConv(h + c1, h, 3), SparseConv(h + c2, h, 3), SparseConv(h + cfg.bottleneck, h, 3)]
        )
        self.refine = nn.ModuleList([SparseSequential(*_irb_stack(h, n)) for _ in range(3)])
        self.target = SparseConv(h, cfg.bottleneck, 3)

    def forward(self, prev: MultiscaleFeatures, target_coords: np.ndarray) -> SparseTensor:
        x = prev.p0
        for down, fuse, refine, skip in zip(self.down, self.fuse, self.refine, prev[1:]):
            x = relu(down(x))
            x = relu(fuse(cat_features([x, skip])))
            x = refine(x)
        if x.scale != 3:
            raise ShapeError(f"predictor reached scale {x.scale}, expected 3")
        return self.target(x, target_coords=target_coords)


class DecoderStage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, blocks: int):
        super().__init__()
        self.up = TransposeConv(in_channels, out_channels)
        self.refine = SparseSequential(ReLU(), *_irb_stack(out_channels, blocks))
        self.head = OccupancyHead(out_channels)

    def forward(self, x: SparseTensor):
        y = self.refine(self.up(x))
        return y, self.head(y)


def occupancy_labels(pred_coords: np.ndarray, truth_coords: np.ndarray) -> np.ndarray:
    """1 where a candidate voxel is present in the ground truth, else 0."""
    if len(pred_coords) == 0:
        return np.zeros(0, dtype=np.float64)
    return np.isin(coord_keys(pred_coords), coord_keys(truth_coords)).astype(np.float64)


class Decoder(nn.Module):
    """Three rounds of upsample -> refine -> occupancy logits -> top-k prune."""

    def __init__(self, cfg: Config):
        super().__init__()
        d2, d1, d0 = cfg.dec_channels
        n = cfg.irb_blocks
        self.stages = nn.ModuleList([
            DecoderStage(cfg.bottleneck, d2, n),
            DecoderStage(d2, d1, n),
            DecoderStage(d1, d0, n),
        ])

    def forward(self, x: SparseTensor, counts: Sequence[int],
                truths: Optional[Sequence[np.ndarray]] = None):
        """Returns the pruned scale-0 tensor and, per stage, the candidate
        tensor, its logits and (when ``truths`` is given) its labels.

        With ``truths`` the kept set is the top-k union the true voxels, so
        later stages always see the correct structure while training.
        """
        stages = []
        for i, stage in enumerate(self.stages):
            cand, logits = stage(x)
            keep = topk_rows(logits, int(counts[i]))
            labels = None
            if truths is not None:
                labels = occupancy_labels(cand.coords, truths[i])
                keep = np.union1d(keep, np.nonzero(labels)[0])
            x = select_rows(cand, keep)
            stages.append((cand, logits, labels))
        return x, stages


class CodecModel(nn.Module):
    """All trainable parts of the codec. One encoder instance serves both the
    current and the reference frame."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.predictor = Predictor(cfg)
        self.decoder = Decoder(cfg)
        self.prior_inter = FactorizedPrior(cfg.bottleneck, cfg.prior_filters, cfg.prior_init_scale)
        self.prior_intra = FactorizedPrior(cfg.bottleneck, cfg.prior_filters, cfg.prior_init_scale)

    def prior(self, intra: bool) -> FactorizedPrior:
        return self.prior_intra if intra else self.prior_inter

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
