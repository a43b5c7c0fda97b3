"""Rate-distortion training.

The loss is ``J = R + lam * D``.  ``R`` is the estimated rate of the noisy
residual in bits per input point.  ``D`` sums the occupancy BCE of the
decoder at scales 2, 1 and 0.  The predictor sees the *original* previous
frame (open loop); coding runs closed loop on decoded frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from dpcc.codec.networks import CodecModel, occupancy_labels
from dpcc.codec.pipeline import BOTTLENECK_SCALE, frame_tensor
from dpcc.config import Config
from dpcc.nn import Adam, bce_with_logits
from dpcc.sparse_tensor import SparseTensor, downsample_coords
from dpcc.voxel import kdtree_partition

__all__ = ["FramePair", "LossTerms", "bce_target_occupancy", "make_pairs", "train", "train_step"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossTerms:
    rate: float  # bits per input point of the inter residual
    distortion: float
    bce: Tuple[float, float, float]  # scales 2, 1, 0
    lam: float
    loss: float
    rate_intra: float


@dataclass(frozen=True)
class FramePair:
    previous: np.ndarray
    current: np.ndarray


def bce_target_occupancy(pred_coords: np.ndarray, truth_coords: np.ndarray) -> np.ndarray:
    return occupancy_labels(pred_coords, truth_coords)


def make_pairs(frames: Sequence[np.ndarray], blocks: int = 1) -> List[FramePair]:
    """Consecutive frame pairs; with ``blocks > 1`` both frames of a pair are
    cut by the kd-tree planes of the current frame."""
    pairs = []
    for prev, cur in zip(frames[:-1], frames[1:]):
        if blocks == 1:
            pairs.append(FramePair(prev, cur))
            continue
        cur_blocks, part = kdtree_partition(cur, blocks)
        for pb, cb in zip(part.apply(prev), cur_blocks):
            if len(pb) and len(cb):
                pairs.append(FramePair(pb, cb))
    return pairs


def train_step(model: CodecModel, optimizer: Adam, pair: FramePair, lam: float,
               generator: Optional[torch.Generator] = None) -> LossTerms:
    """One forward/backward pass and Adam update on a frame pair."""
    cfg = model.cfg
    model.train()
    prev = frame_tensor(pair.previous, cfg.depth, model.dtype)
    cur = frame_tensor(pair.current, cfg.depth, model.dtype)
    ms_prev = model.encoder(prev)
    ms_cur = model.encoder(cur)
    feats = ms_cur.p3.feats
    predicted = model.predictor(ms_prev, ms_cur.p3.coords).feats
    residual = feats - predicted

    noisy, likelihood = model.prior_inter.noisy_likelihood(residual, generator)
    n_points = len(cur)
    rate = -torch.log2(likelihood).sum() / n_points

    x3 = SparseTensor(ms_cur.p3.coords, predicted + noisy, BOTTLENECK_SCALE, cfg.depth)
    truths = [downsample_coords(cur.coords, 2), downsample_coords(cur.coords, 1), cur.coords]
    counts = [len(t) for t in truths]
    _, stages = model.decoder(x3, counts, truths)
    bce_terms = [
        bce_with_logits(logits, torch.from_numpy(labels).to(logits.dtype))
        for _, logits, labels in stages
    ]
    distortion = sum(w * t for w, t in zip(cfg.bce_weights, bce_terms))
    loss = rate + lam * distortion

    # the intra prior only follows the feature distribution; it does not
    # shape the encoder
    _, lik_intra = model.prior_intra.noisy_likelihood(feats.detach(), generator)
    rate_intra = -torch.log2(lik_intra).sum() / n_points

    (loss + rate_intra).backward()
    optimizer.step()
    return LossTerms(
        rate=rate.item(),
        distortion=distortion.item(),
        bce=tuple(t.item() for t in bce_terms),
        lam=float(lam),
        loss=loss.item(),
        rate_intra=rate_intra.item(),
    )


def train(model: CodecModel, pairs: Sequence[FramePair], steps: int, lam: Optional[float] = None,
          seed: Optional[int] = None,
          callback: Optional[Callable[[int, LossTerms], None]] = None) -> List[LossTerms]:
    """Run ``steps`` Adam steps over randomly drawn pairs."""
    cfg: Config = model.cfg
    lam = cfg.lam if lam is None else lam
    seed = cfg.seed if seed is None else seed
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    history = []
    for step in range(steps):
        terms = train_step(model, opt, pairs[int(rng.integers(len(pairs)))], lam, gen)
        history.append(terms)
        if callback is not None:
            callback(step, terms)
        if step % 100 == 0:
            log.info("step %d J=%.4f R=%.4f D=%.4f", step, terms.loss, terms.rate, terms.distortion)
    model.eval()
    return history
