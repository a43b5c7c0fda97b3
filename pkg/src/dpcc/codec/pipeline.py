"""Frame and sequence coding.

An I-frame transmits the quantized bottleneck features directly.  A P-frame
transmits ``quantize(F - F_hat)`` where ``F_hat`` is predicted from the
previously *decoded* frame, so the encoder runs the same prediction the
decoder will.  Both carry the octree-coded scale-3 coordinates and the
per-scale point counts that set the decoder's top-k.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from dpcc.checkpoint import checkpoint_hash, serialize
from dpcc.codec.bitstream import (
    FRAME_I,
    FRAME_P,
    FrameBitstream,
    pack_entropy_header,
    unpack_entropy_header,
)
from dpcc.codec.networks import CodecModel, PointCounts
from dpcc.entropy_model import build_cdf_tables, decode_features, encode_features, quantize
from dpcc.errors import CheckpointMismatchError, DecodeError, EmptyInputError
from dpcc.octree import octree_decode, octree_encode
from dpcc.sparse_tensor import SparseTensor, build_tensor
from dpcc.voxel import kdtree_partition

__all__ = [
    "EncodedFrame",
    "decode_blocks",
    "decode_frame",
    "decode_sequence",
    "encode_blocks",
    "encode_frame",
    "encode_inter",
    "encode_intra",
    "encode_sequence",
    "frame_tensor",
    "model_hash",
    "predict_features",
]

BOTTLENECK_SCALE = 3


@dataclass
class EncodedFrame:
    bitstream: FrameBitstream
    reconstruction: np.ndarray
    bottleneck_coords: np.ndarray
    symbols: np.ndarray

    @property
    def feature_bits(self) -> int:
        return 8 * len(self.bitstream.feature_stream)


def model_hash(model: CodecModel) -> int:
    return checkpoint_hash(serialize(model))


def frame_tensor(coords: np.ndarray, depth: int, dtype=torch.float32) -> SparseTensor:
    return build_tensor(coords, None, depth, allow_empty=False, dtype=dtype)


def predict_features(model: CodecModel, reference: np.ndarray, target_coords: np.ndarray) -> torch.Tensor:
    """Predicted bottleneck features on ``target_coords`` from a reference
    frame's coordinates."""
    ms = model.encoder(frame_tensor(reference, model.cfg.depth, model.dtype))
    return model.predictor(ms, target_coords).feats


def _reconstruct(model: CodecModel, c3: np.ndarray, feats: torch.Tensor, counts: PointCounts) -> np.ndarray:
    x3 = SparseTensor(c3, feats, BOTTLENECK_SCALE, model.cfg.depth)
    out, _ = model.decoder(x3, counts.per_stage())
    return out.coords


@torch.no_grad()
def encode_frame(current: np.ndarray, model: CodecModel, reference: Optional[np.ndarray] = None,
                 ckpt_hash: Optional[int] = None) -> EncodedFrame:
    """Code one frame; ``reference=None`` gives an I-frame."""
    cfg = model.cfg
    current = np.asarray(current, dtype=np.int64).reshape(-1, 3)
    if len(current) == 0:
        raise EmptyInputError("cannot encode an empty frame")
    if ckpt_hash is None:
        ckpt_hash = model_hash(model)
    intra = reference is None
    ms = model.encoder(frame_tensor(current, cfg.depth, model.dtype))
    c3, feats = ms.p3.coords, ms.p3.feats
    base = torch.zeros_like(feats) if intra else predict_features(model, reference, c3)
    q = quantize(feats - base)
    prior = model.prior(intra)
    table = build_cdf_tables(prior)
    symbols = q.to(torch.int64).numpy()
    counts = PointCounts.of(current)
    bits = FrameBitstream(
        frame_type=FRAME_I if intra else FRAME_P,
        depth=cfg.depth,
        bottleneck_channels=cfg.bottleneck,
        checkpoint_hash=ckpt_hash,
        n_full=counts.n_full,
        n_1ds=counts.n_1ds,
        n_2ds=counts.n_2ds,
        n_3ds=len(c3),
        coord_stream=octree_encode(c3, cfg.depth - BOTTLENECK_SCALE),
        entropy_header=pack_entropy_header(symbols.size, table.v_min, table.v_max),
        feature_stream=encode_features(symbols, table),
    )
    recon = _reconstruct(model, c3, base + q, counts)
    return EncodedFrame(bits, recon, c3, symbols)


def encode_intra(current: np.ndarray, model: CodecModel, ckpt_hash: Optional[int] = None) -> EncodedFrame:
    return encode_frame(current, model, None, ckpt_hash)


def encode_inter(current: np.ndarray, reference: np.ndarray, model: CodecModel,
                 ckpt_hash: Optional[int] = None) -> EncodedFrame:
    if reference is None or len(reference) == 0:
        raise EmptyInputError("P-frame coding needs a non-empty reference frame")
    return encode_frame(current, model, reference, ckpt_hash)


@torch.no_grad()
def decode_frame(bits: FrameBitstream, model: CodecModel, reference: Optional[np.ndarray] = None,
                 ckpt_hash: Optional[int] = None) -> np.ndarray:
    """Reconstruct the full-resolution coordinates of one frame."""
    cfg = model.cfg
    if ckpt_hash is None:
        ckpt_hash = model_hash(model)
    if bits.checkpoint_hash != ckpt_hash:
        raise CheckpointMismatchError(
            f"stream was coded with checkpoint {bits.checkpoint_hash:016x}, model is {ckpt_hash:016x}"
        )
    if bits.depth != cfg.depth or bits.bottleneck_channels != cfg.bottleneck:
        raise DecodeError("stream depth or channel count does not match the model")
    intra = bits.frame_type == FRAME_I
    if not intra and (reference is None or len(reference) == 0):
        raise DecodeError("P-frame needs the previously decoded frame")
    c3 = octree_decode(bits.coord_stream, cfg.depth - BOTTLENECK_SCALE)
    if len(c3) != bits.n_3ds:
        raise DecodeError("coordinate substream disagrees with the header point count")
    count, v_min, v_max = unpack_entropy_header(bits.entropy_header, cfg.bottleneck)
    if count != len(c3) * cfg.bottleneck:
        raise DecodeError("entropy header element count mismatch")
    table = build_cdf_tables(model.prior(intra), bounds=(v_min, v_max))
    symbols = decode_features(bits.feature_stream, table, len(c3))
    residual = torch.from_numpy(symbols).to(model.dtype)
    base = torch.zeros_like(residual) if intra else predict_features(model, reference, c3)
    counts = PointCounts(bits.n_full, bits.n_1ds, bits.n_2ds)
    return _reconstruct(model, c3, base + residual, counts)


def encode_sequence(frames: Sequence[np.ndarray], model: CodecModel, gop: int = 8) -> List[EncodedFrame]:
    """I P P ... coding; every P-frame references the previous reconstruction."""
    if gop < 1:
        raise ValueError("gop must be >= 1")
    h = model_hash(model)
    out, reference = [], None
    for i, frame in enumerate(frames):
        enc = encode_frame(frame, model, None if i % gop == 0 else reference, h)
        out.append(enc)
        reference = enc.reconstruction
    return out


def decode_sequence(frames: Sequence[FrameBitstream], model: CodecModel,
                    ckpt_hash: Optional[int] = None) -> List[np.ndarray]:
    h = model_hash(model) if ckpt_hash is None else ckpt_hash
    out, reference = [], None
    for bits in frames:
        reference = decode_frame(bits, model, reference, h)
        out.append(reference)
    return out


PLANE_BYTES = 5  # u8 axis + f32 threshold per internal kd-tree node


def encode_blocks(current: np.ndarray, model: CodecModel, num_blocks: int,
                  reference: Optional[np.ndarray] = None):
    """Cut ``current`` with a kd-tree and code every block independently.

    The reference frame is cut with the same planes; a block whose reference
    part is empty falls back to intra coding.  Returns ``(frames, partition)``
    with one entry per block (``None`` for empty blocks).  Sending the planes
    costs ``PLANE_BYTES * (num_blocks - 1)`` bytes of side information.
    """
    blocks, part = kdtree_partition(current, num_blocks)
    refs = part.apply(reference) if reference is not None else [None] * num_blocks
    h = model_hash(model)
    out = []
    for block, ref in zip(blocks, refs):
        if len(block) == 0:
            out.append(None)
            continue
        out.append(encode_frame(block, model, ref if ref is not None and len(ref) else None, h))
    return out, part


def decode_blocks(frames: Sequence[Optional[FrameBitstream]], model: CodecModel, partition,
                  reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Inverse of :func:`encode_blocks` given the transmitted partition."""
    h = model_hash(model)
    refs = partition.apply(reference) if reference is not None else [None] * len(frames)
    parts = [
        decode_frame(bits, model, ref if bits.frame_type == FRAME_P else None, h)
        for bits, ref in zip(frames, refs)
        if bits is not None
    ]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3), np.int64)
