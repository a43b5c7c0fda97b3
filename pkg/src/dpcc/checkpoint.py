"""Named-parameter checkpoint archive.

Layout (little-endian)::

    b"DPCK" | u32 manifest_len | manifest (JSON: config + parameter list)
    per parameter: u16 name_len | name | u8 ndim | u32 * ndim shape | f32 data

The checkpoint hash is the first eight bytes of the SHA-256 of the archive,
so it covers both the hyperparameters and every weight.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from dpcc.config import Config
from dpcc.errors import DecodeError

__all__ = ["checkpoint_hash", "load_checkpoint", "read_checkpoint", "save_checkpoint", "serialize"]

MAGIC = b"DPCK"


def serialize(model, cfg: Config = None) -> bytes:
    cfg = cfg or model.cfg
    state = model.state_dict()
    manifest = {
        "format": 1,
        "config": cfg.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    body = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(body)))
    buf.write(body)
    for name, value in state.items():
        raw = name.encode()
        arr = value.detach().cpu().numpy().astype("<f4", copy=False)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def checkpoint_hash(blob: bytes) -> int:
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def save_checkpoint(model, path, cfg: Config = None) -> int:
    blob = serialize(model, cfg)
    Path(path).write_bytes(blob)
    return checkpoint_hash(blob)


def read_checkpoint(blob: bytes):
    """Parse an archive into ``(config, {name: float32 array})``."""
    if blob[:4] != MAGIC:
        raise DecodeError("not a dpcc checkpoint")
    (mlen,) = struct.unpack_from("<I", blob, 4)
    manifest = json.loads(blob[8 : 8 + mlen])
    pos = 8 + mlen
    params = {}
    try:
        for _ in manifest["params"]:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            params[name] = arr
    except (struct.error, ValueError) as exc:
        raise DecodeError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise DecodeError("trailing bytes in checkpoint")
    return Config.from_dict(manifest["config"]), params


def load_checkpoint(path):
    """Rebuild a :class:`~dpcc.codec.networks.CodecModel` from disk.

    Returns ``(model, config, hash)``.
    """
    from dpcc.codec.networks import CodecModel

    blob = Path(path).read_bytes()
    cfg, params = read_checkpoint(blob)
    model = CodecModel(cfg)
    state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model, cfg, checkpoint_hash(blob)
