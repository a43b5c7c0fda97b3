"""Minimal PLY reader/writer for point coordinates.

Reads ASCII and binary (either endianness) files, returns the ``x, y, z``
vertex properties and ignores everything else (colours, normals, faces).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dpcc.errors import PlyFormatError

__all__ = ["read_ply", "write_ply"]

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyFormatError("missing 'ply' magic line")
    fmt = None
    elements = []  # (name, count, [(prop_name, type) ...])
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("header not terminated by end_header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyFormatError("property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], "list"))
            else:
                if tokens[1] not in _TYPES:
                    raise PlyFormatError(f"unknown property type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _TYPES[tokens[1]]))
        else:
            raise PlyFormatError(f"unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyFormatError(f"unsupported format {fmt!r}")
    return fmt, elements


def read_ply(path) -> np.ndarray:
    """Return the vertex coordinates as a float64 ``(N, 3)`` array."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        for name, count, props in elements:
            if name == "vertex":
                break
            if fmt != "ascii":
                raise PlyFormatError("binary elements before 'vertex' are not supported")
            for _ in range(count):
                fh.readline()
        else:
            raise PlyFormatError("no vertex element")
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise PlyFormatError("vertex element lacks x, y, z")
        if any(t == "list" for _, t in props):
            raise PlyFormatError("list properties on vertices are not supported")
        if fmt == "ascii":
            rows = [fh.readline() for _ in range(count)]
            try:
                data = np.array([r.split() for r in rows], dtype=np.float64).reshape(count, len(props))
            except ValueError as exc:
                raise PlyFormatError(f"malformed vertex rows: {exc}") from exc
            cols = [names.index(a) for a in "xyz"]
            return data[:, cols]
        order = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, order + t) for n, t in props])
        raw = fh.read(dtype.itemsize * count)
        if len(raw) < dtype.itemsize * count:
            raise PlyFormatError("vertex data is truncated")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        return np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1)


def write_ply(path, points, binary: bool = False):
    """Write ``(N, 3)`` points; integer arrays keep an integer property type."""
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must have shape (N, 3)")
    if np.issubdtype(pts.dtype, np.integer):
        ptype, dt = "int", "i4"
    elif pts.dtype == np.float32:
        ptype, dt = "float", "f4"
    else:
        ptype, dt = "double", "f8"
        pts = pts.astype(np.float64)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        f"property {ptype} x\nproperty {ptype} y\nproperty {ptype} z\nend_header\n"
    )
    with open(Path(path), "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(pts.astype("<" + dt)).tobytes())
        elif ptype == "int":
            np.savetxt(fh, pts, fmt="%d")
        else:
            np.savetxt(fh, pts, fmt="%.17g")
