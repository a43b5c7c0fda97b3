"""Rate-distortion evaluation: D1 PSNR, BD-Rate and the results CSV."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from dpcc.errors import EmptyInputError

__all__ = [
    "CSV_FIELDS",
    "PSNR_CAP",
    "RdCurve",
    "RdPoint",
    "RdRow",
    "bd_rate",
    "curves_from_rows",
    "d1_mse",
    "d1_psnr",
    "nearest_sq_dists",
    "read_rd_csv",
    "write_rd_csv",
]

PSNR_CAP = 999.0


def nearest_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distance from every point of ``a`` to its nearest point
    in ``b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    _, idx = cKDTree(b).query(a, k=1)
    diff = a - b[idx]
    return np.einsum("ij,ij->i", diff, diff)


def d1_mse(reference, decoded) -> float:
    """Symmetric point-to-point MSE (the larger of the two directions)."""
    if len(reference) == 0 or len(decoded) == 0:
        raise EmptyInputError("D1 needs two non-empty clouds")
    return max(nearest_sq_dists(reference, decoded).mean(), nearest_sq_dists(decoded, reference).mean())


def d1_psnr(reference, decoded, depth: int) -> float:
    """D1 PSNR with peak ``2**depth - 1`` and the ``3 * peak**2`` numerator."""
    mse = d1_mse(reference, decoded)
    if mse == 0:
        return PSNR_CAP
    peak = (1 << depth) - 1
    return min(10.0 * math.log10(3.0 * peak**2 / mse), PSNR_CAP)


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr_db: float


class RdCurve:
    """At least four RD points, sorted by strictly increasing rate."""

    def __init__(self, points: Iterable[RdPoint]):
        pts = sorted(points, key=lambda p: p.bpp)
        if len(pts) < 4:
            raise ValueError("an RD curve needs at least four points")
        rates = np.array([p.bpp for p in pts])
        if np.any(rates <= 0) or np.any(np.diff(rates) <= 0):
            raise ValueError("RD curve rates must be positive and strictly increasing")
        self.points = pts

    @classmethod
    def from_arrays(cls, bpp: Sequence[float], psnr: Sequence[float]) -> "RdCurve":
        return cls(RdPoint(float(r), float(q)) for r, q in zip(bpp, psnr))

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])


def bd_rate(test: RdCurve, anchor: RdCurve) -> float:
    """Average rate difference (percent) of ``test`` against ``anchor``.

    Each curve is fitted with a cubic ``log10(rate) = f(PSNR)``; the fits are
    integrated in closed form over the shared PSNR interval.
    """
    lo = max(test.psnr.min(), anchor.psnr.min())
    hi = min(test.psnr.max(), anchor.psnr.max())
    if hi <= lo:
        raise ValueError("RD curves do not overlap in PSNR")
    areas = []
    for curve in (test, anchor):
        poly = np.polyint(np.polyfit(curve.psnr, np.log10(curve.bpp), 3))
        areas.append(np.polyval(poly, hi) - np.polyval(poly, lo))
    avg = (areas[0] - areas[1]) / (hi - lo)
    return float(100.0 * (10.0**avg - 1.0))


CSV_FIELDS = ("sequence", "frame", "frame_type", "bpp_coords", "bpp_feats", "bpp_total", "d1_psnr")


@dataclass
class RdRow:
    sequence: str
    frame: int
    frame_type: str
    bpp_coords: float
    bpp_feats: float
    bpp_total: float
    d1_psnr: float


def write_rd_csv(rows: Sequence[RdRow], path, append: bool = False):
    path = Path(path)
    header = not (append and path.exists() and path.stat().st_size)
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if header:
            writer.writeheader()
        for row in rows:
            d = asdict(row)
            for k in ("bpp_coords", "bpp_feats", "bpp_total"):
                d[k] = f"{d[k]:.6f}"
            d["d1_psnr"] = f"{d['d1_psnr']:.4f}"
            writer.writerow(d)


def read_rd_csv(path) -> List[RdRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        types = {f.name: f.type for f in fields(RdRow)}
        conv = {"str": str, "int": int, "float": float}
        return [RdRow(**{k: conv[types[k]](r[k]) for k in CSV_FIELDS}) for r in reader]


def curves_from_rows(rows: Sequence[RdRow]) -> "OrderedDict[str, RdPoint]":
    """One RD point per ``sequence`` label: mean total bpp and mean PSNR over
    its frames."""
    groups: "OrderedDict[str, list]" = OrderedDict()
    for r in rows:
        groups.setdefault(r.sequence, []).append(r)
    return OrderedDict(
        (k, RdPoint(float(np.mean([r.bpp_total for r in v])), float(np.mean([r.d1_psnr for r in v]))))
        for k, v in groups.items()
    )
