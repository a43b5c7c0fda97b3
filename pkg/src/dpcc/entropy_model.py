"""Fully factorized learned prior for bottleneck features.

Each channel owns a small monotone network ``x -> logit(cdf(x))`` built from
softplus-positive matrices, biases and ``tanh``-gated nonlinearities.  During
training additive uniform noise stands in for rounding; at inference values are
rounded and coded with integer CDF tables derived from the same network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit
from torch import nn

from dpcc.errors import DecodeError
from dpcc.range_coder import RangeDecoder, RangeEncoder

__all__ = [
    "CdfTable",
    "FactorizedPrior",
    "LIKELIHOOD_BOUND",
    "TABLE_PRECISION",
    "build_cdf_tables",
    "decode_features",
    "encode_features",
    "quantize",
    "quantize_pmf",
]

LIKELIHOOD_BOUND = 1e-9
TABLE_PRECISION = 16
ESCAPE_BITS = 32


def quantize(y):
    """Round half away from zero (torch or numpy input)."""
    if isinstance(y, torch.Tensor):
        return torch.sign(y) * torch.floor(y.abs() + 0.5)
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


class FactorizedPrior(nn.Module):
    """Per-channel cumulative density model.

    Args:
        channels: number of independent channels.
        filters: widths of the hidden stages (default four stages of width 3).
        init_scale: rough spread of the initial density.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3, 3),
                 init_scale: float = 3.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        g = torch.Generator().manual_seed(0)
        for i in range(len(dims) - 1):
            init = float(np.log(np.expm1(1 / scale / dims[i + 1])))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            bias = torch.rand((channels, dims[i + 1], 1), generator=g) - 0.5
            self.biases.append(nn.Parameter(bias))
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros((channels, dims[i + 1], 1))))

    def logits_cumulative(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(channels, 1, n)`` -> logits of the CDF, same shape."""
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def likelihood(self, y: torch.Tensor) -> torch.Tensor:
        """Probability mass of the unit bin centred on every element of the
        ``(n, channels)`` matrix ``y``."""
        v = y.t().unsqueeze(1)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        # evaluate in the tail that keeps the sigmoid difference well conditioned
        sign = torch.where(lower + upper > 0, -1.0, 1.0).to(lower.dtype).detach()
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.squeeze(1).t()
        return _lower_bound(p, LIKELIHOOD_BOUND)

    forward = likelihood

    def noisy_likelihood(self, y: torch.Tensor, generator: Optional[torch.Generator] = None):
        """Likelihood of ``y + u`` with ``u ~ U(-0.5, 0.5)``; returns
        ``(noisy_y, likelihood)``."""
        u = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        y_tilde = y + u
        return y_tilde, self.likelihood(y_tilde)

    def estimate_bits(self, y: torch.Tensor) -> torch.Tensor:
        """``sum(-log2 p)`` over all elements of ``y`` (already noisy or rounded)."""
        if y.numel() == 0:
            return y.new_zeros(())
        return -torch.log2(self.likelihood(y)).sum()

    # -- float64 numpy evaluation used for table construction ---------------

    def _numpy_params(self):
        with torch.no_grad():
            mats = [F.softplus(m.double()).numpy() for m in self.matrices]
            biases = [b.double().numpy() for b in self.biases]
            factors = [np.tanh(f.double().numpy()) for f in self.factors]
        return mats, biases, factors

    def logits_numpy(self, values: np.ndarray, params=None) -> np.ndarray:
        """CDF logits for a ``(channels, n)`` grid, in float64."""
        mats, biases, factors = params or self._numpy_params()
        logits = np.asarray(values, dtype=np.float64)[:, None, :]
        for i, m in enumerate(mats):
            logits = np.matmul(m, logits) + biases[i]
            if i < len(factors):
                logits = logits + factors[i] * np.tanh(logits)
        return logits[:, 0, :]

    def cdf_numpy(self, values: np.ndarray, params=None) -> np.ndarray:
        return expit(self.logits_numpy(values, params))

    def pmf_numpy(self, values: np.ndarray, params=None) -> np.ndarray:
        params = params or self._numpy_params()
        values = np.asarray(values, dtype=np.float64)
        lower = self.logits_numpy(values - 0.5, params)
        upper = self.logits_numpy(values + 0.5, params)
        sign = np.where(lower + upper > 0, -1.0, 1.0)
        return np.abs(expit(sign * upper) - expit(sign * lower))

    def support(self, tail_mass: float = 1e-6, max_radius: int = 1 << 14) -> Tuple[np.ndarray, np.ndarray]:
        """Per-channel integer range holding at least ``1 - tail_mass`` of
        the mass."""
        params = self._numpy_params()
        radius = 64
        while True:
            grid = np.arange(-radius, radius + 1, dtype=np.float64)
            grids = np.broadcast_to(grid, (self.channels, grid.size))
            below = self.cdf_numpy(grids - 0.5, params)
            above = self.cdf_numpy(grids + 0.5, params)
            fits = (below[:, 0] <= tail_mass / 2) & (above[:, -1] >= 1 - tail_mass / 2)
            if fits.all() or radius >= max_radius:
                break
            radius *= 2
        v_min = np.empty(self.channels, dtype=np.int64)
        v_max = np.empty(self.channels, dtype=np.int64)
        for c in range(self.channels):
            lo = np.nonzero(above[c] >= tail_mass / 2)[0]
            hi = np.nonzero(below[c] <= 1 - tail_mass / 2)[0]
            v_min[c] = grid[lo[0]] if lo.size else -radius
            v_max[c] = grid[hi[-1]] if hi.size else radius
            if v_max[c] - v_min[c] < 2:
                # near-deterministic channel: keep a few symbols around the centre
                mid = (v_min[c] + v_max[c]) // 2
                v_min[c], v_max[c] = mid - 1, mid + 1
        return v_min, v_max


class _LowerBound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp(x, min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        # let gradients that push the value back up through the clamp
        passthrough = (x >= ctx.bound) | (grad < 0)
        return grad * passthrough.to(grad.dtype), None


def _lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


def quantize_pmf(pmf: np.ndarray, precision: int = TABLE_PRECISION) -> np.ndarray:
    """Integer frequencies summing to ``2**precision`` with every entry >= 1.

    Returns the cumulative table (length ``len(pmf) + 1``).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot build a {precision}-bit table for {n} symbols")
    pmf = np.maximum(pmf, 0.0)
    mass = pmf.sum()
    pmf = pmf / mass if mass > 0 else np.full(n, 1.0 / n)
    scaled = pmf * (total - n)
    freq = np.floor(scaled).astype(np.int64) + 1
    remainder = int(total - freq.sum())
    if remainder:
        frac = scaled - np.floor(scaled)
        order = np.lexsort((np.arange(n), -frac))
        freq[order[:remainder]] += 1
    return np.concatenate([[0], np.cumsum(freq)]).astype(np.int64)


@dataclass(frozen=True)
class CdfTable:
    """Integer coding tables, one per channel, each over ``[v_min, v_max]``
    plus a trailing escape symbol."""

    v_min: np.ndarray
    v_max: np.ndarray
    cdfs: Tuple[np.ndarray, ...]
    precision: int = TABLE_PRECISION

    @property
    def channels(self) -> int:
        return len(self.cdfs)

    def escape_index(self, c: int) -> int:
        return int(self.v_max[c] - self.v_min[c] + 1)

    def probabilities(self, c: int) -> np.ndarray:
        return np.diff(self.cdfs[c]) / float(1 << self.precision)


def build_cdf_tables(prior: FactorizedPrior, tail_mass: float = 1e-6,
                     bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> CdfTable:
    """Quantize the prior into range-coder tables.

    ``bounds`` forces the per-channel support (the decoder passes the bounds
    it read from the stream header); otherwise the support is the smallest
    range holding ``1 - tail_mass`` of each channel's mass.
    """
    if bounds is None:
        v_min, v_max = prior.support(tail_mass)
    else:
        v_min = np.asarray(bounds[0], dtype=np.int64)
        v_max = np.asarray(bounds[1], dtype=np.int64)
    params = prior._numpy_params()
    cdfs = []
    for c in range(prior.channels):
        grid = np.arange(v_min[c], v_max[c] + 1, dtype=np.float64)
        full = np.zeros((prior.channels, grid.size))
        full[:] = grid
        pmf = prior.pmf_numpy(full, params)[c]
        escape = max(1.0 - pmf.sum(), 0.0)
        cdfs.append(quantize_pmf(np.append(pmf, escape)))
    return CdfTable(v_min.copy(), v_max.copy(), tuple(cdfs))


def encode_features(symbols: np.ndarray, table: CdfTable) -> bytes:
    """Range-code an integer ``(n, channels)`` matrix row by row.  Values
    outside a channel's support are sent as the escape symbol followed by a
    raw 32-bit two's-complement value."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim != 2 or symbols.shape[1] != table.channels:
        raise ValueError("symbol matrix does not match the table's channel count")
    cdfs = [c.tolist() for c in table.cdfs]
    v_min = table.v_min.tolist()
    v_max = table.v_max.tolist()
    total = 1 << table.precision
    enc = RangeEncoder()
    for row in symbols.tolist():
        for c, v in enumerate(row):
            cdf = cdfs[c]
            if v_min[c] <= v <= v_max[c]:
                s = v - v_min[c]
            else:
                s = len(cdf) - 2
            enc.encode(cdf[s], cdf[s + 1] - cdf[s], total)
            if s == len(cdf) - 2:
                raw = v & 0xFFFFFFFF
                enc.encode(raw >> 16, 1, 1 << 16)
                enc.encode(raw & 0xFFFF, 1, 1 << 16)
    return enc.finish()


def decode_features(data: bytes, table: CdfTable, rows: int) -> np.ndarray:
    out = np.empty((rows, table.channels), dtype=np.int64)
    if rows == 0:
        return out
    cdfs = [c.tolist() for c in table.cdfs]
    v_min = table.v_min.tolist()
    dec = RangeDecoder(data)
    for i in range(rows):
        for c in range(table.channels):
            cdf = cdfs[c]
            s = dec.decode(cdf)
            if s == len(cdf) - 2:
                hi = dec.target(1 << 16)
                dec.consume(hi, 1)
                lo = dec.target(1 << 16)
                dec.consume(lo, 1)
                raw = (hi << 16) | lo
                out[i, c] = raw - (1 << 32) if raw & 0x80000000 else raw
            else:
                out[i, c] = s + v_min[c]
    if dec.consumed != len(data):
        raise DecodeError("trailing bytes after the feature substream")
    return out
