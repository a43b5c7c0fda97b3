"""Differentiable layers over :class:`~dpcc.sparse_tensor.SparseTensor`.

Gradients come from torch's reverse-mode autograd; this module fixes the layer
vocabulary the codec needs (sparse conv, generative upsampling, the
inception-residual block, occupancy heads, BCE) and wraps backward and the
Adam update in small explicit helpers.
"""

from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from dpcc.errors import ShapeError, UsageError
from dpcc.sparse_tensor import (
    ConvSpec,
    SparseTensor,
    sparse_conv,
    transpose_conv_up,
)

__all__ = [
    "Adam",
    "IRBlock",
    "OccupancyHead",
    "SparseConv",
    "SparseSequential",
    "Tape",
    "TransposeConv",
    "adam_step",
    "bce_with_logits",
    "forward",
    "relu",
]


def relu(x: SparseTensor) -> SparseTensor:
    return x.with_feats(torch.relu(x.feats))


class SparseConv(nn.Module):
    """Sparse convolution layer; pass ``target_coords`` to evaluate it on
    another coordinate set."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, bias: bool = True):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel_size, stride)
        self.weight = nn.Parameter(torch.empty(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        _fan_in_uniform_(self.weight, self.spec.volume * in_channels)

    def forward(self, x: SparseTensor, target_coords: Optional[np.ndarray] = None) -> SparseTensor:
        return sparse_conv(x, self.spec, self.weight, self.bias, target_coords)

    def extra_repr(self) -> str:
        s = self.spec
        return f"{s.in_channels}, {s.out_channels}, kernel_size={s.kernel_size}, stride={s.stride}"


class TransposeConv(nn.Module):
    """k=2, s=2 generative upsampling (all eight children per voxel)."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, 2, 2, transposed=True)
        self.weight = nn.Parameter(torch.empty(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        _fan_in_uniform_(self.weight, in_channels)

    def forward(self, x: SparseTensor) -> SparseTensor:
        return transpose_conv_up(x, self.spec, self.weight, self.bias)


def _fan_in_uniform_(w: torch.Tensor, fan_in: int):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        w.uniform_(-bound, bound)


class IRBlock(nn.Module):
    """Inception-residual block.

    Three parallel branches (1x1x1; 3x3x3; 3x3x3 -> 3x3x3) with widths
    ``c/4, c/4, c/2`` are concatenated and added back onto the input, so
    both the channel count and the coordinate set are preserved.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels % 4:
            raise ValueError("IRBlock width must be divisible by 4")
        q, h = channels // 4, channels // 2
        self.branch_point = SparseConv(channels, q, 1)
        self.branch_local = SparseConv(channels, q, 3)
        self.branch_deep_in = SparseConv(channels, h, 3)
        self.branch_deep_out = SparseConv(h, h, 3)

    def forward(self, x: SparseTensor) -> SparseTensor:
        a = self.branch_point(x).feats
        b = self.branch_local(x).feats
        c = self.branch_deep_out(relu(self.branch_deep_in(x))).feats
        return x.with_feats(x.feats + torch.cat([a, b, c], dim=1))


class SparseSequential(nn.Sequential):
    def forward(self, x: SparseTensor) -> SparseTensor:
        for layer in self:
            x = layer(x)
        return x


class ReLU(nn.Module):
    def forward(self, x: SparseTensor) -> SparseTensor:
        return relu(x)


class OccupancyHead(nn.Module):
    """Maps features to one occupancy logit per voxel."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = SparseConv(channels, 1, kernel_size)

    def forward(self, x: SparseTensor) -> torch.Tensor:
        return self.conv(x).feats[:, 0]


def bce_with_logits(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form
    ``max(l, 0) - l*t + log1p(exp(-|l|))``."""
    targets = torch.as_tensor(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if logits.numel() == 0:
        return logits.sum()
    loss = torch.clamp(logits, min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean()


class Tape:
    """Handle on a finished forward pass.  ``backward`` may run once."""

    def __init__(self, outputs):
        self.outputs = outputs
        self._consumed = False

    def backward(self, cotangent=None):
        if self._consumed:
            raise UsageError("tape already consumed by a previous backward pass")
        outs = self.outputs
        if isinstance(outs, SparseTensor):
            outs = outs.feats
        if isinstance(outs, torch.Tensor):
            outs = [outs]
        outs = [o.feats if isinstance(o, SparseTensor) else o for o in outs]
        if cotangent is None:
            cotangent = [torch.ones_like(o) for o in outs]
        elif isinstance(cotangent, torch.Tensor):
            cotangent = [cotangent]
        self._consumed = True
        torch.autograd.backward(outs, cotangent)


def forward(net, *inputs, **kwargs):
    """Run ``net`` recording the graph; returns ``(outputs, tape)``."""
    with torch.enable_grad():
        outputs = net(*inputs, **kwargs)
    return outputs, Tape(outputs)


class Adam:
    """Adam with bias correction; gradients are zeroed after every step."""

    def __init__(self, params: Iterable[torch.nn.Parameter], lr: float = 8e-4,
                 betas: Sequence[float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self._opt = torch.optim.Adam(self.params, lr=lr, betas=tuple(betas), eps=eps)

    def step(self):
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self._opt.step()
        for p in self.params:
            p.grad.zero_()


def adam_step(optimizer: Adam):
    optimizer.step()
