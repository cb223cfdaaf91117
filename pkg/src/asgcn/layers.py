"""Actional, structural and combined graph convolutions and the AS-GCN block.

Feature maps are ``[B, n, d, T]`` (a single frame ``[n, d]`` is also
accepted by the functional forms). Structural kernels arrive as one
``[K, n, n]`` stack (K = 3L, see ``GraphKernels.stack``); actional kernels
as ``[C, n, n]`` shared, or ``[B, C, n, n]`` per sample.
"""
from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigurationError, DimensionError, ParameterError
from .numerics import batch_norm, conv_out_len, temporal_conv


def _as_batched(x: torch.Tensor):
    if x.dim() == 2:
        return x[None, :, :, None], True
    if x.dim() == 4:
        return x, False
    raise DimensionError(f"expected [n, d] or [B, n, d, T] features, got {list(x.shape)}")


def _unbatch(y: torch.Tensor, squeezed: bool) -> torch.Tensor:
    return y[0, :, :, 0] if squeezed else y


def agc_forward(x: torch.Tensor, kernels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``sum_c A_c X W_c`` with per-type weights ``[C, d_in, d_out]``."""
    if kernels.shape[-3] != weights.shape[0]:
        raise ConfigurationError(
            f"{kernels.shape[-3]} actional kernels but {weights.shape[0]} weight matrices")
    xb, sq = _as_batched(x)
    xw = torch.einsum("bjdt,cde->bcjet", xb, weights)
    if kernels.dim() == 3:
        y = torch.einsum("cij,bcjet->biet", kernels, xw)
    else:
        y = torch.einsum("bcij,bcjet->biet", kernels, xw)
    return _unbatch(y, sq)


def sgc_forward(x: torch.Tensor, kernels: torch.Tensor, masks: torch.Tensor,
                weights: torch.Tensor) -> torch.Tensor:
    """``sum_k (M_k o A_k) X W_k`` over the (partition, order) stack."""
    if masks.shape != kernels.shape:
        raise DimensionError(f"mask stack {list(masks.shape)} != kernel stack {list(kernels.shape)}")
    if weights.shape[0] != kernels.shape[0]:
        raise ConfigurationError(f"{kernels.shape[0]} kernels but {weights.shape[0]} weight matrices")
    xb, sq = _as_batched(x)
    if xb.shape[1] != kernels.shape[-1]:
        raise DimensionError(f"{xb.shape[1]} joints but kernels are {kernels.shape[-1]}-wide")
    eff = masks * kernels
    ax = torch.einsum("kij,bjdt->bkidt", eff, xb)
    y = torch.einsum("bkidt,kde->biet", ax, weights)
    return _unbatch(y, sq)


def asgc_forward(x, s_kernels, masks, s_weights, a_kernels, a_weights,
                 lam: float, form: str = "convex") -> torch.Tensor:
    """``(1-lam) SGC + lam AGC`` (``form="convex"``) or ``SGC + lam AGC``
    (``form="additive"``). ``a_kernels=None`` drops the actional branch."""
    ys = sgc_forward(x, s_kernels, masks, s_weights)
    if a_kernels is None:
        return ys
    if s_weights.shape[-1] != a_weights.shape[-1]:
        raise ConfigurationError("structural and actional branches disagree on d_out")
    ya = agc_forward(x, a_kernels, a_weights)
    if form == "convex":
        return (1.0 - lam) * ys + lam * ya
    if form == "additive":
        return ys + lam * ya
    raise ParameterError(f"unknown ASGC form {form!r}")


def glorot_(t: torch.Tensor, d_in: int, d_out: int) -> torch.Tensor:
    bound = math.sqrt(6.0 / (d_in + d_out))
    with torch.no_grad():
        return t.uniform_(-bound, bound)


class BatchNorm(nn.Module):
    """Per-channel batch norm for ``[B, n, d, T]`` maps (channel axis 2)."""

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.register_buffer("running_mean", torch.zeros(d))
        self.register_buffer("running_var", torch.ones(d))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                          self.training, channel_axis=2)


class AsgcnBlock(nn.Module):
    """ASGC -> BN -> ReLU -> T-CN -> BN -> (+ residual) -> ReLU.

    ``links`` selects the branches: ``"s"`` structural only, ``"a"``
    actional plus the one-hop skeleton, ``"as"`` both. ``residual`` is
    ``"auto"`` (identity if shapes allow, else a strided 1x1 map when its
    length matches the T-CN output, else none), ``"none"`` or ``"zero"``
    (alias of none).
    """

    def __init__(self, d_in: int, d_out: int, n: int, n_kernels: int, C: int = 3,
                 links: str = "as", lam: float = 0.5, form: str = "convex",
                 kernel: int = 7, stride: int = 1, pad: Optional[int] = None,
                 residual: str = "auto", bn: bool = True):
        super().__init__()
        if links not in ("s", "a", "as"):
            raise ConfigurationError(f"unknown link combination {links!r}")
        self.d_in, self.d_out, self.n = d_in, d_out, n
        self.links, self.lam, self.form = links, lam, form
        self.kernel, self.stride = kernel, stride
        self.pad = (kernel - 1) // 2 if pad is None else pad
        self.residual_mode = residual
        self.use_bn = bn
        self.masks = nn.Parameter(torch.ones(n_kernels, n, n))
        self.s_weight = nn.Parameter(glorot_(torch.empty(n_kernels, d_in, d_out), d_in, d_out))
        self.uses_actional = links != "s"
        if self.uses_actional:
            self.a_weight = nn.Parameter(glorot_(torch.empty(C, d_in, d_out), d_in, d_out))
        self.tcn = nn.Parameter(glorot_(torch.empty(d_out, d_out, kernel), d_out * kernel, d_out * kernel))
        self.tcn_bias = nn.Parameter(torch.zeros(d_out))
        self.bn1 = BatchNorm(d_out)
        self.bn2 = BatchNorm(d_out)
        self.res_weight = None
        if residual == "auto" and not (d_in == d_out and stride == 1):
            self.res_weight = nn.Parameter(glorot_(torch.empty(d_out, d_in, 1), d_in, d_out))

    def out_len(self, T: int) -> int:
        return conv_out_len(T, self.kernel, self.stride, self.pad)

    def _residual(self, x: torch.Tensor, T_out: int) -> Optional[torch.Tensor]:
        if self.residual_mode != "auto":
            return None
        if self.res_weight is None:
            return x if x.shape[-1] == T_out else None
        if conv_out_len(x.shape[-1], 1, self.stride, 0) != T_out:
            return None
        return temporal_conv(x, self.res_weight, stride=self.stride)

    def forward(self, x: torch.Tensor, s_kernels: torch.Tensor,
                a_kernels: Optional[torch.Tensor] = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[2] != self.d_in:
            raise DimensionError(f"block expects [B, n, {self.d_in}, T], got {list(x.shape)}")
        T = x.shape[-1]
        if T + 2 * self.pad < self.kernel:
            raise DimensionError(f"T={T} too short for a {self.kernel}-frame temporal kernel")
        if self.uses_actional:
            if a_kernels is None:
                raise ConfigurationError("block uses A-links but no actional kernels were given")
            y = asgc_forward(x, s_kernels, self.masks, self.s_weight, a_kernels, self.a_weight,
                             self.lam, self.form)
        else:
            y = sgc_forward(x, s_kernels, self.masks, self.s_weight)
        if self.use_bn:
            y = self.bn1(y)
        y = torch.relu(y)
        y = temporal_conv(y, self.tcn, self.stride, self.pad, self.tcn_bias)
        if self.use_bn:
            y = self.bn2(y)
        res = self._residual(x, y.shape[-1])
        if res is not None:
            y = y + res
        return torch.relu(y)


def block_forward(x, block: AsgcnBlock, s_kernels, a_kernels=None, mode: str = "eval"):
    """Functional wrapper: run ``block`` in ``mode`` (``train`` | ``eval``)."""
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    block.train(mode == "train")
    squeeze = x.dim() == 3
    y = block(x.unsqueeze(0) if squeeze else x, s_kernels, a_kernels)
    return y[0] if squeeze else y
