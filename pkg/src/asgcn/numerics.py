"""Tensor substrate: thin, shape-checked wrappers over torch plus a
finite-difference gradient checker.

Tensors are ``torch.Tensor`` and parameters are ``torch.nn.Parameter``
(the gradient lives in ``.grad``). Gradients come from torch autograd;
:func:`grad_check` is the independent numeric route used to verify them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, List, Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, ParameterError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")
    return a @ b


def hadamard(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise DimensionError(
            f"hadamard: shapes differ {list(a.shape)} vs {list(b.shape)}")
    return a * b


def concat(a: torch.Tensor, b: torch.Tensor, axis: int) -> torch.Tensor:
    # an empty 1-d operand is the identity, whatever the other rank
    if b.numel() == 0 and b.dim() == 1:
        return a
    if a.numel() == 0 and a.dim() == 1:
        return b
    if a.dim() != b.dim():
        raise DimensionError(
            f"concat: rank mismatch {list(a.shape)} vs {list(b.shape)}")
    ax = axis % a.dim()
    for k in range(a.dim()):
        if k != ax and a.shape[k] != b.shape[k]:
            raise DimensionError(
                f"concat: shapes {list(a.shape)} and {list(b.shape)} "
                f"differ off axis {axis}")
    return torch.cat([a, b], dim=ax)


def sample_gumbel(shape: Sequence[int], generator: Optional[torch.Generator] = None,
                  dtype=torch.float64) -> torch.Tensor:
    """Gumbel(0, 1) draws, reproducible through ``generator``."""
    u = torch.rand(tuple(shape), generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log(-torch.log(u.clamp(min=tiny, max=1.0 - 1e-7)))


def gumbel_softmax(logits: torch.Tensor, tau: float,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """softmax((logits + noise) / tau) over the last axis.

    ``noise`` must be supplied explicitly (zeros or None give the
    noise-free relaxation); nothing is sampled here.
    """
    if not tau > 0:
        raise ParameterError(f"gumbel_softmax: tau must be positive, got {tau}")
    if noise is not None:
        if noise.shape != logits.shape:
            raise DimensionError(
                f"gumbel_softmax: noise {list(noise.shape)} does not match "
                f"logits {list(logits.shape)}")
        logits = logits + noise
    return torch.softmax(logits / tau, dim=-1)


def temporal_conv(x: torch.Tensor, kernel: torch.Tensor, stride: int = 1,
                  pad: int = 0, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-joint 1-D cross-correlation along time.

    ``x`` is ``[..., n, d_in, T]``; ``kernel`` is ``[d_out, d_in, k]`` and is
    shared by all joints. Returns ``[..., n, d_out, T_out]``.
    """
    if stride < 1:
        raise ParameterError(f"temporal_conv: stride must be >= 1, got {stride}")
    if x.dim() < 3:
        raise DimensionError(f"temporal_conv: expected [..., n, d, T], got {list(x.shape)}")
    d_out, d_in, k = kernel.shape
    *lead, n, d, T = x.shape
    if d != d_in:
        raise DimensionError(
            f"temporal_conv: input channels {d} != kernel channels {d_in}")
    if T + 2 * pad < k:
        raise DimensionError(
            f"temporal_conv: empty output window (T={T}, pad={pad}, k={k})")
    y = F.conv1d(x.reshape(-1, d, T), kernel, bias=bias, stride=stride, padding=pad)
    return y.reshape(*lead, n, d_out, y.shape[-1])


def conv_out_len(T: int, k: int, stride: int, pad: int) -> int:
    return (T + 2 * pad - k) // stride + 1


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x)


def batch_norm(x: torch.Tensor, gamma: Optional[torch.Tensor], beta: Optional[torch.Tensor],
               running_mean: Optional[torch.Tensor], running_var: Optional[torch.Tensor],
               training: bool, channel_axis: int = -1,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> torch.Tensor:
    """Per-channel batch norm; statistics pool every axis except ``channel_axis``.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    if x.dim() < 2:
        raise DimensionError("batch_norm: need at least [batch, channels]")
    if training and x.numel() == 0:
        raise ParameterError("batch_norm: empty batch in train mode")
    moved = x.movedim(channel_axis, 1)
    if training and moved.numel() // moved.shape[1] < 2:
        raise ParameterError("batch_norm: need more than one value per channel in train mode")
    y = F.batch_norm(moved, running_mean, running_var, gamma, beta,
                     training=training, momentum=momentum, eps=eps)
    return y.movedim(1, channel_axis)


def global_avg_pool(x: torch.Tensor) -> torch.Tensor:
    """Mean over joints and time: ``[..., n, d, T] -> [..., d]``."""
    if x.dim() < 3:
        raise DimensionError(f"global_avg_pool: expected [..., n, d, T], got {list(x.shape)}")
    return x.mean(dim=(-3, -1))


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               eps: float = 1e-5, max_coords: int = 20,
               generator: Optional[torch.Generator] = None,
               loss_floor: float = 1e-6, skip_kinks: bool = False,
               stats: Optional[dict] = None) -> float:
    """Max relative error between autograd and central finite differences.

    Checks up to ``max_coords`` randomly chosen coordinates per parameter.
    The error of one coordinate is ``|a - f| / max(|a|, |f|, 1e-8,
    loss_floor * |L|)``. The last term keeps coordinates whose gradient is
    below the round-off resolution of the difference quotient (about
    ``|L| * 1e-16 / eps``) from reading as relative noise; they are judged
    against an absolute bound tied to the loss scale instead.
    ``loss_fn`` must be deterministic (fixed inputs, fixed noise, no batch
    statistics updates that feed back into the loss).

    With ``skip_kinks`` every ``torch.relu`` input sign is recorded, and a
    coordinate whose +eps or -eps evaluation switches any ReLU branch is left
    out: the difference quotient straddles a kink there and says nothing
    about the derivative. ``stats`` (if given) receives the ``checked`` and
    ``skipped`` coordinate counts.
    """
    params = list(params)

    def evaluate():
        branches: List[torch.Tensor] = []
        with _record_relu_branches(branches) if skip_kinks else contextlib.nullcontext():
            out = loss_fn()
        return out, branches

    loss, base = evaluate()
    if not torch.isfinite(loss).all():
        raise NumericError("grad_check: non-finite loss")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    floor = max(1e-8, loss_floor * abs(loss.item()))
    worst = 0.0
    checked = skipped = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.data.view(-1)
            gflat = g.reshape(-1)
            if flat.numel() <= max_coords:
                idx = torch.arange(flat.numel())
            else:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_coords]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus, b_plus = evaluate()
                flat[i] = orig - eps
                f_minus, b_minus = evaluate()
                flat[i] = orig
                f_plus, f_minus = f_plus.item(), f_minus.item()
                if not (abs(f_plus) < float("inf") and abs(f_minus) < float("inf")):
                    raise NumericError("grad_check: non-finite loss under perturbation")
                if skip_kinks and not (_same_branches(base, b_plus) and _same_branches(base, b_minus)):
                    skipped += 1
                    continue
                checked += 1
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = gflat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst


@contextlib.contextmanager
def _record_relu_branches(sink: List[torch.Tensor]):
    original = torch.relu

    def recording_relu(x):
        sink.append((x > 0).detach().clone())
        return original(x)

    torch.relu = recording_relu
    try:
        yield
    finally:
        torch.relu = original


def _same_branches(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))
