"""SGD-with-momentum and Adam as explicit, checkpointable state machines,
plus the step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import torch

from .errors import NumericError, ParameterError


def step_decay_lr(base_lr: float, epoch: int, factor: float = 0.1, interval: int = 20) -> float:
    return base_lr * factor ** (epoch // interval)


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: Dict[str, List[torch.Tensor]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ParameterError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")

    def init_buffers(self, params: Sequence[torch.Tensor]) -> None:
        names = ("momentum",) if self.kind == "sgd" else ("m", "v")
        for name in names:
            if name not in self.buffers:
                self.buffers[name] = [torch.zeros_like(p) for p in params]

    def named_tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        out = {}
        for name, bufs in self.buffers.items():
            for k, b in enumerate(bufs):
                out[f"{prefix}.{name}.{k}"] = b
        return out

    def load_tensors(self, prefix: str, tensors: Dict[str, torch.Tensor]) -> None:
        for name, bufs in self.buffers.items():
            for k in range(len(bufs)):
                bufs[k].copy_(tensors[f"{prefix}.{name}.{k}"])

    def meta(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "momentum": self.momentum, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "step": self.step}


def _check_finite(params, names):
    for k, p in enumerate(params):
        if p.grad is not None and not torch.isfinite(p.grad).all():
            label = names[k] if names else f"#{k}"
            raise NumericError(f"non-finite gradient in parameter {label}")


@torch.no_grad()
def sgd_step(params: Sequence[torch.Tensor], state: OptimizerState,
             names: Sequence[str] = ()) -> None:
    """v <- mu v + g; p <- p - lr v."""
    _check_finite(params, names)
    state.init_buffers(params)
    for p, v in zip(params, state.buffers["momentum"]):
        if p.grad is None:
            continue
        v.mul_(state.momentum).add_(p.grad)
        p.sub_(state.lr * v)
    state.step += 1


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], state: OptimizerState,
              names: Sequence[str] = ()) -> None:
    _check_finite(params, names)
    state.init_buffers(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.buffers["m"], state.buffers["v"]):
        if p.grad is None:
            continue
        g = p.grad
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)


def optimizer_step(params, state: OptimizerState, names=()) -> None:
    if state.kind == "sgd":
        sgd_step(params, state, names)
    else:
        adam_step(params, state, names)
