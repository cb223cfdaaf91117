"""The AS-GCN model: stacked AS-GCN blocks, a pooled softmax classifier and
a future-pose prediction head, trained on cross-entropy plus a weighted
l2 prediction loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aim import AimConfig, AimDecoder, AimEncoder, actional_kernels, encode, flatten_clip
from .errors import ConfigurationError, DimensionError, NumericError
from .graph import SkeletonGraph, build_kernels, build_partitions
from .layers import AsgcnBlock
from .numerics import global_avg_pool

log = logging.getLogger(__name__)

FULL_BLOCKS = ((64, 1), (64, 1), (64, 1), (128, 2), (128, 1), (128, 1), (256, 2), (256, 1), (256, 1))
TOY_BLOCKS = ((16, 1), (32, 2), (64, 2))

# (d_out, kernel, stride, pad) per time-reducing block; 75 -> 39 -> 19 -> 10 -> 5 -> 1
FULL_PRED_DOWN = ((128, 7, 2, 4), (128, 7, 2, 2), (128, 7, 2, 3), (128, 3, 2, 1), (128, 5, 1, 0))
FULL_PRED_RECON = (64, 32, 30)


def default_pred_down(T_feat: int, width: int) -> Tuple[Tuple[int, int, int, int], ...]:
    """Kernel-3, stride-2, pad-1 blocks until one frame remains."""
    out = []
    T = T_feat
    while T > 1:
        out.append((width, 3, 2, 1))
        T = (T + 2 - 3) // 2 + 1
    return tuple(out)


@dataclass
class ModelConfig:
    n: int = 25
    num_classes: int = 60
    T: int = 300
    blocks: Tuple[Tuple[int, int], ...] = FULL_BLOCKS
    in_channels: int = 3
    kernel: int = 7
    L: int = 1
    links: str = "as"
    lam: float = 0.5
    form: str = "convex"
    kernel_family: str = "transition"
    horizon: int = 10
    prediction_head: bool = True
    pred_down: Optional[Tuple[Tuple[int, int, int, int], ...]] = None
    pred_recon: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        self.blocks = tuple(tuple(b) for b in self.blocks)
        if self.links not in ("s", "a", "as"):
            raise ConfigurationError(f"links must be one of s, a, as; got {self.links!r}")
        if self.L < 1:
            raise ConfigurationError(f"polynomial order must be >= 1, got {self.L}")
        if self.form not in ("convex", "additive"):
            raise ConfigurationError(f"unknown ASGC form {self.form!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.kernel_family == "sym" and self.L != 1:
            raise ConfigurationError("symmetric kernels are one-hop only (L = 1)")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.horizon < 1:
            raise ConfigurationError("prediction horizon must be >= 1")

    @property
    def order(self) -> int:
        # A-links alone ride on the one-hop skeleton
        return 1 if self.links == "a" else self.L

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0]

    def feature_len(self) -> int:
        T = self.T
        pad = (self.kernel - 1) // 2
        for _, s in self.blocks:
            T = (T + 2 * pad - self.kernel) // s + 1
        return T

    def head_geometry(self):
        down = self.pred_down
        recon = self.pred_recon
        if down is None:
            if self.feature_len() == 75 and self.feature_dim == 256:
                down = FULL_PRED_DOWN
            else:
                down = default_pred_down(self.feature_len(), max(self.feature_dim // 2, 8))
        if recon is None:
            if down == FULL_PRED_DOWN and self.horizon == 10:
                recon = FULL_PRED_RECON
            else:
                recon = (max(down[-1][0] // 2, 8), 3 * self.horizon)
        return tuple(tuple(d) for d in down), tuple(recon)


def toy_config(**kw) -> ModelConfig:
    base = dict(blocks=TOY_BLOCKS, T=32, n=29, num_classes=4, L=2)
    base.update(kw)
    return ModelConfig(**base)


class PredictionHead(nn.Module):
    """Time-collapsing AS-GCN blocks, then reconstruction blocks that see the
    last observed frame, then a per-joint linear map to ``3 * horizon``
    values added to the tiled last frame."""

    def __init__(self, cfg: ModelConfig, n_kernels: int, C: int):
        super().__init__()
        down, recon = cfg.head_geometry()
        self.horizon = cfg.horizon
        common = dict(n=cfg.n, n_kernels=n_kernels, C=C, links=cfg.links, lam=cfg.lam, form=cfg.form)
        blocks = []
        d = cfg.feature_dim
        for d_out, k, s, p in down:
            blocks.append(AsgcnBlock(d, d_out, kernel=k, stride=s, pad=p, **common))
            d = d_out
        self.down = nn.ModuleList(blocks)
        blocks = []
        for w in recon:
            blocks.append(AsgcnBlock(d + 3, w, kernel=1, stride=1, pad=0, **common))
            d = w
        self.recon = nn.ModuleList(blocks)
        self.fc = nn.Linear(d + 3, 3 * cfg.horizon)
        # zero read-out: an untrained head repeats the last frame
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    def forward(self, feats, last_frame, s_kernels, a_kernels=None, trace=None):
        y = feats
        for blk in self.down:
            y = blk(y, s_kernels, a_kernels)
            if trace is not None:
                trace.append(("pred_down", list(y.shape[1:])))
        if y.shape[-1] != 1:
            raise DimensionError(f"prediction head left {y.shape[-1]} frames, expected 1")
        last = last_frame.unsqueeze(-1)
        for blk in self.recon:
            y = torch.cat([y, last], dim=2)
            if trace is not None:
                trace.append(("pred_recon_in", list(y.shape[1:])))
            y = blk(y, s_kernels, a_kernels)
        y = torch.cat([y, last], dim=2)[..., 0]
        if trace is not None:
            trace.append(("pred_fc_in", list(y.shape[1:]) + [1]))
        out = self.fc(y)
        if trace is not None:
            trace.append(("pred_fc_out", list(out.shape[1:]) + [1]))
        out = out.reshape(*out.shape[:-1], 3, self.horizon)
        return out + last


class ASGCN(nn.Module):
    def __init__(self, graph: SkeletonGraph, cfg: ModelConfig, aim_cfg: Optional[AimConfig] = None):
        super().__init__()
        if graph.n != cfg.n:
            raise ConfigurationError(f"graph has {graph.n} joints, model config says {cfg.n}")
        self.cfg = cfg
        self.aim_cfg = aim_cfg or AimConfig()
        kernels = build_kernels(build_partitions(graph), cfg.order)
        stack = kernels.stack(cfg.kernel_family)
        self.register_buffer("s_kernels", torch.as_tensor(stack, dtype=torch.float64))
        K = stack.shape[0]
        C = self.aim_cfg.C
        self.uses_links = cfg.links != "s"
        if self.uses_links:
            self.encoder = AimEncoder(self.aim_cfg)
            self.decoder = AimDecoder(self.aim_cfg)
            for p in self.decoder.parameters():
                p.requires_grad_(False)
        blocks = []
        d = cfg.in_channels
        for d_out, stride in cfg.blocks:
            blocks.append(AsgcnBlock(d, d_out, cfg.n, K, C, cfg.links, cfg.lam, cfg.form,
                                     kernel=cfg.kernel, stride=stride))
            d = d_out
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(d, cfg.num_classes)
        self.pred_head = PredictionHead(cfg, K, C) if cfg.prediction_head else None

    def trainable(self) -> List[Tuple[str, nn.Parameter]]:
        return [(k, p) for k, p in self.named_parameters() if p.requires_grad]

    def infer_links(self, clips: torch.Tensor, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
        return encode(flatten_clip(clips), self.encoder, self.aim_cfg, noise)

    def backbone(self, x, a_kernels=None, trace=None):
        if x.dim() != 4 or x.shape[1] != self.cfg.n or x.shape[2] != self.cfg.in_channels:
            raise DimensionError(f"backbone expects [B, {self.cfg.n}, {self.cfg.in_channels}, T], "
                                 f"got {list(x.shape)}")
        y = x
        for blk in self.blocks:
            y = blk(y, self.s_kernels, a_kernels)
            if trace is not None:
                trace.append(("backbone", list(y.shape[1:])))
        return y

    def forward(self, x, clips=None, last_frame=None, noise=None, links=None, trace=None) -> Dict[str, torch.Tensor]:
        """``x`` ``[B, n, 3, T]``; ``clips`` ``[B, n, 3, F]`` feeds the link
        encoder (or pass precomputed ``links``); ``last_frame`` ``[B, n, 3]``
        enables the prediction head."""
        out: Dict[str, torch.Tensor] = {}
        a_kernels = None
        if self.uses_links:
            if links is None:
                if clips is None:
                    raise ConfigurationError("model uses A-links; pass clips or links")
                links = self.infer_links(clips, noise)
            out["links"] = links
            a_kernels = actional_kernels(links)
        feats = self.backbone(x, a_kernels, trace)
        out["features"] = feats
        out["logits"] = self.classifier(global_avg_pool(feats))
        if self.pred_head is not None and last_frame is not None:
            out["pred"] = self.pred_head(feats, last_frame, self.s_kernels, a_kernels, trace)
        return out


def backbone_forward(x, model: ASGCN, a=None, mode: str = "eval"):
    """Single-sample backbone: ``[n, 3, T] -> [n, d, T/4]``; ``a`` is the
    sample's link distribution ``[n, n, C+1]``."""
    model.train(mode == "train")
    a_k = None if a is None else actional_kernels(a.unsqueeze(0))
    return model.backbone(x.unsqueeze(0), a_k)[0]


def recognize(features: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Pool over joints and time, classify, softmax."""
    return torch.softmax(head(global_avg_pool(features)), dim=-1)


class CrossEntropyFloor:
    """``-log p[label]`` with probabilities floored at 1e-12; counts floor hits."""

    floor = 1e-12

    def __init__(self):
        self.clamped = 0

    def __call__(self, probs: torch.Tensor, label) -> torch.Tensor:
        if probs.dim() == 1:
            probs = probs.unsqueeze(0)
        label = torch.as_tensor(label)
        if label.is_floating_point():  # one-hot
            label = label.reshape(probs.shape).argmax(dim=-1)
        label = label.reshape(-1)
        p = probs.gather(-1, label.long().reshape(-1, 1)).squeeze(-1)
        low = p < self.floor
        if low.any():
            self.clamped += int(low.sum())
            log.warning("recognition loss: %d probabilities clamped at %g", int(low.sum()), self.floor)
        return -torch.log(p.clamp_min(self.floor)).mean()


recognition_loss = CrossEntropyFloor()


def prediction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared joint-position error summed over the coordinate axis, then
    normalised by ``n * d * T'`` row-terms with ``nd`` rows (one per joint
    coordinate), i.e. ``d * mean((pred - target)^2)``."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {list(pred.shape)} vs target {list(target.shape)}")
    d = pred.shape[-2]
    return d * ((pred - target) ** 2).mean()


def per_coordinate_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


@dataclass
class JointLossConfig:
    alpha: float = 1.0
    horizon: int = 10

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"prediction weight must be >= 0, got {self.alpha}")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")


def joint_step(batch: Dict[str, torch.Tensor], model: ASGCN, cfg: JointLossConfig,
               batch_id: int = 0) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Forward a batch and return ``L_recog + alpha * L_predict`` with metrics.

    ``batch`` carries ``x``, ``labels`` and, as the model needs them,
    ``clips``, ``noise``, ``last`` and ``target``.
    """
    want_pred = cfg.alpha > 0 and model.pred_head is not None
    out = model(batch["x"], batch.get("clips"), batch.get("last") if want_pred else None,
                batch.get("noise"))
    logits = out["logits"]
    l_rec = F.cross_entropy(logits, batch["labels"])
    loss = l_rec
    metrics = {"loss_recog": l_rec.item()}
    if want_pred:
        l_pred = prediction_loss(out["pred"], batch["target"])
        loss = loss + cfg.alpha * l_pred
        metrics["loss_pred"] = l_pred.item()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite joint loss in batch {batch_id}")
    metrics["loss"] = loss.item()
    metrics["correct"] = int((logits.argmax(-1) == batch["labels"]).sum())
    return loss, metrics


def export_feature_responses(features: torch.Tensor) -> torch.Tensor:
    """Channel-wise L2 magnitude ``[..., n, d, T] -> [..., n, T]``."""
    return torch.linalg.vector_norm(features, dim=-2)
