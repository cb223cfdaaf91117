"""A-link inference: an encoder mapping a skeleton clip to per-pair link-type
probabilities (category 0 is the ghost / no-link type) and a recurrent
decoder that predicts the next pose from those links.

Batched layout: clips are ``[B, n, 3, F]``, link probabilities ``[B, n, n, C+1]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, NumericError, ParameterError, ValidationError
from .numerics import gumbel_softmax, sample_gumbel
from .optim import OptimizerState, adam_step

log = logging.getLogger(__name__)


@dataclass
class AimConfig:
    C: int = 3
    P0: float = 0.95
    tau: float = 0.5
    sigma2: float = 5e-3
    frames: int = 50
    hidden: int = 128
    dec_hidden: int = 64

    def __post_init__(self):
        if self.C < 1:
            raise ParameterError(f"need at least one A-link type, got C={self.C}")
        if not 0.0 <= self.P0 < 1.0:
            raise ParameterError(f"ghost prior P0 must lie in [0, 1), got {self.P0}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.sigma2 > 0:
            raise ParameterError(f"sigma2 must be positive, got {self.sigma2}")

    @property
    def prior(self) -> np.ndarray:
        """[P0, (1-P0)/C, ...]; a P0 of 0 leaves the ghost a tiny positive mass."""
        p0 = max(self.P0, 1e-6)
        return np.array([p0] + [(1.0 - p0) / self.C] * self.C)


def toy_aim_config(**kw) -> AimConfig:
    """Narrow AIM for desk-scale runs on the synthetic benchmarks."""
    base = dict(frames=32, hidden=32, dec_hidden=16)
    base.update(kw)
    return AimConfig(**base)


# ------------------------------------------------------------ preprocessing

def preprocess_for_aim(data: np.ndarray, valid_frames: int, frames: int = 50) -> Tuple[np.ndarray, int]:
    """Pick ``frames`` frames at regular intervals from the valid part of
    ``[n, 3, T]``; shorter clips are zero-padded. Returns the ``[n, 3, frames]``
    clip and how many of its frames are real."""
    if valid_frames < 1:
        raise ValidationError("AIM preprocessing needs at least one valid frame")
    n, d, _ = data.shape
    if d != 3:
        raise DimensionError(f"AIM expects 3 channels, got {d}")
    valid = data[:, :, :valid_frames]
    if valid_frames >= frames:
        idx = np.round(np.linspace(0, valid_frames - 1, frames)).astype(int)
        return valid[:, :, idx], frames
    clip = np.zeros((n, d, frames), dtype=data.dtype)
    clip[:, :, :valid_frames] = valid
    return clip, valid_frames


def flatten_clip(clip: torch.Tensor) -> torch.Tensor:
    """``[..., n, 3, F] -> [..., n, 3F]`` (channel-major per joint)."""
    return clip.reshape(*clip.shape[:-2], clip.shape[-2] * clip.shape[-1])


# ------------------------------------------------------------------ modules

class MLP(nn.Module):
    """in -elu-> hidden -elu-> out, then batch norm over the feature axis."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)
        self.bn = nn.BatchNorm1d(d_out)

    def forward(self, x):
        h = F.elu(self.fc2(F.elu(self.fc1(x))))
        shape = h.shape
        return self.bn(h.reshape(-1, shape[-1])).reshape(shape)


class PairMLP(MLP):
    """MLP on ``p_i (+) p_j`` for every ordered pair. The first layer acts on
    the concatenation, computed as ``W_a p_i + W_b p_j + b`` to avoid
    materialising ``[B, n, n, 2h]`` inputs."""

    def forward(self, p):
        h = p.shape[-1]
        w = self.fc1.weight
        left = F.linear(p, w[:, :h], self.fc1.bias)
        right = F.linear(p, w[:, h:])
        pre = left.unsqueeze(-2) + right.unsqueeze(-3)
        z = F.elu(self.fc2(F.elu(pre)))
        shape = z.shape
        return self.bn(z.reshape(-1, shape[-1])).reshape(shape)


class AimEncoder(nn.Module):
    def __init__(self, cfg: AimConfig):
        super().__init__()
        h = cfg.hidden
        d_in = 3 * cfg.frames
        self.C = cfg.C
        self.joint1 = MLP(d_in, h, h)
        self.joint2 = MLP(3 * h, h, h)
        self.pair2 = PairMLP(2 * h, h, h)
        self.out = nn.Linear(h, cfg.C + 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """``[B, n, 3F] -> [B, n, n, C+1]``."""
        if x.shape[-1] != self.joint1.fc1.in_features:
            raise DimensionError(
                f"encoder expects {self.joint1.fc1.in_features} features per joint, got {x.shape[-1]}")
        n = x.shape[-2]
        p1 = self.joint1(x)
        q2 = torch.cat([p1.unsqueeze(-2).expand(*p1.shape[:-1], n, p1.shape[-1]),
                        p1.unsqueeze(-3).expand(*p1.shape[:-2], n, n, p1.shape[-1])], dim=-1)
        p2 = self.joint2(torch.cat([q2.mean(dim=-2), p1], dim=-1))
        return self.out(self.pair2(p2))


class AimDecoder(nn.Module):
    """Per-type edge functions, mean aggregation, a GRU cell and a linear
    read-out of the next-frame mean."""

    def __init__(self, cfg: AimConfig, d: int = 3):
        super().__init__()
        C, h = cfg.C, cfg.dec_hidden
        self.C, self.h, self.d = C, h, d
        bound_v = 1.0 / math.sqrt(d)
        bound_e = 1.0 / math.sqrt(2 * h)
        self.fv_w = nn.Parameter(torch.empty(C, d, h).uniform_(-bound_v, bound_v))
        self.fv_b = nn.Parameter(torch.empty(C, h).uniform_(-bound_v, bound_v))
        self.fe_w = nn.Parameter(torch.empty(C, 2 * h, h).uniform_(-bound_e, bound_e))
        self.fe_b = nn.Parameter(torch.empty(C, h).uniform_(-bound_e, bound_e))
        self.gru_in = nn.Linear(h + d, 3 * h)
        self.gru_hid = nn.Linear(h, 3 * h)
        self.out = nn.Linear(h, d)

    def messages(self, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        """``Q_ij = sum_c a_ijc f_e^c(f_v^c(x_i) (+) f_v^c(x_j))`` for all pairs.

        ``x`` is ``[B, n, d]``, ``a`` is ``[B, n, n, C]`` (ghost excluded).
        """
        hv = torch.relu(torch.einsum("bnd,cdh->bcnh", x, self.fv_w) + self.fv_b[None, :, None, :])
        left = torch.einsum("bcnh,ckh->bcnk", hv, self.fe_w[:, :self.h])
        right = torch.einsum("bcnh,ckh->bcnk", hv, self.fe_w[:, self.h:])
        pre = left.unsqueeze(3) + right.unsqueeze(2) + self.fe_b[None, :, None, None, :]
        return torch.einsum("bcijk,bijc->bijk", torch.relu(pre), a)

    def gru(self, p: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        gi = self.gru_in(p)
        gh = self.gru_hid(s)
        i_r, i_z, i_n = gi.chunk(3, dim=-1)
        h_r, h_z, h_n = gh.chunk(3, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        cand = torch.tanh(i_n + r * h_n)
        return (1.0 - z) * cand + z * s


# -------------------------------------------------------------- operations

def encode(x: torch.Tensor, encoder: AimEncoder, cfg: AimConfig,
           noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Link-type probabilities ``[..., n, n, C+1]`` from flattened clips
    ``[..., n, 3F]``; ``noise`` holds Gumbel draws (None for the noise-free
    softmax)."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
        noise = None if noise is None else noise.unsqueeze(0)
    probs = gumbel_softmax(encoder.logits(x), cfg.tau, noise)
    return probs[0] if squeeze else probs


def decode_step(x_t: torch.Tensor, state: torch.Tensor, a: torch.Tensor,
                decoder: AimDecoder) -> Tuple[torch.Tensor, torch.Tensor]:
    """One decoder step. ``x_t`` ``[B, n, 3]``, ``state`` ``[B, n, h]``,
    ``a`` ``[B, n, n, C+1]``. Returns (next-frame mean, new state)."""
    q = decoder.messages(x_t, a[..., 1:])
    p = torch.cat([q.mean(dim=2), x_t], dim=-1)
    state = decoder.gru(p, state)
    return decoder.out(state), state


def decode_sequence(clip: torch.Tensor, a: torch.Tensor, decoder: AimDecoder,
                    mode: str = "teacher", burn_in: Optional[int] = None) -> torch.Tensor:
    """Predicted means ``[B, n, 3, F-1]`` for frames 1..F-1 of ``clip``.

    ``mode="teacher"`` always feeds the true previous frame; ``"free"``
    feeds true frames for the first ``burn_in`` steps, then its own output.
    """
    squeeze = clip.dim() == 3
    if squeeze:
        clip, a = clip.unsqueeze(0), a.unsqueeze(0)
    B, n, d, T = clip.shape
    if T < 2:
        raise ParameterError("decoding needs at least two frames")
    if mode not in ("teacher", "free"):
        raise ParameterError(f"unknown decode mode {mode!r}")
    if burn_in is None:
        burn_in = max(T - 10, 1)
    if mode == "free" and not 1 <= burn_in < T:
        raise ParameterError(f"burn_in must lie in [1, {T - 1}], got {burn_in}")
    state = clip.new_zeros(B, n, decoder.h)
    mus = []
    prev = None
    for t in range(T - 1):
        if mode == "teacher" or t < burn_in:
            x_t = clip[..., t]
        else:
            x_t = prev
        prev, state = decode_step(x_t, state, a, decoder)
        mus.append(prev)
    out = torch.stack(mus, dim=-1)
    return out[0] if squeeze else out


def kl_to_prior(a: torch.Tensor, prior) -> torch.Tensor:
    """``sum_{i,j,c} a log(a / prior)`` per sample (sums the two pair axes)."""
    prior = torch.as_tensor(prior, dtype=a.dtype)
    tiny = torch.finfo(a.dtype).tiny
    terms = a * (torch.log(a.clamp_min(tiny)) - torch.log(prior))
    return terms.sum(dim=(-3, -2, -1))


def aim_loss_terms(clip: torch.Tensor, mu: torch.Tensor, a: torch.Tensor, cfg: AimConfig,
                   valid: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (Gaussian NLL, KL). The NLL covers predicted frames whose
    targets are real (index < ``valid``), not zero padding."""
    target = clip[..., 1:]
    sq = ((target - mu) ** 2).sum(dim=-2)  # [..., n, F-1]
    if valid is not None:
        steps = torch.arange(1, clip.shape[-1])
        mask = (steps[None, :] < valid.reshape(-1, 1)).to(sq.dtype)
        sq = sq * mask.reshape(*mask.shape[:1], *([1] * (sq.dim() - 2)), -1)
    nll = sq.sum(dim=(-2, -1)) / (2.0 * cfg.sigma2)
    return nll, kl_to_prior(a, cfg.prior)


def aim_loss(clip, mu, a, cfg: AimConfig, valid=None) -> torch.Tensor:
    """Batch mean of per-sample NLL + KL."""
    nll, kl = aim_loss_terms(clip, mu, a, cfg, valid)
    loss = (nll + kl).mean()
    if not torch.isfinite(loss):
        raise NumericError("AIM loss is not finite")
    return loss


def actional_kernels(a: torch.Tensor) -> torch.Tensor:
    """Row-normalised link-type graphs ``[..., C, n, n]`` (ghost dropped)."""
    act = a[..., 1:].movedim(-1, -3)
    return act / act.sum(dim=-1, keepdim=True)


# ------------------------------------------------------------- pretraining

def stack_clips(dataset, cfg: AimConfig, dtype=torch.float64, horizon: int = 0):
    """Preprocessed AIM clips ``[N, n, 3, F]`` and their real-frame counts.
    ``horizon`` frames at the end of each sequence are held out."""
    clips, valid = [], []
    for s in dataset:
        clip, v = preprocess_for_aim(s.data, s.valid_frames - horizon, cfg.frames)
        clips.append(clip)
        valid.append(v)
    return (torch.as_tensor(np.stack(clips), dtype=dtype),
            torch.as_tensor(valid, dtype=torch.long))


def pretrain_aim(dataset, cfg: AimConfig, epochs: int = 10, lr: float = 5e-4,
                 batch_size: int = 32, seed: int = 0, dtype=torch.float64,
                 horizon: int = 0, encoder: Optional[AimEncoder] = None,
                 decoder: Optional[AimDecoder] = None):
    """Warm up the encoder and decoder on accumulated AIM loss with Adam.

    Returns ``(encoder, decoder, curve)`` where ``curve`` lists the mean
    training loss before training (entry 0) and after each epoch.
    """
    if len(dataset) == 0:
        raise ValidationError("AIM pretraining needs a non-empty dataset")
    gen = torch.Generator().manual_seed(seed)
    if encoder is None or decoder is None:
        torch.manual_seed(seed)
        encoder = AimEncoder(cfg).to(dtype)
        decoder = AimDecoder(cfg).to(dtype)
    clips, valid = stack_clips(dataset, cfg, dtype, horizon)
    params = list(encoder.parameters()) + list(decoder.parameters())
    for p in params:
        p.requires_grad_(True)
    state = OptimizerState("adam", lr)

    def batch_loss(idx, noise_gen):
        x = clips[idx]
        noise = sample_gumbel((len(idx), x.shape[1], x.shape[1], cfg.C + 1), noise_gen, dtype)
        a = encode(flatten_clip(x), encoder, cfg, noise)
        mu = decode_sequence(x, a, decoder, "teacher")
        return aim_loss(x, mu, a, cfg, valid[idx])

    def evaluate():
        encoder.eval(), decoder.eval()
        with torch.no_grad():
            tot = 0.0
            for start in range(0, len(clips), batch_size):
                idx = torch.arange(start, min(start + batch_size, len(clips)))
                a = encode(flatten_clip(clips[idx]), encoder, cfg)
                mu = decode_sequence(clips[idx], a, decoder, "teacher")
                tot += aim_loss(clips[idx], mu, a, cfg, valid[idx]).item() * len(idx)
        return tot / len(clips)

    curve = [evaluate()]
    for epoch in range(epochs):
        encoder.train(), decoder.train()
        order = torch.randperm(len(clips), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            for p in params:
                p.grad = None
            try:
                loss = batch_loss(idx, gen)
            except NumericError as exc:
                raise NumericError(f"AIM pretraining diverged at epoch {epoch}: {exc}") from exc
            loss.backward()
            adam_step(params, state)
        curve.append(evaluate())
        if not math.isfinite(curve[-1]):
            raise NumericError(f"AIM pretraining diverged at epoch {epoch}")
        log.info("aim epoch %d loss %.4f", epoch, curve[-1])
    return encoder, decoder, curve
