"""Skeleton sequences, the JSON-lines dataset format, padding, splitting and
synthetic action generators.

Dataset file: one JSON object per line,
``{"id": str, "label": int|null, "n": int, "t_valid": int,
"data": [n][3][t_valid], "channels": "xyz"|"xyc"}`` (``channels`` optional).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError, ParseError, ValidationError
from .graph import SkeletonGraph, preset

log = logging.getLogger(__name__)


@dataclass
class SkeletonSequence:
    sample_id: str
    data: np.ndarray  # [n, 3, T], frames >= valid_frames are repeat padding
    valid_frames: int
    label: Optional[int] = None
    channels: str = "xyz"
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[1] != 3:
            raise ValidationError(f"{self.sample_id}: data must be [n, 3, T], got {self.data.shape}")
        if not 1 <= self.valid_frames <= self.data.shape[2]:
            raise ValidationError(
                f"{self.sample_id}: valid_frames {self.valid_frames} outside [1, {self.data.shape[2]}]")
        if self.channels not in ("xyz", "xyc"):
            raise ValidationError(f"{self.sample_id}: unknown channel convention {self.channels!r}")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return self.data[:, :, :self.valid_frames]


def pad_repeat(x: np.ndarray, T: int) -> np.ndarray:
    """Extend ``[n, 3, T_valid]`` to ``T`` frames by cycling from the start."""
    t_valid = x.shape[-1]
    if t_valid < 1:
        raise ParameterError("pad_repeat: need at least one frame")
    if T < t_valid:
        raise ParameterError(f"pad_repeat: target {T} shorter than {t_valid} valid frames")
    return x[..., np.arange(T) % t_valid]


def center_sequence(seq: SkeletonSequence, center: int) -> SkeletonSequence:
    """Subtract the center joint's first-frame position from every frame.

    Only spatial channels move: all three for ``xyz``, x and y for ``xyc``.
    """
    k = 3 if seq.channels == "xyz" else 2
    origin = seq.data[center, :k, 0].copy()
    data = seq.data.copy()
    data[:, :k, :] -= origin[None, :, None]
    meta = dict(seq.meta, origin=origin.tolist())
    return SkeletonSequence(seq.sample_id, data, seq.valid_frames, seq.label, seq.channels, meta)


def split_for_prediction(seq: SkeletonSequence, T: int, horizon: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Model input (all valid frames but the last ``horizon``, repeat-padded
    to ``T``), the held-out target ``[n, 3, horizon]`` and the input's valid
    frame count."""
    if seq.valid_frames < horizon + 1:
        raise ValidationError(
            f"{seq.sample_id}: {seq.valid_frames} valid frames, need at least {horizon + 1}")
    valid = seq.valid
    t_in = seq.valid_frames - horizon
    hist = valid[:, :, :t_in]
    if t_in > T:
        hist = hist[:, :, t_in - T:]
        t_in = T
    return pad_repeat(hist, T), valid[:, :, seq.valid_frames - horizon:], t_in


# ---------------------------------------------------------------- file I/O

def save_dataset(dataset: Sequence[SkeletonSequence], path) -> None:
    with open(path, "w") as fh:
        for s in dataset:
            rec = {"id": s.sample_id, "label": s.label, "n": s.n, "t_valid": s.valid_frames,
                   "data": s.valid.tolist()}
            if s.channels != "xyz":
                rec["channels"] = s.channels
            fh.write(json.dumps(rec) + "\n")


def _parse_record(line: str, lineno: int, path) -> SkeletonSequence:
    try:
        rec = json.loads(line)
        sid = str(rec["id"])
        n = int(rec["n"])
        t_valid = int(rec["t_valid"])
        label = rec.get("label")
        label = None if label is None else int(label)
        data = np.asarray(rec["data"], dtype=np.float64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from exc
    if data.shape != (n, 3, t_valid):
        raise ParseError(f"{path}:{lineno}: sample {sid} data shape {data.shape} "
                         f"!= declared ({n}, 3, {t_valid})")
    if not np.isfinite(data).all():
        raise ParseError(f"{path}:{lineno}: sample {sid} contains non-finite values")
    return SkeletonSequence(sid, data, t_valid, label, rec.get("channels", "xyz"))


def load_dataset(path, graph: SkeletonGraph, T: Optional[int] = None,
                 center: bool = True) -> List[SkeletonSequence]:
    """Read a JSON-lines dataset, validate against ``graph`` and optionally
    repeat-pad every sequence to ``T`` frames and center it."""
    path = Path(path)
    out: List[SkeletonSequence] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            seq = _parse_record(line, lineno, path)
            if seq.n != graph.n:
                raise ValidationError(f"{path}:{lineno}: sample {seq.sample_id} has {seq.n} joints, "
                                      f"graph has {graph.n}")
            if T is not None:
                if seq.valid_frames > T:
                    raise ValidationError(f"{path}:{lineno}: sample {seq.sample_id} has "
                                          f"{seq.valid_frames} frames, more than T={T}")
                seq = SkeletonSequence(seq.sample_id, pad_repeat(seq.data, T), seq.valid_frames,
                                       seq.label, seq.channels)
            if center:
                seq = center_sequence(seq, graph.center)
            out.append(seq)
    if not out:
        log.warning("dataset %s is empty", path)
    return out


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class Oscillator:
    """Sinusoidal displacement of ``joints`` along ``axis``.

    ``frequency`` is in cycles per ``SynthConfig.period_frames``. Oscillators
    sharing a ``group`` share the per-sample random base phase, so ``phase``
    fixes their relative timing.
    """
    joints: Tuple[int, ...]
    axis: int
    amplitude: float
    frequency: float
    phase: float = 0.0
    group: str = "main"


@dataclass(frozen=True)
class ClassSpec:
    name: str
    oscillators: Tuple[Oscillator, ...] = ()
    velocity: Optional[Tuple[float, float, float]] = None  # constant drift per frame


@dataclass(frozen=True)
class SynthConfig:
    graph: str = "star4x7"
    classes: Tuple[ClassSpec, ...] = ()
    samples_per_class: int = 200
    frames: int = 42
    period_frames: int = 32
    noise_std: float = 0.02
    freq_jitter: float = 0.05
    velocity_jitter: float = 0.0
    spacing: float = 0.1
    seed: int = 0


def rest_pose(g: SkeletonGraph, spacing: float = 0.1) -> np.ndarray:
    """A planar layout: BFS tree from the center, children fanned out."""
    pos = np.zeros((g.n, 3))
    nbrs = g.neighbors()
    dist = g.hop_distances()
    root_children = [v for v in nbrs[g.center]]
    angle = {g.center: 0.0}
    for k, v in enumerate(root_children):
        angle[v] = 2 * math.pi * k / max(len(root_children), 1)
    order = sorted(range(g.n), key=lambda v: dist[v])
    for v in order:
        if v == g.center:
            continue
        parent = min((u for u in nbrs[v] if dist[u] == dist[v] - 1))
        kids = sorted(u for u in nbrs[parent] if dist[u] == dist[parent] + 1)
        if v not in angle:
            spread = 0.4 * (kids.index(v) - (len(kids) - 1) / 2)
            angle[v] = angle[parent] + spread
        pos[v] = pos[parent] + spacing * np.array([math.cos(angle[v]), math.sin(angle[v]), 0.0])
    return pos


def _class_signature(c: ClassSpec):
    return (tuple(sorted(c.oscillators, key=repr)), c.velocity)


def generate_synthetic(cfg: SynthConfig) -> List[SkeletonSequence]:
    """Pure function of ``cfg``: labels are class indices in ``cfg.classes``."""
    if len(cfg.classes) < 2:
        raise ValidationError("synthetic generation needs at least two classes")
    sigs = [_class_signature(c) for c in cfg.classes]
    if len(set(sigs)) != len(sigs):
        raise ValidationError("two synthetic classes have identical motion specs")
    g = preset(cfg.graph)
    base = rest_pose(g, cfg.spacing)
    # noise has its own stream, so noise_std=0 yields the clean twin of a noisy set
    motion_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(motion_seq)
    noise_rng = np.random.default_rng(noise_seq)
    t = np.arange(cfg.frames, dtype=np.float64)
    out = []
    for label, spec in enumerate(cfg.classes):
        groups = sorted({o.group for o in spec.oscillators})
        for k in range(cfg.samples_per_class):
            x = np.repeat(base[:, :, None], cfg.frames, axis=2)
            phases = {grp: rng.uniform(0, 2 * math.pi) for grp in groups}
            jitter = 1.0 + cfg.freq_jitter * rng.uniform(-1, 1)
            for o in spec.oscillators:
                w = 2 * math.pi * o.frequency * jitter / cfg.period_frames
                wave = o.amplitude * np.sin(w * t + phases[o.group] + o.phase)
                for j in o.joints:
                    x[j, o.axis, :] += wave
            if spec.velocity is not None:
                v = np.asarray(spec.velocity, dtype=np.float64)
                if cfg.velocity_jitter:
                    v = v * (1.0 + cfg.velocity_jitter * rng.uniform(-1, 1, size=3))
                x += v[None, :, None] * t[None, None, :]
            if cfg.noise_std > 0:
                x = x + noise_rng.normal(0.0, cfg.noise_std, size=x.shape)
            out.append(SkeletonSequence(f"{spec.name}-{k:04d}", x, cfg.frames, label))
    return out


def star_joint(limb: int, depth: int, length: int = 7) -> int:
    return 1 + limb * length + (depth - 1)


def correlated_limbs_classes(length: int = 7) -> Tuple[ClassSpec, ...]:
    """Four classes on a 4-limb star, told apart only by joint-pair relations.

    Bit 0: the outer halves of limbs 0 and 1 (8+ hops apart) swing in phase
    or in antiphase. Bit 1: the tips of limbs 2 and 3 (``2 * length`` hops
    apart) do the same at a different frequency. Every class also carries
    an independently-phased nuisance swing near the center of limbs 2, 3.
    """
    mid = length // 2 + 1
    seg0 = tuple(star_joint(0, d, length) for d in range(mid, length + 1))
    seg1 = tuple(star_joint(1, d, length) for d in range(mid, length + 1))
    tip2 = (star_joint(2, length, length),)
    tip3 = (star_joint(3, length, length),)
    nuisance = (Oscillator((star_joint(2, 2, length),), 2, 0.15, 1.0, 0.0, "n2"),
                Oscillator((star_joint(3, 2, length),), 2, 0.15, 1.0, 0.0, "n3"))
    classes = []
    for label in range(4):
        mid_phase = math.pi * (label & 1)
        far_phase = math.pi * ((label >> 1) & 1)
        osc = (Oscillator(seg0, 2, 0.2, 2.0, 0.0, "mid"),
               Oscillator(seg1, 2, 0.2, 2.0, mid_phase, "mid"),
               Oscillator(tip2, 2, 0.3, 3.0, 0.0, "far"),
               Oscillator(tip3, 2, 0.3, 3.0, far_phase, "far")) + nuisance
        classes.append(ClassSpec(f"c{label}", osc))
    return tuple(classes)


def walk_wave_classes(length: int = 7) -> Tuple[ClassSpec, ...]:
    """Two easy classes: all four limb tips phase-locked ("walk-like") vs a
    single oscillating limb with the rest static ("wave-like")."""
    tips = [star_joint(a, d, length) for a in range(4) for d in range(length - 1, length + 1)]
    walk = ClassSpec("walk", (Oscillator(tuple(tips), 2, 0.3, 2.0),))
    arm = tuple(star_joint(0, d, length) for d in range(2, length + 1))
    wave = ClassSpec("wave", (Oscillator(arm, 2, 0.3, 2.0),))
    return walk, wave


def constant_velocity_classes(speed: float = 0.01) -> Tuple[ClassSpec, ...]:
    """Whole-body drift along +x, -x, +y, -y."""
    dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)]
    return tuple(ClassSpec(f"v{k}", velocity=tuple(speed * c for c in d)) for k, d in enumerate(dirs))


def split_dataset(dataset: Sequence[SkeletonSequence], fractions=(0.6, 0.2, 0.2), seed: int = 0,
                  stratify: bool = True):
    """Disjoint seeded (train, val, test) split, stratified by label."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be 3 non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    groups: Dict[object, List[int]] = {}
    for k, s in enumerate(dataset):
        groups.setdefault(s.label if stratify else None, []).append(k)
    parts: Tuple[List[int], List[int], List[int]] = ([], [], [])
    for key in sorted(groups, key=lambda v: (v is None, v)):
        idx = groups[key]
        if stratify and len(idx) < 3:
            raise ValidationError(f"class {key} has {len(idx)} samples; stratified split needs >= 3")
        idx = [idx[i] for i in rng.permutation(len(idx))]
        n_train = int(round(fr[0] * len(idx)))
        n_val = min(int(round(fr[1] * len(idx))), len(idx) - n_train)
        parts[0].extend(idx[:n_train])
        parts[1].extend(idx[n_train:n_train + n_val])
        parts[2].extend(idx[n_train + n_val:])
    return tuple([dataset[i] for i in sorted(p)] for p in parts)
