"""Desk-scale ablations on the synthetic benchmarks.

One AIM warm-up per (seed, C, P0) is shared by every A-link variant of that
seed, so variants differ only in what they are meant to ablate.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import torch

from .aim import pretrain_aim, toy_aim_config
from .data import (SynthConfig, constant_velocity_classes, correlated_limbs_classes,
                   generate_synthetic, split_dataset)
from .graph import resolve_graph
from .network import toy_config
from .training import TrainConfig, evaluate, prepare_tensors, sub_seeds, train_protocol


@dataclass(frozen=True)
class Variant:
    name: str
    links: str = "as"
    L: int = 2
    alpha: float = 0.0
    C: int = 3
    P0: float = 0.95

    @property
    def prediction_head(self) -> bool:
        return self.alpha > 0


LINK_TREND = (Variant("S-L1", "s", 1), Variant("S-L2", "s", 2), Variant("AS-L2", "as", 2))
PRED_TREND = (Variant("AS-L2+pred", "as", 2, alpha=1.0),)


@dataclass
class BenchConfig:
    samples_per_class: int = 200
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 20
    lr: float = 0.05
    lr_interval: int = 10
    aim_epochs: int = 5
    batch_size: int = 32
    dtype: str = "float32"
    noise_std: float = 0.02
    timing: bool = True
    # constant-velocity prediction check
    pred_samples_per_class: int = 50
    pred_epochs: int = 40
    pred_lr: float = 0.1


def _train_cfg(bench: BenchConfig, seed: int, alpha: float, epochs=None, lr=None, interval=None) -> TrainConfig:
    return TrainConfig(epochs=epochs or bench.epochs, batch_size=bench.batch_size, lr=lr or bench.lr,
                       lr_interval=interval or bench.lr_interval, aim_epochs=bench.aim_epochs,
                       alpha=alpha, seed=seed, dtype=bench.dtype, timing=bench.timing)


def benchmark_splits(bench: BenchConfig, seed: int, classes=None):
    synth = SynthConfig(classes=classes or correlated_limbs_classes(),
                        samples_per_class=bench.samples_per_class, noise_std=bench.noise_std, seed=seed)
    return split_dataset(generate_synthetic(synth), (0.6, 0.2, 0.2), seed=sub_seeds(seed)["split"])


def run_seed(bench: BenchConfig, seed: int, variants: Sequence[Variant], outdir) -> List[dict]:
    """Train and test every variant on one seed's correlated-limbs split."""
    graph = resolve_graph("star4x7")
    train, val, test = benchmark_splits(bench, seed)
    dtype = torch.float64 if bench.dtype == "float64" else torch.float32
    aim_cache: Dict[Tuple[int, float], dict] = {}
    rows = []
    for v in variants:
        aim_cfg = toy_aim_config(C=v.C, P0=v.P0)
        cfg = toy_config(links=v.links, L=v.L, prediction_head=v.prediction_head)
        t0 = time.perf_counter()
        aim_state = None
        if v.links != "s":
            key = (v.C, v.P0)
            if key not in aim_cache:
                enc, dec, _ = pretrain_aim(train, aim_cfg, bench.aim_epochs, 5e-4, bench.batch_size,
                                           sub_seeds(seed)["aim"], dtype, horizon=cfg.horizon)
                aim_cache[key] = {"encoder": enc.state_dict(), "decoder": dec.state_dict()}
            aim_state = aim_cache[key]
        res = train_protocol(graph, train, val, cfg, aim_cfg, _train_cfg(bench, seed, v.alpha),
                             Path(outdir) / f"seed{seed}" / v.name, aim_state=aim_state, resume=False)
        ev = evaluate(res["model"], prepare_tensors(test, cfg, aim_cfg, dtype))
        rows.append({"seed": seed, "variant": v.name, "links": v.links, "L": v.L, "C": v.C,
                     "P0": v.P0, "alpha": v.alpha, "test_top1": ev["top1"],
                     "best_val_top1": res["best_top1"], "seconds": time.perf_counter() - t0})
    return rows


def prediction_check(bench: BenchConfig, seed: int, outdir, links: str = "as", L: int = 2) -> dict:
    """Train with the prediction head (alpha = 1) on noisy constant-velocity
    sequences; score held-out predictions against the noise-free future."""
    graph = resolve_graph("star4x7")
    aim_cfg = toy_aim_config()
    cfg = toy_config(links=links, L=L, prediction_head=True)
    dtype = torch.float64 if bench.dtype == "float64" else torch.float32
    synth = SynthConfig(classes=constant_velocity_classes(), samples_per_class=bench.pred_samples_per_class,
                        noise_std=bench.noise_std, seed=seed)
    noisy = generate_synthetic(synth)
    clean = {s.sample_id: s for s in generate_synthetic(dataclasses.replace(synth, noise_std=0.0))}
    train, val, test = split_dataset(noisy, (0.6, 0.2, 0.2), seed=sub_seeds(seed)["split"])
    tcfg = _train_cfg(bench, seed, 1.0, bench.pred_epochs, bench.pred_lr, bench.pred_epochs // 2)
    res = train_protocol(graph, train, val, cfg, aim_cfg, tcfg, Path(outdir) / f"seed{seed}" / "cv-pred",
                         resume=False)
    tensors = prepare_tensors(test, cfg, aim_cfg, dtype)
    tensors["target"] = prepare_tensors([clean[s.sample_id] for s in test], cfg, aim_cfg, dtype)["target"]
    ev = evaluate(res["model"], tensors)
    return {"seed": seed, "mse": ev["mse"], "noise_var": bench.noise_std ** 2, "test_top1": ev["top1"]}


def summarize(rows: Sequence[dict], key: str = "test_top1") -> Dict[str, float]:
    out: Dict[str, List[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r[key])
    return {k: sum(v) / len(v) for k, v in out.items()}


def run_ablation(bench: BenchConfig, variants: Sequence[Variant], outdir) -> List[dict]:
    """All seeds; writes ``ablation.csv`` and ``ablation.json`` to ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in bench.seeds:
        rows.extend(run_seed(bench, seed, variants, outdir))
    write_table(rows, outdir)
    return rows


def write_table(rows: Sequence[dict], outdir) -> None:
    outdir = Path(outdir)
    if not rows:
        return
    with open(outdir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (outdir / "ablation.json").write_text(
        json.dumps({"rows": list(rows), "mean_test_top1": summarize(rows)}, indent=2, sort_keys=True))
