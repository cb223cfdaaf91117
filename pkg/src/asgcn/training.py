"""Two-phase training: A-link warm-up with Adam, then joint recognition and
prediction training with SGD on a step-decay schedule.

Every random stream derives from one master seed; batch order and Gumbel
noise for epoch ``e`` depend only on (seed, e), so a run resumed from its
last checkpoint replays exactly what an uninterrupted run would do.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .aim import AimConfig, kl_to_prior, pretrain_aim, preprocess_for_aim
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SkeletonSequence, split_for_prediction
from .errors import NumericError, ValidationError
from .graph import SkeletonGraph
from .network import ASGCN, JointLossConfig, ModelConfig, joint_step, per_coordinate_mse, prediction_loss
from .numerics import sample_gumbel
from .optim import OptimizerState, sgd_step, step_decay_lr

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_interval: int = 20
    momentum: float = 0.9
    aim_epochs: int = 10
    aim_lr: float = 5e-4
    alpha: float = 1.0
    seed: int = 0
    dtype: str = "float64"
    timing: bool = True

    @property
    def torch_dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


def sub_seeds(seed: int) -> Dict[str, int]:
    """Named, independent sub-seeds expanded from the master seed."""
    names = ("init", "shuffle", "gumbel", "aim", "split")
    states = np.random.SeedSequence(seed).generate_state(len(names))
    return {k: int(v) for k, v in zip(names, states)}


def prepare_tensors(dataset: Sequence[SkeletonSequence], cfg: ModelConfig, aim_cfg: AimConfig,
                    dtype=torch.float64) -> Dict[str, torch.Tensor]:
    """Stack model inputs: history ``x``, AIM ``clips``, ``last`` observed
    frame, held-out ``target`` frames and ``labels``."""
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    xs, clips, cval, lasts, targets, labels = [], [], [], [], [], []
    for s in dataset:
        inp, target, t_in = split_for_prediction(s, cfg.T, cfg.horizon)
        clip, v = preprocess_for_aim(inp, t_in, aim_cfg.frames)
        xs.append(inp)
        clips.append(clip)
        cval.append(v)
        lasts.append(inp[:, :, t_in - 1])
        targets.append(target)
        labels.append(-1 if s.label is None else s.label)
    to = lambda a: torch.as_tensor(np.stack(a), dtype=dtype)
    return {"x": to(xs), "clips": to(clips), "clip_valid": torch.as_tensor(cval),
            "last": to(lasts), "target": to(targets), "labels": torch.as_tensor(labels, dtype=torch.long)}


def _batch(t: Dict[str, torch.Tensor], idx) -> Dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in t.items()}


@torch.no_grad()
def evaluate(model: ASGCN, tensors: Dict[str, torch.Tensor], batch_size: int = 64) -> dict:
    """Noise-free eval-mode pass: accuracy, losses, confusion, predictions."""
    model.eval()
    N = tensors["x"].shape[0]
    k = min(5, model.cfg.num_classes)
    nc = model.cfg.num_classes
    confusion = np.zeros((nc, nc), dtype=np.int64)
    top1 = top5 = 0
    l_rec = l_pred = mse = kl = 0.0
    preds, probs_all, links_all = [], [], []
    for start in range(0, N, batch_size):
        b = _batch(tensors, slice(start, start + batch_size))
        out = model(b["x"], b["clips"], b["last"])
        logits = out["logits"]
        labels = b["labels"]
        probs = torch.softmax(logits, -1)
        probs_all.append(probs)
        l_rec += torch.nn.functional.cross_entropy(logits, labels.clamp_min(0), reduction="sum").item()
        top = logits.topk(k, dim=-1).indices
        top1 += int((top[:, 0] == labels).sum())
        top5 += int((top == labels[:, None]).any(-1).sum())
        for y, p in zip(labels.tolist(), top[:, 0].tolist()):
            if 0 <= y < nc:
                confusion[y, p] += 1
        if "pred" in out:
            preds.append(out["pred"])
            for i in range(len(labels)):
                l_pred += prediction_loss(out["pred"][i], b["target"][i]).item()
                mse += per_coordinate_mse(out["pred"][i], b["target"][i]).item()
        if "links" in out:
            kl += kl_to_prior(out["links"], model.aim_cfg.prior).sum().item()
            links_all.append(out["links"])
    res = {"top1": top1 / N, "top5": top5 / N, "loss_recog": l_rec / N,
           "loss_pred": l_pred / N if preds else None, "mse": mse / N if preds else None,
           "loss_aim_kl": kl / N if links_all else None, "confusion": confusion,
           "probs": torch.cat(probs_all)}
    if preds:
        res["pred"] = torch.cat(preds)
    if links_all:
        res["links"] = torch.cat(links_all)
    return res


# ------------------------------------------------------------ checkpoints

def model_meta(graph: SkeletonGraph, cfg: ModelConfig, aim_cfg: AimConfig) -> dict:
    return {"graph": graph.to_dict(), "model": dataclasses.asdict(cfg), "aim": dataclasses.asdict(aim_cfg)}


def build_model(meta: dict, dtype=torch.float64) -> ASGCN:
    graph = SkeletonGraph.from_dict(meta["graph"])
    cfg = ModelConfig(**meta["model"])
    aim_cfg = AimConfig(**meta["aim"])
    return ASGCN(graph, cfg, aim_cfg).to(dtype)


def write_model_checkpoint(path, model: ASGCN, graph: SkeletonGraph, extra_meta: dict,
                           opt: Optional[OptimizerState] = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = model_meta(graph, model.cfg, model.aim_cfg)
    meta.update(extra_meta)
    if opt is not None:
        tensors.update(opt.named_tensors("opt"))
        meta["optimizer"] = opt.meta()
        meta["optimizer_buffers"] = {k: len(v) for k, v in opt.buffers.items()}
    save_checkpoint(path, tensors, meta)


def read_model_checkpoint(path, dtype=None):
    """Returns ``(model, meta, tensors)``; the model is rebuilt from the
    checkpoint's own configuration."""
    tensors, meta = load_checkpoint(path)
    if dtype is None:
        dtype = torch.float64 if meta.get("dtype", "float64") == "float64" else torch.float32
    model = build_model(meta, dtype)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, meta, tensors


# ---------------------------------------------------------------- protocol

def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1000 + epoch)


def train_protocol(graph: SkeletonGraph, train_set, val_set, cfg: ModelConfig, aim_cfg: AimConfig,
                   tcfg: TrainConfig, outdir, aim_state: Optional[dict] = None,
                   resume: bool = True) -> dict:
    """Run both phases, writing ``metrics.jsonl``, ``last.ckpt``,
    ``best.ckpt`` and ``final.ckpt`` under ``outdir``. ``aim_state`` may hold
    pretrained ``encoder``/``decoder`` state dicts to skip phase 1."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    dtype = tcfg.torch_dtype
    seeds = sub_seeds(tcfg.seed)
    metrics_path = outdir / "metrics.jsonl"
    last_path = outdir / "last.ckpt"
    jcfg = JointLossConfig(alpha=tcfg.alpha, horizon=cfg.horizon)

    train_t = prepare_tensors(train_set, cfg, aim_cfg, dtype)
    val_t = prepare_tensors(val_set, cfg, aim_cfg, dtype) if val_set else None

    torch.manual_seed(seeds["init"])
    model = ASGCN(graph, cfg, aim_cfg).to(dtype)
    names = [k for k, _ in model.trainable()]
    params = [p for _, p in model.trainable()]
    opt = OptimizerState("sgd", tcfg.lr, momentum=tcfg.momentum)
    opt.init_buffers(params)
    run_meta = {"train": dataclasses.asdict(tcfg), "seeds": seeds, "dtype": tcfg.dtype}

    start_epoch = 0
    best = -1.0
    aim_curve: List[float] = []
    if resume and last_path.exists():
        _, meta, tensors = read_model_checkpoint(last_path, dtype)
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        opt.load_tensors("opt", tensors)
        opt.step = meta["optimizer"]["step"]
        start_epoch = meta["epoch"] + 1
        best = meta.get("best_top1", -1.0)
        aim_curve = meta.get("aim_curve", [])
        _truncate_metrics(metrics_path, meta["epoch"])
        log.info("resuming from epoch %d", start_epoch)
    else:
        if metrics_path.exists():
            metrics_path.unlink()
        _append(metrics_path, {"header": True, "seed": tcfg.seed, "seeds": seeds})
        if model.uses_links:
            if aim_state is not None:
                model.encoder.load_state_dict(aim_state["encoder"])
                model.decoder.load_state_dict(aim_state["decoder"])
            elif tcfg.aim_epochs > 0:
                enc, dec, aim_curve = pretrain_aim(
                    train_set, aim_cfg, tcfg.aim_epochs, tcfg.aim_lr, tcfg.batch_size,
                    seeds["aim"], dtype, horizon=cfg.horizon,
                    encoder=model.encoder, decoder=model.decoder)
                for p in model.decoder.parameters():
                    p.requires_grad_(False)
                _append(metrics_path, {"phase": "aim", "curve": aim_curve})

    N = train_t["x"].shape[0]
    for epoch in range(start_epoch, tcfg.epochs):
        t0 = time.perf_counter()
        opt.lr = step_decay_lr(tcfg.lr, epoch, tcfg.lr_decay, tcfg.lr_interval)
        gen_shuffle = _epoch_generator(seeds["shuffle"], epoch)
        gen_noise = _epoch_generator(seeds["gumbel"], epoch)
        order = torch.randperm(N, generator=gen_shuffle)
        model.train()
        sums = {"loss_recog": 0.0, "loss_pred": 0.0, "correct": 0}
        seen = 0
        for bi, start in enumerate(range(0, N, tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            if len(idx) < 2:
                continue
            batch = _batch(train_t, idx)
            if model.uses_links:
                n = cfg.n
                batch["noise"] = sample_gumbel((len(idx), n, n, aim_cfg.C + 1), gen_noise, dtype)
            for p in params:
                p.grad = None
            loss, m = joint_step(batch, model, jcfg, batch_id=bi)
            loss.backward()
            sgd_step(params, opt, names)
            seen += len(idx)
            sums["loss_recog"] += m["loss_recog"] * len(idx)
            sums["loss_pred"] += m.get("loss_pred", 0.0) * len(idx)
            sums["correct"] += m["correct"]
        wall = (time.perf_counter() - t0) * 1000.0 if tcfg.timing else None
        train_line = {"epoch": epoch, "split": "train", "loss_recog": sums["loss_recog"] / seen,
                      "loss_pred": sums["loss_pred"] / seen if jcfg.alpha > 0 and model.pred_head else None,
                      "loss_aim_kl": None, "top1": sums["correct"] / seen, "top5": None,
                      "lr": opt.lr, "wall_ms": wall}
        if not math.isfinite(train_line["loss_recog"]):
            raise NumericError(f"training diverged at epoch {epoch}")
        _append(metrics_path, train_line)
        top1 = train_line["top1"]
        if val_t is not None:
            ev = evaluate(model, val_t)
            _append(metrics_path, {"epoch": epoch, "split": "val", "loss_recog": ev["loss_recog"],
                                   "loss_pred": ev["loss_pred"], "loss_aim_kl": ev["loss_aim_kl"],
                                   "top1": ev["top1"], "top5": ev["top5"], "lr": opt.lr, "wall_ms": wall})
            top1 = ev["top1"]
        extra = dict(run_meta, epoch=epoch, aim_curve=aim_curve)
        if top1 > best:
            best = top1
            write_model_checkpoint(outdir / "best.ckpt", model, graph, dict(extra, best_top1=best))
        write_model_checkpoint(last_path, model, graph, dict(extra, best_top1=best), opt)
    write_model_checkpoint(outdir / "final.ckpt", model, graph,
                           dict(run_meta, epoch=tcfg.epochs - 1, best_top1=best, aim_curve=aim_curve))
    return {"model": model, "best_top1": best, "aim_curve": aim_curve, "outdir": str(outdir)}


def _append(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _truncate_metrics(path: Path, last_epoch: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if "epoch" in rec and rec["epoch"] > last_epoch:
            continue
        keep.append(line)
    path.write_text("".join(l + "\n" for l in keep))
