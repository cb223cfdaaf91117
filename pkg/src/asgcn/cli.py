"""``asgcn`` command line: pretrain-aim, train, eval, predict, export-links,
export-features and ablate.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric failure,
4 I/O failure. Failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from . import config as C
from .ablation import BenchConfig, Variant, run_seed, summarize, write_table
from .aim import AimConfig, pretrain_aim
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import NumericError, ValidationError
from .graph import SkeletonGraph, resolve_graph
from .network import export_feature_responses
from .training import (evaluate, prepare_tensors, read_model_checkpoint, sub_seeds,
                       train_protocol)

log = logging.getLogger("asgcn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ----------------------------------------------------------------- helpers

def _emit(obj: Any) -> None:
    print(json.dumps(obj, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, torch.Tensor):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def _require_file(path: Optional[str], what: str = "dataset") -> Path:
    if path is None:
        raise ValidationError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _load(path, graph: SkeletonGraph, center: bool = True):
    return load_dataset(_require_file(path), graph, center=center)


def _check_labels(dataset, num_classes: int, path) -> None:
    bad = [s.sample_id for s in dataset if s.label is not None and not 0 <= s.label < num_classes]
    if bad:
        raise ValidationError(f"{path}: {len(bad)} samples have labels outside the model's "
                              f"{num_classes} classes (first: {bad[0]})")


def _dtype_of(meta) -> torch.dtype:
    return torch.float64 if meta.get("dtype", "float64") == "float64" else torch.float32


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with [data], [model] and [train] tables")
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="default set (paper or toy)")
    p.add_argument("--out", help="output directory")
    for sec, rows in C.field_help().items():
        g = p.add_argument_group(f"[{sec}] fields")
        for name, kind, default in rows:
            flag = "--" + name.replace("_", "-")
            dest = f"{sec}.{name}"
            if kind == "bool":
                g.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None,
                               help=f"{sec}.{name} (default {default})")
            else:
                g.add_argument(flag, dest=dest, default=None, metavar="PATH" if "Optional" in kind else kind.upper(),
                               help=f"{sec}.{name} (default {default})")
    p.add_argument("--order", dest="model.L", default=None, metavar="INT", help="alias of --L")


def _cli_values(args) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in vars(args).items():
        if value is None or "." not in key:
            continue
        sec, name = key.split(".", 1)
        out.setdefault(sec, {})[name] = value
    for key in ("preset", "out"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    return out


def _resolve(args) -> C.RunConfig:
    file_values = C.read_toml(args.config) if args.config else {}
    return C.resolve_config(file_values, _cli_values(args))


# ---------------------------------------------------------------- commands

def cmd_pretrain_aim(args) -> int:
    cfg = _resolve(args)
    graph = resolve_graph(cfg.data.graph)
    train = _load(cfg.data.train, graph, cfg.data.center)
    if not train:
        raise ValidationError("training set is empty")
    t = cfg.train
    aim_cfg = cfg.aim_config()
    dtype = torch.float64 if t.dtype == "float64" else torch.float32
    enc, dec, curve = pretrain_aim(train, aim_cfg, t.aim_epochs, t.aim_lr, t.batch_size,
                                   sub_seeds(t.seed)["aim"], dtype, horizon=cfg.model.horizon)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    tensors.update({f"decoder.{k}": v for k, v in dec.state_dict().items()})
    meta = {"aim": dataclasses.asdict(aim_cfg), "curve": curve, "seed": t.seed,
            "optimizer": {"kind": "adam", "lr": t.aim_lr}, "config": cfg.to_dict()}
    save_checkpoint(out / "aim.ckpt", tensors, meta)
    (out / "aim_log.json").write_text(json.dumps({"curve": curve}, indent=2))
    _emit({"checkpoint": str(out / "aim.ckpt"), "aim_loss": curve})
    return EXIT_OK


def _read_aim(path, aim_cfg: AimConfig) -> dict:
    tensors, meta = load_checkpoint(_require_file(path, "AIM checkpoint"))
    if meta.get("aim") != dataclasses.asdict(aim_cfg):
        raise ValidationError(f"{path}: AIM configuration differs from the run configuration")
    strip = lambda pre: {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
    return {"encoder": strip("encoder."), "decoder": strip("decoder.")}


def cmd_train(args) -> int:
    cfg = _resolve(args)
    graph = resolve_graph(cfg.data.graph)
    model_cfg = cfg.model_config()
    aim_cfg = cfg.aim_config()
    train = _load(cfg.data.train, graph, cfg.data.center)
    if not train:
        raise ValidationError("training set is empty")
    val = _load(cfg.data.val, graph, cfg.data.center) if cfg.data.val else []
    for ds, path in ((train, cfg.data.train), (val, cfg.data.val)):
        _check_labels(ds, model_cfg.num_classes, path)
    aim_state = _read_aim(args.from_aim, aim_cfg) if args.from_aim else None
    res = train_protocol(graph, train, val, model_cfg, aim_cfg, cfg.train_config(), cfg.out,
                         aim_state=aim_state, resume=args.resume)
    out = Path(cfg.out)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    report = {"out": str(out), "best_top1": res["best_top1"]}
    report_set = cfg.data.test or cfg.data.val
    if report_set:
        ds = _load(report_set, graph, cfg.data.center)
        _check_labels(ds, model_cfg.num_classes, report_set)
        ev = evaluate(res["model"], prepare_tensors(ds, model_cfg, aim_cfg, res["model"].s_kernels.dtype))
        report.update(split="test" if cfg.data.test else "val", top1=ev["top1"], top5=ev["top5"])
    _emit(report)
    return EXIT_OK


def _model_and_data(args):
    model, meta, _ = read_model_checkpoint(_require_file(args.ckpt, "checkpoint"))
    graph = SkeletonGraph.from_dict(meta["graph"])
    data = _load(args.data, graph)
    if not data:
        raise ValidationError(f"{args.data}: dataset is empty")
    return model, meta, graph, data


def _usable(model, data):
    """Sequences long enough for history + horizon; the rest are skipped."""
    need = model.cfg.horizon + 1
    keep = [s for s in data if s.valid_frames >= need]
    skipped = len(data) - len(keep)
    if skipped:
        log.warning("skipping %d sequences shorter than %d frames", skipped, need)
    if not keep:
        raise ValidationError(f"no sequence has the {need} frames needed")
    return keep, skipped


def cmd_eval(args) -> int:
    model, meta, graph, data = _model_and_data(args)
    _check_labels(data, model.cfg.num_classes, args.data)
    if any(s.label is None for s in data):
        raise ValidationError(f"{args.data}: evaluation needs labelled samples")
    data, skipped = _usable(model, data)
    ev = evaluate(model, prepare_tensors(data, model.cfg, model.aim_cfg, _dtype_of(meta)))
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    cpath = out / "confusion.json"
    cpath.write_text(json.dumps({"confusion": ev["confusion"].tolist()}))
    _emit({"top1": ev["top1"], "top5": ev["top5"], "loss": ev["loss_recog"],
           "confusion": str(cpath), "samples": len(data), "skipped": skipped})
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta, graph, data = _model_and_data(args)
    if model.pred_head is None:
        raise ValidationError("checkpoint has no prediction head")
    if args.horizon != model.cfg.horizon:
        raise ValidationError(f"model predicts {model.cfg.horizon} frames, --horizon is {args.horizon}")
    data, skipped = _usable(model, data)
    tensors = prepare_tensors(data, model.cfg, model.aim_cfg, _dtype_of(meta))
    ev = evaluate(model, tensors)
    pred, target = ev["pred"], tensors["target"]
    per_frame = ((pred - target) ** 2).mean(dim=(1, 2))
    with open(args.out, "w") as fh:
        for s, p, t, m in zip(data, pred, target, per_frame):
            rec = {"id": s.sample_id, "sample_id": s.sample_id, "label": s.label, "n": s.n,
                   "t_valid": int(p.shape[-1]), "data": p.tolist(), "pred": p.tolist(),
                   "target": t.tolist(), "mse_per_frame": m.tolist()}
            fh.write(json.dumps(rec) + "\n")
    _emit({"out": args.out, "mean_mse": float(per_frame.mean()), "samples": len(data), "skipped": skipped})
    return EXIT_OK


def _inputs(model, meta, data):
    data, _ = _usable(model, data)
    return data, prepare_tensors(data, model.cfg, model.aim_cfg, _dtype_of(meta))


def cmd_export_links(args) -> int:
    model, meta, graph, data = _model_and_data(args)
    if not model.uses_links:
        raise ValidationError("checkpoint was trained without A-links")
    data, t = _inputs(model, meta, data)
    with torch.no_grad():
        model.eval()
        a = model.infer_links(t["clips"])
    with open(args.out, "w") as fh:
        for s, probs in zip(data, a):
            hits = torch.nonzero(probs[..., 1:] > args.threshold).tolist()
            edges = [[i, j, c + 1, float(probs[i, j, c + 1])] for i, j, c in hits]
            rec = {"sample_id": s.sample_id, "label": s.label, "threshold": args.threshold,
                   "probs": probs.tolist(), "threshold_edges": edges}
            fh.write(json.dumps(rec) + "\n")
    _emit({"out": args.out, "samples": len(data)})
    return EXIT_OK


def cmd_export_features(args) -> int:
    model, meta, graph, data = _model_and_data(args)
    data, t = _inputs(model, meta, data)
    with torch.no_grad():
        model.eval()
        feats = model(t["x"], t["clips"])["features"]
    resp = export_feature_responses(feats)
    with open(args.out, "w") as fh:
        for s, r in zip(data, resp):
            fh.write(json.dumps({"sample_id": s.sample_id, "label": s.label,
                                 "shape": list(r.shape), "response": r.tolist()}) + "\n")
    _emit({"out": args.out, "samples": len(data)})
    return EXIT_OK


SWEEP_AXES = {"links": str, "L": int, "C": int, "P0": float, "pred": None}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValidationError(f"cannot read {v!r} as a boolean")


def sweep_variants(axes: Dict[str, list]) -> List[Variant]:
    """Cartesian product of the sweep axes over the default AS-L2 cell."""
    unknown = set(axes) - set(SWEEP_AXES)
    if unknown:
        raise ValidationError(f"unknown sweep axes {sorted(unknown)}; allowed {sorted(SWEEP_AXES)}")
    names = list(axes)
    out = []
    for combo in itertools.product(*(axes[k] for k in names)):
        kw = {}
        for k, v in zip(names, combo):
            if k == "pred":
                kw["alpha"] = 1.0 if _parse_bool(v) else 0.0
            else:
                kw[k] = SWEEP_AXES[k](v)
        label = ",".join(f"{k}={v}" for k, v in zip(names, combo)) or "default"
        out.append(Variant(label, **kw))
    return out


def cmd_ablate(args) -> int:
    file_values = C.read_toml(args.config) if args.config else {}
    unknown = set(file_values) - {"bench", "sweep"}
    if unknown:
        raise ValidationError(f"unknown ablation config tables {sorted(unknown)}")
    bench_kw = dict(file_values.get("bench", {}))
    axes = {k: list(v) for k, v in file_values.get("sweep", {}).items()}
    for spec in args.axis or []:
        if "=" not in spec:
            raise ValidationError(f"--axis expects name=v1,v2; got {spec!r}")
        name, values = spec.split("=", 1)
        axes[name] = values.split(",")
    for key in ("seeds", "samples_per_class", "epochs", "aim_epochs"):
        v = getattr(args, key)
        if v is not None:
            bench_kw[key] = v
    known = {f.name for f in dataclasses.fields(BenchConfig)}
    if set(bench_kw) - known:
        raise ValidationError(f"unknown [bench] keys {sorted(set(bench_kw) - known)}")
    if "seeds" in bench_kw:
        s = bench_kw["seeds"]
        bench_kw["seeds"] = tuple(int(x) for x in (s.split(",") if isinstance(s, str) else s))
    bench_kw["timing"] = False
    bench = BenchConfig(**bench_kw)
    variants = sweep_variants(axes) if axes else [Variant("S-L1", "s", 1), Variant("AS-L2")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = [], []
    for seed in bench.seeds:
        for v in variants:
            try:
                rows.extend(run_seed(bench, seed, [v], out))
            except Exception as exc:  # a failed cell is recorded, the sweep goes on
                failures.append({"seed": seed, "variant": v.name, "error": f"{type(exc).__name__}: {exc}"})
                log.error("cell %s seed %d failed: %s", v.name, seed, exc)
    for r in rows:
        r.pop("seconds", None)
    write_table(rows, out)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2))
    _emit({"out": str(out), "cells": len(rows), "failures": len(failures),
           "mean_test_top1": summarize(rows) if rows else {}})
    return EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asgcn", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-aim", help="warm up the A-link inference module")
    _add_config_flags(s)
    s.set_defaults(func=cmd_pretrain_aim)

    s = sub.add_parser("train", help="joint recognition and prediction training")
    _add_config_flags(s)
    s.add_argument("--from-aim", help="AIM checkpoint from pretrain-aim (skips the warm-up)")
    s.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                   help="continue from OUT/last.ckpt when present")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "top-1/top-5 and confusion matrix"),
                                 ("predict", cmd_predict, "forecast the last frames of each sequence"),
                                 ("export-links", cmd_export_links, "per-sample A-link probabilities"),
                                 ("export-features", cmd_export_features, "per-joint feature responses")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--ckpt", required=True, help="model checkpoint")
        s.add_argument("--data", required=True, help="JSON-lines dataset")
        s.add_argument("--out", required=name != "eval", help="output file (eval: directory)")
        if name == "predict":
            s.add_argument("--horizon", type=int, default=10)
        if name == "export-links":
            s.add_argument("--threshold", type=float, default=0.9)
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", help="desk-scale link / order / C / P0 / prediction sweeps")
    s.add_argument("--config", help="TOML with [bench] and [sweep] tables")
    s.add_argument("--axis", action="append", help="sweep axis, e.g. links=s,as or L=1,2 (repeatable)")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--aim-epochs", dest="aim_epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_INVALID
    if isinstance(exc, OSError):
        return EXIT_IO
    return getattr(exc, "exit_code", 1)


def main(argv: Optional[List[str]] = None) -> int:
    threads = os.environ.get("ASGCN_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code == 1:
            raise
        err = {"error": str(exc), "type": type(exc).__name__, "exit_code": code}
        print(json.dumps(err), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
