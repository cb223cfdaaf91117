"""Single-file named-tensor container.

Layout: 8-byte little-endian header length, a UTF-8 JSON header
``{"format_version", "tensors": {name: {"dtype", "shape", "offset", "nbytes"}},
"meta"}``, then the raw little-endian payloads back to back (offsets are
relative to the payload start). Tensors are written in sorted name order
so equal contents give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from .errors import ParseError

FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "bool": "|b1"}


def save_checkpoint(path, tensors: Dict[str, torch.Tensor], meta: dict) -> None:
    header = {"format_version": FORMAT_VERSION, "tensors": {}, "meta": meta}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype {dtype} for {name}")
        raw = np.ascontiguousarray(t.numpy()).astype(_DTYPES[dtype], copy=False).tobytes()
        header["tensors"][name] = {"dtype": dtype, "shape": list(t.shape), "offset": offset,
                                   "nbytes": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise ParseError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 8 + hlen
    out = {}
    for name, rec in header["tensors"].items():
        start = base + rec["offset"]
        arr = np.frombuffer(data[start:start + rec["nbytes"]], dtype=_DTYPES[rec["dtype"]])
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True)).reshape(rec["shape"])
    return out, header.get("meta", {})
