import json
import struct

import pytest
import torch

from asgcn.checkpoint import load_checkpoint, save_checkpoint
from asgcn.errors import ParseError


def sample_tensors(gen):
    return {"w": torch.randn(3, 4, generator=gen, dtype=torch.float64),
            "h": torch.randn(5, generator=gen).float(),
            "count": torch.tensor([3, -1], dtype=torch.int64),
            "flag": torch.tensor([True, False]),
            "scalar": torch.tensor(2.5, dtype=torch.float64)}


def test_round_trip_preserves_values_and_dtypes(tmp_path, gen):
    tensors = sample_tensors(gen)
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"epoch": 3, "nested": {"a": [1, 2]}})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"epoch": 3, "nested": {"a": [1, 2]}}
    assert set(back) == set(tensors)
    for k, t in tensors.items():
        assert back[k].dtype == t.dtype and back[k].shape == t.shape and torch.equal(back[k], t)


def test_equal_contents_give_equal_bytes(tmp_path, gen):
    tensors = sample_tensors(gen)
    reordered = dict(reversed(list(tensors.items())))
    save_checkpoint(tmp_path / "a.ckpt", tensors, {"k": 1})
    save_checkpoint(tmp_path / "b.ckpt", reordered, {"k": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_truncated_and_corrupt_files(tmp_path):
    (tmp_path / "t.ckpt").write_bytes(b"\x01\x02")
    with pytest.raises(ParseError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(struct.pack("<Q", 5) + b"{oops")
    with pytest.raises(ParseError, match="header"):
        load_checkpoint(tmp_path / "h.ckpt")


def test_unknown_version_is_rejected(tmp_path):
    blob = json.dumps({"format_version": 99, "tensors": {}, "meta": {}}).encode()
    (tmp_path / "v.ckpt").write_bytes(struct.pack("<Q", len(blob)) + blob)
    with pytest.raises(ParseError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_unsupported_dtype_is_refused(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", {"z": torch.zeros(2, dtype=torch.complex64)}, {})
