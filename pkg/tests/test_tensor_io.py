"""Named-tensor container: round trips and corruption errors."""

import json
import struct

import numpy as np
import pytest

from blocklm.errors import (DuplicateNameError, TensorFileError, TruncatedFileError,
                            UnknownDtypeError)
from blocklm.model import build_model, load_checkpoint, save_checkpoint
from blocklm.tensor_io import MAGIC, load_tensors, save_tensors
from conftest import variant_config


def test_empty_set_round_trips(tmp_path):
    path = tmp_path / "empty.blkt"
    save_tensors(path, {})
    assert load_tensors(path) == {}


def test_single_tensor_bit_exact(tmp_path, rng):
    path = tmp_path / "one.blkt"
    arr = rng.normal(size=(2, 2)).astype(np.float32)
    save_tensors(path, {"w": arr})
    back = load_tensors(path)
    assert back["w"].dtype == np.float32
    assert back["w"].tobytes() == arr.tobytes()


def test_mixed_dtypes_and_order(tmp_path, rng):
    path = tmp_path / "mixed.blkt"
    tensors = {
        "ids": rng.integers(0, 100, size=(3, 4)).astype(np.int32),
        "mask": (rng.random((3, 4)) > 0.5).astype(np.uint8),
        "w": rng.normal(size=(4,)).astype(np.float32),
    }
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == ["ids", "mask", "w"]
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])


def test_duplicate_name_on_save(tmp_path):
    with pytest.raises(DuplicateNameError):
        save_tensors(tmp_path / "d.blkt", [("a", np.zeros(1, np.float32)),
                                           ("a", np.zeros(1, np.float32))])


def test_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.blkt"
    save_tensors(path, {"w": rng.normal(size=(8, 8)).astype(np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-17])
    with pytest.raises(TruncatedFileError, match="truncated"):
        load_tensors(path)


def test_unknown_dtype_tag(tmp_path):
    manifest = json.dumps([{"name": "w", "dtype": "f64", "shape": [1], "offset": 0}])
    blob = MAGIC + struct.pack("<II", 1, len(manifest)) + manifest.encode() + b"\x00" * 8
    path = tmp_path / "u.blkt"
    path.write_bytes(blob)
    with pytest.raises(UnknownDtypeError, match="f64"):
        load_tensors(path)


def test_duplicate_name_on_load(tmp_path):
    manifest = json.dumps([
        {"name": "w", "dtype": "u8", "shape": [1], "offset": 0},
        {"name": "w", "dtype": "u8", "shape": [1], "offset": 1},
    ])
    blob = MAGIC + struct.pack("<II", 1, len(manifest)) + manifest.encode() + b"\x00\x00"
    path = tmp_path / "dup.blkt"
    path.write_bytes(blob)
    with pytest.raises(DuplicateNameError):
        load_tensors(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "bad.blkt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(TensorFileError, match="magic"):
        load_tensors(path)
    path.write_bytes(MAGIC + struct.pack("<II", 9, 2) + b"[]")
    with pytest.raises(TensorFileError, match="version"):
        load_tensors(path)


def test_checkpoint_round_trip_reproduces_logits(tmp_path, rng):
    """Model save/load is bit-exact up to identical forward outputs."""
    cfg = variant_config("lookup", "prefix")
    model = build_model(cfg, seed=4)
    ids = rng.integers(0, 60, size=(2, 64)).astype(np.int32)
    mask = np.ones_like(ids, dtype=bool)
    loss_a, _ = model.forward_loss(ids, mask)
    save_checkpoint(model, tmp_path / "m.blkt")
    clone = load_checkpoint(tmp_path / "m.blkt")
    for name, p in model.params().items():
        assert clone.params()[name].data.tobytes() == p.data.tobytes(), name
    loss_b, _ = clone.forward_loss(ids, mask)
    assert loss_a.item() == loss_b.item()
