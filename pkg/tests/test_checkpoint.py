import struct

import numpy as np
import pytest

from persona.checkpoint import (Checkpoint, from_bytes, load_checkpoint, pack_model, prototype_set_checkpoint,
                                prototype_set_from, save_checkpoint, to_bytes, unpack_model)
from persona.errors import ChecksumError, IncompatibleVersionError
from persona.prototypes import PartitionMap, dynamic_assign


def _windows(run, n=100):
    ws = run.data.train
    return [ws.window(i) for i in np.linspace(0, len(ws) - 1, n).astype(int)]


def test_save_load_save_is_byte_identical(tiny_run, tmp_path):
    ckpt = prototype_set_checkpoint(tiny_run.protoset, {"seed": 0})
    a = save_checkpoint(tmp_path / "a.ckpt", ckpt)
    b = save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


def test_float64_round_trip_preserves_assignment(tiny_run):
    back = prototype_set_from(from_bytes(to_bytes(prototype_set_checkpoint(tiny_run.protoset, precision="float64"))))
    assert back.checksum() == tiny_run.protoset.checksum()
    for w in _windows(tiny_run):
        a, b = dynamic_assign(tiny_run.protoset, w), dynamic_assign(back, w)
        assert a.chosen_group == b.chosen_group and a.norms == b.norms


def test_float32_reload_is_stable(tiny_run):
    once = prototype_set_from(from_bytes(to_bytes(prototype_set_checkpoint(tiny_run.protoset))))
    twice = prototype_set_from(from_bytes(to_bytes(prototype_set_checkpoint(once))))
    agree = 0
    for w in _windows(tiny_run):
        a, b = dynamic_assign(once, w), dynamic_assign(twice, w)
        assert a.chosen_group == b.chosen_group and a.norms == b.norms
        agree += a.chosen_group == dynamic_assign(tiny_run.protoset, w).chosen_group
    assert agree >= 98


def test_partition_survives(tiny_run):
    back = from_bytes(to_bytes(prototype_set_checkpoint(tiny_run.protoset)))
    assert np.array_equal(back.partition.assignments, tiny_run.partition.assignments)
    assert np.allclose(back.partition.centroids, tiny_run.partition.centroids, atol=1e-6)


def test_model_round_trip(tiny_run):
    blobs, meta = pack_model(tiny_run.model)
    back = unpack_model(blobs, meta)
    assert back.frozen and back.spec == tiny_run.model.spec
    assert back.backbone_checksum() == tiny_run.model.backbone_checksum()


def test_truncation_detected(tiny_run):
    raw = to_bytes(prototype_set_checkpoint(tiny_run.protoset))
    for cut in (10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(ChecksumError):
            from_bytes(raw[:cut])


def test_bit_flip_detected():
    raw = bytearray(to_bytes(Checkpoint({"w": np.ones((2, 2))})))
    raw[-40] ^= 1
    with pytest.raises(ChecksumError):
        from_bytes(bytes(raw))


def test_version_checked_before_checksum():
    raw = bytearray(to_bytes(Checkpoint({"w": np.ones(3)})))
    struct.pack_into("<H", raw, 4, 99)
    with pytest.raises(IncompatibleVersionError):
        from_bytes(bytes(raw))


def test_bad_magic():
    raw = to_bytes(Checkpoint())
    with pytest.raises(ChecksumError):
        from_bytes(b"NOPE" + raw[4:])


def test_empty_state_is_valid(tmp_path):
    p = save_checkpoint(tmp_path / "e.ckpt", Checkpoint())
    back = load_checkpoint(p)
    assert back.blobs == {} and back.partition is None and back.config == {}


def test_blob_values_and_metadata(tmp_path):
    part = PartitionMap(np.array([0, 1, 1]), np.array([[0.5, 1.0], [2.0, -1.0]]), [3.0, 2.5])
    ckpt = Checkpoint({"a/b": np.arange(6.0).reshape(2, 3)}, {"x": 1}, {"note": "hi"}, part, "float64")
    back = load_checkpoint(save_checkpoint(tmp_path / "c.ckpt", ckpt))
    assert np.array_equal(back.blobs["a/b"], ckpt.blobs["a/b"])
    assert back.config == {"x": 1} and back.meta == {"note": "hi"}
    assert back.partition.inertia_trace == [3.0, 2.5]
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_unknown_precision():
    with pytest.raises(ValueError):
        Checkpoint(precision="float16")
