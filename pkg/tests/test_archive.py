import struct

import numpy as np
import pytest
import torch

from referee import checkpoint as ckpt
from referee.archive import (
    FormatError,
    VersionError,
    decode_container,
    decode_descriptors,
    encode_container,
    encode_descriptors,
    load_descriptors,
    save_descriptors,
)
from referee.core import StyleDescriptors
from referee.t2s import build_model
from referee.utils import make_adam

from conftest import small_t2s_config


def _desc(rng, phones=True):
    d = np.array([2, 1, 3])
    ppg = rng.random((6, 4)).astype(np.float32)
    ppg /= ppg.sum(1, keepdims=True)
    return StyleDescriptors(
        ppg=ppg,
        pitch=rng.standard_normal(3),
        energy=rng.standard_normal(3),
        durations=d,
        voicing=[True, False, True],
        style_id=5,
        phones=np.array([0, 2, 1]) if phones else None,
        pitch_stats=(5.25, 0.5),
        energy_stats=(-3.0, 1.25),
    )


def test_descriptor_round_trip_bit_exact(rng):
    d = _desc(rng)
    blob = encode_descriptors(d)
    back = decode_descriptors(blob)
    assert encode_descriptors(back) == blob
    np.testing.assert_array_equal(back.ppg, d.ppg)
    np.testing.assert_array_equal(back.voicing, d.voicing)
    assert back.style_id == 5
    assert back.pitch_stats == (5.25, 0.5)


def test_descriptor_layout(rng):
    blob = encode_descriptors(_desc(rng, phones=False))
    assert blob[:4] == b"RFDA"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    (count,) = struct.unpack("<I", blob[8:12])
    assert count == 8
    # first entry is the ppg matrix: name, dtype 0, ndim 2, dims
    (nlen,) = struct.unpack("<H", blob[12:14])
    assert blob[14 : 14 + nlen] == b"ppg"
    off = 14 + nlen
    assert blob[off] == 0 and blob[off + 1] == 2
    assert struct.unpack("<II", blob[off + 2 : off + 10]) == (6, 4)


def test_descriptor_file_io(tmp_path, rng):
    d = _desc(rng)
    save_descriptors(tmp_path / "a.rfda", d)
    assert encode_descriptors(load_descriptors(tmp_path / "a.rfda")) == encode_descriptors(d)


def test_bad_magic_and_version(rng):
    blob = encode_descriptors(_desc(rng))
    with pytest.raises(FormatError):
        decode_descriptors(b"XXXX" + blob[4:])
    with pytest.raises(VersionError) as exc:
        decode_descriptors(blob[:4] + struct.pack("<I", 7) + blob[8:])
    assert exc.value.expected == 1 and exc.value.found == 7


def test_truncated_archive(rng):
    blob = encode_descriptors(_desc(rng))
    with pytest.raises(FormatError):
        decode_descriptors(blob[:-3])


def test_container_header_only():
    blob = encode_container(b"ABC", 1, {"k": [1, 2]}, {"x": np.arange(3, dtype=np.int64)})
    meta, tensors = decode_container(blob, b"ABC", 1, header_only=True)
    assert meta == {"k": [1, 2]} and tensors == {}
    meta, tensors = decode_container(blob, b"ABC", 1)
    np.testing.assert_array_equal(tensors["x"], [0, 1, 2])


# ---------------------------------------------------------------- checkpoints


def _trained_model():
    model = build_model(small_t2s_config(2), seed=3)
    opt = make_adam(model.parameters(), 1e-3)
    loss = sum((p**2).sum() for p in model.parameters())
    loss.backward()
    opt.step()
    return model, opt


def test_checkpoint_round_trip_bit_identical(tmp_path):
    model, opt = _trained_model()
    blob = ckpt.encode_checkpoint(ckpt.T2S_MAGIC, {"step": 1}, {"model": model}, {"adam": opt})
    (tmp_path / "m.ckpt").write_bytes(blob)
    meta, tensors = ckpt.read_checkpoint(tmp_path / "m.ckpt", ckpt.T2S_MAGIC)
    fresh = build_model(small_t2s_config(2), seed=99)
    ckpt.load_module_state(fresh, tensors, "model")
    opt2 = make_adam(fresh.parameters(), 1e-3)
    ckpt.optimizer_from_arrays(opt2, meta["optimizers"]["adam"], tensors, "optim/adam")
    again = ckpt.encode_checkpoint(ckpt.T2S_MAGIC, {"step": 1}, {"model": fresh}, {"adam": opt2})
    assert again == blob
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), fresh.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)


def test_checkpoint_magic_and_version(tmp_path):
    model, _ = _trained_model()
    ckpt.save_checkpoint(tmp_path / "m.ckpt", ckpt.T2S_MAGIC, {}, {"model": model})
    with pytest.raises(FormatError):
        ckpt.read_checkpoint(tmp_path / "m.ckpt", ckpt.S2W_MAGIC)
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[5:9] = struct.pack("<I", 2)
    (tmp_path / "v2.ckpt").write_bytes(bytes(raw))
    with pytest.raises(VersionError) as exc:
        ckpt.read_checkpoint(tmp_path / "v2.ckpt", ckpt.T2S_MAGIC, header_only=True)
    assert "expected version 1" in str(exc.value) and "found 2" in str(exc.value)
