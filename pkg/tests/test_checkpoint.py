import hashlib
import struct

import numpy as np
import pytest

from conftest import TINY_RENDER, tiny_model
from genvox.checkpoint import (MAGIC, load_checkpoint, read_checkpoint, resume_run, save_checkpoint, save_run,
                               write_checkpoint)
from genvox.errors import (BadMagicError, CheckpointError, ShapeMismatchError, TrailingDataError,
                           TruncatedCheckpointError, UnsupportedVersionError)
from genvox.model import SharedState
from genvox.trainer import TrainConfig, finetune, pretrain


@pytest.fixture(scope="module")
def run(tiny_data):
    model = tiny_model([d.skeleton for d in tiny_data])
    return pretrain(tiny_data[:2], TrainConfig(iterations=3, render=TINY_RENDER), model)


@pytest.fixture
def ckpt(run, tmp_path):
    return save_run(run, tmp_path / "a.gnvx")


def test_round_trip_is_bitwise(run, ckpt):
    ck = load_checkpoint(ckpt)
    assert ck.model == run.shared.config and ck.iteration == 3
    for k, v in run.shared.store.items():
        assert ck.shared.store[k].dtype == v.dtype
        np.testing.assert_array_equal(ck.shared.store[k], v)
    for a, b in zip(run.subjects, ck.subjects):
        assert a.subject_id == b.subject_id
        np.testing.assert_array_equal(a.skeleton.rest_joints, b.skeleton.rest_joints)
        for k, v in a.store.items():
            np.testing.assert_array_equal(b.store[k], v)
    assert ck.adam_shared.step == run.adam_shared.step
    for k, v in run.adam_shared.v.items():
        np.testing.assert_array_equal(ck.adam_shared.v[k], v)
    assert ck.rng_state == run.rng.bit_generator.state


def test_saving_twice_gives_identical_bytes(run, tmp_path):
    a = save_run(run, tmp_path / "a.gnvx").read_bytes()
    b = save_run(run, tmp_path / "b.gnvx").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    assert a[:4] == MAGIC and struct.unpack("<I", a[4:8])[0] == 1


def test_bad_magic(ckpt):
    buf = bytearray(ckpt.read_bytes())
    buf[:4] = b"NOPE"
    ckpt.write_bytes(bytes(buf))
    with pytest.raises(BadMagicError):
        load_checkpoint(ckpt)


def test_unsupported_version(ckpt):
    buf = bytearray(ckpt.read_bytes())
    buf[4:8] = struct.pack("<I", 99)
    ckpt.write_bytes(bytes(buf))
    with pytest.raises(UnsupportedVersionError, match="99"):
        load_checkpoint(ckpt)


@pytest.mark.parametrize("keep", [3, 9, 200, -1])
def test_truncation(ckpt, keep):
    buf = ckpt.read_bytes()
    ckpt.write_bytes(buf[:keep] if keep > 0 else buf[:keep])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(ckpt)


def test_trailing_bytes_rejected(ckpt):
    ckpt.write_bytes(ckpt.read_bytes() + b"\0")
    with pytest.raises(TrailingDataError):
        load_checkpoint(ckpt)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="checkpoint not found"):
        load_checkpoint(tmp_path / "nope.gnvx")


def test_low_level_sections(tmp_path):
    arrs = [("a", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b", np.array(2.5))]
    meta, secs = read_checkpoint(write_checkpoint(tmp_path / "x", {"k": 1}, arrs))
    assert meta["k"] == 1 and secs["b"].shape == () and secs["b"].dtype == np.float64
    np.testing.assert_array_equal(secs["a"], arrs[0][1])
    with pytest.raises(CheckpointError):
        write_checkpoint(tmp_path / "y", {}, [("i", np.arange(3))])
    with pytest.raises(CheckpointError):
        write_checkpoint(tmp_path / "y", {}, arrs + arrs)


def test_bone_count_mismatch_names_section(tiny_data, tmp_path):
    eight = tiny_model([d.skeleton for d in tiny_data], K=8)
    twelve = eight.replace(K=12)

    path = save_checkpoint(tmp_path / "k8.gnvx", SharedState.create(eight, 0))
    with pytest.raises(ShapeMismatchError, match=r"shared/.*checkpoint shape .*config expects"):
        load_checkpoint(path, expected=twelve)


def test_resume_is_exact(tiny_data, run, tmp_path):
    model = run.shared.config
    cfg = TrainConfig(iterations=6, render=TINY_RENDER, seed=5)
    full = pretrain(tiny_data[:2], cfg, model)
    part = pretrain(tiny_data[:2], cfg, model, run=False)
    part.run(4, log_every=0)
    path = save_run(part, tmp_path / "mid.gnvx")
    resumed = resume_run(path, tiny_data[:2])
    resumed.run(2, log_every=0)
    assert resumed.iteration == full.iteration == 6
    assert [r.loss for r in resumed.history] == [r.loss for r in full.history[4:]]
    for k, v in full.shared.store.items():
        np.testing.assert_array_equal(resumed.shared.store[k], v)
    for a, b in zip(full.subjects, resumed.subjects):
        for k, v in a.store.items():
            np.testing.assert_array_equal(b.store[k], v)


def test_resume_rejects_wrong_dataset_count(ckpt, tiny_data):
    with pytest.raises(CheckpointError):
        resume_run(ckpt, tiny_data[:1])


def test_pretrained_file_untouched_by_finetune(run, ckpt, tiny_data):
    digest = hashlib.sha256(ckpt.read_bytes()).hexdigest()
    shared = load_checkpoint(ckpt).shared
    finetune(shared, tiny_data[2], TrainConfig(iterations=2, render=TINY_RENDER), model=shared.config)
    assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == digest
