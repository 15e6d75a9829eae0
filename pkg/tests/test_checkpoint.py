"""Checkpoint container: bit-exact round trips and corruption handling."""

import numpy as np
import pytest

from conftest import SMALL, TINY
from monomoe import model as M
from monomoe.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from monomoe.training import AdamWState


def small_model(seed=5):
    m = M.MMoEModel(SMALL, seed=seed)
    M.init_visual_experts(m)
    return m


def test_roundtrip_bit_exact(tmp_path):
    model = small_model()
    path = tmp_path / "a.ckpt"
    save_checkpoint(model, path, extra={"stage": "S1.1", "step": 17})
    loaded, opt, extra = load_checkpoint(path)
    assert opt is None
    assert extra == {"stage": "S1.1", "step": 17}
    assert loaded.cfg == model.cfg
    for (na, ta, ga), (nb, tb, gb) in zip(model.parameters(), loaded.parameters()):
        assert na == nb and ga == gb
        assert np.array_equal(ta.data, tb.data)


def test_save_load_save_byte_identical(tmp_path):
    model = small_model()
    rng = np.random.default_rng(0)
    state = AdamWState(step_count=9)
    state.m["head_w"] = rng.standard_normal(model.head_w.shape).astype(np.float32)
    state.v["head_w"] = rng.random(model.head_w.shape).astype(np.float32)

    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(model, p1, optimizer=state, extra={"stage": "S2", "step": 3})
    loaded, opt, extra = load_checkpoint(p1)
    save_checkpoint(loaded, p2, optimizer=opt, extra=extra)
    assert p1.read_bytes() == p2.read_bytes()


def test_optimizer_state_roundtrip(tmp_path):
    model = small_model()
    rng = np.random.default_rng(1)
    state = AdamWState(step_count=41)
    for name in ("head_w", "layers.0.ffn_v.gate"):
        shape = model.param_by_name(name).shape
        state.m[name] = rng.standard_normal(shape).astype(np.float32)
        state.v[name] = rng.random(shape).astype(np.float32)
    path = tmp_path / "opt.ckpt"
    save_checkpoint(model, path, optimizer=state)
    _, opt, _ = load_checkpoint(path)
    assert opt.step_count == 41
    assert set(opt.m) == set(state.m)
    for name in state.m:
        assert np.array_equal(opt.m[name], state.m[name])
        assert np.array_equal(opt.v[name], state.v[name])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_corrupted_payload_rejected(tmp_path):
    model = small_model()
    path = tmp_path / "c.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_truncated_rejected(tmp_path):
    model = small_model()
    path = tmp_path / "t.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 3])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_mismatched_config_shape_diff(tmp_path):
    model = M.MMoEModel(TINY, seed=0)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(model, path)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(path, expect_config=SMALL)
    msg = str(err.value)
    assert "dim" in msg
    assert "tensor" in msg and "shape" in msg


def test_matching_expect_config_ok(tmp_path):
    model = M.MMoEModel(TINY, seed=0)
    path = tmp_path / "ok.ckpt"
    save_checkpoint(model, path)
    loaded, _, _ = load_checkpoint(path, expect_config=TINY)
    assert loaded.cfg == TINY


def test_atomic_write_leaves_no_temp(tmp_path):
    model = small_model()
    path = tmp_path / "x.ckpt"
    save_checkpoint(model, path)
    assert list(tmp_path.iterdir()) == [path]
