import numpy as np
import pytest

from deskdp.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from deskdp.config import parse_config
from deskdp.errors import CheckpointError, CheckpointFormatError, DigestError
from deskdp.precision import LossScaleState
from deskdp.trainer import initial_state

CFG = parse_config("model: {}\ntrain: {steps: 3}\n")


@pytest.fixture
def state():
    s = initial_state(CFG)
    s.velocity = {k: type(v)(np.random.default_rng(1).normal(size=v.shape), v.dtype) for k, v in s.velocity.items()}
    s.loss_scale = LossScaleState(scale=512.0, good_steps=17)
    s.step = 42
    return s


def test_roundtrip_is_bitwise(tmp_path, state):
    p = tmp_path / "a.ckpt"
    save_checkpoint(state, p)
    got = load_checkpoint(p)
    assert got.step == 42 and got.loss_scale == state.loss_scale and got.config == CFG
    for group in ("master", "velocity"):
        a, b = getattr(state, group), getattr(got, group)
        assert set(a) == set(b)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert p.read_bytes()[:8] == MAGIC


def test_corrupt_files(tmp_path, state):
    p = tmp_path / "a.ckpt"
    save_checkpoint(state, p)
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.ckpt"
    for mutate in (lambda r: r.__setitem__(0, ord("X")),  # magic
                   lambda r: r.__setitem__(8, 9),  # version
                   lambda r: r.__setitem__(40, r[40] ^ 1),  # header byte
                   lambda r: r.__setitem__(len(r) - 100, r[len(r) - 100] ^ 1)):  # payload byte
        r = bytearray(raw)
        mutate(r)
        bad.write_bytes(bytes(r))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(bad)
    bad.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    bad.write_bytes(b"")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_digest_mismatch_needs_force(tmp_path, state):
    p = tmp_path / "a.ckpt"
    save_checkpoint(state, p)
    other = CFG.replace(train={"lr": 0.5})
    with pytest.raises(DigestError):
        load_checkpoint(p, expect=other)
    assert load_checkpoint(p, expect=other, force=True).config == other
    assert load_checkpoint(p, expect=CFG.replace(output={"dir": "x"})).step == 42
