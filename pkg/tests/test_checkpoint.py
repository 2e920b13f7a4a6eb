import struct

import pytest
import torch

from ticketgan.checkpoint import (
    BadMagicError,
    Checkpoint,
    CheckpointError,
    ConfigHashMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    read_checkpoint,
    write_checkpoint,
)
from ticketgan.models import ModelSpec, build_gan
from ticketgan.sparsity import MaskPair, global_magnitude_prune, ones_mask
from ticketgan.training import TrainConfig, TrainState, train_step


def _checkpoint(masked=True):
    m = build_gan(ModelSpec("mlp_gan_2d", width=8, depth=2), 0)
    masks = MaskPair(global_magnitude_prune(m.theta, ones_mask(m.theta), 0.3),
                     global_magnitude_prune(m.phi, ones_mask(m.phi), 0.3)) if masked else None
    state = TrainState.create(m.theta, m.phi, 1)
    data = torch.randn(32, 2, dtype=torch.float64)
    for _ in range(3):
        train_step(state, data, m.gen, m.disc, TrainConfig(iterations=3, batch_size=8), masks=masks)
    return Checkpoint(state.iteration, state.theta, state.phi, m.theta, m.phi, state.opt_g, state.opt_d,
                      state.rng.get_state(), state.aug_rng.get_state(), "abc123",
                      masks.g if masks else None, masks.d if masks else None, extra={"note": 1})


@pytest.mark.parametrize("masked", [True, False])
def test_round_trip_bit_exact(tmp_path, masked):
    ck = _checkpoint(masked)
    write_checkpoint(tmp_path / "c.tkgn", ck)
    back = read_checkpoint(tmp_path / "c.tkgn", expected_hash="abc123")
    assert back.iteration == ck.iteration and back.extra == ck.extra
    for a, b in [(ck.theta, back.theta), (ck.phi, back.phi), (ck.theta0, back.theta0), (ck.opt_g.m, back.opt_g.m),
                 (ck.opt_d.v, back.opt_d.v)]:
        assert list(a) == list(b)
        for k in a:
            assert a[k].dtype == b[k].dtype and torch.equal(a[k].detach(), b[k])
    assert torch.equal(ck.rng_state, back.rng_state) and torch.equal(ck.aug_rng_state, back.aug_rng_state)
    assert (back.opt_g.step, back.opt_d.step) == (ck.opt_g.step, ck.opt_d.step)
    if masked:
        assert all(torch.equal(ck.mask_g[k], back.mask_g[k]) for k in ck.mask_g)
    else:
        assert back.mask_g is None
    write_checkpoint(tmp_path / "d.tkgn", back)
    assert (tmp_path / "c.tkgn").read_bytes() == (tmp_path / "d.tkgn").read_bytes()


def test_error_kinds(tmp_path):
    path = tmp_path / "c.tkgn"
    write_checkpoint(path, _checkpoint())
    raw = path.read_bytes()
    (tmp_path / "magic.tkgn").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagicError):
        read_checkpoint(tmp_path / "magic.tkgn")
    (tmp_path / "v99.tkgn").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(VersionMismatchError) as err:
        read_checkpoint(tmp_path / "v99.tkgn")
    assert "99" in str(err.value) and "1" in str(err.value)
    for cut in (3, 10, 100, len(raw) - 1):
        (tmp_path / "short.tkgn").write_bytes(raw[:cut])
        with pytest.raises((TruncatedCheckpointError, BadMagicError)):
            read_checkpoint(tmp_path / "short.tkgn")
    with pytest.raises(ConfigHashMismatchError):
        read_checkpoint(path, expected_hash="other")
    assert issubclass(VersionMismatchError, CheckpointError)


def test_write_refuses_nonzero_masked_entries(tmp_path):
    ck = _checkpoint()
    name = next(iter(ck.mask_g))
    bad = ck.theta[name].detach().clone()
    bad[~ck.mask_g[name]] = 1.0
    ck.theta[name] = bad
    with pytest.raises(CheckpointError):
        write_checkpoint(tmp_path / "c.tkgn", ck)


def test_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        write_checkpoint(tmp_path / "nope" / "c.tkgn", _checkpoint())
