import json
import struct

import numpy as np
import pytest

from fairtl.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from fairtl.gan import GanState, LossConfig, Stage, apply_update, build_gan, discriminator_loss, negate
from fairtl.numerics import Rng


def trained_state(stage=Stage.PRETRAINED):
    s = build_gan(Rng(0), data_dim=2, latent_dim=3, g_hidden=(4, 5))
    rng = Rng(1)
    d = discriminator_loss(s, rng.normal((8, 2)), s.sample(rng.normal((8, 3))))
    s = apply_update(s, LossConfig(), d_grads=negate(d.grads))
    if stage is Stage.FAIRTLPP:
        s = GanState(s.generator, s.discriminator, s.discriminator.copy(), stage, s.opt_g, s.opt_d)
    return s


@pytest.mark.parametrize("stage", [Stage.PRETRAINED, Stage.FAIRTLPP])
def test_round_trip_is_bit_exact(tmp_path, stage):
    s = trained_state(stage)
    save_checkpoint(s, tmp_path / "m.ckpt", "hash123", 42)
    back, manifest = read_checkpoint(tmp_path / "m.ckpt")
    assert back.stage is stage
    assert back.generator.checksum() == s.generator.checksum()
    assert back.discriminator.checksum() == s.discriminator.checksum()
    if stage is Stage.FAIRTLPP:
        assert back.frozen_source.checksum() == s.frozen_source.checksum()
    np.testing.assert_array_equal(back.opt_d.m, s.opt_d.m)
    np.testing.assert_array_equal(back.opt_d.v, s.opt_d.v)
    assert back.opt_d.steps == s.opt_d.steps
    assert manifest["config_hash"] == "hash123" and manifest["seed"] == 42


def test_encoding_is_deterministic_with_fixed_metadata():
    s = trained_state()
    assert encode_checkpoint(s, "h", 1, {"x": 1}) == encode_checkpoint(s, "h", 1, {"x": 1})


@pytest.mark.parametrize("cut", [0, 10, 30, -40, -1])
def test_truncation_rejected(cut):
    blob = encode_checkpoint(trained_state())
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:cut])


def test_bit_flip_rejected():
    blob = bytearray(encode_checkpoint(trained_state()))
    blob[-100] ^= 0x01
    with pytest.raises(CheckpointError, match="digest"):
        decode_checkpoint(bytes(blob))


def test_bad_magic_and_version_rejected():
    blob = encode_checkpoint(trained_state())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + blob[8:])
    bumped = blob[:8] + struct.pack("<I", 99) + blob[12:]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bumped)


def test_header_layout():
    blob = encode_checkpoint(trained_state(), "h", 0, {})
    magic, version, mlen = struct.unpack_from("<8sIQ", blob)
    assert magic == MAGIC and version == 1
    manifest = json.loads(blob[20 : 20 + mlen])
    assert {e["name"] for e in manifest["layout"]} >= {"generator", "discriminator", "opt_g.m", "opt_d.v"}


def test_load_returns_state(tmp_path):
    save_checkpoint(trained_state(), tmp_path / "a.ckpt")
    assert isinstance(load_checkpoint(tmp_path / "a.ckpt"), GanState)
    assert not (tmp_path / "a.ckpt.tmp").exists()
