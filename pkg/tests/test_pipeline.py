import numpy as np
import pytest

from fairtl.checkpoint import save_checkpoint
from fairtl.data import AttributeSpec, build_dataset_pair, gaussian_mixture_2d, generate_base, strip_labels, union
from fairtl.gan import FreezeMask, LossConfig, Stage
from fairtl.metrics import bayes_oracle
from fairtl.numerics import Rng
from fairtl.pipeline import (
    ArchSpec,
    StageConfig,
    adapt_fairtl,
    adapt_fairtlpp,
    debias_pretrained,
    fixed_noise_gallery,
    layer_change_study,
    pretrain,
)

BINARY = AttributeSpec.single()
ARCH = ArchSpec(latent_dim=4, g_hidden=(16, 16))
FAMILY = gaussian_mixture_2d(BINARY)
ORACLE = bayes_oracle(FAMILY, BINARY)


def data(bias=(0.9, 0.1), size=400, perc=0.25, seed=0):
    base = generate_base(FAMILY, BINARY, 2 * size + 200, Rng(seed))
    pair = build_dataset_pair(base, bias, size, perc, Rng(seed + 1))
    return strip_labels(pair.d_bias), strip_labels(pair.d_ref)


def minority_share(state, seed=0, n=4000):
    z = Rng(seed).normal((n, state.latent_dim))
    return float(np.mean(ORACLE.classify(state.sample(z)) == 1))


@pytest.fixture(scope="module")
def source():
    d_bias, d_ref = data()
    return pretrain(union(d_bias, d_ref), ARCH, StageConfig(8, seed=3)).state


def test_training_refuses_labels():
    base = generate_base(FAMILY, BINARY, 50, Rng(0))
    with pytest.raises(TypeError):
        pretrain(base, ARCH, StageConfig(1))


def test_pretrain_is_deterministic():
    d_bias, _ = data()
    a = pretrain(d_bias, ARCH, StageConfig(3, seed=5)).state
    b = pretrain(d_bias, ARCH, StageConfig(3, seed=5)).state
    assert a.generator.checksum() == b.generator.checksum()
    assert a.discriminator.checksum() == b.discriminator.checksum()


def test_zero_epoch_adaptation_is_identity(source):
    _, ref = data()
    out = adapt_fairtl(source, ref, StageConfig(0, seed=1)).state
    assert out.generator.checksum() == source.generator.checksum()
    assert out.discriminator.checksum() == source.discriminator.checksum()
    assert out.stage is Stage.FAIRTL


def test_adaptation_does_not_modify_source(source):
    _, ref = data()
    before = source.generator.checksum()
    adapt_fairtlpp(source, ref, StageConfig(2, seed=1))
    assert source.generator.checksum() == before


def test_fairtlpp_reduces_to_fairtl_at_lambda_one():
    d_bias, ref = data()
    src = pretrain(union(d_bias, ref), ARCH, StageConfig(3, seed=3)).state
    cfg = StageConfig(4, LossConfig(lam=1.0), seed=9)
    traj_a, traj_b = [], []
    adapt_fairtl(src, ref, cfg, on_epoch=lambda e, s: traj_a.append(s.copy()))
    adapt_fairtlpp(src, ref, cfg, on_epoch=lambda e, s: traj_b.append(s.copy()))
    for a, b in zip(traj_a, traj_b):
        np.testing.assert_array_equal(a.generator.flat, b.generator.flat)
        np.testing.assert_array_equal(a.discriminator.flat, b.discriminator.flat)


def test_freeze_schedule_and_frozen_copy(source):
    _, ref = data()
    lower = FreezeMask.lower_layers(source.discriminator.n_layers, 2, 3)
    cfg = StageConfig(6, freeze=lower, seed=2)
    d_ref_sum = source.discriminator.checksum()
    sums = []
    rec = adapt_fairtlpp(
        source, ref, cfg,
        on_epoch=lambda e, s: sums.append(
            ([s.discriminator.layer_checksum(i) for i in range(3)], s.frozen_source.checksum())
        ),
    )
    start = [source.discriminator.layer_checksum(i) for i in range(3)]
    for epoch, (layers, frozen) in enumerate(sums):
        assert frozen == d_ref_sum
        assert (layers[0] == start[0] and layers[1] == start[1]) == (epoch < 3)
        assert layers[2] != start[2]
    assert rec.state.frozen_source.checksum() == d_ref_sum


def test_freeze_must_end_before_training_does():
    with pytest.raises(ValueError):
        StageConfig(3, freeze=FreezeMask.lower_layers(3, 2, 3))


def test_fairtl_rejects_freeze(source):
    _, ref = data()
    with pytest.raises(ValueError):
        adapt_fairtl(source, ref, StageConfig(3, freeze=FreezeMask.lower_layers(3, 2, 1)))


def test_adaptation_requires_pretrained_stage(source):
    _, ref = data()
    adapted = adapt_fairtl(source, ref, StageConfig(1)).state
    with pytest.raises(ValueError):
        adapt_fairtlpp(adapted, ref, StageConfig(1))


def test_debias_from_checkpoint_matches_in_memory(tmp_path, source):
    _, ref = data()
    save_checkpoint(source, tmp_path / "src.ckpt")
    cfg = StageConfig(3, freeze=FreezeMask.lower_layers(3, 2, 1), seed=4)
    from_disk = debias_pretrained(tmp_path / "src.ckpt", ref, "fairTL++", cfg).state
    in_memory = adapt_fairtlpp(source, ref, cfg).state
    assert from_disk.generator.checksum() == in_memory.generator.checksum()
    assert from_disk.frozen_source.checksum() == source.discriminator.checksum()


def test_gallery_contracts(source):
    g = fixed_noise_gallery(source, source, 8, Rng(0))
    np.testing.assert_array_equal(g.before, g.after)
    assert g.z_hash == fixed_noise_gallery(source, source, 8, Rng(0)).z_hash
    assert len(fixed_noise_gallery(source, source, 0, Rng(0))) == 0


def test_layer_study_rows_and_zero_control():
    d_bias, ref = data(perc=1.0, size=200)
    pre = StageConfig(2, seed=1)
    study = layer_change_study(union(d_bias, ref), ref, ARCH, pre, StageConfig(0))
    assert [(r.network, r.layer) for r in study.rows] == [("G", 0), ("G", 1), ("G", 2), ("D", 0), ("D", 1), ("D", 2)]
    assert all(r.mean_change == 0.0 for r in study.rows)
    moved = layer_change_study(union(d_bias, ref), ref, ARCH, pre, StageConfig(2))
    assert all(r.mean_change > 0.0 for r in moved.rows)


def test_layer_study_requires_large_reference():
    d_bias, ref = data(perc=0.1)
    with pytest.raises(ValueError):
        layer_change_study(union(d_bias, ref), ref, ARCH, StageConfig(1), StageConfig(1))


SEEDS = range(5)
PRE = StageConfig(150, seed=0)


@pytest.fixture(scope="module")
def skew_runs():
    """Pretrained minority shares on unbiased and on 90/10 data, five seeds each."""
    out = {}
    for bias in ((0.5, 0.5), (0.9, 0.1)):
        shares = []
        for s in SEEDS:
            d_bias, _ = data(bias, size=1000, perc=0.025, seed=10 * s)
            state = pretrain(d_bias, ARCH, StageConfig(PRE.epochs, seed=s)).state
            shares.append(minority_share(state, s))
        out[bias] = shares
    return out


def test_unbiased_pretraining_is_balanced(skew_runs):
    assert abs(np.mean(skew_runs[(0.5, 0.5)]) - 0.5) < 0.1


def test_biased_pretraining_skews_to_majority(skew_runs):
    assert 1.0 - np.mean(skew_runs[(0.9, 0.1)]) > 0.6
