from dataclasses import replace

import numpy as np
import pytest

from aedit import tensor as tn
from aedit.denoiser import (
    EOT, SOT, WORD, Denoiser, DenoiserConfig, TrainConfig, TrainingDivergence, load_checkpoint,
    save_checkpoint, train,
)
from aedit.synthbench import make_dataset

from .conftest import random_head_model
from .oracles import central_diff, rel_err

PLAIN = DenoiserConfig(prior_skip=False)


def bench(n, seed=0):
    ds = make_dataset(n, seed=seed)
    return np.stack([s.latent for s in ds]), [s.caption for s in ds]


# -- prompts ------------------------------------------------------------------------

def test_embed_prompt_layout():
    m = Denoiser()
    P = m.embed_prompt([3, 7])
    assert P.roles == (SOT, WORD, WORD) + (EOT,) * 5 and P.matrix.shape == (8, 32)
    assert np.array_equal(P.matrix[1], m.params["token_table"][3])
    null = m.null_embedding()
    assert null.roles == (SOT,) + (EOT,) * 7
    assert np.array_equal(m.embed_prompt([3, 7]).matrix, P.matrix)
    with pytest.raises(ValueError):
        m.embed_prompt([1, 2, 3, 4, 5, 6, 7])
    with pytest.raises(ValueError):
        m.embed_prompt([16])


# -- forward pass -------------------------------------------------------------------

def test_untrained_output_is_zero():
    m = Denoiser(PLAIN)
    z = np.random.default_rng(0).standard_normal((3, 32, 32))
    eps = m.eps(z, [1, 500, 1000], m.embed_prompt([2, 5]).matrix)
    assert eps.shape == z.shape and np.abs(eps).max() == 0.0


def test_attention_rows_are_stochastic():
    m = random_head_model(3)
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = 5 * rng.standard_normal((10, 32, 32))
        cond = rng.standard_normal((10, 8, 32))
        _, rec = m.predict_noise(z, rng.integers(1, 1001, 10), cond)
        for a in rec.maps:
            assert a.shape == (10, 4, 64, 8)
            assert np.abs(a.data.sum(-1) - 1).max() <= 1e-9
            assert (a.data >= 0).all() and (a.data <= 1).all()


def test_gradient_wrt_condition():
    m = random_head_model(4, scale=0.05)
    rng = np.random.default_rng(2)
    z, cond = rng.standard_normal((32, 32)), m.embed_prompt([1, 9]).matrix
    tape = tn.Tape()
    c = tape.watch(cond)
    eps, _ = m.predict_noise(z, 300, c)
    (g,) = tn.backward(tn.sum(eps), [c])
    fd = central_diff(lambda x: m.eps(z, 300, x).sum(), cond, h=1e-5)
    assert rel_err(g, fd) <= 1e-4


def test_gradient_wrt_latent():
    m = random_head_model(5, scale=0.05)
    rng = np.random.default_rng(3)
    z, cond = rng.standard_normal((32, 32)), m.embed_prompt([4]).matrix
    w = rng.standard_normal((32, 32))
    tape = tn.Tape()
    zt = tape.watch(z)
    eps, _ = m.predict_noise(zt, 40, cond)
    (g,) = tn.backward(tn.sum(tn.mul(eps, w)), [zt])
    fd = central_diff(lambda x: (m.eps(x, 40, cond) * w).sum(), z, h=1e-5)
    assert rel_err(g, fd) <= 1e-4


def test_forward_is_deterministic_and_checks_inputs():
    m = random_head_model(6)
    z = np.random.default_rng(4).standard_normal((2, 32, 32))
    cond = np.stack([m.embed_prompt([1]).matrix, m.null_embedding().matrix])
    assert m.eps(z, 100, cond).tobytes() == m.eps(z.copy(), 100, cond.copy()).tobytes()
    with pytest.raises(ValueError):
        m.eps(np.zeros((2, 16, 16)), 100, cond)
    with pytest.raises(ValueError):
        m.eps(z, 100, cond[:, :5])
    with pytest.raises(ValueError):
        m.eps(z, 0, cond)
    with pytest.raises(ValueError):
        m.eps(z, 1001, cond)


# -- training -----------------------------------------------------------------------

def test_initial_loss_is_unit():
    z0, caps = bench(1000, seed=5)
    res = train(z0, caps, PLAIN, TrainConfig(epochs=1, batch_size=1000, seed=3))
    assert res.initial_loss == pytest.approx(1.0, abs=0.1)


def test_thirty_epochs_halve_the_loss():
    z0, caps = bench(300)
    res = train(z0, caps, tcfg=TrainConfig(epochs=30, lr_end=None))
    assert len(res.losses) == 30
    assert res.losses[-1] <= 0.5 * res.initial_loss


def test_training_is_deterministic():
    z0, caps = bench(40)
    a = train(z0, caps, tcfg=TrainConfig(epochs=2, seed=4)).model
    b = train(z0, caps, tcfg=TrainConfig(epochs=2, seed=4)).model
    c = train(z0, caps, tcfg=TrainConfig(epochs=2, seed=5)).model
    assert a.checksum() == b.checksum() != c.checksum()


def test_sgd_option_and_config_errors():
    z0, caps = bench(20)
    res = train(z0, caps, tcfg=TrainConfig(epochs=2, optimizer="sgd"))
    assert np.isfinite(res.losses).all()
    for bad in ({"optimizer": "lbfgs"}, {"epochs": 0}, {"lr": 0.0}, {"cond_dropout": 2.0}, {"lr_end": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        train(np.zeros((0, 32, 32)), [])


def test_divergence_names_the_epoch():
    z0, caps = bench(20)
    with pytest.raises(TrainingDivergence) as info:
        train(z0, caps, tcfg=TrainConfig(epochs=3, optimizer="sgd", lr=1e8))
    assert 1 <= info.value.epoch <= 3 and f"epoch {info.value.epoch}" in str(info.value)


def test_checkpoint_round_trip(tmp_path):
    m = random_head_model(7, cfg=replace(DenoiserConfig(), hidden=32, ff=64))
    save_checkpoint(tmp_path / "m.aedn", m)
    back = load_checkpoint(tmp_path / "m.aedn")
    assert back.cfg == m.cfg and back.checksum() == m.checksum()
    assert all(np.array_equal(back.params[k], v) for k, v in m.params.items())
    (tmp_path / "bad.aedn").write_bytes(b"NOPE" + (tmp_path / "m.aedn").read_bytes()[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.aedn")


# -- trained reference model ----------------------------------------------------------

def test_conditioning_matters(trained_model):
    m = trained_model
    z0, caps = bench(8, seed=9)
    rng = np.random.default_rng(0)
    for label in (100, 500, 900):
        ab = m.cfg.train_schedule().alpha_bar[label]
        zt = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * rng.standard_normal(z0.shape)
        cond = np.stack([m.embed_prompt(c).matrix for c in caps])
        gap = np.abs(m.eps(zt, label, cond) - m.eps(zt, label, m.null_embedding().matrix)).mean()
        assert gap > 1e-3


def test_augmentation_options():
    z0, caps = bench(24)
    comps = [s.components() for s in make_dataset(24, seed=0)]
    base = TrainConfig(epochs=1, batch_size=8, row_drop=1.0)
    plain = train(z0, caps, tcfg=base).model
    dropped = train(z0, caps, tcfg=base, components=comps).model
    assert plain.checksum() != dropped.checksum()
    assert dropped.checksum() == train(z0, caps, tcfg=base, components=comps).model.checksum()
    with pytest.raises(ValueError):
        train(z0, caps, tcfg=base, components=comps[:3])
    for bad in ({"eot_range": (0.0, 1.0)}, {"eot_range": (2.0, 1.0)}, {"row_drop_max": 1.0}, {"row_drop": -0.1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_reference_key_tracks_every_setting():
    from aedit.reference import reference_key
    cfg, tcfg = DenoiserConfig(), TrainConfig()
    key = reference_key(cfg, tcfg)
    assert key == reference_key(DenoiserConfig(), TrainConfig()) and len(key) == 16
    assert key != reference_key(replace(cfg, text_residual=False), tcfg)
    assert key != reference_key(cfg, replace(tcfg, epochs=10))
    assert key != reference_key(cfg, tcfg, n=100)
