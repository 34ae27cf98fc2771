import numpy as np
import pytest

from aedit.diffusion import denoise, inference_schedule, invert_trajectory, transition_coeffs
from aedit.nulltext import (
    DEFAULT_ETA, DEFAULT_INNER_ITERS, NullTextSet, load_null_set, loss_scale, optimize_null_texts,
    reconstruct, save_null_set,
)

SCHED = inference_schedule(5)


def setup(model, B=2, seed=0):
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((B, 32, 32))
    cond = np.stack([model.embed_prompt([1 + i, 5]).matrix for i in range(B)])
    fn = lambda z, t, c: model.eps(z, t, c)
    traj = invert_trajectory(z0, cond, SCHED, fn)
    null = model.null_embedding().matrix
    return z0, cond, traj, null


def test_defaults():
    assert DEFAULT_INNER_ITERS == 10 and DEFAULT_ETA == 5e-4


def test_w1_leaves_nulls_untouched(tiny_model):
    z0, cond, traj, null = setup(tiny_model)
    res = optimize_null_texts(tiny_model, traj, cond, SCHED, null, w=1.0)
    assert np.array_equal(res.nulls, np.broadcast_to(null, res.nulls.shape))
    assert np.array_equal(res.loss_initial, res.loss_final)
    plain = denoise(traj[-1], cond, SCHED, lambda z, t, c: tiny_model.eps(z, t, c))
    assert np.array_equal(res.states[-1], plain)


def test_inner_loss_never_increases(tiny_model):
    z0, cond, traj, null = setup(tiny_model)
    P_before, traj_before = cond.copy(), [s.copy() for s in traj]
    params_before = {k: v.copy() for k, v in tiny_model.params.items()}
    res = optimize_null_texts(tiny_model, traj, cond, SCHED, null, w=7.5)
    assert (res.loss_final <= res.loss_initial).all()
    assert (res.halvings <= 3).all()
    assert res.nulls.shape == (2, 5, 8, 32)
    assert not np.array_equal(res.nulls[:, 0], np.broadcast_to(null, (2, 8, 32)))
    assert np.array_equal(cond, P_before)
    assert all(np.array_equal(a, b) for a, b in zip(traj, traj_before))
    assert all(np.array_equal(tiny_model.params[k], v) for k, v in params_before.items())


def test_optimized_nulls_beat_constant_null(trained_model):
    from aedit.synthbench import make_dataset
    m, sched = trained_model, inference_schedule(50)
    ds = make_dataset(4, seed=11)
    z0 = np.stack([s.latent for s in ds])
    cond = np.stack([m.embed_prompt(s.caption).matrix for s in ds])
    traj = invert_trajectory(z0, cond, sched, lambda z, t, c: m.eps(z, t, c))
    null = m.null_embedding().matrix
    res = optimize_null_texts(m, traj, cond, sched, null, w=7.5)
    assert (res.loss_final <= res.loss_initial).all()
    opt = reconstruct(m, traj[-1], cond, res.nulls, sched, w=7.5)
    const = reconstruct(m, traj[-1], cond, np.broadcast_to(null, res.nulls.shape), sched, w=7.5)
    assert np.array_equal(opt, res.states[-1])
    err = lambda x: ((x - z0) ** 2).mean(axis=(1, 2))
    assert (err(opt) <= 0.5 * err(const)).all()


def test_reconstruct_w1_ignores_nulls(tiny_model):
    z0, cond, traj, null = setup(tiny_model)
    junk = np.random.default_rng(9).standard_normal((2, 5, 8, 32))
    a = reconstruct(tiny_model, traj[-1], cond, junk, SCHED, w=1.0)
    b = denoise(traj[-1], cond, SCHED, lambda z, t, c: tiny_model.eps(z, t, c))
    assert np.array_equal(a, b)


def test_reconstruct_is_deterministic_and_checks_length(tiny_model):
    z0, cond, traj, null = setup(tiny_model, B=1)
    nulls = np.broadcast_to(null, (5, 8, 32))
    a = reconstruct(tiny_model, traj[-1][0], cond[0], nulls, SCHED)
    b = reconstruct(tiny_model, traj[-1][0].copy(), cond[0].copy(), nulls.copy(), SCHED)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        reconstruct(tiny_model, traj[-1][0], cond[0], nulls[:4], SCHED)


def test_trajectory_validation(tiny_model):
    _, cond, traj, null = setup(tiny_model)
    with pytest.raises(ValueError):
        optimize_null_texts(tiny_model, traj[:-1], cond, SCHED, null)
    with pytest.raises(ValueError):
        optimize_null_texts(tiny_model, None, cond, SCHED, null)


def test_loss_units():
    assert loss_scale(SCHED, 3, "latent") == 1.0
    b = transition_coeffs(SCHED, 3, 2)[1]
    assert loss_scale(SCHED, 3, "noise") == pytest.approx(1 / b**2, rel=1e-15)
    with pytest.raises(ValueError):
        loss_scale(SCHED, 3, "bits")


def test_null_set_file_round_trip(tmp_path):
    emb = np.random.default_rng(0).standard_normal((5, 8, 32))
    ns = NullTextSet(emb, eta=0.02, inner_iters=4, w=7.5)
    save_null_set(tmp_path / "n.bin", ns)
    back = load_null_set(tmp_path / "n.bin")
    assert back.T == 5 and back.eta == 0.02 and back.inner_iters == 4
    assert np.array_equal(back.embeddings, emb)
    assert np.array_equal(back.for_step(5), emb[0]) and np.array_equal(back.for_step(1), emb[4])
    with pytest.raises(ValueError):
        NullTextSet(emb, inner_iters=0)
    with pytest.raises(ValueError):
        NullTextSet(np.full((5, 8, 32), np.nan))
