import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aedit.synthbench import (
    GROUPS, NOISE_STD, VOCAB_SIZE, alignment_score, frechet_distance, gen_event_pattern,
    load_dataset, make_dataset, pattern_bank, preservation_error, save_dataset,
)

from .oracles import gaussian_fd_2d


def test_patterns_deterministic_unit_and_nearly_orthogonal():
    bank = pattern_bank().reshape(VOCAB_SIZE, -1)
    assert np.array_equal(gen_event_pattern(3).pattern, gen_event_pattern(3).pattern)
    assert np.allclose(np.linalg.norm(bank, axis=1), 1.0, atol=1e-9)
    gram = bank @ bank.T
    assert np.abs(gram - np.diag(np.diag(gram))).max() <= 0.2
    with pytest.raises(ValueError):
        gen_event_pattern(VOCAB_SIZE)


def test_dataset_is_reproducible_and_grouped():
    a, b = make_dataset(30, seed=4), make_dataset(30, seed=4)
    assert all(x.latent.tobytes() == y.latent.tobytes() and x.caption == y.caption for x, y in zip(a, b))
    assert make_dataset(30, seed=5)[0].latent.tobytes() != a[0].latent.tobytes()
    for s in make_dataset(60, seed=0):
        assert (len(s.caption) == 1) == (s.group == "add")
        assert 1 <= len(s.caption) <= 3
        assert s.negative_positions and s.mode == s.group


def test_group_mix_counts_exact():
    ds = make_dataset(50, seed=0, group_mix={"add": 10, "delete": 25, "replace": 15})
    counts = {g: sum(s.group == g for s in ds) for g in GROUPS}
    assert counts == {"add": 10, "delete": 25, "replace": 15}
    ds = make_dataset(300, seed=0)
    assert {g: sum(s.group == g for s in ds) for g in GROUPS} == {g: 100 for g in GROUPS}
    with pytest.raises(ValueError):
        make_dataset(0)


def test_edit_ground_truth_recomposes():
    bank = pattern_bank()
    for s in make_dataset(60, seed=2):
        diff = s.target_latent - s.latent
        coef = np.tensordot(bank, diff, axes=([1, 2], [0, 1]))
        for k in range(VOCAB_SIZE):
            if k in s.desired_caption and k not in s.caption:
                assert coef[k] > 20
            elif k in s.caption and k not in s.desired_caption:
                assert coef[k] < -20
            elif k in s.preserved:
                # neighbouring windows overlap slightly, so cross-talk is small but nonzero
                assert abs(coef[k]) < 2


def test_alignment_examples():
    bank = pattern_bank()
    assert alignment_score(bank[5], [5]) == pytest.approx(1.0, abs=1e-12)
    singles = [s for s in make_dataset(90, seed=3) if len(s.caption) == 1]
    for s in singles:
        clean_ish = s.latent
        assert alignment_score(clean_ish, s.caption) >= 0.9
        other = [k for k in range(VOCAB_SIZE) if k not in s.caption][:3]
        assert abs(alignment_score(clean_ish, other)) <= 0.3
    with pytest.raises(ValueError):
        alignment_score(bank[0], [])


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_alignment_scale_invariant(c, seed):
    z = np.random.default_rng(seed).standard_normal((32, 32))
    assert alignment_score(c * z, [1, 2]) == pytest.approx(alignment_score(z, [1, 2]), abs=1e-12)


def test_preservation_examples():
    s = make_dataset(10, seed=6)[0]
    bank = pattern_bank()
    assert preservation_error(s.latent, s.latent, s.preserved) == 0.0
    other = [k for k in range(VOCAB_SIZE) if k not in s.preserved][0]
    moved = s.latent + 5.0 * bank[other]
    # leakage into the preserved span is bounded by the pattern cosines
    assert preservation_error(moved, s.latent, s.preserved) <= (5.0 * 0.2) ** 2 * len(s.preserved) / 1024
    recon_like = s.latent + 0.01 * np.random.default_rng(0).standard_normal((32, 32))
    unrelated = make_dataset(10, seed=99)[3].latent
    assert preservation_error(unrelated, s.latent, s.preserved) > 100 * preservation_error(recon_like, s.latent, s.preserved)
    with pytest.raises(ValueError):
        preservation_error(np.ones((4, 4)), s.latent, s.preserved)


def test_fd_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((200, 6)), rng.standard_normal((300, 6)) * 1.5 + 0.3
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    with pytest.raises(ValueError):
        frechet_distance(a[:5], b)


def test_fd_mean_offset_equal_covariance():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((400, 3))
    d = np.array([1.0, -2.0, 0.5])
    assert frechet_distance(a, a + d) == pytest.approx(d @ d, rel=1e-9)


def test_fd_monte_carlo_vs_analytic():
    rng = np.random.default_rng(2)
    mu_a, mu_b = np.array([0.0, 0.0]), np.array([1.0, 0.5])
    cov_a = np.array([[1.0, 0.3], [0.3, 0.5]])
    cov_b = np.array([[2.0, -0.4], [-0.4, 1.0]])
    a = rng.multivariate_normal(mu_a, cov_a, 5000)
    b = rng.multivariate_normal(mu_b, cov_b, 5000)
    exact = gaussian_fd_2d(mu_a, cov_a, mu_b, cov_b)
    assert abs(frechet_distance(a, b) - exact) / exact <= 0.05


def test_dataset_file_round_trip(tmp_path):
    ds = make_dataset(12, seed=8)
    save_dataset(tmp_path / "d", ds, {"seed": 8})
    back, meta = load_dataset(tmp_path / "d")
    assert meta == {"seed": 8}
    for x, y in zip(ds, back):
        assert x.latent.tobytes() == y.latent.tobytes()
        assert x.target_latent.tobytes() == y.target_latent.tobytes()
        assert x.caption == y.caption and x.desired_caption == y.desired_caption


def test_noise_level():
    assert NOISE_STD == 0.05


def test_components_plus_noise_make_the_latent():
    for s in make_dataset(30, seed=4):
        parts = s.components()
        assert parts.shape == (len(s.caption), 32, 32)
        assert abs((s.latent - parts.sum(0)).std() - NOISE_STD) < 0.01
