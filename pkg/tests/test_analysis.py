import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hebbevo.analysis import (
    WeightTrajectory,
    coefficient_histogram,
    convergence_sweep,
    pca3,
    pca_joint,
    plateau_onset,
    recovery_steps,
    weight_frame,
)
from hebbevo.envs import EnvConfig
from hebbevo.genome import GenomeMode, init_genome, layout_for
from hebbevo.plastic_net import NetworkTopology
from hebbevo.rollout import PerturbationEvent, PerturbationSchedule, SeedBank, apply_perturbations, evaluate
from oracles import pca_bruteforce

QUAD = NetworkTopology(28, (128, 64, 8))


def traj(X):
    return WeightTrajectory(np.arange(len(X)), np.asarray(X), "h", 1)


def test_pca_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X = rng.normal(size=(50, 20)) @ rng.normal(size=(20, 20))
        res = pca3(traj(X))
        vals, vecs = pca_bruteforce(X)
        np.testing.assert_allclose(res.explained_variance, vals, atol=1e-8, rtol=0)
        for a, b in zip(res.components, vecs):
            assert abs(a @ b) / np.linalg.norm(b) > 1 - 1e-8


def test_constant_trajectory():
    X = np.tile(np.arange(6.0), (10, 1))
    for method in ("covariance", "gram"):
        res = pca3(X, method=method)
        assert np.all(res.explained_variance == 0)
        np.testing.assert_allclose(res.components @ res.components.T, np.eye(3), atol=1e-12)


def test_collinear_trajectory():
    u = np.array([1.0, -2.0, 0.5, 3.0])
    u /= np.linalg.norm(u)
    X = np.arange(5.0)[:, None] * u
    for method in ("covariance", "gram"):
        res = pca3(X, method=method)
        assert abs(res.components[0] @ u) == pytest.approx(1.0, abs=1e-12)
        assert res.explained_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_sign_convention_and_rejects():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 8))
    res = pca3(X)
    for c in res.components:
        assert c[np.argmax(np.abs(c))] > 0
    assert np.array_equal(pca3(X).components, res.components)
    with pytest.raises(ValueError):
        pca3(X[:1])
    with pytest.raises(ValueError):
        WeightTrajectory(np.array([0, 0]), X[:2], "h", 1)


@given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 30))
def test_pca_invariants(seed, T, D):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(T, D)) * rng.uniform(0.1, 3, size=D)
    res = pca3(X)
    C = res.components
    k = min(3, D)
    np.testing.assert_allclose(C[:k] @ C[:k].T, np.eye(k), atol=1e-10)
    assert np.all(np.diff(res.explained_variance) <= 1e-12)
    Xc = X - X.mean(axis=0)
    np.testing.assert_allclose(res.projection.mean(axis=0), 0.0, atol=1e-10 * max(1.0, np.abs(X).max()))
    recon = ((Xc - res.projection @ C) ** 2).sum() / (T - 1)
    assert recon == pytest.approx(res.total_variance - res.explained_variance.sum(), abs=1e-8)


def test_gram_matches_covariance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 300)) + np.linspace(0, 5, 40)[:, None] * rng.normal(size=300)
    a = pca3(X, method="covariance")
    b = pca3(X, method="gram")
    np.testing.assert_allclose(a.explained_variance, b.explained_variance, rtol=1e-9)
    np.testing.assert_allclose(np.abs((a.components * b.components).sum(1)), 1.0, atol=1e-9)
    np.testing.assert_allclose(a.components, b.components, atol=1e-7)


def test_gram_on_wide_trajectory():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 2500))
    res = pca3(X)
    vals = np.sort(np.linalg.svd(X - X.mean(0), compute_uv=False) ** 2 / 11)[::-1][:3]
    np.testing.assert_allclose(res.explained_variance, vals, rtol=1e-9)


def test_joint_pca_shares_basis():
    rng = np.random.default_rng(4)
    a, b = traj(rng.normal(size=(10, 5))), traj(rng.normal(size=(12, 5)) + 2)
    ra, rb = pca_joint([a, b])
    assert np.array_equal(ra.components, rb.components)
    assert ra.projection.shape == (10, 3) and rb.projection.shape == (12, 3)


def test_pca_json_and_csv():
    res = pca3(np.random.default_rng(0).normal(size=(6, 4)))
    d = res.to_json()
    assert len(d["components"]) == 3 and len(d["explained_variance"]) == 3
    assert res.projection_csv().count("\n") == 7


# histograms


def test_histogram_counts_and_support():
    lay = layout_for(QUAD, GenomeMode())
    g = init_genome(lay, 0).values
    h = coefficient_histogram(g, lay, bins=20)
    assert h.edges[0] >= -1 and h.edges[-1] <= 1
    for name in "ABCD":
        assert h.counts[name].sum() == 12_288
    assert h.counts["eta"].sum() == 12_288
    z = coefficient_histogram(np.zeros(lay.total_len), lay, bins=11)
    for c in z.counts.values():
        assert (c > 0).sum() == 1 and c.sum() == 12_288
        lo, hi = z.edges[np.argmax(c)], z.edges[np.argmax(c) + 1]
        assert lo <= 0 <= hi


def test_histogram_reduced_variant_and_permutation():
    lay = layout_for(QUAD, GenomeMode("hebbian", "AD"))
    g = init_genome(lay, 1).values
    h = coefficient_histogram(g, lay, bins=10)
    assert h.counts["B"].sum() == 0 and h.counts["A"].sum() == 12_288
    n = QUAD.synapse_count
    perm = g.copy()
    rng = np.random.default_rng(0)
    perm[:n] = rng.permutation(perm[:n])
    perm[n:] = rng.permutation(perm[n:])
    h2 = coefficient_histogram(perm, lay, bins=10)
    assert all(np.array_equal(h.counts[k], h2.counts[k]) for k in h.counts)
    with pytest.raises(ValueError):
        coefficient_histogram(np.zeros(n), layout_for(QUAD, GenomeMode("static_weights")))


# weight frames


def test_weight_frame_shapes():
    flat = np.arange(QUAD.synapse_count, dtype=float)
    assert weight_frame(flat, QUAD, 0).shape == (28, 128)
    assert weight_frame(flat, QUAD, 1).shape == (128, 64)
    assert weight_frame(flat, QUAD, 2).shape == (64, 8)
    assert weight_frame(flat, QUAD, 1)[0, 0] == 28 * 128
    with pytest.raises(IndexError):
        weight_frame(flat, QUAD, 3)
    with pytest.raises(ValueError):
        weight_frame(flat[:-1], QUAD, 0)


def test_zeroed_band_visible():
    topo = NetworkTopology(7, (8, 6, 4))
    lay = layout_for(topo, GenomeMode())
    env = EnvConfig("crawler", episode_length=20)
    out = apply_perturbations(init_genome(lay, 0).values * 0.2, lay, env,
                              PerturbationSchedule([PerturbationEvent("zero_weights", 5, band=True)]),
                              1, SeedBank(size=1), record_weights=True)[0]
    grid = weight_frame(out.weights[5], topo, 1)
    zero_rows = np.where(np.all(grid == 0, axis=1))[0]
    assert len(zero_rows) > 0 and np.all(np.diff(zero_rows) == 1)


# sweeps


def test_sweep_endpoints():
    topo = NetworkTopology(7, (8, 6, 4))
    lay = layout_for(topo, GenomeMode())
    env = EnvConfig("crawler", episode_length=40)
    g = init_genome(lay, 2).values * 0.3
    bank = SeedBank(size=4)
    res = convergence_sweep(g, lay, env, [0, 39, 40, 100], 4, bank)
    base = evaluate(g, lay, env, 4, bank)
    assert res.unperturbed == base.mean
    # freezing before the final update or at/after the horizon cannot change the return
    assert res.mean_fitness[1] == base.mean and res.mean_fitness[2] == base.mean
    assert res.mean_fitness[3] == base.mean
    assert res.to_csv().count("\n") == 5


def test_plateau_onset():
    assert plateau_onset([0, 10, 20, 30], [0, 50, 98, 101], 100) == 20
    assert plateau_onset([0, 10], [0, 50], 100) is None
    assert plateau_onset([0, 10, 20], [100, 50, 100], 100) == 20


def test_recovery_steps():
    r = np.r_[np.ones(100), np.zeros(10), np.linspace(0, 1, 20), np.ones(10)]
    assert recovery_steps(r, 100) == 10 + 16
    assert recovery_steps(np.r_[np.ones(10), np.zeros(10)], 10) is None
    assert recovery_steps(r, 100, resume_step=110) == 16
    # smoothed dip: still inside the band at the event step, so it must be held
    dip = np.r_[np.ones(100), 0.95, 0.5, 0.2, 0.5, np.ones(60)]
    assert recovery_steps(dip, 100) == 4
    assert recovery_steps(dip, 100, hold=1) == 0
    assert recovery_steps(np.r_[np.ones(100), np.ones(300)], 100) == 0
