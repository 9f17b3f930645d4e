from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hebbevo.envs import (
    CrawlerMorphology,
    CrawlerParams,
    CrawlerVecEnv,
    EnvConfig,
    EnvError,
    TrackParams,
    TrackVecEnv,
    generate_track,
    is_simple_loop,
    make_env,
    make_morphology_set,
    tile_fitness,
)
from oracles import tile_fitness_exact


def crawler(M, damage=None, cost=0.1, rho=1.0, steps=1000, **kw):
    M = np.asarray(M, dtype=float)
    d = np.ones(len(M)) if damage is None else np.asarray(damage, dtype=float)
    return CrawlerVecEnv(CrawlerMorphology(M, d, cost, rho), CrawlerParams(episode_length=steps, **kw))


def test_crawler_worked_example():
    env = crawler(np.eye(4))
    env.reset([0])
    obs, r, done = env.step(np.ones((1, 4)))
    assert r[0] == pytest.approx(0.9, abs=1e-15)
    assert obs[0, 0] == r[0]
    assert np.array_equal(obs[0, 1:5], np.ones(4))


def test_crawler_reset_zero_state():
    env = crawler(np.eye(4))
    env.reset([0])
    for _ in range(5):
        env.step(np.ones((1, 4)))
    obs = env.reset([0])
    assert np.all(obs[0, :5] == 0) and obs[0, 5] == 0.0 and obs[0, 6] == 1.0


def test_zero_action_decays_geometrically():
    env = crawler(np.eye(4), rho=0.25)
    env.reset([0])
    env.step(np.ones((1, 4)))
    v = env.v[0]
    for k in range(1, 6):
        env.step(np.zeros((1, 4)))
        assert env.v[0] == pytest.approx(v * 0.75 ** k, rel=1e-14)


def test_dead_leg_contributes_nothing():
    rng = np.random.default_rng(0)
    M = rng.uniform(-0.3, 1, size=(4, 4))
    d = np.array([1.0, 0.0, 1.0, 1.0])
    env = crawler(M, d)
    ref = crawler(M * d[:, None], np.ones(4))
    env.reset([0])
    ref.reset([0])
    for _ in range(20):
        a = rng.uniform(-1, 1, size=(1, 4))
        o, r, _ = env.step(a)
        o2, r2, _ = ref.step(a)
        assert o[0, 2] == 0.0
        assert r[0] == r2[0]


def test_step_after_done_rejected():
    env = make_env(EnvConfig("crawler", episode_length=3))
    env.reset(0)
    for _ in range(3):
        env.step(np.zeros(4))
    with pytest.raises(EnvError):
        env.step(np.zeros(4))
    vec = crawler(np.eye(4), steps=1)
    vec.reset([0])
    vec.step(np.zeros((1, 4)))
    with pytest.raises(EnvError):
        vec.step(np.zeros((1, 4)))


def test_action_shape_rejected():
    env = crawler(np.eye(4))
    env.reset([0])
    with pytest.raises(EnvError):
        env.step(np.zeros((1, 3)))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 3))
def test_monotone_damage(d1, d2, leg):
    diag = np.diag([0.9, 1.1, 1.0, 1.0])
    lo, hi = sorted((d1, d2))

    def distance(sev):
        d = np.ones(4)
        d[leg] = sev
        env = crawler(diag, d, rho=0.2, steps=200)
        env.reset([0])
        for _ in range(200):
            env.step(np.ones((1, 4)))
        return env.distance[0]

    assert distance(lo) <= distance(hi)


def test_crawler_determinism_and_batch():
    ms = make_morphology_set(3)
    bodies = [m for m, _ in ms.all()]
    env = CrawlerVecEnv(bodies, CrawlerParams(episode_length=50))
    rng = np.random.default_rng(0)
    acts = rng.uniform(-1, 1, size=(50, 3, 4))

    def run(e, a):
        e.reset([0] * e.batch_size)
        return [e.step(x)[1].copy() for x in a]

    a = run(env, acts)
    assert all(np.array_equal(x, y) for x, y in zip(a, run(env, acts)))
    single = CrawlerVecEnv(bodies[2], CrawlerParams(episode_length=50))
    b = run(single, acts[:, 2:3])
    assert all(x[2] == y[0] for x, y in zip(a, b))


def test_morphology_set_contract():
    ms = make_morphology_set(0)
    assert len(ms.seen) == 2 and len(ms.unseen) == 1
    bodies = [m for m, _ in ms.all()]
    assert all(np.array_equal(b.M, bodies[0].M) for b in bodies)
    assert np.array_equal(bodies[0].damage, np.ones(4))
    for b in bodies[1:]:
        assert ((b.damage >= 0) & (b.damage <= 1)).all() and (b.damage < 1).sum() == 1
    assert len({tuple(b.damage) for b in bodies}) == 3
    assert not {m.name for m in ms.seen} & {m.name for m in ms.unseen}
    with pytest.raises(ValueError):
        CrawlerMorphology(np.eye(2), np.array([1.0, 1.5]))
    with pytest.raises(ValueError):
        type(ms)(ms.seen, ms.seen[:1])


def test_obs_extension_channels():
    env = crawler(np.eye(4), height_sensor=True, obs_pad=5)
    obs = env.reset([0])
    assert obs.shape == (1, 4 + 3 + 1 + 5)
    assert obs[0, 7] == 1.0 and np.all(obs[0, 8:] == 0)
    assert EnvConfig(crawler=CrawlerParams(height_sensor=True, obs_pad=5)).obs_shape == (13,)


# track


def test_tile_fitness_examples():
    assert tile_fitness(100, 100, 732) == 926.8
    assert tile_fitness(0, 100, 50) == -5.0
    assert tile_fitness(37, 37, 0) == 1000.0
    with pytest.raises(ValueError):
        tile_fitness(5, 4, 0)


def test_tile_fitness_exhaustive_small():
    # cheaper slice of the full sweep in the acceptance suite
    for n in range(1, 13):
        for v in range(n + 1):
            for f in range(0, 2001, 7):
                assert tile_fitness(v, n, f) == float(tile_fitness_exact(v, n, f))


def test_naive_formula_is_not_exact():
    # why tile_fitness avoids 1000*v/N - 0.1*f
    assert 1000 * 0 / 1 - 0.1 * 3 != float(Fraction(-3, 10))
    assert tile_fitness(0, 1, 3) == -0.3


def test_tracks_closed_and_simple():
    for seed in range(1000):
        t = generate_track(seed)
        tiles = [tuple(x) for x in t.tiles]
        assert is_simple_loop(tiles), seed
        (x0, y0), (x1, y1) = tiles[0], tiles[-1]
        assert abs(x0 - x1) + abs(y0 - y1) == 1


def test_is_simple_loop_rejects():
    assert not is_simple_loop([(0, 0), (1, 0), (2, 0)])
    # touching non-consecutive tiles
    assert not is_simple_loop([(0, 0), (1, 0), (1, 1), (0, 1), (0, 2), (-1, 2), (-1, 1), (-1, 0)])
    assert is_simple_loop([(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)])


def test_zero_bumps_gives_rectangle():
    for seed in range(20):
        t = generate_track(seed, TrackParams(bumps=0))
        w, h = t.tiles.max(axis=0) + 1
        assert t.n_tiles == 2 * (w + h) - 4
        on_edge = (t.tiles[:, 0] % (w - 1) == 0) | (t.tiles[:, 1] % (h - 1) == 0)
        assert on_edge.all()


def test_track_determinism_and_variety():
    a, b = generate_track(5), generate_track(5)
    assert np.array_equal(a.tiles, b.tiles)
    assert len({generate_track(s).tiles.tobytes() for s in range(20)}) > 1
    env = TrackVecEnv(TrackParams(), 1)
    f1 = env.reset([5])
    f2 = env.reset([5])
    assert np.array_equal(f1, f2)
    assert not np.array_equal(env.reset([6]), f1) or not np.array_equal(
        generate_track(6).tiles, generate_track(5).tiles)


@pytest.mark.parametrize("channels", [1, 3])
def test_pixel_range_and_fitness(channels):
    p = TrackParams(channels=channels, episode_length=300)
    env = TrackVecEnv(p, 4)
    obs = env.reset([0, 1, 2, 3])
    rng = np.random.default_rng(0)
    total = np.zeros(4)
    done = np.zeros(4, dtype=bool)
    while not done.all():
        assert obs.min() >= 0.0 and obs.max() <= 1.0
        assert obs.shape == (4, channels, 16, 16)
        a = rng.uniform(-1, 1, size=(4, 3))
        a[:, 1] = 1.0
        obs, r, done = env.step(a)
        total += r
    np.testing.assert_allclose(total, env.fitness(), atol=1e-9)
    with pytest.raises(EnvError):
        env.step(np.zeros((4, 3)))


def test_track_config_episode_length():
    cfg = EnvConfig("track", episode_length=7, track=replace(TrackParams(), channels=3))
    env = make_env(cfg)
    env.reset(0)
    n = 0
    done = False
    while not done:
        _, _, done = env.step(np.zeros(3))
        n += 1
    assert n <= 7
