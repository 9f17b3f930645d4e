"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (collected again in the terminal
summary by conftest.py).  The crawler runs train real genomes through the
CLI harness and take tens of minutes on one core.
"""
import time

import numpy as np
import pytest

from hebbevo import cli
from hebbevo import config as cfgmod
from hebbevo.analysis import convergence_sweep, pca3, recovery_steps
from hebbevo.config import vision_frontend
from hebbevo.envs import LinearObjective, sphere_problem, tile_fitness
from hebbevo.es import EsState, FitnessReport, es_update, materialize, run_evolution, sample_population
from hebbevo.genome import GenomeMode, layout_for
from hebbevo.io import load_checkpoint
from hebbevo.plastic_net import (
    ActivationTrace,
    HebbianCoefficients,
    NetworkTopology,
    PlasticityVariant,
    WeightState,
    hebbian_step,
)
from hebbevo.rollout import PerturbationEvent, PerturbationSchedule, SeedBank, apply_perturbations
from oracles import hebbian_scalar, pca_bruteforce, tile_fitness_exact

RESULTS: list[str] = []
SEEDS = (0, 1, 2)
REFERENCE_ONSET = (30, 80)


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def crawler_config(seed, kind="hebbian", variant="ABCD_plus_eta", **es):
    return cfgmod.from_dict({
        "preset": "desk-crawler",
        "name": f"{kind}-{variant}-s{seed}",
        "genome": {"kind": kind, "variant": variant},
        "seeds": {"master": seed},
        "es": es,
    }).validate()


@pytest.fixture(scope="session")
def crawler_runs(tmp_path_factory):
    """Hebbian and static genomes trained on seen bodies, for each seed."""
    root = tmp_path_factory.mktemp("acceptance")
    runs = {}
    for seed in SEEDS:
        for kind in ("hebbian", "static_weights"):
            cfg = crawler_config(seed, kind)
            assert cfg.es.budget == 300 and cfg.es.n == 100
            out = root / cfg.name
            t0 = time.time()
            cli.cmd_train(cfg, out)
            rep = cli.cmd_evaluate(out / "final.ckpt", 100)
            runs[seed, kind] = {"dir": out, "rows": {r["morphology"]: r for r in rep["rows"]},
                                "minutes": (time.time() - t0) / 60}
    return runs


# 1 ----------------------------------------------------------------------


def test_c1_hebbian_oracle():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    variants = list(PlasticityVariant)
    worst = 0.0
    for case in range(100):
        v = variants[case % 5]
        dims = rng.integers(1, 9, size=int(rng.integers(2, 4)))
        shapes = list(zip(dims[:-1], dims[1:]))
        w = WeightState([rng.normal(size=s) for s in shapes])
        c = HebbianCoefficients(variant=v, **{n: [rng.uniform(-1, 1, s) for s in shapes] for n in v.active})
        tr = ActivationTrace([rng.uniform(-1, 1, s[0]) for s in shapes], [rng.uniform(-1, 1, s[1]) for s in shapes])
        got = hebbian_step(w, c, tr)
        ref = hebbian_scalar(w.layers, c.active_terms(), tr.pre, tr.post)
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(got.layers, ref)))
    dt = time.time() - t0
    report(1, worst <= 1e-12 and dt < 5, f"100 cases, 5 variants, max |diff| {worst:.1e} (tol 1e-12), {dt:.2f}s (< 5s)")


# 2 ----------------------------------------------------------------------


def test_c2_parameter_counts():
    quad = NetworkTopology(28, (128, 64, 8))
    front = vision_frontend((3, 84, 84))
    vis = NetworkTopology(front.flattened_output_dim, (128, 64, 3), front)
    qlay, vlay = layout_for(quad, GenomeMode()), layout_for(vis, GenomeMode())
    got = (quad.synapse_count, qlay.segment("plasticity").length, vis.conv_param_count, vis.synapse_count,
           vis.conv_param_count + vis.synapse_count, vlay.segment("plasticity").length)
    want = (12_288, 61_440, 1_362, 91_328, 92_690, 456_640)
    report(2, got == want, f"counts {got} vs {want}")


# 3 ----------------------------------------------------------------------


def test_c3_es_estimator():
    t0 = time.time()
    g = np.random.default_rng(0).normal(size=50)
    s = EsState(np.zeros(50), n=10_000, alpha=1.0, sigma=0.1)
    tk = sample_population(s)
    f, _ = LinearObjective(g)(np.stack([materialize(t, s) for t in tk]))
    step = es_update(s, [FitnessReport(t.index, float(x)) for t, x in zip(tk, f)], "raw", tk).h
    cos = float(step @ g / np.linalg.norm(step) / np.linalg.norm(g))
    dists = []
    for seed in range(3):
        obj, start = sphere_problem(10, 5.0, seed)
        # default decays (0.995 / 0.999) stay on
        st = EsState(start, alpha=0.2, sigma=0.1, n=100, master_seed=seed)
        final, _ = run_evolution(st, obj, 300)
        dists.append(float(np.linalg.norm(final.h - obj.target)))
    dt = time.time() - t0
    ok = cos > 0.99 and all(d < 0.1 for d in dists) and dt < 120
    report(3, ok, f"linear cos {cos:.4f} (> 0.99); sphere |h-h*| {[f'{d:.1e}' for d in dists]} (< 0.1, 3/3); {dt:.0f}s")


# 4 ----------------------------------------------------------------------


def test_c4_adaptation(crawler_runs):
    lines, wins, seen_ok = [], 0, True
    for seed in SEEDS:
        heb, sta = crawler_runs[seed, "hebbian"]["rows"], crawler_runs[seed, "static_weights"]["rows"]
        seen = [r for r in heb.values() if r["seen"] == "seen"]
        unseen_h = [r for r in heb.values() if r["seen"] == "unseen"][0]
        unseen_s = [r for r in sta.values() if r["seen"] == "unseen"][0]
        seen_ok &= all(r["solved_rate"] >= 0.95 for r in seen)
        win = unseen_s["solved_rate"] < 0.20 and unseen_h["solved_rate"] - unseen_s["solved_rate"] >= 0.30
        wins += win
        static_seen = ", ".join(f"{r['solved_rate']:.0%}" for r in sta.values() if r["seen"] == "seen")
        heb_seen = ", ".join(f"{r['solved_rate']:.0%}" for r in seen)
        lines.append(f"seed {seed}: hebbian seen {heb_seen} "
                     f"unseen {unseen_h['solved_rate']:.0%} ({unseen_h['distance']}); "
                     f"static unseen {unseen_s['solved_rate']:.0%} ({unseen_s['distance']}), static seen {static_seen}")
    for line in lines:
        print("   ", line)
    report(4, seen_ok and wins >= 2,
           f"hebbian seen >= 95% on all seeds: {seen_ok}; unseen gap >= 30pp with static < 20%: {wins}/3 seeds "
           f"(need 2) | " + " | ".join(lines))


# 5 ----------------------------------------------------------------------


def test_c5_freeze_sweep(crawler_runs):
    ck = load_checkpoint(crawler_runs[0, "hebbian"]["dir"] / "final.ckpt")
    config = cli._config_of(ck)
    horizon = config.env.episode_length
    steps = list(range(0, horizon + 1, 10))
    healthy = config.env.morphology_set().seen[0]
    sw = convergence_sweep(ck.genome, ck.layout, config.env, steps, 20, SeedBank(size=20), healthy,
                           config.rollout_options())
    ref = sw.unperturbed
    at0 = sw.mean_fitness[0]
    ok = sw.onset is not None and sw.onset < horizon / 2 and at0 < 0.25 * ref
    report(5, ok, f"onset T*={sw.onset} (< {horizon // 2}), F(T=0)={at0:.1f} vs unperturbed {ref:.1f} "
                  f"(< 25%); reference onset {REFERENCE_ONSET[0]}-{REFERENCE_ONSET[1]} steps, not asserted")


# 6 ----------------------------------------------------------------------


def test_c6_recovery(crawler_runs):
    ck = load_checkpoint(crawler_runs[0, "hebbian"]["dir"] / "final.ckpt")
    config = cli._config_of(ck)
    healthy = config.env.morphology_set().seen[0]
    opts = config.rollout_options()
    bank = SeedBank(size=10)
    zero = apply_perturbations(ck.genome, ck.layout, config.env, PerturbationSchedule(
        [PerturbationEvent("zero_weights", 500, fraction=1 / 3)]), 10, bank, healthy, opts)
    sat = apply_perturbations(ck.genome, ck.layout, config.env, PerturbationSchedule(
        [PerturbationEvent("saturate_actions", 300, duration=100)]), 10, bank, healthy, opts)
    rz = [recovery_steps(o.rewards, 500) for o in zero]
    rs = [recovery_steps(o.rewards, 300, resume_step=400) for o in sat]
    ok = all(r is not None and r <= 200 for r in rz + rs)

    def show(rec):
        good = sum(r is not None and r <= 200 for r in rec)
        return f"{good}/10 recovered, steps {['never' if r is None else r for r in rec]}"

    report(6, ok, "back within 20% of the pre-event mean and held for 50 steps, within 200 steps, all 10 "
                  f"episodes | zero 1/3 at t=500: {show(rz)} | saturate 300-400: {show(rs)}")


# 7 ----------------------------------------------------------------------


def test_c7_pca():
    rng = np.random.default_rng(7)
    worst_var, worst_cos, inv_ok = 0.0, 1.0, True
    for _ in range(50):
        T, D = int(rng.integers(5, 60)), int(rng.integers(3, 25))
        X = np.cumsum(rng.normal(size=(T, D)), axis=0)
        res = pca3(X)
        vals, vecs = pca_bruteforce(X)
        k = len(vals)
        worst_var = max(worst_var, float(np.abs(res.explained_variance[:k] - vals).max()))
        for a, b in zip(res.components, vecs):
            worst_cos = min(worst_cos, abs(float(a @ b)) / float(np.linalg.norm(b)))
        C = res.components
        inv_ok &= bool(np.abs(C @ C.T - np.eye(3)).max() < 1e-10)
        inv_ok &= bool(np.all(np.diff(res.explained_variance) <= 1e-12))
    ok = worst_var <= 1e-8 and worst_cos > 1 - 1e-8 and inv_ok
    report(7, ok, f"50 trajectories: max variance err {worst_var:.1e} (<= 1e-8), min |cos| 1-{1 - worst_cos:.1e} "
                  f"(> 1-1e-8), orthonormal+ordered: {inv_ok}")


# 8 ----------------------------------------------------------------------


def test_c8_determinism(tmp_path):
    cfg = crawler_config(5, budget=3)
    cli.cmd_train(cfg, tmp_path / "w1", workers=1)
    cli.cmd_train(cfg, tmp_path / "w3", workers=3)
    a = (tmp_path / "w1" / "curve.csv").read_bytes()
    b = (tmp_path / "w3" / "curve.csv").read_bytes()
    report(8, a == b, f"curve.csv at 1 vs 3 workers byte-identical: {a == b} ({len(a)} bytes)")


# 9 ----------------------------------------------------------------------


def test_c9_ablation(tmp_path):
    mult = {"A_only": 1, "A_plus_eta": 2, "AD": 2, "ABCD": 4, "ABCD_plus_eta": 5}
    finals, lengths_ok, finite = {}, True, True
    for v, k in mult.items():
        cfg = crawler_config(0, variant=v, budget=50)
        lay = cfg.layout()
        lengths_ok &= lay.total_len == k * lay.topology.synapse_count
        m = cli.cmd_train(cfg, tmp_path / v)
        finals[v] = m.final_metrics["eval_fitness_mean"]
        finite &= bool(np.isfinite(finals[v]))
    detail = ", ".join(f"{v} {f:.1f}" for v, f in finals.items())
    report(9, lengths_ok and finite, f"lengths {{1,2,2,4,5}}x synapses: {lengths_ok}; 50-generation eval fitness: "
                                     f"{detail}; A_only final fitness {finals['A_only']:.1f} (reported only)")


# 10 ---------------------------------------------------------------------


def test_c10_tile_fitness_exhaustive():
    bad, count = 0, 0
    for n in range(1, 51):
        for v in range(n + 1):
            for f in range(2001):
                count += 1
                if tile_fitness(v, n, f) != float(tile_fitness_exact(v, n, f)):
                    bad += 1
    report(10, bad == 0, f"{count} (v, N, frames) cases vs exact rationals, {bad} mismatches (tol 0)")
