"""Command-line harness: train, evaluate, perturb, analyze, resume."""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from .analysis import (
    WeightTrajectory,
    coefficient_histogram,
    convergence_sweep,
    grid_csv,
    pca3,
    pca_joint,
    weight_frame,
)
from .config import ExperimentConfig
from .envs import SOLVED_DISTANCE, sphere_problem
from .es import Curve, EsState, run_evolution
from .genome import init_genome
from .io import Checkpoint, file_hash, load_checkpoint, load_trajectory, save_checkpoint, save_trajectory
from .rollout import (
    EvalFitness,
    PerturbationEvent,
    PerturbationSchedule,
    SeedBank,
    TrainingFitness,
    apply_perturbations,
    evaluate,
)

log = logging.getLogger("hebbevo")

CURVE_MAGIC = "# hebbevo-curve v1"
REPORT_FORMAT = {"format": "hebbevo-report", "version": 1}


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    start_time: float
    end_time: float = 0.0
    checkpoints: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)  # relative path -> sha256

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps({**REPORT_FORMAT, "kind": "manifest", **asdict(self)}, indent=2,
                                   sort_keys=True) + "\n")
        return path


def _hash_files(out_dir: Path, names) -> dict:
    return {n: file_hash(out_dir / n) for n in sorted(names)}


def _write_curve(path: Path, curve: Curve) -> None:
    path.write_text(CURVE_MAGIC + "\n" + curve.to_csv())


def _write_timing(path: Path, curve: Curve) -> None:
    lines = ["generation,wall_time_s"]
    lines += [f"{r['generation']},{t:.6f}" for r, t in zip(curve.rows, curve.wall_time)]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# train / resume


class SphereEval:
    def __init__(self, objective):
        self.objective = objective

    def __call__(self, h):
        f, _ = self.objective(h[None])
        return float(f[0]), 0.0


def _problem(config: ExperimentConfig):
    """Initial vector, training fitness, held-out evaluator and layout."""
    if config.env.kind == "sphere":
        sp = config.env.sphere
        objective, start = sphere_problem(sp.dims, sp.start_distance, sp.seed)
        return start, objective, SphereEval(objective), None
    layout = config.layout()
    opts = config.rollout_options()
    fit = TrainingFitness(layout, config.env, config.seeds.master, config.seeds.train_episodes,
                          config.seeds.common_init, opts)
    ev = EvalFitness(layout, config.env, SeedBank(config.seeds.eval_bank, config.run.eval_bank_size), opts)
    h0 = init_genome(layout, [config.seeds.master, config.seeds.genome_init]).values
    return h0, fit, ev, layout


def cmd_train(config: ExperimentConfig, out_dir: Optional[Path] = None, workers: Optional[int] = None,
              resume: Optional[Path] = None, budget: Optional[int] = None) -> RunManifest:
    """Run (or continue) an evolution and write its artifacts to ``out_dir``.

    The curve CSV depends only on the config and master seed, never on the
    worker count; wall-clock timings go to a separate file.
    """
    config = config.validate()
    out_dir = Path(out_dir or config.output_dir())
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    workers = workers or config.run.workers
    manifest = RunManifest(config.hash(), __version__, time.time())
    h0, fitness_fn, eval_fn, layout = _problem(config)
    es = config.es
    total = es.budget if budget is None else budget

    curve = Curve()
    if resume is not None:
        ck = load_checkpoint(resume, None if layout is None else layout.topology.hash())
        if ck.meta.get("config_hash") != config.hash():
            raise ValueError(f"{resume}: checkpoint was written by a different config")
        state = ck.state
        curve.rows = [dict(r) for r in ck.meta.get("curve", [])]
        curve.wall_time = [0.0] * len(curve.rows)
    else:
        state = EsState(np.asarray(h0, dtype=np.float64), es.alpha, es.sigma, es.alpha_decay, es.sigma_decay,
                        es.n, 0, config.seeds.master, es.mirrored)
    (out_dir / "config.toml").write_text(config.dumps())

    def checkpoint(st: EsState, cv: Curve, name: Optional[str] = None):
        name = name or f"checkpoints/gen_{st.generation:05d}.ckpt"
        meta = {"config": config.dumps(), "config_hash": config.hash(), "curve": cv.rows}
        save_checkpoint(out_dir / name, Checkpoint(layout, st.h, st, meta))
        save_checkpoint(out_dir / "checkpoints/last.ckpt", Checkpoint(layout, st.h, st, meta))
        if name not in manifest.checkpoints:
            manifest.checkpoints.append(name)
        _write_curve(out_dir / "curve.csv", cv)

    remaining = max(0, total - state.generation)
    state, curve = run_evolution(
        state, fitness_fn, remaining, es.shaping, eval_fn, config.run.eval_every, workers,
        checkpoint, config.run.checkpoint_every, curve)
    checkpoint(state, curve, "final.ckpt")
    _write_curve(out_dir / "curve.csv", curve)
    _write_timing(out_dir / "timing.csv", curve)
    final_mean, final_std = eval_fn(state.h)
    manifest.final_metrics = {"generation": state.generation, "eval_fitness_mean": final_mean,
                              "eval_fitness_std": final_std}
    manifest.end_time = time.time()
    manifest.files = _hash_files(out_dir, ["config.toml", "curve.csv", "final.ckpt", *manifest.checkpoints])
    manifest.write(out_dir)
    return manifest


def _config_of(ck: Checkpoint) -> ExperimentConfig:
    if "config" not in ck.meta:
        raise ValueError("checkpoint carries no experiment config")
    return cfgmod.loads(ck.meta["config"])


# ---------------------------------------------------------------------------
# evaluate


def _rule_type(config: ExperimentConfig) -> str:
    return "static" if config.genome.kind == "static_weights" else f"hebbian ({config.genome.variant})"


def cmd_evaluate(checkpoint: Path, episodes: int = 100, overrides: Optional[dict] = None,
                 out: Optional[Path] = None, seed_bank: Optional[int] = None,
                 threshold: float = SOLVED_DISTANCE) -> dict:
    """Table-style report: one row per morphology (seen and unseen)."""
    ck = load_checkpoint(checkpoint)
    config = _config_of(ck)
    if overrides:
        config = cfgmod.from_dict(_merge(config.to_dict(), overrides))
    if ck.layout is not None and config.layout().topology.hash() != ck.topology_hash:
        raise ValueError("environment overrides change the network topology; checkpoint does not fit")
    bank = SeedBank(config.seeds.eval_bank if seed_bank is None else seed_bank, episodes)
    rows = []
    if config.env.kind == "crawler":
        targets = [(m, seen) for m, seen in config.env.morphology_set().all()]
    elif config.env.kind == "track":
        targets = [(None, True)]
    else:
        f, _ = SphereEval(sphere_problem(config.env.sphere.dims, config.env.sphere.start_distance,
                                         config.env.sphere.seed)[0])(ck.genome)
        targets, rows = [], [{"morphology": "sphere", "seen": "seen", "rule": "n/a", "mean": f, "std": 0.0,
                              "distance": f"{f:.4f} ± 0.0", "solved_rate": None, "solved": None}]
    for m, seen in targets:
        r = evaluate(ck.genome, ck.layout, config.env, episodes, bank, m, config.rollout_options())
        rate = float((r.fitnesses >= threshold).mean()) if m is not None else None
        rows.append({
            "morphology": "track" if m is None else m.name,
            "seen": "seen" if seen else "unseen",
            "rule": _rule_type(config),
            "mean": r.mean,
            "std": r.std,
            "distance": str(r),
            "solved_rate": rate,
            "solved": None if m is None else bool(r.mean >= threshold),
        })
    report = {**REPORT_FORMAT, "kind": "evaluation", "checkpoint": str(checkpoint), "episodes": episodes,
              "threshold": threshold, "rows": rows}
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report, indent=2) + "\n")
    return report


def format_table(report: dict) -> str:
    head = ["Morphology", "Seen/Unseen", "Rule type", "Distance travelled", "Solved", "Solved rate"]
    body = [[r["morphology"], r["seen"], r["rule"], r["distance"],
             "-" if r["solved"] is None else ("yes" if r["solved"] else "no"),
             "-" if r["solved_rate"] is None else f"{100 * r['solved_rate']:.0f}%"] for r in report["rows"]]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)) for row in [head] + body]
    return "\n".join(lines)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_sets(items) -> dict:
    """``a.b.c=value`` pairs (value parsed as TOML) into a nested dict."""
    out: dict = {}
    for item in items or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            value = cfgmod.tomllib.loads(f"v = {raw}")["v"]
        except cfgmod.tomllib.TOMLDecodeError:
            value = raw
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# perturb


def _morphology(config: ExperimentConfig, name: Optional[str]):
    if config.env.kind != "crawler":
        return None
    ms = config.env.morphology_set()
    if name is None:
        return ms.seen[0]
    for m, _ in ms.all():
        if m.name == name:
            return m
    raise ValueError(f"unknown morphology {name!r}; have {[m.name for m, _ in ms.all()]}")


def cmd_perturb(checkpoint: Path, out_dir: Path, freeze_at=None, zero_fraction: Optional[float] = None,
                at: Optional[int] = None, band: bool = False, saturate: Optional[tuple] = None,
                episodes: int = 10, morphology: Optional[str] = None, record_weights: bool = False,
                record_stride: Optional[int] = None) -> list[Path]:
    ck = load_checkpoint(checkpoint)
    config = _config_of(ck)
    if ck.layout is None:
        raise ValueError("perturbations need a network genome")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    morph = _morphology(config, morphology)
    bank = SeedBank(config.seeds.eval_bank, episodes)
    opts = config.rollout_options()
    written = []
    if freeze_at:
        sweep = convergence_sweep(ck.genome, ck.layout, config.env, freeze_at, episodes, bank, morph, opts)
        p = out_dir / "convergence_sweep.csv"
        p.write_text(sweep.to_csv())
        (out_dir / "convergence_sweep.json").write_text(json.dumps(
            {**REPORT_FORMAT, "kind": "convergence_sweep", "onset": sweep.onset,
             "unperturbed": sweep.unperturbed}, indent=2) + "\n")
        written += [p, out_dir / "convergence_sweep.json"]
    events = []
    if zero_fraction is not None:
        if at is None:
            raise ValueError("--zero-fraction needs --at")
        events.append(PerturbationEvent("zero_weights", at, fraction=zero_fraction, band=band))
    if saturate is not None:
        lo, hi = saturate
        events.append(PerturbationEvent("saturate_actions", lo, duration=hi - lo))
    if events:
        events.sort(key=lambda e: e.at_step)
        sched = PerturbationSchedule(tuple(events))
        stride = record_stride or config.run.record_stride
        outs = apply_perturbations(ck.genome, ck.layout, config.env, sched, episodes, bank, morph, opts,
                                   record_weights, stride)
        p = out_dir / "perturbation_trace.csv"
        p.write_text(_trace_csv(outs, events))
        (out_dir / "perturbation_outcomes.json").write_text(json.dumps(
            {**REPORT_FORMAT, "kind": "perturbation", "schedule": [e.to_dict() for e in events],
             "episodes": [{k: v for k, v in o.to_dict().items() if k in ("fitness", "steps", "diverged",
                                                                         "perturbation_log")}
                          for o in outs]}, indent=2) + "\n")
        written += [p, out_dir / "perturbation_outcomes.json"]
        if record_weights:
            tp = out_dir / "trajectory_ep0.traj"
            save_trajectory(tp, WeightTrajectory.from_outcome(outs[0], ck.layout.topology, stride))
            written.append(tp)
    return written


def _trace_csv(outs, events) -> str:
    """Per-step mean reward over episodes, episode 0's sent actions and an event marker."""
    rewards = np.stack([o.rewards for o in outs])
    acts = outs[0].env_actions
    marks = {}
    for e in events:
        marks[e.at_step] = e.kind
        if e.kind == "saturate_actions":
            marks.setdefault(e.at_step + e.duration, "saturate_end")
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mean_reward", "reward_ep0"] + [f"action_{k}" for k in range(acts.shape[1])] + ["event"])
    for t in range(rewards.shape[1]):
        w.writerow([t, repr(float(rewards[:, t].mean())), repr(float(rewards[0, t]))]
                   + [repr(float(a)) for a in acts[t]] + [marks.get(t, "")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(kind: str, inputs: list, out_dir: Path, bins: int = 50, joint: bool = False,
                step: Optional[int] = None, layer: Optional[int] = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if kind == "pca":
        trajs = [load_trajectory(p) for p in inputs]
        results = pca_joint(trajs) if joint else [pca3(t) for t in trajs]
        for k, (t, r) in enumerate(zip(trajs, results)):
            j = out_dir / f"pca_{k}.json"
            j.write_text(json.dumps({**REPORT_FORMAT, "kind": "pca", "source": str(inputs[k]),
                                     "joint": joint, **r.to_json()}) + "\n")
            c = out_dir / f"pca_{k}_projection.csv"
            c.write_text(r.projection_csv(t.steps))
            written += [j, c]
    elif kind == "histogram":
        ck = load_checkpoint(inputs[0])
        hist = coefficient_histogram(ck.genome, ck.layout, bins)
        for name in hist.counts:
            p = out_dir / f"hist_{name}.csv"
            p.write_text(hist.to_csv(name))
            written.append(p)
    elif kind == "frames":
        src = Path(inputs[0])
        if src.suffix == ".traj":
            traj = load_trajectory(src)
            ck = load_checkpoint(inputs[1]) if len(inputs) > 1 else None
            if ck is None:
                raise ValueError("frames from a trajectory need the checkpoint for its topology")
            if ck.topology_hash != traj.topology_hash:
                raise ValueError("trajectory and checkpoint topologies differ")
            row = len(traj.steps) - 1 if step is None else int(np.searchsorted(traj.steps, step))
            snapshot = traj.weights[row]
            topo = ck.layout.topology
        else:
            ck = load_checkpoint(src)
            snapshot = _checkpoint_weights(ck)
            topo = ck.layout.topology
        layers = range(len(topo.layer_shapes)) if layer is None else [layer]
        for k in layers:
            p = out_dir / f"frame_layer{k + 1}.csv"
            p.write_text(grid_csv(weight_frame(snapshot, topo, k)))
            written.append(p)
    else:
        raise ValueError(f"unknown analysis {kind!r}")
    return written


def _checkpoint_weights(ck: Checkpoint) -> np.ndarray:
    """Weights worth looking at for a checkpoint: the stored ones for static or
    co-evolved genomes, otherwise the end of one evaluation lifetime."""
    config = _config_of(ck)
    seg = ck.layout.segment("direct_weights") or ck.layout.segment("init_weights")
    if seg is not None:
        start = seg.offset + (ck.layout.topology.conv_param_count if seg.name == "direct_weights" else 0)
        return ck.genome[start:seg.stop]
    stride = config.env.episode_length
    outs = apply_perturbations(ck.genome, ck.layout, config.env, PerturbationSchedule(), 1,
                               SeedBank(config.seeds.eval_bank, 1), _morphology(config, None),
                               config.rollout_options(), record_weights=True, record_stride=1)
    del stride
    return outs[0].weights[-1]


# ---------------------------------------------------------------------------
# argparse


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi, *st = (int(x) for x in part.split(":"))
            out += list(range(lo, hi + 1, st[0] if st else 1))
        elif part:
            out.append(int(part))
    return out


def _window(text: str) -> tuple[int, int]:
    lo, hi = (int(x) for x in text.split(":"))
    if hi <= lo:
        raise argparse.ArgumentTypeError("window end must exceed its start")
    return lo, hi


def _load_config(args) -> ExperimentConfig:
    overrides = parse_sets(args.set)
    if args.config:
        data = cfgmod.tomllib.loads(Path(args.config).read_text())
    else:
        data = {}
    if args.preset:
        data["preset"] = args.preset
    if not data.get("preset") and not args.config:
        raise SystemExit("train needs a config file or --preset")
    return cfgmod.from_dict(_merge(data, overrides))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hebbevo", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="evolve a genome")
    p.add_argument("config", nargs="?", help="TOML config file")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--out", type=Path)
    p.add_argument("--workers", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--resume", type=Path, metavar="CHECKPOINT")
    p.add_argument("--print-config", action="store_true", help="print the canonical config and exit")

    p = sub.add_parser("resume", help="continue training from a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--workers", type=int)
    p.add_argument("--budget", type=int)

    p = sub.add_parser("evaluate", help="score a checkpoint on every morphology")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed-bank", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="environment override")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("perturb", help="freeze sweeps, weight zeroing and actuator saturation")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--freeze-at", type=_int_list, help="e.g. 0,10,20 or 0:200:10")
    p.add_argument("--zero-fraction", type=float)
    p.add_argument("--at", type=int)
    p.add_argument("--band", action="store_true", help="zero a contiguous band of presynaptic rows")
    p.add_argument("--saturate", type=_window, metavar="START:END")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--morphology")
    p.add_argument("--record-weights", action="store_true")
    p.add_argument("--stride", type=int)

    p = sub.add_parser("analyze", help="PCA, coefficient histograms, weight frames")
    p.add_argument("kind", choices=("pca", "histogram", "frames"))
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--joint", action="store_true", help="fit one PCA across all trajectories")
    p.add_argument("--step", type=int)
    p.add_argument("--layer", type=int)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            config = _load_config(args)
            if args.print_config:
                sys.stdout.write(config.dumps())
                return 0
            m = cmd_train(config, args.out, args.workers, args.resume, args.budget)
            print(json.dumps(m.final_metrics))
        elif args.command == "resume":
            ck = load_checkpoint(args.checkpoint)
            config = _config_of(ck)
            m = cmd_train(config, args.out, args.workers, args.checkpoint, args.budget)
            print(json.dumps(m.final_metrics))
        elif args.command == "evaluate":
            report = cmd_evaluate(args.checkpoint, args.episodes, parse_sets(args.set), args.out, args.seed_bank)
            print(format_table(report))
        elif args.command == "perturb":
            for p in cmd_perturb(args.checkpoint, args.out, args.freeze_at, args.zero_fraction, args.at,
                                 args.band, args.saturate, args.episodes, args.morphology,
                                 args.record_weights, args.stride):
                print(p)
        elif args.command == "analyze":
            for p in cmd_analyze(args.kind, args.inputs, args.out, args.bins, args.joint, args.step, args.layer):
                print(p)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
