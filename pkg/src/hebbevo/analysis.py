"""Post-hoc analysis: weight-trajectory PCA, freeze sweeps, coefficient
histograms and per-layer weight grids, all exported as plain numbers."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .genome import GenomeLayout, decode
from .plastic_net import COEFF_NAMES, NetworkTopology, PlasticityVariant
from .rollout import (
    PerturbationEvent,
    PerturbationSchedule,
    RolloutOptions,
    SeedBank,
    apply_perturbations,
    evaluate,
)

GRAM_THRESHOLD = 2000


@dataclass
class WeightTrajectory:
    steps: np.ndarray  # (T,)
    weights: np.ndarray  # (T, D)
    topology_hash: str = ""
    stride: int = 1

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or len(self.steps) != len(self.weights):
            raise ValueError("need one flattened weight vector per step")
        if len(self.steps) > 1 and (np.diff(self.steps) <= 0).any():
            raise ValueError("timesteps must be strictly increasing")

    @classmethod
    def from_outcome(cls, outcome, topology: NetworkTopology, stride: int = 1) -> "WeightTrajectory":
        if outcome.weights is None:
            raise ValueError("outcome was not recorded with weight snapshots")
        return cls(outcome.weight_steps, outcome.weights, topology.hash(), stride)


@dataclass
class PcaResult:
    components: np.ndarray  # (3, D), rows orthonormal
    explained_variance: np.ndarray  # (3,)
    projection: np.ndarray  # (T, 3)
    mean: np.ndarray  # (D,)
    total_variance: float

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    def to_json(self) -> dict:
        return {
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "explained_ratio": self.explained_ratio.tolist(),
            "total_variance": self.total_variance,
            "mean": self.mean.tolist(),
        }

    def projection_csv(self, steps: Optional[Sequence[int]] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "pc1", "pc2", "pc3"])
        steps = range(len(self.projection)) if steps is None else steps
        for t, row in zip(steps, self.projection):
            w.writerow([int(t)] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each row made positive; first index wins ties
    idx = np.abs(vecs).argmax(axis=1)
    s = np.sign(vecs[np.arange(len(vecs)), idx])
    s[s == 0] = 1.0
    return vecs * s[:, None]


def pca3(trajectory, k: int = 3, method: Optional[str] = None) -> PcaResult:
    """Top-``k`` principal directions of a (T, D) weight trajectory.

    The covariance is divided by ``T - 1``.  Dimensions past the data rank
    get zero variance and an arbitrary (still orthonormal) direction.
    """
    X = trajectory.weights if isinstance(trajectory, WeightTrajectory) else np.asarray(trajectory, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("trajectory must be 2-D (T, D)")
    T, D = X.shape
    if T < 2:
        raise ValueError("PCA needs at least two timesteps")
    mean = X.mean(axis=0)
    Xc = X - mean
    total = float((Xc * Xc).sum() / (T - 1))
    method = method or ("covariance" if D <= GRAM_THRESHOLD else "gram")
    if method == "covariance":
        vals, vecs = np.linalg.eigh(Xc.T @ Xc / (T - 1))
        order = np.argsort(vals)[::-1][:k]
        vals, comps = vals[order], vecs[:, order].T
    elif method == "gram":
        vals, u = np.linalg.eigh(Xc @ Xc.T / (T - 1))
        order = np.argsort(vals)[::-1][:k]
        vals, u = vals[order], u[:, order]
        comps = np.zeros((len(order), D))
        for j in range(len(order)):
            if vals[j] > 1e-14 * max(total, 1e-300):
                v = Xc.T @ u[:, j]
                comps[j] = v / np.linalg.norm(v)
        comps = _complete_basis(comps, vals > 1e-14 * max(total, 1e-300))
    else:
        raise ValueError(f"unknown PCA method {method!r}")
    vals = np.clip(vals, 0.0, None)
    if len(vals) < k:
        # fewer directions than requested (D < k): pad with zero-variance dims
        pad = k - len(vals)
        vals = np.concatenate([vals, np.zeros(pad)])
        comps = np.vstack([comps, np.zeros((pad, D))])
    comps = _fix_signs(comps)
    return PcaResult(comps, vals, Xc @ comps.T, mean, total)


def _complete_basis(comps: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # Gram-Schmidt against standard basis vectors for rows without support
    out = comps.copy()
    D = comps.shape[1]
    e = 0
    for j in np.flatnonzero(~valid):
        while e < D:
            v = np.zeros(D)
            v[e] = 1.0
            e += 1
            for i in range(len(out)):
                if i != j and (valid[i] or i < j):
                    v -= (out[i] @ v) * out[i]
            n = np.linalg.norm(v)
            if n > 1e-8:
                out[j] = v / n
                break
    return out


def pca_joint(trajectories: Sequence[WeightTrajectory]) -> list[PcaResult]:
    """Fit one PCA on the stacked trajectories and project each separately."""
    stacked = np.vstack([t.weights for t in trajectories])
    fit = pca3(stacked)
    results = []
    for t in trajectories:
        proj = (t.weights - fit.mean) @ fit.components.T
        results.append(PcaResult(fit.components, fit.explained_variance, proj, fit.mean, fit.total_variance))
    return results


# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    freeze_steps: list
    mean_fitness: list
    std_fitness: list
    unperturbed: float
    onset: Optional[int]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["freeze_step", "mean_fitness", "std_fitness", "unperturbed"])
        for t, m, s in zip(self.freeze_steps, self.mean_fitness, self.std_fitness):
            w.writerow([t, repr(m), repr(s), repr(self.unperturbed)])
        return buf.getvalue()


def plateau_onset(freeze_steps, means, reference, tolerance=0.05) -> Optional[int]:
    """Smallest T such that every sweep point at or after T lies within
    ``tolerance`` (relative) of ``reference``."""
    onset = None
    for t, m in sorted(zip(freeze_steps, means), reverse=True):
        if abs(m - reference) <= tolerance * abs(reference):
            onset = t
        else:
            break
    return onset


def convergence_sweep(genome: np.ndarray, layout: GenomeLayout, env_config, freeze_steps: Sequence[int],
                      episodes: int = 20, seed_bank: Optional[SeedBank] = None, morphology=None,
                      options: RolloutOptions = RolloutOptions(), tolerance: float = 0.05) -> SweepResult:
    """Fitness as a function of the step after which plasticity is frozen.

    Every point reuses the same seed bank so the comparison is paired.
    """
    bank = seed_bank or SeedBank(size=episodes)
    base = evaluate(genome, layout, env_config, episodes, bank, morphology, options)
    means, stds = [], []
    for T in freeze_steps:
        if T >= env_config.episode_length:
            f = base.fitnesses
        else:
            sched = PerturbationSchedule((PerturbationEvent("freeze_plasticity", int(T)),))
            outs = apply_perturbations(genome, layout, env_config, sched, episodes, bank, morphology, options)
            f = np.array([o.fitness for o in outs])
        means.append(float(f.mean()))
        stds.append(float(f.std()))
    onset = plateau_onset(list(freeze_steps), means, base.mean, tolerance)
    return SweepResult([int(t) for t in freeze_steps], means, stds, base.mean, onset)


def recovery_steps(rewards: np.ndarray, event_step: int, window: int = 50, tolerance: float = 0.2,
                   resume_step: Optional[int] = None, hold: int = 50) -> Optional[int]:
    """Steps after ``resume_step`` (default ``event_step``) until the per-step
    reward is back within ``tolerance`` of the mean over the ``window`` steps
    preceding ``event_step`` and stays there for ``hold`` steps (or until the
    episode ends).  ``None`` if that never happens."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if event_step < 1:
        raise ValueError("need at least one pre-perturbation step")
    ref = rewards[max(0, event_step - window):event_step].mean()
    start = event_step if resume_step is None else resume_step
    ok = np.abs(rewards - ref) <= tolerance * abs(ref)
    for t in range(start, len(rewards)):
        if ok[t:t + hold].all():
            return t - start
    return None


# ---------------------------------------------------------------------------


@dataclass
class CoefficientHistogram:
    edges: np.ndarray
    counts: dict  # class name -> (bins,) counts

    def to_csv(self, name: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts[name]):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        return buf.getvalue()


def coefficient_histogram(genome: np.ndarray, layout: GenomeLayout, bins: int = 50,
                          value_range: Optional[tuple] = None) -> CoefficientHistogram:
    """Bin counts of each coefficient class over one shared set of edges.

    Inactive classes of a reduced variant are reported as empty histograms.
    """
    if layout.mode.kind != "hebbian":
        raise ValueError("coefficient histograms need a hebbian-mode genome")
    seg = layout.segment("plasticity")
    values = np.asarray(genome, dtype=np.float64)[seg.offset:seg.offset + seg.length]
    variant = PlasticityVariant(layout.mode.variant)
    n = layout.topology.synapse_count
    per = {name: values[k * n:(k + 1) * n] for k, name in enumerate(variant.active)}
    if value_range is None:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    edges = np.histogram_bin_edges(values, bins=bins, range=value_range)
    counts = {}
    for name in COEFF_NAMES:
        if name in per:
            counts[name] = np.histogram(per[name], bins=edges)[0]
        else:
            counts[name] = np.zeros(bins, dtype=np.int64)
    return CoefficientHistogram(edges, counts)


def weight_frame(snapshot, topology: NetworkTopology, layer: int) -> np.ndarray:
    """One layer's matrix, rows = presynaptic neurons, columns = postsynaptic.

    ``snapshot`` is either a flat fc weight vector or a list of layer matrices.
    """
    shapes = topology.layer_shapes
    if not 0 <= layer < len(shapes):
        raise IndexError(f"layer {layer} out of range for {len(shapes)} fc layers")
    if isinstance(snapshot, (list, tuple)):
        grid = np.asarray(snapshot[layer], dtype=np.float64)
        if grid.shape != shapes[layer]:
            raise ValueError(f"layer {layer} has shape {grid.shape}, expected {shapes[layer]}")
        return grid.copy()
    flat = np.asarray(snapshot, dtype=np.float64)
    if flat.shape != (topology.synapse_count,):
        raise ValueError(f"snapshot length {flat.shape}, expected ({topology.synapse_count},)")
    offset = sum(r * c for r, c in shapes[:layer])
    r, c = shapes[layer]
    return flat[offset:offset + r * c].reshape(r, c).copy()


def grid_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in grid:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
