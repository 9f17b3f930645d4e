"""Binding genomes to environments: training fitness, held-out evaluation and
perturbation experiments."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .envs import SOLVED_DISTANCE, CrawlerMorphology, EnvConfig, MorphologySet, make_vec_env
from .genome import GenomeLayout, decode
from .plastic_net import (
    EpisodeOutcome,
    HebbianCoefficients,
    LifetimeHooks,
    WeightState,
    init_weights,
    run_lifetimes,
    stack_weights,
)

__all__ = [
    "EpisodeOutcome", "EvalResult", "EvalFitness", "PerturbationEvent", "PerturbationHooks",
    "PerturbationSchedule", "SeedBank", "TrainingFitness", "apply_perturbations",
    "distance_fitness", "evaluate", "multi_morphology_fitness", "run_episodes", "solved",
]

PERTURBATION_KINDS = ("freeze_plasticity", "zero_weights", "saturate_actions")


def env_seed_of(seed) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


@dataclass(frozen=True)
class SeedBank:
    """Deterministic (weight-init seed, env seed) pairs for held-out evaluation."""

    base: int = 10_007
    size: int = 100

    def pairs(self) -> list[tuple[list, int]]:
        return [([self.base, 1, i], env_seed_of([self.base, 2, i])) for i in range(self.size)]


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationEvent:
    kind: str
    at_step: int
    duration: int = 1
    fraction: float = 1.0 / 3.0
    value: float = 1.0
    band: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.at_step < 0:
            raise ValueError("at_step must be >= 0")
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class PerturbationSchedule:
    events: tuple[PerturbationEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        steps = [e.at_step for e in self.events]
        if steps != sorted(steps):
            raise ValueError("perturbation events must be sorted by at_step")


def _zero_mask(weights: WeightState, fraction: float, band: bool, rng) -> list[np.ndarray]:
    shapes = [w.shape[-2:] for w in weights.layers]
    if band:
        masks = []
        for rows, cols in shapes:
            m = np.zeros((rows, cols), dtype=bool)
            width = max(1, int(round(fraction * rows)))
            start = int(rng.integers(0, rows - width + 1))
            m[start:start + width] = True
            masks.append(m)
        return masks
    total = sum(r * c for r, c in shapes)
    chosen = np.zeros(total, dtype=bool)
    chosen[rng.choice(total, size=int(round(fraction * total)), replace=False)] = True
    masks, offset = [], 0
    for rows, cols in shapes:
        masks.append(chosen[offset:offset + rows * cols].reshape(rows, cols))
        offset += rows * cols
    return masks


class PerturbationHooks(LifetimeHooks):
    """Applies a :class:`PerturbationSchedule` to every episode of a batch.

    Zeroed connections stay plastic afterwards.  Saturation only overrides
    what the environment receives; the network keeps running and updating.
    """

    def __init__(self, schedule: PerturbationSchedule, horizon: int, episode_seeds: Sequence = (0,)):
        kept = []
        for e in schedule.events:
            if e.at_step >= horizon:
                warnings.warn(f"{e.kind} at step {e.at_step} is beyond the horizon {horizon}; ignored")
            else:
                kept.append(e)
        self.events = kept
        self.episode_seeds = list(episode_seeds)
        self._log: list[dict] = []
        self._freeze_at = min((e.at_step for e in kept if e.kind == "freeze_plasticity"), default=None)

    def before_forward(self, t, weights, active):
        for e in self.events:
            if e.kind != "zero_weights" or e.at_step != t:
                continue
            layers = [w.copy() for w in weights.layers]
            for b, seed in enumerate(self.episode_seeds):
                rng = np.random.default_rng([e.seed, *np.atleast_1d(seed).tolist()])
                for w, m in zip(layers, _zero_mask(weights, e.fraction, e.band, rng)):
                    w[b][m] = 0.0
            weights = WeightState(layers, weights.normalization)
            self._log.append({"kind": e.kind, "step": t, "fraction": e.fraction, "band": e.band})
        return weights

    def env_action(self, t, action):
        for e in self.events:
            if e.kind == "saturate_actions" and e.at_step <= t < e.at_step + e.duration:
                if t == e.at_step:
                    self._log.append({"kind": e.kind, "step": t, "duration": e.duration, "value": e.value})
                return np.full_like(action, e.value)
        return action

    def plastic(self, t):
        if self._freeze_at is not None and t >= self._freeze_at:
            if t == self._freeze_at:
                self._log.append({"kind": "freeze_plasticity", "step": t})
            return False
        return True

    def log(self):
        return list(self._log)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class RolloutOptions:
    weight_dist: str = "uniform"
    normalization: str = "none"
    floor_fitness: float = -1000.0
    update_order: str = "synchronous"
    max_batch: int = 1024


def _take(tensors, rows):
    return [t[rows] for t in tensors]


def run_episodes(layout: GenomeLayout, genomes: np.ndarray, rows: Sequence[int], env_config: EnvConfig,
                 init_seeds: Sequence, env_seeds: Sequence[int],
                 morphologies: Optional[Sequence[CrawlerMorphology]] = None,
                 options: RolloutOptions = RolloutOptions(), hooks: Optional[LifetimeHooks] = None,
                 **record) -> list[EpisodeOutcome]:
    """Run one lifetime per entry of ``rows`` (an index into ``genomes``).

    Episodes are simulated in chunks of ``options.max_batch``; every episode's
    result depends only on its own genome row and seeds.
    """
    genomes = np.atleast_2d(np.asarray(genomes, dtype=np.float64))
    rows = np.asarray(rows, dtype=np.int64)
    n = len(rows)
    if not (len(init_seeds) == len(env_seeds) == n):
        raise ValueError("one init seed and one env seed per episode")
    if morphologies is not None and len(morphologies) != n:
        raise ValueError("one morphology per episode")
    dec = decode(genomes, layout, options.normalization)
    topo = layout.topology
    step = n if hooks is not None else options.max_batch
    outcomes: list[EpisodeOutcome] = []
    for lo in range(0, n, step):
        idx = rows[lo:lo + step]
        b = len(idx)
        if dec.direct_weights is not None:
            w0 = WeightState(_take(dec.direct_weights.layers, idx), options.normalization)
        elif dec.init_weights is not None:
            w0 = WeightState(_take(dec.init_weights.layers, idx), options.normalization)
        else:
            w0 = stack_weights([init_weights(topo, s, options.weight_dist, options.normalization)
                                for s in init_seeds[lo:lo + step]])
        coeffs = None
        if dec.coeffs is not None:
            coeffs = HebbianCoefficients(
                variant=dec.coeffs.variant,
                **{k: _take(getattr(dec.coeffs, k), idx) for k in dec.coeffs.variant.active})
        conv = None if dec.conv_params is None else dec.conv_params[idx]
        morph = None if morphologies is None else morphologies[lo:lo + step]
        env = make_vec_env(env_config, b, morph)
        outcomes += run_lifetimes(topo, env, w0, coeffs, conv, env_config.episode_length,
                                  list(env_seeds[lo:lo + step]), hooks,
                                  floor_fitness=options.floor_fitness,
                                  update_order=options.update_order, **record)
    return outcomes


@dataclass
class EvalResult:
    mean: float
    std: float
    fitnesses: np.ndarray
    outcomes: list = field(default_factory=list, repr=False)

    def __str__(self):
        return f"{self.mean:.1f} ± {self.std:.1f}"


def evaluate(genome: np.ndarray, layout: GenomeLayout, env_config: EnvConfig, episodes: int = 100,
             seed_bank: Optional[SeedBank] = None, morphology: Optional[CrawlerMorphology] = None,
             options: RolloutOptions = RolloutOptions()) -> EvalResult:
    """Mean and std of fitness over ``episodes`` fresh random weight inits."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    bank = (seed_bank or SeedBank(size=episodes)).pairs()[:episodes]
    if len(bank) < episodes:
        raise ValueError(f"seed bank holds {len(bank)} pairs, {episodes} requested")
    morphs = None if morphology is None else [morphology] * episodes
    outs = run_episodes(layout, np.asarray(genome)[None], [0] * episodes, env_config,
                        [s for s, _ in bank], [e for _, e in bank], morphs, options)
    f = np.array([o.fitness for o in outs])
    return EvalResult(float(f.mean()), float(f.std()), f, outs)


def multi_morphology_fitness(genome: np.ndarray, layout: GenomeLayout, env_config: EnvConfig,
                             morphology_set: MorphologySet, episodes_per_morph: int = 1,
                             seed_bank: Optional[SeedBank] = None,
                             options: RolloutOptions = RolloutOptions()) -> float:
    """Mean over the *seen* morphologies of the mean episode distance."""
    if not morphology_set.seen:
        raise ValueError("no seen morphologies")
    per = [evaluate(genome, layout, env_config, episodes_per_morph, seed_bank, m, options).mean
           for m in morphology_set.seen]
    return float(np.mean(per))


def distance_fitness(outcome: EpisodeOutcome) -> float:
    return float(outcome.fitness)


def solved(outcome, threshold: float = SOLVED_DISTANCE) -> bool:
    d = outcome.fitness if isinstance(outcome, EpisodeOutcome) else float(outcome)
    return bool(d >= threshold)


def apply_perturbations(genome: np.ndarray, layout: GenomeLayout, env_config: EnvConfig,
                        schedule: PerturbationSchedule, episodes: int = 1,
                        seed_bank: Optional[SeedBank] = None,
                        morphology: Optional[CrawlerMorphology] = None,
                        options: RolloutOptions = RolloutOptions(),
                        record_weights: bool = False, record_stride: int = 1) -> list[EpisodeOutcome]:
    bank = (seed_bank or SeedBank(size=episodes)).pairs()[:episodes]
    hooks = PerturbationHooks(schedule, env_config.episode_length, [s for s, _ in bank])
    morphs = None if morphology is None else [morphology] * episodes
    return run_episodes(layout, np.asarray(genome)[None], [0] * episodes, env_config,
                        [s for s, _ in bank], [e for _, e in bank], morphs, options, hooks,
                        record=True, record_weights=record_weights, record_stride=record_stride)


# ---------------------------------------------------------------------------
# fitness callables for the optimizer (picklable, so they can cross processes)


@dataclass
class TrainingFitness:
    """Per-candidate training fitness.

    Crawlers score the mean distance over the seen morphologies only; the
    unseen ones are never instantiated here.  Every candidate episode draws
    fresh initial weights unless ``common_init`` shares them within a
    generation.
    """

    layout: GenomeLayout
    env_config: EnvConfig
    master_seed: int = 0
    episodes: int = 1
    common_init: bool = False
    options: RolloutOptions = field(default_factory=RolloutOptions)

    def __post_init__(self):
        self._morphs = (list(self.env_config.morphology_set().seen)
                        if self.env_config.kind == "crawler" else [None])

    def __call__(self, candidates, indices, generation):
        candidates = np.atleast_2d(candidates)
        k = len(candidates)
        rows, init_seeds, env_seeds, morphs = [], [], [], []
        for c in range(k):
            cand = -1 if self.common_init else int(indices[c])
            for mi, m in enumerate(self._morphs):
                for e in range(self.episodes):
                    rows.append(c)
                    init_seeds.append([self.master_seed, 0, generation, cand, mi, e])
                    env_seeds.append(env_seed_of([self.master_seed, 3, generation, e]))
                    morphs.append(m)
        outs = run_episodes(self.layout, candidates, rows, self.env_config, init_seeds, env_seeds,
                            morphs if self.env_config.kind == "crawler" else None, self.options)
        per = len(self._morphs) * self.episodes
        f = np.array([o.fitness for o in outs]).reshape(k, len(self._morphs), self.episodes)
        div = np.array([o.diverged for o in outs]).reshape(k, per).any(axis=1)
        return f.mean(axis=2).mean(axis=1), div


@dataclass
class EvalFitness:
    """Current-solution score on a fixed held-out seed bank (seen bodies only)."""

    layout: GenomeLayout
    env_config: EnvConfig
    seed_bank: SeedBank
    options: RolloutOptions = field(default_factory=RolloutOptions)

    def __call__(self, h):
        if self.env_config.kind == "crawler":
            morphs = list(self.env_config.morphology_set().seen)
        else:
            morphs = [None]
        f = []
        for m in morphs:
            f.append(evaluate(h, self.layout, self.env_config, self.seed_bank.size, self.seed_bank, m,
                              self.options).fitnesses)
        f = np.concatenate(f)
        return float(f.mean()), float(f.std())
