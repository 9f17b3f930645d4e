"""Population-based evolution strategy over a flat parameter vector.

Perturbation noise is never stored: a :class:`CandidateTicket` together with
the run's master seed regenerates its Gaussian vector on demand, so workers
only exchange tickets and scalar fitness values.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

CURVE_COLUMNS = (
    "generation",
    "pop_mean_fitness",
    "pop_max_fitness",
    "eval_fitness_mean",
    "eval_fitness_std",
    "alpha",
    "sigma",
)


@dataclass(frozen=True)
class EsState:
    h: np.ndarray
    alpha: float = 0.2
    sigma: float = 0.1
    alpha_decay: float = 0.995
    sigma_decay: float = 0.999
    n: int = 200
    generation: int = 0
    master_seed: int = 0
    mirrored: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.sigma < 0:
            raise ValueError(f"alpha must be > 0 and sigma >= 0 (got {self.alpha}, {self.sigma})")
        if self.n < 1 or (self.mirrored and self.n % 2):
            raise ValueError(f"population size {self.n} invalid (mirroring needs an even n)")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "sigma": self.sigma,
            "alpha_decay": self.alpha_decay,
            "sigma_decay": self.sigma_decay,
            "n": self.n,
            "generation": self.generation,
            "master_seed": self.master_seed,
            "mirrored": self.mirrored,
        }


@dataclass(frozen=True)
class CandidateTicket:
    index: int
    generation: int
    noise_index: int
    sign: int = 1


@dataclass
class FitnessReport:
    index: int
    fitness: float
    diverged: bool = False
    steps: int = 0


def noise(master_seed: int, generation: int, noise_index: int, dim: int) -> np.ndarray:
    return np.random.default_rng([master_seed, generation, noise_index]).standard_normal(dim)


def sample_population(state: EsState) -> list[CandidateTicket]:
    if state.mirrored:
        half = state.n // 2
        plus = [CandidateTicket(i, state.generation, i, 1) for i in range(half)]
        minus = [CandidateTicket(i + half, state.generation, i, -1) for i in range(half)]
        return plus + minus
    return [CandidateTicket(i, state.generation, i, 1) for i in range(state.n)]


def ticket_noise(ticket: CandidateTicket, state: EsState) -> np.ndarray:
    return ticket.sign * noise(state.master_seed, ticket.generation, ticket.noise_index, state.h.size)


def materialize(ticket: CandidateTicket, state: EsState) -> np.ndarray:
    return state.h + state.sigma * ticket_noise(ticket, state)


def shape_fitness(fitness: np.ndarray, shaping: str = "raw") -> np.ndarray:
    f = np.asarray(fitness, dtype=np.float64)
    if shaping == "raw":
        return f
    if shaping == "centered_rank":
        if f.size < 2:
            return np.zeros_like(f)
        return (rankdata(f, method="average") - 1.0) / (f.size - 1) - 0.5
    if shaping == "z_score":
        std = f.std()
        return np.zeros_like(f) if std == 0 else (f - f.mean()) / std
    raise ValueError(f"unknown fitness shaping {shaping!r}")


def decay_step(state: EsState, generations: int = 1) -> EsState:
    return replace(
        state,
        alpha=state.alpha * state.alpha_decay ** generations,
        sigma=state.sigma * state.sigma_decay ** generations,
    )


def es_update(state: EsState, reports: Sequence[FitnessReport], shaping: str = "raw",
              tickets: Optional[Sequence[CandidateTicket]] = None) -> EsState:
    """h += alpha / (n sigma) * sum_i F_i eps_i, then decay alpha and sigma."""
    tickets = list(tickets) if tickets is not None else sample_population(state)
    by_index = {r.index: r for r in reports}
    missing = [t.index for t in tickets if t.index not in by_index]
    if missing or len(reports) != len(tickets):
        raise ValueError(f"generation {state.generation}: missing reports for candidates {missing}")
    fitness = shape_fitness([by_index[t.index].fitness for t in tickets], shaping)
    step = np.zeros_like(state.h)
    for f, ticket in zip(fitness, tickets):  # fixed index order
        if f != 0.0:
            step += f * ticket_noise(ticket, state)
    if state.sigma > 0:
        h = state.h + state.alpha / (len(tickets) * state.sigma) * step
    else:
        h = state.h.copy()
    return decay_step(replace(state, h=h, generation=state.generation + 1))


# ---------------------------------------------------------------------------
# driver


@dataclass
class Curve:
    rows: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(CURVE_COLUMNS)]
        for row in self.rows:
            cells = []
            for col in CURVE_COLUMNS:
                v = row[col]
                if col == "generation":
                    cells.append(str(int(v)))
                elif v is None or (isinstance(v, float) and np.isnan(v)):
                    cells.append("")
                else:
                    cells.append(repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _evaluate_chunk(fitness_fn, state: EsState, tickets: Sequence[CandidateTicket]):
    candidates = np.stack([materialize(t, state) for t in tickets])
    return fitness_fn(candidates, [t.index for t in tickets], state.generation)


def evaluate_population(fitness_fn, state: EsState, tickets: Sequence[CandidateTicket],
                        workers: int = 1, executor=None) -> list[FitnessReport]:
    """Score every ticket.  ``fitness_fn(candidates, indices, generation)``
    returns ``(fitness, diverged)`` arrays; it must be a picklable callable when
    ``workers > 1``."""
    if workers <= 1 or executor is None:
        chunks = [list(tickets)]
        results = [_evaluate_chunk(fitness_fn, state, tickets)]
    else:
        size = -(-len(tickets) // workers)
        chunks = [list(tickets[i:i + size]) for i in range(0, len(tickets), size)]
        futures = [executor.submit(_evaluate_chunk, fitness_fn, state, c) for c in chunks]
        results = [f.result() for f in futures]
    reports = []
    for chunk, (fit, div) in zip(chunks, results):
        for t, f, d in zip(chunk, fit, div):
            reports.append(FitnessReport(t.index, float(f), bool(d)))
    reports.sort(key=lambda r: r.index)
    return reports


def run_evolution(state: EsState, fitness_fn: Callable, budget: int, shaping: str = "raw",
                  eval_fn: Optional[Callable] = None, eval_every: int = 1, workers: int = 1,
                  checkpoint_fn: Optional[Callable] = None, checkpoint_every: int = 0,
                  curve: Optional[Curve] = None) -> tuple[EsState, Curve]:
    """Sample, evaluate and update for ``budget`` generations.

    ``eval_fn(h)`` scores the current solution on a held-out seed bank and
    returns ``(mean, std)``.  Returns the final state (whose ``h`` is the
    solution) and the training curve.
    """
    curve = curve if curve is not None else Curve()
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for _ in range(budget):
            t0 = time.perf_counter()
            tickets = sample_population(state)
            reports = evaluate_population(fitness_fn, state, tickets, workers, executor)
            fit = np.array([r.fitness for r in reports])
            gen = state.generation
            state = es_update(state, reports, shaping, tickets)
            ev_mean = ev_std = float("nan")
            if eval_fn is not None and eval_every > 0 and (state.generation % eval_every == 0):
                ev_mean, ev_std = eval_fn(state.h)
            curve.rows.append({
                "generation": gen,
                "pop_mean_fitness": float(fit.mean()),
                "pop_max_fitness": float(fit.max()),
                "eval_fitness_mean": ev_mean,
                "eval_fitness_std": ev_std,
                "alpha": state.alpha,
                "sigma": state.sigma,
            })
            curve.wall_time.append(time.perf_counter() - t0)
            log.info("gen %d  mean %.3f  max %.3f  eval %.3f", gen, fit.mean(), fit.max(), ev_mean)
            if checkpoint_fn is not None and checkpoint_every and state.generation % checkpoint_every == 0:
                checkpoint_fn(state, curve)
    finally:
        if executor is not None:
            executor.shutdown()
    return state, curve
