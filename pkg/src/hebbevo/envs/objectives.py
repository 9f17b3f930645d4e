"""Closed-form fitness functions for exercising the optimizer without rollouts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SphereObjective:
    """F(h) = -||h - target||^2."""

    target: np.ndarray

    def __call__(self, candidates, indices=None, generation=0):
        c = np.atleast_2d(candidates)
        f = -((c - self.target) ** 2).sum(axis=1)
        return f, np.zeros(len(c), dtype=bool)


@dataclass
class LinearObjective:
    """F(h) = g . h, whose ES update direction should align with ``g``."""

    g: np.ndarray

    def __call__(self, candidates, indices=None, generation=0):
        c = np.atleast_2d(candidates)
        return c @ self.g, np.zeros(len(c), dtype=bool)


def sphere_problem(dims: int, start_distance: float, seed: int) -> tuple[SphereObjective, np.ndarray]:
    """A random target and a start point exactly ``start_distance`` away from it."""
    rng = np.random.default_rng(seed)
    target = rng.uniform(-1.0, 1.0, size=dims)
    direction = rng.standard_normal(dims)
    start = target + start_distance * direction / np.linalg.norm(direction)
    return SphereObjective(target), start
