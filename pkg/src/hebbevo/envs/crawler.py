"""Limbed crawler: a response-matrix locomotion model with parametric leg damage.

This is a deterministic stand-in for a legged robot, not a physics simulation.
Actions drive ``L`` legs; the response matrix ``M`` maps drives to leg
loads, and the damage vector scales rows of ``M``.  The body velocity relaxes
towards the mean load minus an effort cost, and fitness is distance travelled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .base import EnvError, VecEnv

LEG_NAMES_4 = ("left_front", "right_front", "left_hind", "right_hind")


@dataclass(frozen=True)
class CrawlerMorphology:
    M: np.ndarray
    damage: np.ndarray
    cost: float = 0.1
    smoothing: float = 0.2
    name: str = "healthy"

    def __post_init__(self):
        M = np.asarray(self.M, dtype=np.float64)
        d = np.asarray(self.damage, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1] or d.shape != (M.shape[0],):
            raise ValueError(f"bad morphology shapes M{M.shape} damage{d.shape}")
        if (d < 0).any() or (d > 1).any():
            raise ValueError("damage entries must lie in [0, 1]")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "damage", d)

    @property
    def legs(self) -> int:
        return self.M.shape[0]

    def to_dict(self) -> dict:
        return {"name": self.name, "M": self.M.tolist(), "damage": self.damage.tolist(),
                "cost": self.cost, "smoothing": self.smoothing}

    @classmethod
    def from_dict(cls, d: dict) -> "CrawlerMorphology":
        return cls(np.array(d["M"]), np.array(d["damage"]), d["cost"], d["smoothing"], d["name"])


@dataclass(frozen=True)
class MorphologySet:
    seen: tuple[CrawlerMorphology, ...]
    unseen: tuple[CrawlerMorphology, ...] = field(default_factory=tuple)

    def __post_init__(self):
        seen = {m.name for m in self.seen}
        if seen & {m.name for m in self.unseen}:
            raise ValueError("seen and unseen morphologies overlap")

    def all(self) -> list[tuple[CrawlerMorphology, bool]]:
        return [(m, True) for m in self.seen] + [(m, False) for m in self.unseen]

    def to_dict(self) -> dict:
        return {"seen": [m.to_dict() for m in self.seen], "unseen": [m.to_dict() for m in self.unseen]}

    @classmethod
    def from_dict(cls, d: dict) -> "MorphologySet":
        return cls(tuple(CrawlerMorphology.from_dict(m) for m in d["seen"]),
                   tuple(CrawlerMorphology.from_dict(m) for m in d["unseen"]))


def make_morphology_set(seed: int, legs: int = 4, coupling: float = 0.1, severity: float = 0.2,
                        cost: float = 0.1, smoothing: float = 0.2, right_leg: int = 1,
                        left_leg: int = 0) -> MorphologySet:
    """Healthy and right-leg-damaged bodies for training, left-leg damage held out.

    All three share one response matrix: a positive diagonal with unit mean
    and uniform off-diagonal coupling in ``[-coupling, coupling]``.
    """
    if legs < 3:
        raise ValueError("need at least three legs")
    if right_leg == left_leg:
        raise ValueError("held-out leg must differ from the training damage leg")
    rng = np.random.default_rng(seed)
    diag = rng.uniform(0.8, 1.2, size=legs)
    diag = diag / diag.mean()
    M = rng.uniform(-coupling, coupling, size=(legs, legs))
    np.fill_diagonal(M, diag)

    def body(name, leg=None):
        d = np.ones(legs)
        if leg is not None:
            d[leg] = severity
        return CrawlerMorphology(M, d, cost, smoothing, name)

    names = LEG_NAMES_4 if legs == 4 else tuple(f"leg{k}" for k in range(legs))
    return MorphologySet(
        seen=(body("healthy"), body(f"damaged_{names[right_leg]}", right_leg)),
        unseen=(body(f"damaged_{names[left_leg]}", left_leg),),
    )


@dataclass(frozen=True)
class CrawlerParams:
    episode_length: int = 1000
    phase_period: int = 20
    # extension terms; zero reproduces the bare response-matrix dynamics
    slip: float = 0.0
    height_sensor: bool = False
    obs_pad: int = 0


class CrawlerVecEnv(VecEnv):
    """Batch of crawlers; each copy may have its own morphology.

    Observation: ``[v, leg loads (L), sin(phase), cos(phase)]`` then
    ``obs_pad`` zeros.  Reward is the velocity, so the episode return is the
    distance covered.
    """

    def __init__(self, morphologies: Union[CrawlerMorphology, Sequence[CrawlerMorphology]],
                 params: CrawlerParams = CrawlerParams(), batch_size: int = None):
        if isinstance(morphologies, CrawlerMorphology):
            morphologies = [morphologies] * (batch_size or 1)
        morphologies = list(morphologies)
        if batch_size is not None and batch_size != len(morphologies):
            raise ValueError("batch_size disagrees with the number of morphologies")
        self.morphologies = morphologies
        self.params = params
        self.batch_size = len(morphologies)
        self.legs = morphologies[0].legs
        self.action_dim = self.legs
        self.obs_shape = (self.legs + 3 + int(params.height_sensor) + params.obs_pad,)
        self._DM = np.stack([m.damage[:, None] * m.M for m in morphologies])
        self._damage = np.stack([m.damage for m in morphologies])
        self._cost = np.array([m.cost for m in morphologies])
        self._rho = np.array([m.smoothing for m in morphologies])
        self.reset([0] * self.batch_size)

    def _obs(self) -> np.ndarray:
        phase = 2.0 * np.pi * self.t / self.params.phase_period
        b = self.batch_size
        parts = [self.v[:, None], self.loads,
                 np.full((b, 1), np.sin(phase)), np.full((b, 1), np.cos(phase))]
        if self.params.height_sensor:
            parts.append(np.ones((b, 1)))
        if self.params.obs_pad:
            parts.append(np.zeros((b, self.params.obs_pad)))
        return np.concatenate(parts, axis=1)

    def reset(self, seeds: Sequence[int]) -> np.ndarray:
        if len(seeds) != self.batch_size:
            raise EnvError(f"{len(seeds)} seeds for {self.batch_size} crawlers")
        self.t = 0
        self.v = np.zeros(self.batch_size)
        self.distance = np.zeros(self.batch_size)
        self.loads = np.zeros((self.batch_size, self.legs))
        self.done = np.zeros(self.batch_size, dtype=bool)
        return self._obs()

    def step(self, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.batch_size, self.legs):
            raise EnvError(f"actions shape {actions.shape}, expected {(self.batch_size, self.legs)}")
        if self.done.all():
            raise EnvError("step() after every episode finished")
        L = self.legs
        loads = (self._DM * actions[:, None, :]).sum(axis=-1)
        target = loads.sum(axis=1) / L - self._cost * (actions * actions).sum(axis=1) / L
        if self.params.slip:
            target = target - self.params.slip * ((1.0 - self._damage) * np.abs(actions)).sum(axis=1) / L
        v = (1.0 - self._rho) * self.v + self._rho * target
        live = ~self.done
        self.v = np.where(live, v, self.v)
        self.loads = np.where(live[:, None], loads, self.loads)
        reward = np.where(live, self.v, 0.0)
        self.distance = self.distance + reward
        self.t += 1
        self.done = self.done | (self.t >= self.params.episode_length)
        return self._obs(), reward, self.done.copy()
