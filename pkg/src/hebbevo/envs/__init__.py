from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .base import EnvError, SingleEnv, VecEnv
from .crawler import (
    CrawlerMorphology,
    CrawlerParams,
    CrawlerVecEnv,
    MorphologySet,
    make_morphology_set,
)
from .objectives import LinearObjective, SphereObjective, sphere_problem
from .track import Track, TrackParams, TrackVecEnv, generate_track, is_simple_loop, tile_fitness

SOLVED_DISTANCE = 100.0


@dataclass(frozen=True)
class MorphologyParams:
    seed: int = 0
    legs: int = 4
    coupling: float = 0.1
    severity: float = 0.2
    cost: float = 0.1
    smoothing: float = 0.2
    right_leg: int = 1
    left_leg: int = 0


@dataclass(frozen=True)
class SphereParams:
    dims: int = 10
    start_distance: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "crawler"  # "crawler" | "track" | "sphere"
    episode_length: int = 1000
    crawler: CrawlerParams = field(default_factory=CrawlerParams)
    morphology: MorphologyParams = field(default_factory=MorphologyParams)
    track: TrackParams = field(default_factory=TrackParams)
    sphere: SphereParams = field(default_factory=SphereParams)

    def __post_init__(self):
        if self.kind not in ("crawler", "track", "sphere"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")

    def morphology_set(self) -> MorphologySet:
        m = self.morphology
        return make_morphology_set(m.seed, m.legs, m.coupling, m.severity, m.cost, m.smoothing,
                                   m.right_leg, m.left_leg)

    @property
    def obs_shape(self) -> tuple[int, ...]:
        if self.kind == "crawler":
            c = self.crawler
            return (self.morphology.legs + 3 + int(c.height_sensor) + c.obs_pad,)
        if self.kind == "track":
            t = self.track
            return (t.channels, t.patch_size, t.patch_size)
        raise ValueError("analytic objectives have no observations")

    @property
    def action_dim(self) -> int:
        if self.kind == "crawler":
            return self.morphology.legs
        if self.kind == "track":
            return 3
        raise ValueError("analytic objectives have no actions")


def make_vec_env(config: EnvConfig, batch_size: int,
                 morphologies: Optional[Sequence[CrawlerMorphology]] = None) -> VecEnv:
    """Build ``batch_size`` copies.  Crawlers take one morphology per copy
    (default: the healthy body of the config's morphology set)."""
    if config.kind == "crawler":
        if morphologies is None:
            morphologies = [config.morphology_set().seen[0]] * batch_size
        params = replace(config.crawler, episode_length=config.episode_length)
        return CrawlerVecEnv(list(morphologies), params)
    if config.kind == "track":
        params = replace(config.track, episode_length=config.episode_length)
        return TrackVecEnv(params, batch_size)
    raise ValueError(f"{config.kind!r} is not an episodic environment")


def make_env(config: EnvConfig, morphology: Optional[CrawlerMorphology] = None) -> SingleEnv:
    return SingleEnv(make_vec_env(config, 1, None if morphology is None else [morphology]))


__all__ = [
    "CrawlerMorphology", "CrawlerParams", "CrawlerVecEnv", "EnvConfig", "EnvError",
    "LinearObjective", "MorphologyParams", "MorphologySet", "SOLVED_DISTANCE", "SingleEnv",
    "SphereObjective", "SphereParams", "Track", "TrackParams", "TrackVecEnv", "VecEnv",
    "generate_track", "is_simple_loop", "make_env", "make_morphology_set", "make_vec_env",
    "sphere_problem", "tile_fitness",
]
