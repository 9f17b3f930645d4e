"""Experiment configuration: TOML text with named presets and a canonical form."""
from __future__ import annotations

import dataclasses
import hashlib
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import CrawlerParams, EnvConfig, MorphologyParams, SphereParams, TrackParams
from .genome import GenomeLayout, GenomeMode, layout_for
from .plastic_net import ConvFrontendSpec, ConvLayerSpec, NetworkTopology, PlasticityVariant
from .rollout import RolloutOptions, SeedBank

OUTPUT_ROOT_ENV = "HEBBEVO_OUTPUT_ROOT"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (128, 64)
    frontend: str = "none"  # "none" | "vision" | "reduced"
    normalization: str = "none"  # "none" | "layer-max-abs"
    weight_dist: str = "uniform"
    update_order: str = "synchronous"


@dataclass(frozen=True)
class GenomeConfig:
    kind: str = "hebbian"
    variant: str = "ABCD_plus_eta"
    coevolve_init: bool = False


@dataclass(frozen=True)
class EsConfig:
    n: int = 200
    alpha: float = 0.2
    alpha_decay: float = 0.995
    sigma: float = 0.1
    sigma_decay: float = 0.999
    mirrored: bool = True
    shaping: str = "raw"
    budget: int = 100


@dataclass(frozen=True)
class SeedConfig:
    master: int = 0
    genome_init: int = 0
    eval_bank: int = 10_007
    eval_episodes: int = 100
    train_episodes: int = 1
    common_init: bool = False


@dataclass(frozen=True)
class RunConfig:
    workers: int = 1
    eval_every: int = 10
    eval_bank_size: int = 10
    checkpoint_every: int = 10
    floor_fitness: float = -1000.0
    record_stride: int = 1
    max_batch: int = 1024
    output_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    preset: str = ""
    network: NetworkConfig = field(default_factory=NetworkConfig)
    genome: GenomeConfig = field(default_factory=GenomeConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    es: EsConfig = field(default_factory=EsConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # -- derived objects ----------------------------------------------------

    def topology(self) -> NetworkTopology:
        env = self.env
        if env.kind == "sphere":
            raise ConfigError("env.kind", "the sphere objective has no network")
        hidden = tuple(self.network.hidden)
        if self.network.frontend != "none":
            frontend = (vision_frontend if self.network.frontend == "vision" else reduced_frontend)(env.obs_shape)
            return NetworkTopology(frontend.flattened_output_dim, hidden + (env.action_dim,), frontend)
        if len(env.obs_shape) != 1:
            raise ConfigError("network.frontend", f"image observations {env.obs_shape} need a conv frontend")
        return NetworkTopology(env.obs_shape[0], hidden + (env.action_dim,))

    def layout(self) -> GenomeLayout:
        g = self.genome
        return layout_for(self.topology(), GenomeMode(g.kind, PlasticityVariant(g.variant), g.coevolve_init))

    def rollout_options(self) -> RolloutOptions:
        return RolloutOptions(self.network.weight_dist, self.network.normalization, self.run.floor_fitness,
                              self.network.update_order, self.run.max_batch)

    def eval_bank(self, size: Optional[int] = None) -> SeedBank:
        return SeedBank(self.seeds.eval_bank, size or self.seeds.eval_episodes)

    def output_dir(self) -> Path:
        if self.run.output_dir:
            return Path(self.run.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.name

    def validate(self) -> "ExperimentConfig":
        _check(self.network.frontend in ("none", "vision", "reduced"), "network.frontend",
               "must be 'none', 'vision' or 'reduced'")
        _check(self.network.normalization in ("none", "layer-max-abs"), "network.normalization",
               "must be 'none' or 'layer-max-abs'")
        _check(self.network.weight_dist in ("uniform", "normal"), "network.weight_dist", "must be uniform or normal")
        _check(self.network.update_order in ("synchronous", "sequential"), "network.update_order",
               "must be synchronous or sequential")
        _check(all(int(h) > 0 for h in self.network.hidden), "network.hidden", "sizes must be positive")
        _check(self.genome.kind in ("hebbian", "static_weights"), "genome.kind", "must be hebbian or static_weights")
        try:
            PlasticityVariant(self.genome.variant)
        except ValueError:
            raise ConfigError("genome.variant", f"unknown variant {self.genome.variant!r}") from None
        _check(self.es.n >= 1, "es.n", "must be >= 1")
        _check(not (self.es.mirrored and self.es.n % 2), "es.n", "mirrored sampling needs an even population")
        _check(self.es.alpha > 0, "es.alpha", "must be > 0")
        _check(self.es.sigma > 0, "es.sigma", "must be > 0")
        _check(self.es.shaping in ("raw", "centered_rank", "z_score"), "es.shaping", "unknown fitness shaping")
        _check(self.es.budget >= 0, "es.budget", "must be >= 0")
        _check(self.seeds.eval_episodes >= 1, "seeds.eval_episodes", "must be >= 1")
        _check(self.seeds.train_episodes >= 1, "seeds.train_episodes", "must be >= 1")
        _check(self.run.workers >= 1, "run.workers", "must be >= 1")
        _check(self.run.record_stride >= 1, "run.record_stride", "must be >= 1")
        if self.env.kind != "sphere":
            try:
                self.layout()
            except (ValueError, ConfigError) as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError("network", str(e)) from None
        return self

    # -- text form ----------------------------------------------------------

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dumps(self) -> str:
        return f"# hebbevo config v{CONFIG_VERSION}\n" + tomli_w.dumps(_sorted(self.to_dict()))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _to_plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    return obj


def _sorted(d):
    if isinstance(d, dict):
        return {k: _sorted(d[k]) for k in sorted(d)}
    return d


def _build(cls, data: dict, base, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}".lstrip("."), "unknown field")
    kw = {}
    for name, value in data.items():
        p = f"{path}.{name}".lstrip(".")
        current = getattr(base, name)
        if dataclasses.is_dataclass(current):
            kw[name] = _build(type(current), value, current, p)
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(p, f"expected a boolean, got {value!r}")
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(p, f"expected an integer, got {value!r}")
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(p, f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(p, f"expected a list, got {value!r}")
            value = tuple(value)
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(p, f"expected a string, got {value!r}")
        kw[name] = value
    try:
        return replace(base, **kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(path or "<root>", str(e)) from None


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    preset = data.get("preset", "")
    if preset and preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    base = PRESETS[preset]() if preset else ExperimentConfig()
    return _build(ExperimentConfig, data, base, "").validate()


def loads(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("<text>", str(e)) from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def vision_frontend(obs_shape) -> ConvFrontendSpec:
    c = obs_shape[0]
    return ConvFrontendSpec(tuple(obs_shape), (
        ConvLayerSpec(c, 6, 3, 1, 2, 2),
        ConvLayerSpec(6, 8, 5, 1, 4, 4),
    ))


def reduced_frontend(obs_shape) -> ConvFrontendSpec:
    """Small two-layer stack for 16x16 patches: 16 -> 14 -> 7 -> 5 -> 2, 8 channels."""
    c = obs_shape[0]
    return ConvFrontendSpec(tuple(obs_shape), (
        ConvLayerSpec(c, 4, 3, 1, 2, 2),
        ConvLayerSpec(4, 8, 3, 1, 2, 2),
    ))


# ---------------------------------------------------------------------------
# presets


def _full_quadruped() -> ExperimentConfig:
    # 8 legs plus zero padding give a 28-input, 8-output network
    return ExperimentConfig(
        name="paper-quadruped", preset="paper-quadruped",
        network=NetworkConfig(hidden=(128, 64)),
        env=EnvConfig("crawler", 1000, CrawlerParams(height_sensor=False, obs_pad=17), MorphologyParams(legs=8)),
        es=EsConfig(n=500, budget=300),
    )


def _full_vision() -> ExperimentConfig:
    return ExperimentConfig(
        name="paper-vision", preset="paper-vision",
        network=NetworkConfig(hidden=(128, 64), frontend="vision", normalization="layer-max-abs"),
        env=EnvConfig("track", 1000, track=TrackParams(patch_size=84, channels=3)),
        es=EsConfig(n=200, budget=300),
    )


def _desk_crawler() -> ExperimentConfig:
    return ExperimentConfig(
        name="desk-crawler", preset="desk-crawler",
        network=NetworkConfig(hidden=(16, 8)),
        env=EnvConfig("crawler", 1000, CrawlerParams()),
        es=EsConfig(n=100, shaping="centered_rank", budget=300),
        run=RunConfig(eval_every=10, eval_bank_size=10, checkpoint_every=50),
    )


def _desk_track() -> ExperimentConfig:
    return ExperimentConfig(
        name="desk-track", preset="desk-track",
        network=NetworkConfig(hidden=(16, 8), frontend="reduced", normalization="layer-max-abs"),
        env=EnvConfig("track", 400, track=TrackParams(patch_size=16, channels=1)),
        es=EsConfig(n=50, shaping="centered_rank", budget=50),
    )


def _sphere_smoke() -> ExperimentConfig:
    return ExperimentConfig(
        name="sphere-smoke", preset="sphere-smoke",
        env=EnvConfig("sphere", sphere=SphereParams(dims=10, start_distance=5.0, seed=0)),
        es=EsConfig(n=100, alpha=0.2, sigma=0.1, alpha_decay=1.0, sigma_decay=1.0, budget=300),
        seeds=SeedConfig(eval_episodes=1),
        run=RunConfig(eval_every=1, checkpoint_every=100),
    )


PRESETS = {
    "paper-quadruped": _full_quadruped,
    "paper-vision": _full_vision,
    "desk-crawler": _desk_crawler,
    "desk-track": _desk_track,
    "sphere-smoke": _sphere_smoke,
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name](), **overrides).validate()
