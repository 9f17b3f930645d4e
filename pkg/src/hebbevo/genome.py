"""Packing between the flat ES search vector and structured network parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .plastic_net import (
    HebbianCoefficients,
    NetworkTopology,
    PlasticityVariant,
    WeightState,
)


@dataclass(frozen=True)
class GenomeMode:
    kind: str = "hebbian"  # "hebbian" | "static_weights"
    variant: PlasticityVariant = PlasticityVariant.ABCD_PLUS_ETA
    coevolve_init: bool = False

    def __post_init__(self):
        if self.kind not in ("hebbian", "static_weights"):
            raise ValueError(f"unknown genome mode {self.kind!r}")
        object.__setattr__(self, "variant", PlasticityVariant(self.variant))
        if self.kind == "static_weights" and self.coevolve_init:
            raise ValueError("static_weights genomes have no plasticity to co-evolve with")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "variant": self.variant.value, "coevolve_init": self.coevolve_init}


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class GenomeLayout:
    topology: NetworkTopology
    mode: GenomeMode
    segments: tuple[Segment, ...]

    @property
    def total_len(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def segment(self, name: str) -> Optional[Segment]:
        for seg in self.segments:
            if seg.name == name:
                return seg
        return None

    def describe(self) -> list[dict]:
        return [{"name": s.name, "offset": s.offset, "length": s.length} for s in self.segments]


def layout_for(topology: NetworkTopology, mode: GenomeMode) -> GenomeLayout:
    lengths = []
    if mode.kind == "static_weights":
        lengths.append(("direct_weights", topology.conv_param_count + topology.synapse_count))
    else:
        if topology.conv_param_count:
            lengths.append(("conv_static", topology.conv_param_count))
        lengths.append(("plasticity", len(mode.variant.active) * topology.synapse_count))
        if mode.coevolve_init:
            lengths.append(("init_weights", topology.synapse_count))
    segments, offset = [], 0
    for name, n in lengths:
        segments.append(Segment(name, offset, n))
        offset += n
    return GenomeLayout(topology, mode, tuple(segments))


@dataclass
class Decoded:
    coeffs: Optional[HebbianCoefficients] = None
    direct_weights: Optional[WeightState] = None
    conv_params: Optional[np.ndarray] = None
    init_weights: Optional[WeightState] = None


def _split_layers(flat: np.ndarray, shapes) -> list[np.ndarray]:
    lead = flat.shape[:-1]
    out, offset = [], 0
    for shape in shapes:
        n = shape[0] * shape[1]
        out.append(flat[..., offset:offset + n].reshape(lead + tuple(shape)))
        offset += n
    return out


def _join_layers(layers: list[np.ndarray]) -> np.ndarray:
    lead = layers[0].shape[:-2]
    return np.concatenate([w.reshape(lead + (-1,)) for w in layers], axis=-1)


def decode(values: np.ndarray, layout: GenomeLayout, normalization: str = "none") -> Decoded:
    """Slice a genome (or a ``(B, total_len)`` stack of genomes) into tensors.

    The plasticity segment holds one block per active coefficient, in A, B, C,
    D, eta order; each block holds every fc layer row-major as ``(pre, post)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != layout.total_len:
        raise ValueError(f"genome has length {values.shape[-1]}, layout expects {layout.total_len}")
    topo = layout.topology
    shapes = topo.layer_shapes
    syn = topo.synapse_count
    out = Decoded()
    for seg in layout.segments:
        chunk = values[..., seg.offset:seg.stop]
        if seg.name == "conv_static":
            out.conv_params = chunk
        elif seg.name == "plasticity":
            kw = {}
            for k, name in enumerate(layout.mode.variant.active):
                kw[name] = _split_layers(chunk[..., k * syn:(k + 1) * syn], shapes)
            out.coeffs = HebbianCoefficients(variant=layout.mode.variant, **kw)
        elif seg.name == "init_weights":
            out.init_weights = WeightState(_split_layers(chunk, shapes), normalization)
        elif seg.name == "direct_weights":
            nconv = topo.conv_param_count
            if nconv:
                out.conv_params = chunk[..., :nconv]
            out.direct_weights = WeightState(_split_layers(chunk[..., nconv:], shapes), normalization)
    return out


def encode(decoded: Decoded, layout: GenomeLayout) -> np.ndarray:
    parts = []
    for seg in layout.segments:
        if seg.name == "conv_static":
            parts.append(np.asarray(decoded.conv_params))
        elif seg.name == "plasticity":
            for name in layout.mode.variant.active:
                parts.append(_join_layers(getattr(decoded.coeffs, name)))
        elif seg.name == "init_weights":
            parts.append(_join_layers(decoded.init_weights.layers))
        elif seg.name == "direct_weights":
            if layout.topology.conv_param_count:
                parts.append(np.asarray(decoded.conv_params))
            parts.append(_join_layers(decoded.direct_weights.layers))
    return np.concatenate(parts, axis=-1)


@dataclass
class Genome:
    values: np.ndarray
    layout: GenomeLayout
    generation: int = 0
    lineage: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.total_len,):
            raise ValueError(f"genome shape {self.values.shape} != ({self.layout.total_len},)")
        if not np.isfinite(self.values).all():
            raise ValueError("genome contains non-finite entries")

    def decode(self, normalization: str = "none") -> Decoded:
        return decode(self.values, self.layout, normalization)


def init_genome(layout: GenomeLayout, seed) -> Genome:
    """Plasticity entries ~ U[-1, 1]; every weight-like entry ~ U[-0.1, 0.1]."""
    rng = np.random.default_rng(seed)
    values = np.empty(layout.total_len)
    for seg in layout.segments:
        bound = 1.0 if seg.name == "plasticity" else 0.1
        values[seg.offset:seg.stop] = rng.uniform(-bound, bound, size=seg.length)
    return Genome(values, layout, 0, (("init", seed),))
