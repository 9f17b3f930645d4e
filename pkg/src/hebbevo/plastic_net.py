"""Feedforward policy networks whose fully connected weights change every
timestep under per-connection Hebbian rules.

Every array in this module may carry leading batch dimensions: a weight
matrix of shape ``(in, out)`` for a single network becomes ``(B, in, out)``
when ``B`` independent lifetimes are simulated together.  All reductions are
written so that one episode's numbers do not depend on which other episodes
share its batch.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

COEFF_NAMES = ("A", "B", "C", "D", "eta")


class ShapeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Raised when a Hebbian update produces non-finite weights."""


class PlasticityVariant(str, enum.Enum):
    A_ONLY = "A_only"
    A_PLUS_ETA = "A_plus_eta"
    AD = "AD"
    ABCD = "ABCD"
    ABCD_PLUS_ETA = "ABCD_plus_eta"

    @property
    def active(self) -> tuple[str, ...]:
        return _ACTIVE[self]


_ACTIVE = {
    PlasticityVariant.A_ONLY: ("A",),
    PlasticityVariant.A_PLUS_ETA: ("A", "eta"),
    PlasticityVariant.AD: ("A", "D"),
    PlasticityVariant.ABCD: ("A", "B", "C", "D"),
    PlasticityVariant.ABCD_PLUS_ETA: ("A", "B", "C", "D", "eta"),
}


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    pool_window: int = 1
    pool_stride: int = 1

    @property
    def n_params(self) -> int:
        return self.in_channels * self.out_channels * self.kernel_size ** 2


@dataclass(frozen=True)
class ConvFrontendSpec:
    """Static tanh convolutions, each followed by max pooling.  No biases."""

    input_shape: tuple[int, int, int]
    layers: tuple[ConvLayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        c = self.input_shape[0]
        for layer in self.layers:
            if layer.in_channels != c:
                raise ShapeError(f"conv layer expects {layer.in_channels} channels, gets {c}")
            c = layer.out_channels
        if self.flattened_output_dim <= 0:
            raise ShapeError(f"conv stack collapses input {self.input_shape}")

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        c, h, w = self.input_shape
        for layer in self.layers:
            k, s = layer.kernel_size, layer.stride
            h, w = (h - k) // s + 1, (w - k) // s + 1
            p, ps = layer.pool_window, layer.pool_stride
            h, w = (h - p) // ps + 1, (w - p) // ps + 1
            c = layer.out_channels
        return c, h, w

    @property
    def flattened_output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    def kernel_shapes(self) -> list[tuple[int, int, int, int]]:
        return [(l.out_channels, l.in_channels, l.kernel_size, l.kernel_size) for l in self.layers]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [vars(layer).copy() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvFrontendSpec":
        return cls(tuple(d["input_shape"]), tuple(ConvLayerSpec(**l) for l in d["layers"]))


@dataclass(frozen=True)
class NetworkTopology:
    """Layer sizes of a bias-free tanh network.

    ``input_dim`` is the width of the first fully connected layer's input; with
    a conv frontend it must equal the frontend's flattened output.
    """

    input_dim: int
    fc_layer_sizes: tuple[int, ...]
    conv_frontend: Optional[ConvFrontendSpec] = None

    def __post_init__(self):
        object.__setattr__(self, "fc_layer_sizes", tuple(int(s) for s in self.fc_layer_sizes))
        if self.input_dim <= 0 or not self.fc_layer_sizes or min(self.fc_layer_sizes) <= 0:
            raise ShapeError(f"invalid topology {self.input_dim} -> {self.fc_layer_sizes}")
        if self.conv_frontend is not None and self.conv_frontend.flattened_output_dim != self.input_dim:
            raise ShapeError(
                f"conv frontend flattens to {self.conv_frontend.flattened_output_dim}, "
                f"fc input_dim is {self.input_dim}"
            )

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = (self.input_dim,) + self.fc_layer_sizes
        return [(sizes[k], sizes[k + 1]) for k in range(len(self.fc_layer_sizes))]

    @property
    def synapse_count(self) -> int:
        return sum(i * o for i, o in self.layer_shapes)

    @property
    def conv_param_count(self) -> int:
        return 0 if self.conv_frontend is None else self.conv_frontend.n_params

    @property
    def action_dim(self) -> int:
        return self.fc_layer_sizes[-1]

    @property
    def obs_shape(self) -> tuple[int, ...]:
        if self.conv_frontend is not None:
            return self.conv_frontend.input_shape
        return (self.input_dim,)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "fc_layer_sizes": list(self.fc_layer_sizes),
            "conv_frontend": None if self.conv_frontend is None else self.conv_frontend.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkTopology":
        conv = d.get("conv_frontend")
        return cls(
            int(d["input_dim"]),
            tuple(d["fc_layer_sizes"]),
            None if conv is None else ConvFrontendSpec.from_dict(conv),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class WeightState:
    layers: list[np.ndarray]
    normalization: str = "none"  # "none" | "layer-max-abs"

    def copy(self) -> "WeightState":
        return WeightState([w.copy() for w in self.layers], self.normalization)

    def flat(self) -> np.ndarray:
        """Concatenate the layers row-major, keeping any batch dimensions."""
        lead = self.layers[0].shape[:-2]
        return np.concatenate([w.reshape(lead + (-1,)) for w in self.layers], axis=-1)


@dataclass
class HebbianCoefficients:
    """Per-connection coefficient tensors shaped like the weight matrices.

    Tensors for coefficients the variant does not evolve are ignored: the
    inactive A-D terms act as zero and an inactive eta acts as one.
    """

    A: list[np.ndarray]
    B: Optional[list[np.ndarray]] = None
    C: Optional[list[np.ndarray]] = None
    D: Optional[list[np.ndarray]] = None
    eta: Optional[list[np.ndarray]] = None
    variant: PlasticityVariant = PlasticityVariant.ABCD_PLUS_ETA

    def __post_init__(self):
        self.variant = PlasticityVariant(self.variant)
        missing = [n for n in self.variant.active if getattr(self, n) is None]
        if missing:
            raise ValueError(f"variant {self.variant.value} needs coefficients {missing}")

    def active_terms(self) -> dict[str, list[np.ndarray]]:
        return {name: getattr(self, name) for name in self.variant.active}

    def full(self) -> dict[str, list[np.ndarray]]:
        """All five tensors with the variant's pinned values filled in."""
        out = {}
        for name in COEFF_NAMES:
            if name in self.variant.active:
                out[name] = getattr(self, name)
            else:
                fill = 1.0 if name == "eta" else 0.0
                out[name] = [np.full_like(a, fill) for a in self.A]
        return out


@dataclass
class ActivationTrace:
    pre: list[np.ndarray]
    post: list[np.ndarray]


def init_weights(topology: NetworkTopology, seed, dist: str = "uniform",
                 normalization: str = "none") -> WeightState:
    """Sample fresh fc weights: ``uniform`` is U[-0.1, 0.1], ``normal`` is N(0, 0.1)."""
    rng = np.random.default_rng(seed)
    layers = []
    for shape in topology.layer_shapes:
        if dist == "uniform":
            layers.append(rng.uniform(-0.1, 0.1, size=shape))
        elif dist == "normal":
            layers.append(rng.normal(0.0, 0.1, size=shape))
        else:
            raise ValueError(f"unknown weight distribution {dist!r}")
    return WeightState(layers, normalization)


def _conv2d(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    k = kernel.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return np.einsum("...chwij,...ocij->...ohw", win, kernel)


def _maxpool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    if window == 1 and stride == 1:
        return x
    win = sliding_window_view(x, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return win.max(axis=(-2, -1))


def split_conv_params(spec: ConvFrontendSpec, conv_params: np.ndarray) -> list[np.ndarray]:
    conv_params = np.asarray(conv_params, dtype=np.float64)
    if conv_params.shape[-1] != spec.n_params:
        raise ShapeError(f"conv params have length {conv_params.shape[-1]}, expected {spec.n_params}")
    lead = conv_params.shape[:-1]
    kernels, offset = [], 0
    for shape in spec.kernel_shapes():
        size = int(np.prod(shape))
        kernels.append(conv_params[..., offset:offset + size].reshape(lead + shape))
        offset += size
    return kernels


def conv_features(spec: ConvFrontendSpec, conv_params: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Run the static conv stack and flatten to ``(..., flattened_output_dim)``."""
    kernels = split_conv_params(spec, conv_params)
    x = obs
    for layer, kernel in zip(spec.layers, kernels):
        x = np.tanh(_conv2d(x, kernel, layer.stride))
        x = _maxpool(x, layer.pool_window, layer.pool_stride)
    return x.reshape(x.shape[:-3] + (-1,))


def _dense(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # explicit product-and-sum keeps the per-entry summation order independent
    # of the batch size (BLAS blocking is not)
    return (x[..., :, None] * w).sum(axis=-2)


def forward(topology: NetworkTopology, weights: WeightState, conv_params: Optional[np.ndarray],
            obs: np.ndarray) -> tuple[np.ndarray, ActivationTrace]:
    obs = np.asarray(obs, dtype=np.float64)
    if topology.conv_frontend is not None:
        shape = topology.conv_frontend.input_shape
        if obs.shape[-3:] != shape:
            raise ShapeError(f"observation shape {obs.shape} does not end in {shape}")
        if conv_params is None:
            raise ShapeError("conv frontend requires conv_params")
        x = conv_features(topology.conv_frontend, conv_params, obs)
    else:
        if obs.shape[-1] != topology.input_dim:
            raise ShapeError(f"observation has {obs.shape[-1]} entries, network expects {topology.input_dim}")
        x = obs
    if len(weights.layers) != len(topology.layer_shapes):
        raise ShapeError(f"{len(weights.layers)} weight layers for {len(topology.layer_shapes)} fc layers")
    pre, post = [], []
    for w, shape in zip(weights.layers, topology.layer_shapes):
        if w.shape[-2:] != shape:
            raise ShapeError(f"weight matrix {w.shape} does not end in {shape}")
        pre.append(x)
        x = np.tanh(_dense(x, w))
        post.append(x)
    return x, ActivationTrace(pre, post)


def hebbian_delta(coeffs: HebbianCoefficients, layer: int, o_pre: np.ndarray,
                  o_post: np.ndarray) -> np.ndarray:
    """eta * (A*o_i*o_j + B*o_i + C*o_j + D) for one layer, inactive terms skipped."""
    terms = coeffs.active_terms()
    oi = o_pre[..., :, None]
    oj = o_post[..., None, :]
    total = terms["A"][layer] * oi * oj
    if "B" in terms:
        total = total + terms["B"][layer] * oi
    if "C" in terms:
        total = total + terms["C"][layer] * oj
    if "D" in terms:
        total = total + terms["D"][layer]
    if "eta" in terms:
        total = terms["eta"][layer] * total
    return total


def normalize_layer(weights: WeightState) -> WeightState:
    """Scale each layer by its largest magnitude whenever that exceeds one."""
    out = []
    for w in weights.layers:
        peak = np.abs(w).max(axis=(-2, -1), keepdims=True)
        out.append(np.where(peak > 1.0, w / np.where(peak > 1.0, peak, 1.0), w))
    return WeightState(out, weights.normalization)


def hebbian_step(weights: WeightState, coeffs: HebbianCoefficients, trace: ActivationTrace) -> WeightState:
    new = [w + hebbian_delta(coeffs, k, trace.pre[k], trace.post[k]) for k, w in enumerate(weights.layers)]
    if not all(np.isfinite(w).all() for w in new):
        raise DivergenceError("Hebbian update produced non-finite weights")
    state = WeightState(new, weights.normalization)
    if weights.normalization == "layer-max-abs":
        state = normalize_layer(state)
    return state


# ---------------------------------------------------------------------------
# lifetimes


@dataclass
class EpisodeOutcome:
    fitness: float
    steps: int
    diverged: bool = False
    rewards: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None
    env_actions: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None  # (T, synapses) snapshots, when recorded
    weight_steps: Optional[np.ndarray] = None
    perturbation_log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "fitness": float(self.fitness),
            "steps": int(self.steps),
            "diverged": bool(self.diverged),
            "perturbation_log": list(self.perturbation_log),
        }
        for name in ("rewards", "actions", "env_actions"):
            value = getattr(self, name)
            if value is not None:
                d[name] = np.asarray(value).tolist()
        return d


class LifetimeHooks:
    """Per-timestep callbacks for :func:`run_lifetimes`.  Defaults do nothing."""

    def before_forward(self, t: int, weights: WeightState, active: np.ndarray) -> WeightState:
        return weights

    def env_action(self, t: int, action: np.ndarray) -> np.ndarray:
        return action

    def plastic(self, t: int) -> bool:
        return True

    def log(self) -> list:
        return []


@dataclass
class _Recording:
    stride: int
    rewards: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    env_actions: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    weight_steps: list = field(default_factory=list)


def _sequential_update(topology, weights, coeffs, trace):
    # layer k's update sees activity recomputed through the already-updated layers below it
    new = []
    x = trace.pre[0]
    for k, w in enumerate(weights.layers):
        post = np.tanh(_dense(x, w))
        w = w + hebbian_delta(coeffs, k, x, post)
        new.append(w)
        x = np.tanh(_dense(x, w))
    return new


def _fast_forward(topology, weights, conv_params, obs):
    if topology.conv_frontend is not None:
        x = conv_features(topology.conv_frontend, conv_params, obs)
    else:
        x = obs
    x = np.ascontiguousarray(x, dtype=np.float64)
    pre, post = [], []
    for w in weights.layers:
        pre.append(x)
        x = _kernels.dense_tanh(x, w)
        post.append(x)
    return x, ActivationTrace(pre, post)


def _fast_update(coeffs, weights, trace, active):
    ok = np.ones(active.shape[0], dtype=bool)
    terms = coeffs.active_terms()
    empty = _kernels._EMPTY
    for k, w in enumerate(weights.layers):
        _kernels.hebb_update(
            w, terms["A"][k],
            terms["B"][k] if "B" in terms else empty,
            terms["C"][k] if "C" in terms else empty,
            terms["D"][k] if "D" in terms else empty,
            terms["eta"][k] if "eta" in terms else empty,
            trace.pre[k], trace.post[k],
            "B" in terms, "C" in terms, "D" in terms, "eta" in terms,
            active, ok,
        )
    return ok


def _contiguous_coeffs(coeffs: HebbianCoefficients) -> HebbianCoefficients:
    kw = {name: [np.ascontiguousarray(t, dtype=np.float64) for t in getattr(coeffs, name)]
          for name in coeffs.variant.active}
    return HebbianCoefficients(variant=coeffs.variant, **kw)


def run_lifetimes(topology: NetworkTopology, env, init_weights: WeightState,
                  coeffs: Optional[HebbianCoefficients], conv_params: Optional[np.ndarray],
                  steps: int, env_seeds: Sequence[int], hooks: Optional[LifetimeHooks] = None,
                  floor_fitness: float = -1000.0, update_order: str = "synchronous",
                  record: bool = False, record_weights: bool = False,
                  record_stride: int = 1, fast: Optional[bool] = None) -> list[EpisodeOutcome]:
    """Simulate ``B`` lifetimes in lockstep.

    ``init_weights`` and (when given) ``coeffs``/``conv_params`` carry a leading
    batch axis of size ``B = env.batch_size``.  ``coeffs=None`` runs the static
    baseline: weights never change.  The reward the environment emits is only
    accumulated into fitness; nothing the network computes depends on it.
    """
    hooks = hooks or LifetimeHooks()
    if fast is None:
        fast = _kernels.HAVE_NUMBA
    fast = fast and _kernels.HAVE_NUMBA and update_order == "synchronous"
    batch = env.batch_size
    obs = env.reset(env_seeds)
    weights = WeightState([np.array(w, dtype=np.float64, order="C") for w in init_weights.layers],
                          init_weights.normalization)
    for w in weights.layers:
        if w.shape[0] != batch:
            raise ShapeError(f"weights batch {w.shape[0]} != env batch {batch}")
    if coeffs is not None and fast:
        coeffs = _contiguous_coeffs(coeffs)
    active = np.ones(batch, dtype=bool)
    diverged = np.zeros(batch, dtype=bool)
    fitness = np.zeros(batch)
    n_steps = np.zeros(batch, dtype=int)
    rec = _Recording(record_stride) if (record or record_weights) else None

    for t in range(steps):
        weights = hooks.before_forward(t, weights, active)
        if rec is not None and record_weights and t % record_stride == 0:
            rec.weights.append(weights.flat())
            rec.weight_steps.append(t)
        if fast:
            action, trace = _fast_forward(topology, weights, conv_params, obs)
        else:
            action, trace = forward(topology, weights, conv_params, obs)
        sent = hooks.env_action(t, action)
        obs, reward, done = env.step(sent)
        fitness += np.where(active, reward, 0.0)
        n_steps += active
        if rec is not None:
            rec.rewards.append(np.where(active, reward, 0.0))
            rec.actions.append(action)
            rec.env_actions.append(sent)

        if coeffs is not None and hooks.plastic(t):
            if fast:
                weights = WeightState([np.ascontiguousarray(w) for w in weights.layers],
                                      weights.normalization)
                ok = _fast_update(coeffs, weights, trace, active)
            else:
                if update_order == "sequential":
                    new = _sequential_update(topology, weights, coeffs, trace)
                else:
                    new = [w + hebbian_delta(coeffs, k, trace.pre[k], trace.post[k])
                           for k, w in enumerate(weights.layers)]
                ok = np.ones(batch, dtype=bool)
                for w in new:
                    ok &= np.isfinite(w).all(axis=(-2, -1))
                keep = (active & ok)[:, None, None]
                weights = WeightState([np.where(keep, wn, wo) for wn, wo in zip(new, weights.layers)],
                                      weights.normalization)
            bad = active & ~ok
            if bad.any():
                diverged |= bad
                fitness[bad] = floor_fitness
                active &= ~bad
                for w in weights.layers:
                    w[bad] = 0.0
            if weights.normalization == "layer-max-abs":
                weights = normalize_layer(weights)
        active &= ~np.asarray(done, dtype=bool)
        if not active.any():
            break

    log = hooks.log()
    outcomes = []
    for b in range(batch):
        out = EpisodeOutcome(float(fitness[b]), int(n_steps[b]), bool(diverged[b]),
                             perturbation_log=[e for e in log if e.get("episode", b) == b])
        if rec is not None:
            if rec.rewards:
                out.rewards = np.array([r[b] for r in rec.rewards])
                out.actions = np.array([a[b] for a in rec.actions])
                out.env_actions = np.array([a[b] for a in rec.env_actions])
            if rec.weights:
                out.weights = np.array([w[b] for w in rec.weights])
                out.weight_steps = np.array(rec.weight_steps)
        outcomes.append(out)
    return outcomes


def stack_weights(states: Sequence[WeightState]) -> WeightState:
    return WeightState([np.stack(ws) for ws in zip(*(s.layers for s in states))],
                       states[0].normalization)


def stack_coefficients(coeffs: Sequence[HebbianCoefficients]) -> HebbianCoefficients:
    variant = coeffs[0].variant
    kw = {}
    for name in variant.active:
        kw[name] = [np.stack(ts) for ts in zip(*(getattr(c, name) for c in coeffs))]
    return HebbianCoefficients(variant=variant, **kw)


def run_lifetime(topology: NetworkTopology, coeffs: Optional[HebbianCoefficients],
                 conv_params: Optional[np.ndarray], env, steps: int, init_seed,
                 hooks: Optional[LifetimeHooks] = None, env_seed: int = 0,
                 dist: str = "uniform", normalization: str = "none",
                 initial: Optional[WeightState] = None, **kwargs) -> EpisodeOutcome:
    """One lifetime from freshly sampled weights; ``env`` is a batch-of-one env.

    ``initial`` overrides the sampled weights (static baseline or co-evolved
    initial weights).
    """
    w0 = initial if initial is not None else init_weights(topology, init_seed, dist, normalization)
    batched = stack_weights([w0])
    c = None if coeffs is None else stack_coefficients([coeffs])
    cp = None if conv_params is None else np.asarray(conv_params)[None]
    return run_lifetimes(topology, env, batched, c, cp, steps, [env_seed], hooks, **kwargs)[0]
