"""Procedurally generated grid racetrack seen through an egocentric pixel patch.

Car kinematics are a simple unicycle model with bounded turning rate and
speed plus extra friction off the track.  None of it is meant to mimic Box2D;
only the fitness structure (a per-frame penalty and a per-new-tile bonus) is
shared with the classic car racing benchmark.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .base import EnvError, VecEnv

_STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))


class TrackGenerationError(RuntimeError):
    pass


def tile_fitness(tiles_visited: int, total_tiles: int, frames: int) -> float:
    """1000 * visited / N - 0.1 * frames, correctly rounded.

    Evaluated as one division of exact integers, so the only rounding is the
    final one.
    """
    if total_tiles <= 0 or not 0 <= tiles_visited <= total_tiles:
        raise ValueError(f"need 0 <= visited <= N and N > 0, got {tiles_visited}, {total_tiles}")
    return (10000 * tiles_visited - total_tiles * frames) / (10 * total_tiles)


@dataclass(frozen=True)
class TrackParams:
    min_side: int = 5
    max_side: int = 9
    bumps: int = 12  # deformation attempts; 0 keeps the bare rectangle
    bump_length: int = 3
    max_retries: int = 20
    episode_length: int = 1000
    patch_size: int = 16
    channels: int = 1
    view_ahead: float = 3.0
    view_behind: float = 1.0
    view_half_width: float = 2.0
    max_speed: float = 0.4
    accel: float = 0.05
    brake: float = 0.1
    drag: float = 0.02
    turn_rate: float = 0.15
    offtrack_friction: float = 0.2
    escape_margin: int = 4


@dataclass(frozen=True)
class Track:
    tiles: np.ndarray  # (N, 2) integer grid coordinates in driving order
    seed: int

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def to_json(self) -> dict:
        return {"seed": self.seed, "n_tiles": self.n_tiles, "tiles": self.tiles.tolist()}


def _rectangle(w: int, h: int) -> list[tuple[int, int]]:
    loop = [(x, 0) for x in range(w)]
    loop += [(w - 1, y) for y in range(1, h)]
    loop += [(x, h - 1) for x in range(w - 2, -1, -1)]
    loop += [(0, y) for y in range(h - 2, 0, -1)]
    return loop


def is_simple_loop(tiles: Sequence[tuple[int, int]]) -> bool:
    """Closed 4-connected cycle whose non-consecutive tiles never touch."""
    n = len(tiles)
    if n < 4 or len(set(tiles)) != n:
        return False
    index = {t: k for k, t in enumerate(tiles)}
    for k, (x, y) in enumerate(tiles):
        nx, ny = tiles[(k + 1) % n]
        if abs(nx - x) + abs(ny - y) != 1:
            return False
        for dx, dy in _STEPS:
            j = index.get((x + dx, y + dy))
            if j is not None and (j - k) % n not in (1, n - 1):
                return False
    return True


def _bump(loop, rng, length):
    n = len(loop)
    i = int(rng.integers(n))
    seg = [loop[(i + k) % n] for k in range(length)]
    dx, dy = seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]
    for k in range(1, length):
        if (seg[k][0] - seg[k - 1][0], seg[k][1] - seg[k - 1][1]) != (dx, dy):
            return None
    sign = 1 if rng.random() < 0.5 else -1
    nx, ny = -dy * sign, dx * sign
    shifted = [(x + nx, y + ny) for x, y in seg]
    new = [seg[0]] + shifted + [seg[-1]]
    # rebuild starting right after the segment so index arithmetic stays simple
    rest = [loop[(i + length + k) % n] for k in range(n - length)]
    candidate = new + rest
    return candidate if is_simple_loop(candidate) else None


def generate_track(seed: int, params: TrackParams = TrackParams()) -> Track:
    rng = np.random.default_rng([seed, 7919])
    for _ in range(params.max_retries):
        w = int(rng.integers(params.min_side, params.max_side + 1))
        h = int(rng.integers(params.min_side, params.max_side + 1))
        loop = _rectangle(w, h)
        for _ in range(params.bumps):
            bumped = _bump(loop, rng, max(3, params.bump_length))
            if bumped is not None:
                loop = bumped
        if is_simple_loop(loop):
            # start on the tile that was the rectangle's origin when possible
            start = loop.index((0, 0)) if (0, 0) in loop else 0
            loop = loop[start:] + loop[:start]
            tiles = np.array(loop, dtype=np.int64)
            tiles -= tiles.min(axis=0)
            return Track(tiles, seed)
    raise TrackGenerationError(f"could not generate a valid track for seed {seed}")


class TrackVecEnv(VecEnv):
    """Batch of cars, each on the track generated from its reset seed."""

    def __init__(self, params: TrackParams = TrackParams(), batch_size: int = 1):
        self.params = params
        self.batch_size = batch_size
        self.action_dim = 3
        self.obs_shape = (params.channels, params.patch_size, params.patch_size)
        p = params.patch_size
        rows, cols = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        depth = params.view_ahead + params.view_behind
        self._fwd = (p - 1 - rows + 0.5) / p * depth - params.view_behind
        self._lat = (cols + 0.5) / p * 2 * params.view_half_width - params.view_half_width
        self.tracks: list[Track] = []

    def reset(self, seeds: Sequence[int]) -> np.ndarray:
        if len(seeds) != self.batch_size:
            raise EnvError(f"{len(seeds)} seeds for {self.batch_size} cars")
        pr = self.params
        self.tracks = [generate_track(int(s), pr) for s in seeds]
        m = pr.escape_margin
        gh = max(int(t.tiles[:, 1].max()) for t in self.tracks) + 1 + 2 * m
        gw = max(int(t.tiles[:, 0].max()) for t in self.tracks) + 1 + 2 * m
        self._index = np.full((self.batch_size, gh, gw), -1, dtype=np.int64)
        for b, t in enumerate(self.tracks):
            self._index[b, t.tiles[:, 1] + m, t.tiles[:, 0] + m] = np.arange(t.n_tiles)
        self._n = np.array([t.n_tiles for t in self.tracks])
        self._visited = np.zeros((self.batch_size, int(self._n.max())), dtype=bool)
        start = np.array([t.tiles[0] for t in self.tracks], dtype=np.float64) + m + 0.5
        nxt = np.array([t.tiles[1] for t in self.tracks], dtype=np.float64) + m + 0.5
        self.pos = start
        delta = nxt - start
        self.heading = np.arctan2(delta[:, 1], delta[:, 0])
        self.speed = np.zeros(self.batch_size)
        self.frames = np.zeros(self.batch_size, dtype=np.int64)
        self.done = np.zeros(self.batch_size, dtype=bool)
        return self._render()

    def _lookup(self, x, y):
        b = np.arange(self.batch_size).reshape((-1,) + (1,) * (x.ndim - 1))
        gh, gw = self._index.shape[1:]
        ix = np.floor(x).astype(np.int64)
        iy = np.floor(y).astype(np.int64)
        inside = (ix >= 0) & (ix < gw) & (iy >= 0) & (iy < gh)
        idx = self._index[b, np.clip(iy, 0, gh - 1), np.clip(ix, 0, gw - 1)]
        return np.where(inside, idx, -1)

    def _render(self) -> np.ndarray:
        c, s = np.cos(self.heading)[:, None, None], np.sin(self.heading)[:, None, None]
        x = self.pos[:, 0, None, None] + self._fwd * c - self._lat * s
        y = self.pos[:, 1, None, None] + self._fwd * s + self._lat * c
        idx = self._lookup(x, y)
        on = idx >= 0
        b = np.arange(self.batch_size)[:, None, None]
        seen = np.where(on, self._visited[b, np.maximum(idx, 0)], False)
        track = on.astype(np.float64)
        if self.params.channels == 1:
            return (track - 0.5 * seen)[:, None]
        grass = 1.0 - track
        visited = seen.astype(np.float64)
        planes = [track, grass, visited] + [np.zeros_like(track)] * (self.params.channels - 3)
        return np.stack(planes[: self.params.channels], axis=1)

    def step(self, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.batch_size, 3):
            raise EnvError(f"actions shape {actions.shape}, expected {(self.batch_size, 3)}")
        if self.done.all():
            raise EnvError("step() after every episode finished")
        pr = self.params
        live = ~self.done
        steer = np.clip(actions[:, 0], -1.0, 1.0)
        gas = np.clip(actions[:, 1], 0.0, 1.0)
        brk = np.clip(actions[:, 2], 0.0, 1.0)
        heading = self.heading + pr.turn_rate * steer
        speed = self.speed + pr.accel * gas - pr.brake * brk - pr.drag * self.speed
        here = self._lookup(self.pos[:, 0], self.pos[:, 1])
        speed = np.where(here >= 0, speed, speed * (1.0 - pr.offtrack_friction))
        speed = np.clip(speed, 0.0, pr.max_speed)
        pos = self.pos + speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        self.heading = np.where(live, heading, self.heading)
        self.speed = np.where(live, speed, self.speed)
        self.pos = np.where(live[:, None], pos, self.pos)

        idx = self._lookup(self.pos[:, 0], self.pos[:, 1])
        b = np.arange(self.batch_size)
        new = live & (idx >= 0) & ~self._visited[b, np.maximum(idx, 0)]
        self._visited[b[new], idx[new]] = True
        reward = np.where(live, -0.1 + 1000.0 / self._n * new, 0.0)
        self.frames = self.frames + live

        gh, gw = self._index.shape[1:]
        escaped = ((self.pos[:, 0] < 0) | (self.pos[:, 1] < 0)
                   | (self.pos[:, 0] >= gw) | (self.pos[:, 1] >= gh))
        complete = self._visited.sum(axis=1) >= self._n
        self.done = self.done | escaped | complete | (self.frames >= pr.episode_length)
        return self._render(), reward, self.done.copy()

    def tiles_visited(self) -> np.ndarray:
        return self._visited.sum(axis=1)

    def fitness(self) -> np.ndarray:
        """Exact tile fitness of each car so far."""
        return np.array([tile_fitness(int(v), int(n), int(f))
                         for v, n, f in zip(self.tiles_visited(), self._n, self.frames)])
