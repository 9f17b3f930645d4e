from __future__ import annotations

from typing import Sequence

import numpy as np


class EnvError(RuntimeError):
    pass


class VecEnv:
    """``batch_size`` independent copies of one environment stepped in lockstep.

    Copies that have finished keep returning zero reward; the lifetime runner
    masks them out.
    """

    batch_size: int
    obs_shape: tuple[int, ...]
    action_dim: int

    def reset(self, seeds: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError


class SingleEnv:
    """Unbatched view of a batch-of-one :class:`VecEnv`."""

    def __init__(self, vec: VecEnv):
        if vec.batch_size != 1:
            raise ValueError("SingleEnv wraps a batch of exactly one")
        self.vec = vec
        self.done = True

    @property
    def obs_shape(self):
        return self.vec.obs_shape

    @property
    def action_dim(self):
        return self.vec.action_dim

    def reset(self, seed: int = 0) -> np.ndarray:
        self.done = False
        return self.vec.reset([seed])[0]

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.vec.action_dim,):
            raise EnvError(f"action shape {action.shape}, expected ({self.vec.action_dim},)")
        obs, reward, done = self.vec.step(action[None])
        self.done = bool(done[0])
        return obs[0], float(reward[0]), self.done
