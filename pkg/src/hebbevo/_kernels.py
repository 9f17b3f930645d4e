"""Fused per-timestep kernels for batched lifetimes.

With numba installed these compile to loops that evaluate every entry in
the same operation order as the numpy expressions in ``plastic_net``, so
both paths give bit-identical results.  Without numba the numpy path runs.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    if os.environ.get("HEBBEVO_NO_NUMBA"):
        raise ImportError
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
_EMPTY = np.zeros((0, 0, 0))


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def dense_tanh(x, w):
        nb, ni, no = w.shape
        out = np.empty((nb, no))
        for b in range(nb):
            for j in range(no):
                acc = x[b, 0] * w[b, 0, j]
                for i in range(1, ni):
                    acc = acc + x[b, i] * w[b, i, j]
                out[b, j] = np.tanh(acc)
        return out

    @numba.njit(cache=True)
    def hebb_update(w, A, B, C, D, eta, oi, oj, use_b, use_c, use_d, use_eta, active, ok):
        nb, ni, no = w.shape
        for b in range(nb):
            if not active[b]:
                continue
            for i in range(ni):
                x = oi[b, i]
                for j in range(no):
                    y = oj[b, j]
                    t = A[b, i, j] * x * y
                    if use_b:
                        t = t + B[b, i, j] * x
                    if use_c:
                        t = t + C[b, i, j] * y
                    if use_d:
                        t = t + D[b, i, j]
                    if use_eta:
                        t = eta[b, i, j] * t
                    v = w[b, i, j] + t
                    if not np.isfinite(v):
                        ok[b] = False
                    w[b, i, j] = v

else:
    dense_tanh = None
    hebb_update = None
