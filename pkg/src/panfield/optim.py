"""Adam with separate step sizes for grid tables and decoder weights."""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from .field import ParamStore


# element-wise with no reductions, so reassociation cannot change results between runs
@_accel.njit(fastmath=True)
def _adam_nb(p, g, m, v, lr, b1, b2, eps, c1, c2):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


def _adam_np(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: ParamStore, lr_grid=5e-3, lr_decoder=1e-3, betas=(0.9, 0.99), eps=1e-10,
                 use_numba=None):
        self.params = params
        self.lr = {k: (lr_grid if "grid" in k else lr_decoder) for k in params.names()}
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.use_numba = _accel.USE_NUMBA if use_numba is None else use_numba

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        kernel = _adam_nb if self.use_numba else _adam_np
        for k, p in self.params.arrays.items():
            g = self.params.grads[k]
            if self.use_numba:
                kernel(p.reshape(-1), g.reshape(-1), self.m[k].reshape(-1), self.v[k].reshape(-1),
                       self.lr[k], self.b1, self.b2, self.eps, c1, c2)
            else:
                kernel(p, g, self.m[k], self.v[k], self.lr[k], self.b1, self.b2, self.eps, c1, c2)
