"""Small shared pieces for the hand-written networks."""
from __future__ import annotations

import numpy as np

from .kernels import adam_update


def glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


class Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            adam_update(params[k], np.ascontiguousarray(g, dtype=params[k].dtype),
                        self.m[k], self.v[k], self.lr, self.b1, self.b2, self.eps, self.t)


def scatter_rows(index, values, n_rows):
    """``out[index[i]] += values[i]`` with float64 accumulation in input order."""
    D = values.shape[1]
    flat = (np.asarray(index)[:, None] * D + np.arange(D)[None, :]).ravel()
    acc = np.bincount(flat, weights=values.ravel().astype(np.float64), minlength=n_rows * D)
    return acc.reshape(n_rows, D)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)
