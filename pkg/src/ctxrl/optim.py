"""Gradient-ascent updates applied in place to a list of parameter arrays."""

from __future__ import annotations

import numpy as np


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p += self.lr * g

    def grow(self, params: list[np.ndarray]) -> None:
        pass

    def state_arrays(self) -> list[np.ndarray]:
        return []

    def state_meta(self) -> dict:
        return {}

    def load_state(self, meta: dict, arrays: list[np.ndarray]) -> None:
        pass


class Adam:
    """Adam for ascent. New tensors (fresh heads) start with zero moments."""

    name = "adam"

    def __init__(self, lr: float, params: list[np.ndarray], b1: float = 0.9,
                 b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def grow(self, params):
        for p in params[len(self.m):]:
            self.m.append(np.zeros_like(p))
            self.v.append(np.zeros_like(p))

    def state_arrays(self):
        return self.m + self.v

    def state_meta(self):
        return {"t": self.t}

    def load_state(self, meta, arrays):
        n = len(arrays) // 2
        self.m, self.v = [a.copy() for a in arrays[:n]], [a.copy() for a in arrays[n:]]
        self.t = int(meta["t"])


def make_optimizer(name: str, lr: float, params: list[np.ndarray]):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr, params)
    raise ValueError(f"unknown optimizer {name!r}")
