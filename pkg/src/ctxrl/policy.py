"""Multihead Gaussian policy: one shared ReLU trunk, one output head per context."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .context import ContextRegistry
from .envs import ACTION_BOUND
from .numkit import (DenseNetParams, GaussianActionDist, backward, forward_with_trace,
                     init_dense)

HEAD_INIT_STRATEGIES = ("random", "random_trained", "nearest_trained")
DEFAULT_LOG_STD = float(np.log(0.5 * 2 * ACTION_BOUND))


@dataclass
class HeadParams:
    net: DenseNetParams
    log_std: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return self.net.tensors() + [self.log_std]

    def copy(self) -> "HeadParams":
        return HeadParams(self.net.copy(), self.log_std.copy())


def init_head(hidden: int, action_dim: int, rng: np.random.Generator,
              log_std: float = DEFAULT_LOG_STD) -> HeadParams:
    return HeadParams(init_dense([hidden, hidden, action_dim], rng),
                      np.full(action_dim, log_std))


class MultiheadPolicy:
    """Shared trunk ``obs -> hidden`` (ReLU) followed by per-context heads
    ``hidden -> hidden -> action mean``, each with its own state-independent log-std.

    ``parameters()`` lists tensors in a fixed order: trunk weights and biases, then for
    each head its layer weights and biases followed by ``log_std``.
    """

    def __init__(self, shared: DenseNetParams, heads: list[HeadParams]):
        if not heads:
            raise ValueError("policy needs at least one head")
        shapes = [[t.shape for t in h.tensors()] for h in heads]
        if any(s != shapes[0] for s in shapes):
            raise ValueError("all heads must share one shape")
        if heads[0].net.in_dim != shared.out_dim:
            raise ValueError("head input does not match trunk output")
        self.shared = shared
        self.heads = heads

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, rng: np.random.Generator,
               hidden: int = 200, n_heads: int = 1) -> "MultiheadPolicy":
        shared = init_dense([obs_dim, hidden], rng, output_activation="relu")
        return cls(shared, [init_head(hidden, action_dim, rng) for _ in range(n_heads)])

    @property
    def K(self) -> int:
        return len(self.heads)

    @property
    def obs_dim(self) -> int:
        return self.shared.in_dim

    @property
    def hidden(self) -> int:
        return self.shared.out_dim

    @property
    def action_dim(self) -> int:
        return self.heads[0].log_std.size

    # ------------------------------------------------------------ parameters

    def parameters(self) -> list[np.ndarray]:
        out = self.shared.tensors()
        for h in self.heads:
            out.extend(h.tensors())
        return out

    @property
    def n_shared_tensors(self) -> int:
        return 2 * len(self.shared.layers)

    @property
    def n_head_tensors(self) -> int:
        return 2 * len(self.heads[0].net.layers) + 1

    def head_offset(self, k: int) -> int:
        return self.n_shared_tensors + k * self.n_head_tensors

    def zero_grad(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.parameters()]

    # ------------------------------------------------------------ evaluation

    def _check_head(self, k: int) -> None:
        if not 0 <= k < self.K:
            raise IndexError(f"head {k} out of range for {self.K} heads")

    def trunk(self, obs):
        return forward_with_trace(self.shared, obs)

    def head_mean(self, k: int, hidden_out: np.ndarray):
        self._check_head(k)
        return forward_with_trace(self.heads[k].net, hidden_out)

    def means(self, k: int, obs) -> np.ndarray:
        h, _ = self.trunk(obs)
        mean, _ = self.head_mean(k, h)
        return mean

    def act_dist(self, k: int, obs) -> GaussianActionDist:
        self._check_head(k)
        o = obs.as_array() if hasattr(obs, "as_array") else np.asarray(obs, dtype=np.float64)
        return GaussianActionDist(self.means(k, o[None, :])[0], np.exp(self.heads[k].log_std))

    def inference(self) -> "FrozenForward":
        """Fast mean evaluator for a fixed set of parameters (e.g. one rollout)."""
        return FrozenForward(self)

    def means_multi(self, heads: np.ndarray, obs: np.ndarray) -> np.ndarray:
        """Row ``i`` evaluated with head ``heads[i]``."""
        h, _ = self.trunk(obs)
        out = np.empty((obs.shape[0], self.action_dim))
        for k in np.unique(heads):
            rows = heads == k
            out[rows] = self.head_mean(int(k), h[rows])[0]
        return out

    # ------------------------------------------------------------ gradients

    def backprop_head(self, k: int, trunk_trace, head_trace, d_mean: np.ndarray):
        """Gradients of ``sum(d_mean * mean)`` for head ``k``: (head grads, d hidden)."""
        grads, d_hidden = backward(self.heads[k].net, head_trace, d_mean, need_input_grad=True)
        return grads, d_hidden

    def backprop_trunk(self, trunk_trace, d_hidden: np.ndarray):
        return backward(self.shared, trunk_trace, d_hidden)

    def write_shared_grad(self, grad: list[np.ndarray], trunk_grads) -> None:
        for i, (dW, db) in enumerate(trunk_grads):
            grad[2 * i] += dW
            grad[2 * i + 1] += db

    def write_head_grad(self, grad: list[np.ndarray], k: int, net_grads, d_log_std) -> None:
        off = self.head_offset(k)
        for i, (dW, db) in enumerate(net_grads):
            grad[off + 2 * i] += dW
            grad[off + 2 * i + 1] += db
        grad[off + self.n_head_tensors - 1] += d_log_std

    # ------------------------------------------------------------ structure

    def copy(self) -> "MultiheadPolicy":
        return MultiheadPolicy(self.shared.copy(), [h.copy() for h in self.heads])

    def with_head(self, head: HeadParams) -> "MultiheadPolicy":
        """New policy object sharing every existing tensor, plus ``head`` at the end."""
        return MultiheadPolicy(self.shared, self.heads + [head])


class FrozenForward:
    """Pre-transposed weights for repeated small-batch forward passes.

    Valid only while the source policy's parameters are not modified.
    """

    def __init__(self, policy: MultiheadPolicy):
        self.trunk = [(np.ascontiguousarray(W.T), b) for W, b in policy.shared.layers]
        self.heads = [[(np.ascontiguousarray(W.T), b) for W, b in h.net.layers]
                      for h in policy.heads]
        self.action_dim = policy.action_dim

    @staticmethod
    def _run(layers, h, relu_last):
        last = len(layers) - 1
        for i, (Wt, b) in enumerate(layers):
            h = h @ Wt
            h += b
            if i < last or relu_last:
                np.maximum(h, 0.0, out=h)
        return h

    def hidden(self, obs: np.ndarray) -> np.ndarray:
        return self._run(self.trunk, obs, True)

    def means(self, k: int, obs: np.ndarray) -> np.ndarray:
        return self._run(self.heads[k], self.hidden(obs), False)

    def means_multi(self, heads: np.ndarray, obs: np.ndarray) -> np.ndarray:
        h = self.hidden(obs)
        out = np.empty((obs.shape[0], self.action_dim))
        for k in np.unique(heads):
            rows = heads == k
            out[rows] = self._run(self.heads[int(k)], h[rows], False)
        return out


def nearest_head(registry: ContextRegistry, n_trained: int) -> int:
    """Trained context whose centroid is closest (Euclidean) to the newest context."""
    cents = registry.centroids()
    d = np.linalg.norm(cents[:n_trained] - cents[-1], axis=1)
    return int(np.argmin(d))


def expand(policy: MultiheadPolicy, strategy: str, registry: ContextRegistry | None,
           rng: np.random.Generator) -> MultiheadPolicy:
    """Append one head for a freshly instantiated context.

    Existing tensors are shared, not copied, so they stay bitwise identical.
    """
    if strategy not in HEAD_INIT_STRATEGIES:
        raise ValueError(f"unknown head init strategy {strategy!r}")
    n = policy.K
    if strategy == "random":
        new = init_head(policy.hidden, policy.action_dim, rng)
    else:
        if n < 1:
            raise ValueError("no trained head to copy")
        if strategy == "random_trained":
            src = int(rng.integers(n))
        else:
            if registry is None or registry.K != n + 1:
                raise ValueError("nearest_trained needs a registry with exactly one new context")
            src = nearest_head(registry, n)
        new = policy.heads[src].copy()
    return policy.with_head(new)


def _freeze(policy: MultiheadPolicy) -> MultiheadPolicy:
    for p in policy.parameters():
        p.flags.writeable = False
    return policy


def snapshot(policy: MultiheadPolicy) -> MultiheadPolicy:
    """Deep read-only copy, used as the distillation teacher."""
    return _freeze(copy.deepcopy(policy))
