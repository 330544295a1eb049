"""Dense-network numerics: forward/backward passes, diagonal Gaussians, gradient checks.

Everything here is a pure function of its arguments and works in float64.
Inputs may be a single vector ``(n,)`` or a batch ``(B, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass
class DenseNetParams:
    """Stack of affine layers; ReLU between layers, ``output_activation`` at the end."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    output_activation: str = "identity"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a dense net needs at least one layer")
        if self.output_activation not in ("identity", "relu"):
            raise ValueError(f"unknown activation {self.output_activation!r}")
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i and W.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(f"layer {i} input {W.shape[1]} != previous output "
                                 f"{self.layers[i - 1][0].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def tensors(self) -> list[np.ndarray]:
        return [a for W, b in self.layers for a in (W, b)]

    def copy(self) -> "DenseNetParams":
        return DenseNetParams([(W.copy(), b.copy()) for W, b in self.layers],
                              self.output_activation)


# one (dW, db) pair per layer, same order as DenseNetParams.layers
GradientBundle = list


@dataclass
class GaussianActionDist:
    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.stddev = np.asarray(self.stddev, dtype=np.float64)
        if self.mean.shape != self.stddev.shape:
            raise ShapeError("mean and stddev shapes differ")
        if not np.all(self.stddev > 0):
            raise DomainError("stddev must be strictly positive")


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_dense(sizes: Sequence[int], rng: np.random.Generator,
               output_activation: str = "identity") -> DenseNetParams:
    """Random net with layer widths ``sizes`` (input first); biases start at zero."""
    layers = [(glorot_uniform(n_in, n_out, rng), np.zeros(n_out))
              for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    return DenseNetParams(layers, output_activation)


def _as_batch(params: DenseNetParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in-dimension {params.in_dim}")
    return X, single


def _trace(params: DenseNetParams, X: np.ndarray) -> list[np.ndarray]:
    # pre-activations and activations, alternating: [x, z1, a1, z2, a2, ...]
    acts = [X]
    h = X
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        z = h @ W.T + b
        if i < last or params.output_activation == "relu":
            h = np.maximum(z, 0.0)
        else:
            h = z
        acts.extend((z, h))
    return acts


def forward(params: DenseNetParams, x) -> np.ndarray:
    X, single = _as_batch(params, x)
    out = _trace(params, X)[-1]
    return out[0] if single else out


def forward_with_trace(params: DenseNetParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward that also returns the intermediate values ``backward`` needs."""
    X, _ = _as_batch(params, x)
    trace = _trace(params, X)
    return trace[-1], trace


def backward(params: DenseNetParams, trace: list[np.ndarray], upstream: np.ndarray,
             need_input_grad: bool = False):
    """Reverse pass over a recorded trace; gradients are summed over the batch."""
    G = np.asarray(upstream, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != trace[-1].shape:
        raise ShapeError(f"upstream shape {G.shape} != output shape {trace[-1].shape}")
    n = len(params.layers)
    grads: list = [None] * n
    for i in range(n - 1, -1, -1):
        z = trace[2 * i + 1]
        if i < n - 1 or params.output_activation == "relu":
            G = G * (z > 0)
        h_in = trace[2 * i]
        grads[i] = (G.T @ h_in, G.sum(axis=0))
        if i or need_input_grad:
            G = G @ params.layers[i][0]
    if need_input_grad:
        return grads, G
    return grads


def backprop(params: DenseNetParams, x, upstream) -> GradientBundle:
    """Gradient of ``<upstream, forward(params, x)>`` w.r.t. every weight and bias."""
    X, single = _as_batch(params, x)
    U = np.asarray(upstream, dtype=np.float64)
    if single:
        U = U[None, :] if U.ndim == 1 else U
    trace = _trace(params, X)
    return backward(params, trace, U)


def gaussian_log_prob(dist: GaussianActionDist, action) -> float:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != dist.mean.shape:
        raise ShapeError(f"action shape {a.shape} != distribution shape {dist.mean.shape}")
    z = (a - dist.mean) / dist.stddev
    return float(np.sum(-0.5 * z * z - np.log(dist.stddev) - 0.5 * LOG_2PI))


def batch_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Row-wise log density for a batch of actions sharing one log_std vector."""
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def kl_diag_gaussian(p: GaussianActionDist, q: GaussianActionDist) -> float:
    """KL(p || q) between diagonal Gaussians."""
    if p.mean.shape != q.mean.shape:
        raise ShapeError("distributions have different dimensions")
    vp, vq = p.stddev ** 2, q.stddev ** 2
    terms = np.log(q.stddev / p.stddev) + (vp + (p.mean - q.mean) ** 2) / (2.0 * vq) - 0.5
    return float(np.sum(terms))


def batch_kl(mean_p, log_std_p, mean_q, log_std_q) -> np.ndarray:
    """Row-wise KL(p || q)."""
    inv_vq = np.exp(-2.0 * log_std_q)
    # exp of the log-ratio keeps KL(p || p) at exactly zero
    return np.sum(log_std_q - log_std_p + 0.5 * np.exp(2.0 * (log_std_p - log_std_q))
                  + 0.5 * (mean_p - mean_q) ** 2 * inv_vq - 0.5, axis=-1)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    errors: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def numerical_gradient(params: list[np.ndarray], loss: Callable[[list[np.ndarray]], float],
                       step: float = 1e-5) -> list[np.ndarray]:
    """Central differences, one coordinate at a time. ``params`` are restored afterwards."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = loss(params)
            flat[i] = old - step
            down = loss(params)
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EvaluationError("loss is not finite under perturbation")
            gflat[i] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def gradient_check(params: list[np.ndarray], loss: Callable[[list[np.ndarray]], float],
                   analytic: list[np.ndarray], tol: float = 1e-4, step: float = 1e-5,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``loss``.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    vanishing gradients (dead ReLUs, zero residuals) from producing 0/0.
    """
    base = loss(params)
    if not np.isfinite(base):
        raise EvaluationError("loss is not finite at the given parameters")
    numeric = numerical_gradient(params, loss, step)
    errors = []
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != n.shape:
            raise ShapeError(f"analytic gradient {a.shape} != parameter {n.shape}")
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        errors.append(err)
        if err.size:
            worst = max(worst, float(err.max()))
    return GradCheckReport(worst, tol, errors)
