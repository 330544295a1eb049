"""Finite-difference verification of the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import distill_grad, distill_loss, joint_grad, reinforce_grad, step_weights
from .numkit import (backprop, batch_log_prob, forward, forward_with_trace, gradient_check,
                     init_dense)
from .policy import MultiheadPolicy, snapshot
from .rollout import Batch


def random_batch(rng: np.random.Generator, obs_dim: int, action_dim: int, n_episodes: int,
                 max_len: int) -> Batch:
    """Synthetic episodes of varying length; enough structure for gradient checks."""
    lengths = rng.integers(1, max_len + 1, size=n_episodes)
    L = int(lengths.max())
    mask = np.arange(L)[None, :] < lengths[:, None]
    obs = rng.uniform(-1, 1, (n_episodes, L, obs_dim)) * mask[..., None]
    actions = rng.normal(0, 0.1, (n_episodes, L, action_dim)) * mask[..., None]
    rewards = -rng.uniform(0, 1, (n_episodes, L)) * mask
    return Batch(obs, actions, rewards, np.zeros((n_episodes, L)), mask)


def surrogate(policy: MultiheadPolicy, head: int, batch: Batch, gamma: float = 0.99,
              estimator: str = "reward_to_go", baseline: bool = True) -> float:
    """Score-function surrogate whose gradient is the REINFORCE estimate."""
    w = step_weights(batch, gamma, estimator, baseline)[batch.mask]
    S = batch.states()
    mean = policy.means(head, S)
    lp = batch_log_prob(mean, policy.heads[head].log_std, batch.actions[batch.mask])
    return float(np.sum(w * lp))


def random_policy(rng: np.random.Generator, obs_dim: int, hidden: int, action_dim: int,
                  n_heads: int) -> MultiheadPolicy:
    pol = MultiheadPolicy.create(obs_dim, action_dim, rng, hidden=hidden, n_heads=n_heads)
    for _, b in pol.shared.layers + [l for h in pol.heads for l in h.net.layers]:
        b[:] = rng.normal(0, 0.5, size=b.shape)
    for h in pol.heads:
        h.log_std[:] = rng.uniform(-2.5, -0.5, size=h.log_std.shape)
    return pol


def perturbed(policy: MultiheadPolicy, rng: np.random.Generator, scale: float = 0.1
              ) -> MultiheadPolicy:
    out = policy.copy()
    for p in out.parameters():
        p += rng.normal(0, scale, size=p.shape)
    return out


KINK_MARGIN = 1e-3


def _preacts(net, trace) -> list[np.ndarray]:
    n = len(net.layers)
    return [trace[2 * i + 1] for i in range(n) if i < n - 1 or net.output_activation == "relu"]


def near_kink(policy: MultiheadPolicy, states: np.ndarray, margin: float = KINK_MARGIN) -> bool:
    """True if any ReLU pre-activation is within ``margin`` of zero.

    Central differences straddling a kink measure a one-sided mix of slopes, so such
    configurations are redrawn rather than compared.
    """
    h, tr = policy.trunk(states)
    zs = _preacts(policy.shared, tr)
    for k, head in enumerate(policy.heads):
        zs += _preacts(head.net, policy.head_mean(k, h)[1])
    return any(np.abs(z).min() < margin for z in zs if z.size)


@dataclass
class CheckResult:
    name: str
    n_configs: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _config(rng):
    return dict(obs_dim=int(rng.integers(2, 6)), hidden=int(rng.integers(3, 7)),
                action_dim=int(rng.integers(1, 3)), n_heads=int(rng.integers(1, 4)))


def check_dense(rng) -> float:
    sizes = [int(s) for s in rng.integers(1, 6, size=int(rng.integers(2, 5)))]
    act = "relu" if rng.random() < 0.5 else "identity"
    net = init_dense(sizes, rng, output_activation=act)
    for _, b in net.layers:
        # zero biases put dead units exactly on the ReLU kink
        b[:] = rng.normal(0, 0.5, size=b.shape)
    x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
    c = rng.normal(size=(x.shape[0], sizes[-1]))
    params = net.tensors()

    def loss(_):
        return float(np.sum(c * forward(net, x)))

    if any(np.abs(z).min() < KINK_MARGIN for z in _preacts(net, forward_with_trace(net, x)[1])):
        return check_dense(rng)
    grads = backprop(net, x, c)
    return gradient_check(params, loss, [g for pair in grads for g in pair]).max_rel_error


def check_reinforce(rng) -> float:
    cfg = _config(rng)
    pol = random_policy(rng, **cfg)
    head = int(rng.integers(pol.K))
    est = "literal" if rng.random() < 0.3 else "reward_to_go"
    base = bool(rng.random() < 0.7)
    batch = random_batch(rng, cfg["obs_dim"], cfg["action_dim"], int(rng.integers(1, 4)), 4)
    if near_kink(pol, batch.states()):
        return check_reinforce(rng)
    g = reinforce_grad(pol, head, batch, 0.9, est, base)
    return gradient_check(pol.parameters(), lambda _: surrogate(pol, head, batch, 0.9, est, base),
                          g).max_rel_error


def check_distill(rng) -> float:
    cfg = _config(rng)
    teacher = snapshot(random_policy(rng, **cfg))
    student = perturbed(teacher, rng)
    S = rng.uniform(-1, 1, (int(rng.integers(1, 6)), cfg["obs_dim"]))
    if near_kink(student, S):
        return check_distill(rng)
    _, g = distill_grad(student, teacher, S)
    return gradient_check(student.parameters(), lambda _: distill_loss(student, teacher, S),
                          g).max_rel_error


def check_joint(rng) -> float:
    cfg = _config(rng)
    teacher = snapshot(random_policy(rng, **cfg))
    student = perturbed(teacher, rng)
    head = int(rng.integers(student.K))
    lam = float(rng.uniform(0, 1))
    batch = random_batch(rng, cfg["obs_dim"], cfg["action_dim"], int(rng.integers(1, 4)), 4)
    S = batch.states()
    if near_kink(student, S):
        return check_joint(rng)
    g = joint_grad(reinforce_grad(student, head, batch, 0.9), distill_grad(student, teacher, S)[1],
                   lam)

    def objective(_):
        return surrogate(student, head, batch, 0.9) - lam * distill_loss(student, teacher, S)

    return gradient_check(student.parameters(), objective, g).max_rel_error


CHECKS = {"dense": check_dense, "reinforce": check_reinforce, "distill": check_distill,
          "joint": check_joint}


def run_gradchecks(n_configs: int = 100, seed: int = 0, tol: float = 1e-4,
                   names=tuple(CHECKS)) -> list[CheckResult]:
    out = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        worst = max(CHECKS[name](rng) for _ in range(n_configs))
        out.append(CheckResult(name, n_configs, worst, tol))
    return out
