"""Vectorized episode collection shared by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import MAX_STEPS, START, TaskBatch
from .numkit import batch_log_prob
from .policy import MultiheadPolicy


@dataclass
class Batch:
    """Padded episodes; ``mask[i, t]`` marks real transitions."""

    obs: np.ndarray        # (B, L, obs_dim)
    actions: np.ndarray    # (B, L, action_dim), raw samples before clipping
    rewards: np.ndarray    # (B, L)
    log_probs: np.ndarray  # (B, L)
    mask: np.ndarray       # (B, L) bool
    # activations recorded during collection: (trunk hidden, head hidden, mean)
    cache: tuple | None = None

    def __len__(self) -> int:
        return self.obs.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def episode_returns(self) -> np.ndarray:
        return np.where(self.mask, self.rewards, 0.0).sum(axis=1)

    def states(self) -> np.ndarray:
        return self.obs[self.mask]


def rollout(policy: MultiheadPolicy, tasks: TaskBatch, heads, rng: np.random.Generator | None,
            deterministic: bool = False, max_steps: int = MAX_STEPS,
            keep_activations: bool = False) -> Batch:
    """Run one episode per row of ``tasks`` with row ``i`` acting through ``heads[i]``.

    Stochastic rollouts draw all exploration noise up front, ``(max_steps, B, A)``
    standard normals, so the random stream consumed does not depend on episode lengths.
    ``keep_activations`` (single-head only) stores hidden layers for later backprop.
    """
    B = len(tasks)
    heads = np.broadcast_to(np.asarray(heads, dtype=int), (B,))
    A = policy.action_dim
    d = policy.obs_dim
    log_std = np.array([h.log_std for h in policy.heads])[heads]
    std = np.exp(log_std)
    single = bool(np.all(heads == heads[0]))
    if keep_activations and not single:
        raise ValueError("activations can only be kept for single-head rollouts")
    net = policy.inference()
    noise = None if deterministic else rng.standard_normal((max_steps, B, A))

    pos = np.tile(np.array(START, dtype=np.float64), (B, 1))
    steps = np.zeros(B, dtype=int)
    alive = np.ones(B, dtype=bool)
    # time-major buffers so every per-step slice is contiguous
    obs = np.zeros((max_steps, B, d))
    obs[:, :, 2:] = tasks.aug[None, :, :]
    means = np.zeros((max_steps, B, A))
    acts = np.zeros((max_steps, B, A))
    rews = np.zeros((max_steps, B))
    mask = np.zeros((max_steps, B), dtype=bool)
    if keep_activations:
        H = policy.hidden
        hid = np.zeros((max_steps, B, H))
        hid2 = np.zeros((max_steps, B, H))
        k0 = int(heads[0])
        (Wt0, b0), = net.trunk
        (Wt1, b1), (Wt2, b2) = net.heads[k0]
    L = max_steps
    for t in range(max_steps):
        obs[t, :, :2] = pos
        o = obs[t]
        if keep_activations:
            h, h2, mean = hid[t], hid2[t], means[t]
            np.dot(o, Wt0, out=h)
            h += b0
            np.maximum(h, 0.0, out=h)
            np.dot(h, Wt1, out=h2)
            h2 += b1
            np.maximum(h2, 0.0, out=h2)
            np.dot(h2, Wt2, out=mean)
            mean += b2
        elif single:
            mean = means[t] = net.means(int(heads[0]), o)
        else:
            mean = means[t] = net.means_multi(heads, o)
        a = mean if deterministic else mean + std * noise[t]
        new_pos, new_steps, r, done = tasks.step(pos, steps, a)
        acts[t] = a
        rews[t] = r
        mask[t] = alive
        if alive.all():
            pos, steps = new_pos, new_steps
        else:
            pos = np.where(alive[:, None], new_pos, pos)
            steps = np.where(alive, new_steps, steps)
        alive = alive & ~done
        if not alive.any():
            L = t + 1
            break

    def batch_major(x):
        return np.ascontiguousarray(np.swapaxes(x[:L], 0, 1))

    obs, means, acts, rews, mask = map(batch_major, (obs, means, acts, rews, mask))
    logp = batch_log_prob(means, log_std[:, None, :], acts)
    # batch-major views, copied only when masked
    cache = ((np.swapaxes(hid[:L], 0, 1), np.swapaxes(hid2[:L], 0, 1), means)
             if keep_activations else None)
    return Batch(obs, acts, rews, logp, mask, cache)
