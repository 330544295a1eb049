"""Task features from uniform-random exploration: the mean observation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import ACTION_BOUND, MAX_STEPS, START, TaskBatch, TaskSpec


@dataclass
class FeatureVector:
    x: np.ndarray
    n_states: int


@dataclass
class ExplorationLog:
    observations: list[np.ndarray]  # per trajectory, (len+1, obs_dim) including the start
    actions: list[np.ndarray]       # per trajectory, (len, action_dim)


def uniform_policy_action(action_dim: int, rng: np.random.Generator) -> np.ndarray:
    if action_dim < 1:
        raise ValueError("action_dim must be >= 1")
    return rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=action_dim)


def explore(task: TaskSpec, m: int, rng: np.random.Generator) -> ExplorationLog:
    """Run ``m`` uniform-policy episodes side by side and log everything visited."""
    if m < 1:
        raise ValueError("m must be >= 1")
    batch = TaskBatch.from_tasks([task] * m)
    pos = np.tile(np.array(START, dtype=np.float64), (m, 1))
    steps = np.zeros(m, dtype=int)
    alive = np.ones(m, dtype=bool)
    obs_hist = [batch.observe(pos)]
    act_hist, alive_hist = [], []
    for _ in range(MAX_STEPS):
        # one draw per row every step keeps the stream of random numbers fixed
        actions = rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=(m, 2))
        new_pos, new_steps, _, done = batch.step(pos, steps, actions)
        pos = np.where(alive[:, None], new_pos, pos)
        steps = np.where(alive, new_steps, steps)
        act_hist.append(actions)
        alive_hist.append(alive.copy())
        obs_hist.append(batch.observe(pos))
        alive = alive & ~done
        if not alive.any():
            break
    obs = np.stack(obs_hist, axis=1)          # (m, L+1, d)
    acts = np.stack(act_hist, axis=1)         # (m, L, 2)
    lengths = np.stack(alive_hist, axis=1).sum(axis=1)
    return ExplorationLog([obs[i, :n + 1] for i, n in enumerate(lengths)],
                          [acts[i, :n] for i, n in enumerate(lengths)])


def mean_feature(log: ExplorationLog) -> FeatureVector:
    stacked = np.concatenate(log.observations, axis=0)
    return FeatureVector(stacked.mean(axis=0), stacked.shape[0])


def extract_feature(task: TaskSpec, m: int, rng: np.random.Generator) -> FeatureVector:
    return mean_feature(explore(task, m, rng))
