"""Test-time protocol: pick a head per task from its feature, then roll out the mean action."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .context import ContextRegistry, map_context
from .envs import TaskBatch, TaskSpec, uniform_tasks
from .features import extract_feature
from .policy import MultiheadPolicy
from .rollout import rollout

HeadSelector = Callable[[TaskSpec, np.random.Generator], int]

GENERALIZATION_EPISODES = 100


@dataclass
class RunRecord:
    r_ave_series: list[tuple[int, float]] = field(default_factory=list)
    assignments: list[int] = field(default_factory=list)
    K_T: int = 0
    forward_transfer: list[float] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    wall_time: float = 0.0
    # (task_index, task_id, iteration, global_iteration, mean_return, distill_loss)
    train_log: list[tuple] = field(default_factory=list)
    # (task_index, task_id, z, is_new, K, posterior)
    trace: list[tuple] = field(default_factory=list)

    @property
    def r_bar_ave(self) -> float:
        return aggregate(self)

    @property
    def final_r_ave(self) -> float:
        return self.r_ave_series[-1][1]


def aggregate(record: RunRecord) -> float:
    if not record.r_ave_series:
        raise ValueError("no evaluations recorded")
    return float(np.mean([v for _, v in record.r_ave_series]))


def select_policy(policy: MultiheadPolicy, registry: ContextRegistry, task: TaskSpec,
                  m_explore: int, rng: np.random.Generator) -> int:
    """MAP head for ``task`` over the trained contexts; the registry is left untouched."""
    if registry.K != policy.K:
        raise ValueError(f"registry has {registry.K} contexts but policy has {policy.K} heads")
    if registry.K == 1:
        return 0
    return map_context(registry, extract_feature(task, m_explore, rng).x)


def registry_selector(policy, registry, m_explore) -> HeadSelector:
    return lambda task, rng: select_policy(policy, registry, task, m_explore, rng)


def test_returns(policy: MultiheadPolicy, tasks: Sequence[TaskSpec], selector: HeadSelector,
                 m_episodes: int, rng: np.random.Generator,
                 deterministic: bool = True) -> np.ndarray:
    """Undiscounted returns, shape ``(len(tasks), m_episodes)``."""
    if m_episodes < 1:
        raise ValueError("m_episodes must be >= 1")
    if not len(tasks):
        raise ValueError("no tasks to evaluate")
    heads = np.array([selector(t, rng) for t in tasks], dtype=int)
    rows = [t for t in tasks for _ in range(m_episodes)]
    batch = rollout(policy, TaskBatch.from_tasks(rows), np.repeat(heads, m_episodes), rng,
                    deterministic=deterministic)
    return batch.episode_returns().reshape(len(tasks), m_episodes)


def test_all(policy: MultiheadPolicy, registry: ContextRegistry | None,
             tasks: Sequence[TaskSpec], m_episodes: int, rng: np.random.Generator,
             selector: HeadSelector | None = None, m_explore: int = 10,
             deterministic: bool = True) -> float:
    """Mean test return over every task and episode."""
    if selector is None:
        selector = registry_selector(policy, registry, m_explore)
    return float(np.mean(test_returns(policy, tasks, selector, m_episodes, rng, deterministic)))


def generalization_eval(policy: MultiheadPolicy, registry: ContextRegistry | None,
                        stream_type: str, n_tasks: int = 50, seed: int = 0,
                        selector: HeadSelector | None = None, m_explore: int = 10,
                        episodes: int = GENERALIZATION_EPISODES,
                        deterministic: bool = True) -> float:
    """Mean return on fresh tasks drawn uniformly over the parameter box."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    ss = np.random.SeedSequence([seed, 5])
    task_seed, eval_seed = ss.spawn(2)
    tasks = uniform_tasks(stream_type, n_tasks, int(task_seed.generate_state(1)[0]))
    return test_all(policy, registry, tasks, episodes, np.random.default_rng(eval_seed),
                    selector=selector, m_explore=m_explore, deterministic=deterministic)


# keep pytest from collecting these when a test module imports them
test_returns.__test__ = False
test_all.__test__ = False
