"""Continual training loop: context detection, head expansion, REINFORCE with distillation."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import context as ctx
from .envs import TaskBatch, TaskSpec, TaskStream
from .evaluation import RunRecord, registry_selector, test_all
from .features import extract_feature
from .numkit import batch_kl
from .optim import make_optimizer
from .policy import HEAD_INIT_STRATEGIES, MultiheadPolicy, expand, snapshot
from .rollout import Batch, rollout

log = logging.getLogger(__name__)

MODES = ("dacorl", "oracle", "naive", "fixed_k")

# sub-streams of randomness, keyed by purpose
(RNG_TRAIN, RNG_EVAL, RNG_FEATURE, RNG_EXPAND, RNG_INIT,
 RNG_GENERALIZE, RNG_PREDICT, RNG_SCORE) = range(8)


@dataclass
class LearnerConfig:
    mode: str = "dacorl"
    alpha: float = 0.75
    lam: float = 0.5
    beta: float = 1e-4
    gamma: float = 0.99
    iterations_per_task: int = 1000
    batch_size: int = 10
    head_init: str = "nearest_trained"
    sigma2: float = 0.05
    m_explore: int = 10
    seed: int = 0
    hidden: int = 200
    optimizer: str = "sgd"
    update_rule: str = "normalized"
    estimator: str = "reward_to_go"
    baseline: bool = True
    eval_every: int = 100
    eval_episodes: int = 5
    deterministic_eval: bool = True
    n_contexts: int = 4
    distill_states: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.head_init not in HEAD_INIT_STRATEGIES:
            raise ValueError(f"head_init must be one of {HEAD_INIT_STRATEGIES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.estimator not in ("reward_to_go", "literal"):
            raise ValueError("estimator must be 'reward_to_go' or 'literal'")
        for name in ("iterations_per_task", "batch_size", "m_explore", "hidden",
                     "eval_every", "eval_episodes", "n_contexts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.alpha <= 0 or self.sigma2 <= 0 or self.beta <= 0:
            raise ValueError("alpha, sigma2 and beta must be positive")


def sub_rng(seed: int, purpose: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *index])


# ---------------------------------------------------------------- episodes

@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        if not (len(self.observations) == len(self.actions) == len(self.log_probs) == n):
            raise ValueError("trajectory fields must have equal lengths")


def batch_to_trajectories(batch: Batch) -> list[Trajectory]:
    out = []
    for i, n in enumerate(batch.lengths):
        out.append(Trajectory(batch.obs[i, :n].copy(), batch.actions[i, :n].copy(),
                              batch.rewards[i, :n].copy(), batch.log_probs[i, :n].copy()))
    return out


def trajectories_to_batch(trajs: Sequence[Trajectory]) -> Batch:
    if not trajs:
        raise ValueError("empty batch")
    L = max(len(t.rewards) for t in trajs)
    B = len(trajs)
    d = trajs[0].observations.shape[1]
    A = trajs[0].actions.shape[1]
    b = Batch(np.zeros((B, L, d)), np.zeros((B, L, A)), np.zeros((B, L)), np.zeros((B, L)),
              np.zeros((B, L), dtype=bool))
    for i, t in enumerate(trajs):
        n = len(t.rewards)
        b.obs[i, :n] = t.observations
        b.actions[i, :n] = t.actions
        b.rewards[i, :n] = t.rewards
        b.log_probs[i, :n] = t.log_probs
        b.mask[i, :n] = True
    return b


def _as_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else trajectories_to_batch(batch)


def collect_batch(task: TaskSpec, policy: MultiheadPolicy, head: int, batch_size: int,
                  rng: np.random.Generator, keep_activations: bool = False) -> Batch:
    return rollout(policy, TaskBatch.from_tasks([task] * batch_size), head, rng,
                   keep_activations=keep_activations)


def collect(task: TaskSpec, policy: MultiheadPolicy, head: int, batch_size: int,
            rng: np.random.Generator) -> list[Trajectory]:
    if batch_size == 0:
        return []
    policy._check_head(head)
    return batch_to_trajectories(collect_batch(task, policy, head, batch_size, rng))


def returns(rewards, gamma: float) -> np.ndarray:
    """Discounted reward-to-go for every step of one trajectory."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def _padded_returns(batch: Batch, gamma: float) -> np.ndarray:
    r = np.where(batch.mask, batch.rewards, 0.0)
    G = np.zeros_like(r)
    acc = np.zeros(r.shape[0])
    for t in range(r.shape[1] - 1, -1, -1):
        acc = r[:, t] + gamma * acc
        G[:, t] = acc
    return G


def step_weights(batch: Batch, gamma: float, estimator: str = "reward_to_go",
                 baseline: bool = True) -> np.ndarray:
    """Per-step multipliers of grad log pi, already divided by the batch size."""
    G = _padded_returns(batch, gamma)
    if estimator == "literal":
        G = np.repeat(G[:, :1], G.shape[1], axis=1)
    if baseline:
        if estimator == "literal":
            b = np.full(G.shape[1], G[:, 0].mean())
        else:
            # time-indexed mean over the episodes still running at step t
            alive = batch.mask.sum(axis=0)
            b = np.where(batch.mask, G, 0.0).sum(axis=0) / np.maximum(alive, 1)
        G = G - b[None, :]
    return np.where(batch.mask, G, 0.0) / len(batch)


def reinforce_grad(policy: MultiheadPolicy, head: int, batch, gamma: float = 0.99,
                   estimator: str = "reward_to_go", baseline: bool = True,
                   use_cache: bool = False) -> list[np.ndarray]:
    """Ascent direction of the score-function surrogate for ``head`` and the trunk.

    ``use_cache`` reuses activations stored at collection time; only valid when the
    policy has not been updated since the batch was collected.
    """
    batch = _as_batch(batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    w = step_weights(batch, gamma, estimator, baseline)[batch.mask]
    S = batch.states()
    A = batch.actions[batch.mask]
    grad = policy.zero_grad()
    if use_cache and batch.cache is not None and len(policy.heads[head].net.layers) == 2:
        h, h2, mean = (c[batch.mask] for c in batch.cache)
        # for ReLU layers z > 0 exactly where the activation is > 0
        tr_trace = [S, h, h]
        hd_trace = [h, h2, h2, mean, mean]
    else:
        h, tr_trace = policy.trunk(S)
        mean, hd_trace = policy.head_mean(head, h)
    log_std = policy.heads[head].log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = A - mean
    d_mean = w[:, None] * diff * inv_var
    d_log_std = np.sum(w[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    head_grads, d_hidden = policy.backprop_head(head, tr_trace, hd_trace, d_mean)
    policy.write_head_grad(grad, head, head_grads, d_log_std)
    policy.write_shared_grad(grad, policy.backprop_trunk(tr_trace, d_hidden))
    return grad


def distill_loss(policy: MultiheadPolicy, teacher: MultiheadPolicy, states) -> float:
    S = np.asarray(states, dtype=np.float64)
    hs, _ = policy.trunk(S)
    ht, _ = teacher.trunk(S)
    total = 0.0
    for k in range(min(teacher.K, policy.K)):
        mp, _ = policy.head_mean(k, hs)
        mq, _ = teacher.head_mean(k, ht)
        total += float(np.mean(batch_kl(mp, policy.heads[k].log_std, mq,
                                        teacher.heads[k].log_std)))
    return total


def distill_grad(policy: MultiheadPolicy, teacher: MultiheadPolicy,
                 states) -> tuple[float, list[np.ndarray]]:
    """Loss and gradient of the summed per-head KL(student || teacher), averaged over states.

    Heads that exist only in the student contribute nothing.
    """
    S = np.asarray(states, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] == 0:
        raise ValueError("distillation needs a non-empty 2-D array of states")
    if teacher.K > policy.K:
        raise ValueError("teacher has more heads than the student")
    n = S.shape[0]
    grad = policy.zero_grad()
    hs, tr_trace = policy.trunk(S)
    ht, _ = teacher.trunk(S)
    d_hidden = np.zeros_like(hs)
    total = 0.0
    for k in range(teacher.K):
        mp, hd_trace = policy.head_mean(k, hs)
        mq, _ = teacher.head_mean(k, ht)
        lp, lq = policy.heads[k].log_std, teacher.heads[k].log_std
        total += float(np.mean(batch_kl(mp, lp, mq, lq)))
        inv_vq = np.exp(-2.0 * lq)
        d_mean = (mp - mq) * inv_vq / n
        d_log_std = np.exp(2.0 * (lp - lq)) - 1.0
        head_grads, dh = policy.backprop_head(k, tr_trace, hd_trace, d_mean)
        policy.write_head_grad(grad, k, head_grads, d_log_std)
        d_hidden += dh
    policy.write_shared_grad(grad, policy.backprop_trunk(tr_trace, d_hidden))
    return total, grad


def joint_grad(g_reinforce: list[np.ndarray], g_distill: list[np.ndarray] | None,
               lam: float) -> list[np.ndarray]:
    """Ascent direction of ``L_ori - lam * L_D``."""
    if g_distill is None or lam == 0.0:
        return g_reinforce
    return [a - lam * b for a, b in zip(g_reinforce, g_distill)]


# ---------------------------------------------------------------- learner state

@dataclass
class LearnerState:
    config: LearnerConfig
    policy: MultiheadPolicy
    registry: ctx.ContextRegistry | None
    optimizer: object
    rng: np.random.Generator
    next_task: int = 0
    global_iter: int = 0
    cluster_heads: dict = field(default_factory=dict)  # oracle: true cluster -> head
    record: RunRecord = field(default_factory=RunRecord)

    def selector(self, stream: TaskStream | None = None):
        """Head choice at test time for this learner's mode."""
        cfg = self.config
        if cfg.mode == "naive":
            return lambda task, rng: 0
        if cfg.mode == "fixed_k":
            cents = _fixed_centroids(stream, cfg.n_contexts)
            return lambda task, rng: ctx.nearest_centroid(cents, task.aug)
        base = registry_selector(self.policy, self.registry, cfg.m_explore)
        if cfg.mode == "oracle":
            def pick(task, rng):
                if task.true_cluster in self.cluster_heads:
                    return self.cluster_heads[task.true_cluster]
                return base(task, rng)
            return pick
        return base


def _fixed_centroids(stream: TaskStream | None, n: int) -> np.ndarray:
    if stream is None or len(stream.cluster_centers) < n:
        raise ValueError("fixed_k mode needs a stream with at least n_contexts cluster centers")
    return np.array(stream.cluster_centers[:n])


def init_state(config: LearnerConfig, obs_dim: int, action_dim: int = 2) -> LearnerState:
    n_heads = config.n_contexts if config.mode == "fixed_k" else 1
    policy = MultiheadPolicy.create(obs_dim, action_dim, sub_rng(config.seed, RNG_INIT),
                                    hidden=config.hidden, n_heads=n_heads)
    registry = None
    if config.mode in ("dacorl", "oracle"):
        registry = ctx.ContextRegistry(config.alpha, config.sigma2,
                                       update_rule=config.update_rule)
    opt = make_optimizer(config.optimizer, config.beta, policy.parameters())
    state = LearnerState(config, policy, registry, opt, sub_rng(config.seed, RNG_TRAIN))
    state.record.config_echo = dataclasses.asdict(config)
    return state


def _assign(state: LearnerState, task: TaskSpec, index: int, stream: TaskStream | None):
    """Mode-dependent context assignment; returns (head, is_new, posterior)."""
    cfg = state.config
    if cfg.mode == "naive":
        return 0, False, np.ones(1)
    if cfg.mode == "fixed_k":
        cents = _fixed_centroids(stream, cfg.n_contexts)
        return ctx.nearest_centroid(cents, task.aug), False, np.ones(1)
    x = extract_feature(task, cfg.m_explore, sub_rng(cfg.seed, RNG_FEATURE, index)).x
    reg = state.registry
    if cfg.mode == "oracle":
        z = state.cluster_heads.get(task.true_cluster)
        if z is None:
            if reg.K == 0:
                reg = ctx.seed_first(reg, x)
            else:
                reg = reg.copy()
                reg.mu.append(x.copy())
                reg.counts.append(1)
                reg.t += 1
            z = reg.K - 1
            state.cluster_heads[task.true_cluster] = z
            state.registry = reg
            return z, z > 0, np.ones(1)
        onehot = np.zeros(reg.K)
        onehot[z] = 1.0
        reg = ctx.update_params(reg, x, onehot)
        state.registry = ctx.register(reg, ctx.Assignment(z, False, onehot))
        return z, False, onehot
    if reg.K == 0:
        state.registry = ctx.seed_first(reg, x)
        return 0, False, np.ones(1)
    a, reg = ctx.detect(reg, x)
    state.registry = ctx.register(reg, a)
    return a.z_star, a.is_new, a.posterior


def evaluate_state(state: LearnerState, stream: TaskStream) -> float:
    cfg = state.config
    rng = sub_rng(cfg.seed, RNG_EVAL, state.global_iter)
    return test_all(state.policy, state.registry, stream.tasks, cfg.eval_episodes, rng,
                    selector=state.selector(stream), deterministic=cfg.deterministic_eval)


def train_task(state: LearnerState, task: TaskSpec, stream: TaskStream | None = None,
               on_expand: Callable | None = None) -> LearnerState:
    """Detect the context of ``task``, grow the policy if needed, then train on it."""
    cfg = state.config
    index = state.next_task
    head, is_new, post = _assign(state, task, index, stream)
    K = state.registry.K if state.registry is not None else state.policy.K
    if is_new:
        before = state.policy
        state.policy = expand(state.policy, cfg.head_init, state.registry,
                              sub_rng(cfg.seed, RNG_EXPAND, index))
        state.optimizer.grow(state.policy.parameters())
        if on_expand is not None:
            on_expand(before, state.policy)
    if state.policy.K != K and cfg.mode in ("dacorl", "oracle"):
        raise RuntimeError(f"head count {state.policy.K} != context count {K}")
    rec = state.record
    rec.assignments.append(head)
    rec.trace.append((index, task.task_id, head, is_new, K, list(map(float, post))))

    lam = 0.0 if cfg.mode == "naive" or index == 0 else cfg.lam
    teacher = snapshot(state.policy) if lam > 0 else None
    for it in range(cfg.iterations_per_task):
        batch = collect_batch(task, state.policy, head, cfg.batch_size, state.rng,
                              keep_activations=True)
        g = reinforce_grad(state.policy, head, batch, cfg.gamma, cfg.estimator, cfg.baseline,
                           use_cache=True)
        ld = 0.0
        if teacher is not None:
            S = batch.states()
            if cfg.distill_states and S.shape[0] > cfg.distill_states:
                S = S[state.rng.choice(S.shape[0], cfg.distill_states, replace=False)]
            ld, gd = distill_grad(state.policy, teacher, S)
            g = joint_grad(g, gd, lam)
        if not (np.isfinite(ld) and all(np.all(np.isfinite(a)) for a in g)):
            raise FloatingPointError(f"non-finite gradient on task {index} iteration {it} "
                                     f"(distill loss {ld})")
        state.optimizer.step(state.policy.parameters(), g)
        mean_ret = float(batch.episode_returns().mean())
        if it == 0:
            rec.forward_transfer.append(mean_ret)
        state.global_iter += 1
        rec.train_log.append((index, task.task_id, it, state.global_iter, mean_ret, float(ld)))
        if stream is not None and state.global_iter % cfg.eval_every == 0:
            rec.r_ave_series.append((state.global_iter, evaluate_state(state, stream)))
    state.next_task += 1
    rec.K_T = state.policy.K if cfg.mode != "naive" else 1
    return state


def run_stream(config: LearnerConfig, stream: TaskStream, state: LearnerState | None = None,
               on_task_end: Callable | None = None, on_expand: Callable | None = None
               ) -> tuple[RunRecord, LearnerState]:
    """Train through the whole stream (or resume ``state`` where it stopped)."""
    if not len(stream):
        raise ValueError("empty stream")
    if state is None:
        state = init_state(config, stream.obs_dim)
    start = time.perf_counter()
    for i in range(state.next_task, len(stream)):
        train_task(state, stream.tasks[i], stream, on_expand=on_expand)
        log.info("task %d/%d: head %d, K=%d, last R_ave %s", i + 1, len(stream),
                 state.record.assignments[-1], state.policy.K,
                 state.record.r_ave_series[-1][1] if state.record.r_ave_series else None)
        if on_task_end is not None:
            on_task_end(state)
    state.record.wall_time += time.perf_counter() - start
    return state.record, state


# ---------------------------------------------------------------- estimator facade

def check_tasks(X) -> list[TaskSpec]:
    tasks = list(X.tasks if isinstance(X, TaskStream) else X)
    if not tasks:
        raise ValueError("need at least one task")
    if not all(isinstance(t, TaskSpec) for t in tasks):
        raise TypeError("expected TaskSpec objects or a TaskStream")
    dims = {t.obs_dim for t in tasks}
    if len(dims) != 1:
        raise ValueError("tasks have mixed observation sizes")
    return tasks


class ContinualLearner(BaseEstimator):
    """Estimator wrapper: ``fit`` trains over a task stream, ``predict`` picks heads,
    ``score`` returns the mean deterministic test return."""

    def __init__(self, mode="dacorl", alpha=0.75, lam=0.5, beta=1e-4, gamma=0.99,
                 iterations_per_task=1000, batch_size=10, head_init="nearest_trained",
                 sigma2=0.05, m_explore=10, seed=0, hidden=200, optimizer="sgd",
                 update_rule="normalized", estimator="reward_to_go", baseline=True,
                 eval_every=100, eval_episodes=5, deterministic_eval=True, n_contexts=4,
                 distill_states=64):
        self.mode = mode
        self.alpha = alpha
        self.lam = lam
        self.beta = beta
        self.gamma = gamma
        self.iterations_per_task = iterations_per_task
        self.batch_size = batch_size
        self.head_init = head_init
        self.sigma2 = sigma2
        self.m_explore = m_explore
        self.seed = seed
        self.hidden = hidden
        self.optimizer = optimizer
        self.update_rule = update_rule
        self.estimator = estimator
        self.baseline = baseline
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.deterministic_eval = deterministic_eval
        self.n_contexts = n_contexts
        self.distill_states = distill_states

    def to_config(self) -> LearnerConfig:
        return LearnerConfig(**self.get_params())

    def fit(self, X, y=None):
        if isinstance(X, TaskStream):
            stream = X
        else:
            tasks = check_tasks(X)
            stream = TaskStream("?", tuple(tasks), (), self.seed)
        self.record_, self.state_ = run_stream(self.to_config(), stream)
        self.stream_ = stream
        self.n_contexts_ = self.state_.policy.K
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("call fit before using this learner")

    def predict(self, X):
        self._check_fitted()
        tasks = check_tasks(X)
        sel = self.state_.selector(self.stream_)
        rng = sub_rng(self.seed, RNG_PREDICT)
        return np.array([sel(t, rng) for t in tasks], dtype=int)

    def score(self, X, y=None, m_episodes: int | None = None):
        self._check_fitted()
        tasks = check_tasks(X)
        return test_all(self.state_.policy, self.state_.registry, tasks,
                        m_episodes or self.eval_episodes, sub_rng(self.seed, RNG_SCORE),
                        selector=self.state_.selector(self.stream_),
                        deterministic=self.deterministic_eval)
