"""Parametric 2-D navigation tasks with goals and viscous puddles, plus stream generation.

Three stream types differ in which task parameters vary:

* ``I``   -- the goal position (reward function)
* ``II``  -- the puddle centers (transition function)
* ``III`` -- both

Observations are the agent position followed by the task's varying parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

START = (0.05, 0.05)
ACTION_BOUND = 0.1
MAX_STEPS = 100
GOAL_TOLERANCE = 0.01
PUDDLE_SLOWDOWN = 0.2
CONTROL_COST = 0.1
PUDDLE_RADIUS = 0.1

# parameters held fixed when they are not the ones varying
DEFAULT_GOAL = (0.8, 0.8)
DEFAULT_PUDDLES = (((0.35, 0.55), PUDDLE_RADIUS), ((0.65, 0.35), PUDDLE_RADIUS))

STREAM_TYPES = ("I", "II", "III")
MANIFEST_VERSION = 1


class GenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    goal: tuple[float, float]
    puddles: tuple[tuple[tuple[float, float], float], ...]
    variation_params: tuple[float, ...]
    true_cluster: int = 0

    def __post_init__(self):
        if not all(0.0 <= g <= 1.0 for g in self.goal):
            raise ValueError(f"goal {self.goal} outside the unit square")
        for center, radius in self.puddles:
            if not all(0.0 <= c <= 1.0 for c in center):
                raise ValueError(f"puddle center {center} outside the unit square")
            if not 0.0 < radius <= 0.5:
                raise ValueError(f"puddle radius {radius} not in (0, 0.5]")

    @property
    def aug(self) -> np.ndarray:
        return np.asarray(self.variation_params, dtype=np.float64)

    @property
    def obs_dim(self) -> int:
        return 2 + len(self.variation_params)


@dataclass(frozen=True)
class TaskStream:
    type: str
    tasks: tuple[TaskSpec, ...]
    cluster_centers: tuple[tuple[float, ...], ...]
    seed: int
    cluster_spread: float = 0.05

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def obs_dim(self) -> int:
        return self.tasks[0].obs_dim

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.true_cluster for t in self.tasks])


@dataclass
class EnvState:
    position: np.ndarray
    steps: int = 0


@dataclass
class Observation:
    position: np.ndarray
    aug: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.aug])


def param_dim(stream_type: str, n_puddles: int = len(DEFAULT_PUDDLES)) -> int:
    return {"I": 2, "II": 2 * n_puddles, "III": 2 + 2 * n_puddles}[stream_type]


def make_task(stream_type: str, params: Sequence[float], task_id: int = 0,
              true_cluster: int = 0) -> TaskSpec:
    """Build a task of the given type from its varying parameters."""
    params = tuple(float(v) for v in params)
    if len(params) != param_dim(stream_type):
        raise ValueError(f"type {stream_type} expects {param_dim(stream_type)} parameters")
    goal = DEFAULT_GOAL
    puddle_xy = [c for c, _ in DEFAULT_PUDDLES]
    if stream_type in ("I", "III"):
        goal = params[:2]
    if stream_type in ("II", "III"):
        flat = params[-2 * len(DEFAULT_PUDDLES):]
        puddle_xy = [flat[i:i + 2] for i in range(0, len(flat), 2)]
    puddles = tuple((tuple(c), PUDDLE_RADIUS) for c in puddle_xy)
    return TaskSpec(task_id, tuple(goal), puddles, params, true_cluster)


def _sample_centers(rng, n, dim, min_sep, max_retries):
    for _ in range(max_retries):
        centers = rng.uniform(0.0, 1.0, size=(n, dim))
        if n < 2:
            return centers
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if d[np.triu_indices(n, 1)].min() >= min_sep:
            return centers
    raise GenerationError(f"could not place {n} centers {min_sep} apart in "
                          f"{max_retries} attempts")


def _truncated_normal(rng, mean, std, max_retries=1000):
    for _ in range(max_retries):
        x = rng.normal(mean, std)
        if np.all((x >= 0.0) & (x <= 1.0)):
            return x
    return np.clip(mean, 0.0, 1.0)


def generate_stream(stream_type: str, seed: int, n_clusters: int = 4,
                    sizes: Sequence[int] = (12, 12, 12, 14),
                    cluster_spread: float = 0.05, max_retries: int = 10_000) -> TaskStream:
    """Clustered task stream in random order; a pure function of its arguments."""
    if stream_type not in STREAM_TYPES:
        raise ValueError(f"unknown stream type {stream_type!r}")
    if len(sizes) != n_clusters:
        raise ValueError("sizes must have one entry per cluster")
    if cluster_spread <= 0:
        raise ValueError("cluster_spread must be positive")
    rng = np.random.default_rng(seed)
    dim = param_dim(stream_type)
    centers = _sample_centers(rng, n_clusters, dim, 4.0 * cluster_spread, max_retries)
    samples, labels = [], []
    for k, n in enumerate(sizes):
        for _ in range(n):
            samples.append(_truncated_normal(rng, centers[k], cluster_spread))
            labels.append(k)
    order = rng.permutation(len(samples))
    tasks = tuple(make_task(stream_type, samples[j], task_id=i, true_cluster=labels[j])
                  for i, j in enumerate(order))
    return TaskStream(stream_type, tasks, tuple(tuple(float(v) for v in c) for c in centers),
                      seed, float(cluster_spread))


def uniform_tasks(stream_type: str, n_tasks: int, seed: int) -> list[TaskSpec]:
    """Tasks drawn uniformly over the parameter box (for generalization tests)."""
    if n_tasks < 1:
        raise ValueError("n_tasks must be at least 1")
    rng = np.random.default_rng(seed)
    dim = param_dim(stream_type)
    return [make_task(stream_type, rng.uniform(0.0, 1.0, dim), task_id=i, true_cluster=-1)
            for i in range(n_tasks)]


# ---------------------------------------------------------------- dynamics

@dataclass
class TaskBatch:
    """Row-aligned arrays for stepping many episodes (possibly of different tasks) at once."""

    goals: np.ndarray          # (B, 2)
    puddle_centers: np.ndarray  # (B, P, 2)
    puddle_radii: np.ndarray    # (B, P)
    aug: np.ndarray             # (B, p)
    control_cost: float = CONTROL_COST
    slowdown: float = PUDDLE_SLOWDOWN

    @classmethod
    def from_tasks(cls, tasks: Sequence[TaskSpec], **kw) -> "TaskBatch":
        goals = np.array([t.goal for t in tasks], dtype=np.float64)
        centers = np.array([[c for c, _ in t.puddles] for t in tasks], dtype=np.float64)
        radii = np.array([[r for _, r in t.puddles] for t in tasks], dtype=np.float64)
        aug = np.array([t.variation_params for t in tasks], dtype=np.float64)
        if centers.size == 0:
            centers = np.zeros((len(tasks), 0, 2))
            radii = np.zeros((len(tasks), 0))
        return cls(goals, centers, radii, aug, **kw)

    def __len__(self) -> int:
        return self.goals.shape[0]

    def observe(self, positions: np.ndarray) -> np.ndarray:
        return np.concatenate([positions, self.aug], axis=1)

    def __post_init__(self):
        self._r2 = self.puddle_radii ** 2
        self._cx = np.ascontiguousarray(self.puddle_centers[..., 0])
        self._cy = np.ascontiguousarray(self.puddle_centers[..., 1])

    def step(self, positions: np.ndarray, steps: np.ndarray, actions: np.ndarray):
        """Advance every row once. Returns (positions', steps', rewards, done)."""
        if not np.isfinite(actions).all():
            raise ValueError("actions must be finite")
        a = np.minimum(np.maximum(actions, -ACTION_BOUND), ACTION_BOUND)
        moved = np.minimum(np.maximum(positions + a, 0.0), 1.0)
        if self._r2.shape[1]:
            dx = moved[:, :1] - self._cx
            dy = moved[:, 1:] - self._cy
            wet = (dx * dx + dy * dy <= self._r2).any(axis=1)
            if wet.any():
                slow = np.minimum(np.maximum(positions + self.slowdown * a, 0.0), 1.0)
                moved[wet] = slow[wet]
        diff = moved - self.goals
        gap2 = np.einsum("ij,ij->i", diff, diff)
        rewards = -gap2 - self.control_cost * np.einsum("ij,ij->i", a, a)
        steps = steps + 1
        done = (gap2 <= GOAL_TOLERANCE ** 2) | (steps >= MAX_STEPS)
        return moved, steps, rewards, done


def reset(task: TaskSpec) -> tuple[EnvState, Observation]:
    return EnvState(np.array(START, dtype=np.float64), 0), Observation(np.array(START), task.aug)


@lru_cache(maxsize=256)
def _single_batch(task: TaskSpec) -> "TaskBatch":
    return TaskBatch.from_tasks([task])


def step(task: TaskSpec, state: EnvState, action) -> tuple[EnvState, Observation, float, bool]:
    """Single-episode transition; same arithmetic as ``TaskBatch.step``."""
    batch = _single_batch(task)
    pos, steps, rew, done = batch.step(state.position[None, :], np.array([state.steps]),
                                       np.asarray(action, dtype=np.float64)[None, :])
    new = EnvState(pos[0], int(steps[0]))
    return new, Observation(pos[0].copy(), task.aug), float(rew[0]), bool(done[0])


# ---------------------------------------------------------------- manifest

def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def format_manifest(stream: TaskStream) -> str:
    lines = [
        "# ctxrl task-stream manifest",
        f"version = {MANIFEST_VERSION}",
        f"type = {stream.type}",
        f"seed = {stream.seed}",
        f"cluster_spread = {stream.cluster_spread!r}",
        f"n_clusters = {len(stream.cluster_centers)}",
        f"n_tasks = {len(stream.tasks)}",
    ]
    for k, c in enumerate(stream.cluster_centers):
        lines.append(f"cluster.{k}.center = {_fmt(c)}")
    for i, t in enumerate(stream.tasks):
        lines.append(f"task.{i}.id = {t.task_id}")
        lines.append(f"task.{i}.goal = {_fmt(t.goal)}")
        lines.append(f"task.{i}.puddles = " +
                     "; ".join(_fmt((*c, r)) for c, r in t.puddles))
        lines.append(f"task.{i}.variation = {_fmt(t.variation_params)}")
        lines.append(f"task.{i}.cluster = {t.true_cluster}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> TaskStream:
    kv: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ManifestError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in kv:
            raise ManifestError(f"line {n}: duplicate key {key!r}")
        kv[key] = value
    try:
        if int(kv["version"]) != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {kv['version']}")
        floats = lambda s: tuple(float(v) for v in s.split())  # noqa: E731
        centers = tuple(floats(kv[f"cluster.{k}.center"]) for k in range(int(kv["n_clusters"])))
        tasks = []
        for i in range(int(kv["n_tasks"])):
            pud = []
            for chunk in filter(None, (c.strip() for c in kv[f"task.{i}.puddles"].split(";"))):
                cx, cy, r = floats(chunk)
                pud.append(((cx, cy), r))
            goal = floats(kv[f"task.{i}.goal"])
            tasks.append(TaskSpec(int(kv[f"task.{i}.id"]), (goal[0], goal[1]), tuple(pud),
                                  floats(kv[f"task.{i}.variation"]),
                                  int(kv[f"task.{i}.cluster"])))
        return TaskStream(kv["type"], tuple(tasks), centers, int(kv["seed"]),
                          float(kv["cluster_spread"]))
    except KeyError as e:
        raise ManifestError(f"missing manifest key {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, ManifestError):
            raise
        raise ManifestError(f"malformed manifest value: {e}") from None


def write_manifest(stream: TaskStream, path) -> None:
    Path(path).write_text(format_manifest(stream), encoding="utf-8", newline="\n")


def read_manifest(path) -> TaskStream:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))
