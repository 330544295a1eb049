import dataclasses

import numpy as np
import pytest

from ctxrl.envs import generate_stream, make_task, TaskStream
from ctxrl.learner import (ContinualLearner, LearnerConfig, collect, collect_batch,
                           distill_grad, distill_loss, init_state, joint_grad, reinforce_grad,
                           returns, run_stream, sub_rng, RNG_TRAIN, train_task)
from ctxrl.numkit import batch_kl, gradient_check
from ctxrl.policy import MultiheadPolicy, snapshot
from ctxrl.rollout import Batch
from ctxrl.verify import perturbed, random_policy, surrogate

FAST = dict(hidden=8, iterations_per_task=3, eval_every=3, eval_episodes=1, m_explore=3)


def stream_of(tasks, kind="I"):
    return TaskStream(kind, tuple(tasks), (), 0)


@pytest.mark.parametrize("rewards,gamma,expected", [
    ([1, 1, 1], 0.0, [1, 1, 1]),
    ([1, 1, 1], 1.0, [3, 2, 1]),
    ([2, -1], 0.5, [1.5, -1]),
])
def test_returns_examples(rewards, gamma, expected):
    np.testing.assert_allclose(returns(rewards, gamma), expected, rtol=1e-15)


def test_returns_bad_gamma():
    with pytest.raises(ValueError):
        returns([1.0], 1.5)


def test_collect_empty_and_deterministic():
    task = make_task("I", (0.7, 0.2))
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=8)
    assert collect(task, pol, 0, 0, np.random.default_rng(0)) == []
    a = collect_batch(task, pol, 0, 4, np.random.default_rng(1))
    b = collect_batch(task, pol, 0, 4, np.random.default_rng(1))
    for f in ("obs", "actions", "rewards", "log_probs", "mask"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_collect_zero_variance_limit():
    task = make_task("I", (0.7, 0.2))
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=8)
    pol.heads[0].log_std[:] = np.log(1e-9)
    trajs = collect(task, pol, 0, 5, np.random.default_rng(3))
    rets = [t.rewards.sum() for t in trajs]
    assert max(rets) - min(rets) < 1e-6


def equal_return_batch(rng, obs_dim=4):
    L = 5
    obs = rng.uniform(0, 1, (3, L, obs_dim))
    acts = rng.normal(0, 0.1, (3, L, 2))
    rew = np.tile(rng.uniform(-1, 0, L), (3, 1))
    return Batch(obs, acts, rew, np.zeros((3, L)), np.ones((3, L), dtype=bool))


def test_equal_returns_with_baseline_vanish():
    rng = np.random.default_rng(0)
    pol = MultiheadPolicy.create(4, 2, rng, hidden=6)
    g = reinforce_grad(pol, 0, equal_return_batch(rng))
    assert max(np.abs(a).max() for a in g) < 1e-12


def test_one_step_gradient_is_return_times_score():
    rng = np.random.default_rng(1)
    pol = random_policy(rng, 4, 6, 2, 1)
    s, a, r = rng.uniform(0, 1, (1, 1, 4)), rng.normal(0, 0.1, (1, 1, 2)), np.array([[-0.7]])
    batch = Batch(s, a, r, np.zeros((1, 1)), np.ones((1, 1), dtype=bool))
    g = reinforce_grad(pol, 0, batch, baseline=False)

    def logp(_):
        return surrogate(pol, 0, batch, baseline=False) / -0.7

    score = gradient_check(pol.parameters(), logp, [x / -0.7 for x in g], tol=1e-4)
    assert score.passed


def test_cached_matches_recomputed():
    task = make_task("I", (0.7, 0.2))
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=16)
    batch = collect_batch(task, pol, 0, 6, np.random.default_rng(2), keep_activations=True)
    a = reinforce_grad(pol, 0, batch, use_cache=True)
    b = reinforce_grad(pol, 0, batch, use_cache=False)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-13)


def test_empty_batch_rejected():
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=4)
    with pytest.raises(ValueError):
        reinforce_grad(pol, 0, [])


def test_distill_identical_is_zero():
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=6, n_heads=2)
    S = np.random.default_rng(1).uniform(0, 1, (7, 4))
    loss, g = distill_grad(pol, snapshot(pol), S)
    assert loss == 0.0
    assert all(np.abs(a).max() < 1e-15 for a in g)


def test_distill_single_head_single_state():
    rng = np.random.default_rng(5)
    teacher = snapshot(random_policy(rng, 4, 6, 2, 1))
    student = perturbed(teacher, rng)
    S = rng.uniform(0, 1, (1, 4))
    _, g = distill_grad(student, teacher, S)
    rep = gradient_check(student.parameters(), lambda _: distill_loss(student, teacher, S), g,
                         tol=1e-4)
    assert rep.passed


def test_distill_empty_states():
    pol = MultiheadPolicy.create(4, 2, np.random.default_rng(0), hidden=4)
    with pytest.raises(ValueError):
        distill_grad(pol, snapshot(pol), np.zeros((0, 4)))


def test_joint_is_linear():
    rng = np.random.default_rng(6)
    teacher = snapshot(random_policy(rng, 4, 6, 2, 2))
    student = perturbed(teacher, rng)
    batch = equal_return_batch(rng)
    batch.rewards[1] -= 0.5
    gr = reinforce_grad(student, 1, batch)
    _, gd = distill_grad(student, teacher, batch.states())
    for lam in rng.uniform(0, 1, 5):
        for j, r, d in zip(joint_grad(gr, gd, lam), gr, gd):
            np.testing.assert_allclose(j, r - lam * d, rtol=1e-12, atol=0)


def test_distillation_is_corrective():
    rng = np.random.default_rng(7)
    teacher = snapshot(random_policy(rng, 4, 8, 2, 2))
    student = perturbed(teacher, rng, 0.2)
    probe = rng.uniform(0, 1, (50, 4))
    kls = []
    for _ in range(200):
        _, gd = distill_grad(student, teacher, probe)
        g = joint_grad([np.zeros_like(p) for p in gd], gd, 1.0)
        for p, d in zip(student.parameters(), g):
            p += 1e-2 * d
        kls.append(distill_loss(student, teacher, probe))
    assert max(kls) <= 10 * kls[0]
    assert kls[-1] < kls[0]


def test_teacher_invariant_during_task():
    cfg = LearnerConfig(**FAST)
    s = stream_of([make_task("I", (0.2, 0.8), 0), make_task("I", (0.8, 0.2), 1)])
    state = init_state(cfg, 4)
    train_task(state, s.tasks[0], s)
    teacher = snapshot(state.policy)
    x = np.random.default_rng(0).uniform(0, 1, (5, 4))
    ref = teacher.means(0, x).tobytes()
    train_task(state, s.tasks[1], s)
    assert teacher.means(0, x).tobytes() == ref


def test_lambda_zero_matches_reference_loop():
    cfg = LearnerConfig(lam=0.0, **FAST)
    task = make_task("I", (0.3, 0.7))
    state = init_state(cfg, 4)
    train_task(state, task)
    ref = init_state(cfg, 4)
    rng = sub_rng(cfg.seed, RNG_TRAIN)
    for _ in range(cfg.iterations_per_task):
        batch = collect_batch(task, ref.policy, 0, cfg.batch_size, rng)
        g = reinforce_grad(ref.policy, 0, batch, cfg.gamma)
        for p, d in zip(ref.policy.parameters(), g):
            p += cfg.beta * d
    for a, b in zip(state.policy.parameters(), ref.policy.parameters()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_naive_keeps_one_head():
    s = generate_stream("I", 0, sizes=(2, 2, 2, 2))
    rec, state = run_stream(LearnerConfig(mode="naive", **FAST), s)
    assert state.policy.K == 1 and rec.K_T == 1 and set(rec.assignments) == {0}


def test_oracle_default_stream_four_heads():
    s = generate_stream("I", 0)
    cfg = LearnerConfig(mode="oracle", hidden=4, iterations_per_task=1, eval_every=10**6)
    rec, state = run_stream(cfg, s)
    assert state.policy.K == 4 and rec.K_T == 4


def test_default_alpha_context_count():
    s = generate_stream("I", 0)
    cfg = LearnerConfig(hidden=4, iterations_per_task=1, eval_every=10**6)
    rec, _ = run_stream(cfg, s)
    assert 4 <= rec.K_T <= 8


def test_fixed_k_preallocates():
    s = generate_stream("I", 0, sizes=(1, 1, 1, 1))
    rec, state = run_stream(LearnerConfig(mode="fixed_k", **FAST), s)
    assert state.policy.K == 4
    label_to_head = {}
    for z, y in zip(rec.assignments, s.labels):
        assert label_to_head.setdefault(y, z) == z


def test_single_task_record():
    cfg = LearnerConfig(**{**FAST, "iterations_per_task": 6, "eval_every": 2})
    rec, _ = run_stream(cfg, stream_of([make_task("I", (0.5, 0.9))]))
    assert rec.K_T == 1 and len(rec.r_ave_series) == 3
    assert rec.r_bar_ave == pytest.approx(np.mean([v for _, v in rec.r_ave_series]), abs=1e-12)


def test_repeated_task_reuses_context():
    t = make_task("I", (0.5, 0.9))
    rec, state = run_stream(LearnerConfig(**FAST), stream_of([t, dataclasses.replace(t, task_id=1)]))
    assert rec.K_T == 1 and state.policy.K == 1


def test_run_stream_deterministic():
    s = generate_stream("I", 1, sizes=(1, 1, 1, 1))
    cfg = LearnerConfig(**FAST)
    a, _ = run_stream(cfg, s)
    b, _ = run_stream(cfg, s)
    a.wall_time = b.wall_time = 0.0
    assert a == b


def test_config_validation():
    for bad in (dict(mode="x"), dict(lam=2.0), dict(beta=0.0), dict(head_init="y"),
                dict(batch_size=0), dict(estimator="z")):
        with pytest.raises(ValueError):
            LearnerConfig(**bad)


def test_estimator_facade():
    s = generate_stream("I", 2, sizes=(1, 1, 1, 1))
    est = ContinualLearner(**FAST)
    assert est.get_params()["lam"] == 0.5
    est.fit(s)
    heads = est.predict(s)
    assert heads.shape == (4,) and heads.max() < est.n_contexts_
    assert np.isfinite(est.score(s))
    with pytest.raises(Exception):
        ContinualLearner().predict(s)
