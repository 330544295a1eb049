import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctxrl.numkit import (DenseNetParams, DomainError, EvaluationError, GaussianActionDist,
                          ShapeError, backprop, batch_kl, batch_log_prob, forward,
                          gaussian_log_prob, gradient_check, init_dense, kl_diag_gaussian,
                          numerical_gradient)
from ctxrl.verify import check_dense, check_distill, check_reinforce, surrogate


def matmul_oracle(layers, x, out_relu=False):
    """Plain-python dense forward, loop over every multiply-add."""
    h = list(map(float, x))
    for i, (W, b) in enumerate(layers):
        z = [sum(W[r][c] * h[c] for c in range(len(h))) + b[r] for r in range(len(b))]
        last = i == len(layers) - 1
        h = [max(v, 0.0) for v in z] if (not last or out_relu) else z
    return np.array(h)


def test_identity_layer():
    net = DenseNetParams([(np.eye(2), np.zeros(2))])
    np.testing.assert_array_equal(forward(net, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_weights_give_bias():
    b = np.array([0.3, -0.7])
    net = DenseNetParams([(np.zeros((2, 3)), b)])
    np.testing.assert_array_equal(forward(net, np.array([5.0, -1.0, 2.0])), b)


def test_forward_matches_loop_oracle(rng):
    net = init_dense([2, 3, 2], rng)
    for W, b in net.layers:
        b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=2)
    ref = matmul_oracle([(W.tolist(), b.tolist()) for W, b in net.layers], x)
    np.testing.assert_allclose(forward(net, x), ref, rtol=1e-12, atol=0)


def test_forward_shape_error(rng):
    net = init_dense([3, 2], rng)
    with pytest.raises(ShapeError):
        forward(net, np.ones(4))


def test_forward_deterministic(rng):
    net = init_dense([4, 5, 3], rng)
    x = rng.normal(size=(7, 4))
    assert forward(net, x).tobytes() == forward(net, x.copy()).tobytes()


def test_glorot_bounds(rng):
    net = init_dense([30, 20], rng)
    lim = math.sqrt(6 / 50)
    assert np.abs(net.layers[0][0]).max() <= lim


@pytest.mark.parametrize("mu,sigma,a,expected", [
    (0.0, 1.0, 0.0, -0.9189385),
    (0.0, 2.0, 1.0, -1.7371),
])
def test_log_prob_closed_form(mu, sigma, a, expected):
    d = GaussianActionDist(np.array([mu]), np.array([sigma]))
    assert gaussian_log_prob(d, np.array([a])) == pytest.approx(expected, abs=1e-4)


def test_log_prob_at_peak():
    mu = np.array([0.3, -1.2, 4.0])
    d = GaussianActionDist(mu, np.ones(3))
    assert gaussian_log_prob(d, mu) == pytest.approx(-1.5 * math.log(2 * math.pi), rel=1e-14)


def test_nonpositive_stddev():
    with pytest.raises(DomainError):
        GaussianActionDist(np.zeros(1), np.array([0.0]))


@given(mu=st.floats(-5, 5), log_sigma=st.floats(-3, 2))
def test_density_integrates_to_one(mu, log_sigma):
    s = math.exp(log_sigma)
    xs = np.linspace(mu - 8 * s, mu + 8 * s, 20001)
    dens = np.exp(batch_log_prob(np.full((xs.size, 1), mu), np.array([log_sigma]), xs[:, None]))
    assert abs(np.trapezoid(dens, xs) - 1.0) < 1e-6


@pytest.mark.parametrize("p,q,expected", [
    ((0.0, 1.0), (1.0, 1.0), 0.5),
    ((0.0, math.sqrt(2.0)), (0.0, 1.0), -0.5 * math.log(2) + 1 - 0.5),
    ((0.4, 0.3), (0.4, 0.3), 0.0),
])
def test_kl_closed_form(p, q, expected):
    P = GaussianActionDist(np.array([p[0]]), np.array([p[1]]))
    Q = GaussianActionDist(np.array([q[0]]), np.array([q[1]]))
    assert kl_diag_gaussian(P, Q) == pytest.approx(expected, abs=1e-12)


@given(data=st.data())
def test_kl_nonnegative(data):
    d = data.draw(st.integers(1, 4))
    arr = st.lists(st.floats(-3, 3), min_size=d, max_size=d).map(np.array)
    mp, mq, lp, lq = (data.draw(arr) for _ in range(4))
    kl = float(batch_kl(mp[None], lp, mq[None], lq)[0])
    assert kl >= -1e-12
    same = float(batch_kl(mp[None], lp, mp[None], lp)[0])
    assert abs(same) <= 1e-12


def test_backprop_linear():
    W = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    x = np.array([0.5, -1.0, 2.0])
    u = np.array([2.0, -3.0])
    (dW, db), = backprop(DenseNetParams([(W, np.zeros(2))]), x, u)
    np.testing.assert_array_equal(dW, np.outer(u, x))
    np.testing.assert_array_equal(db, u)


def test_backprop_zero_upstream(rng):
    net = init_dense([3, 4, 2], rng)
    for dW, db in backprop(net, rng.normal(size=3), np.zeros(2)):
        assert not dW.any() and not db.any()


def test_backprop_shape_error(rng):
    net = init_dense([3, 2], rng)
    with pytest.raises(ShapeError):
        backprop(net, np.ones(3), np.ones(3))


def test_backprop_231_matches_central_differences(rng):
    net = init_dense([2, 3, 1], rng)
    for _, b in net.layers:
        b[:] = rng.normal(0, 0.5, size=b.shape)
    x = rng.normal(size=2)
    grads = backprop(net, x, np.ones(1))
    num = numerical_gradient(net.tensors(), lambda _: float(forward(net, x)[0]), step=1e-5)
    for a, n in zip([g for pair in grads for g in pair], num):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-10)


@given(seed=st.integers(0, 2**32 - 1))
def test_backprop_random_nets(seed):
    assert check_dense(np.random.default_rng(seed)) <= 1e-4


def test_gradient_check_quadratic(rng):
    theta = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    rep = gradient_check(theta, lambda ps: 0.5 * sum(float(np.sum(p * p)) for p in ps),
                         [p.copy() for p in theta], tol=1e-7)
    assert rep.passed and rep.max_rel_error < 1e-7


def test_gradient_check_detects_wrong_gradient(rng):
    theta = [rng.normal(size=3)]
    rep = gradient_check(theta, lambda ps: 0.5 * float(ps[0] @ ps[0]), [2 * theta[0]])
    assert not rep.passed


def test_gradient_check_nonfinite_loss(rng):
    with pytest.raises(EvaluationError):
        gradient_check([np.ones(2)], lambda ps: float("nan"), [np.ones(2)])


def test_gradient_check_reinforce_three_steps(rng):
    from ctxrl.learner import reinforce_grad
    from ctxrl.verify import random_policy
    from ctxrl.rollout import Batch
    pol = random_policy(rng, 3, 5, 2, 1)
    batch = Batch(rng.uniform(-1, 1, (1, 3, 3)), rng.normal(0, 0.1, (1, 3, 2)),
                  np.array([[-0.5, -0.2, -0.1]]), np.zeros((1, 3)), np.ones((1, 3), dtype=bool))
    g = reinforce_grad(pol, 0, batch, 0.99)
    rep = gradient_check(pol.parameters(), lambda _: surrogate(pol, 0, batch, 0.99), g, tol=1e-4)
    assert rep.passed


@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_check_surrogates_random(seed):
    rng = np.random.default_rng(seed)
    assert check_reinforce(rng) <= 1e-4
    assert check_distill(rng) <= 1e-4
