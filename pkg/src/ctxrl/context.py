"""Online context detection: a CRP-prior infinite Gaussian mixture over task features.

Contexts are indexed from 0. Each incoming feature vector is compared against the
existing contexts and a fresh "potential" context centered on the vector itself;
the potential context is kept only when its posterior beats every existing one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

UPDATE_RULES = ("normalized", "literal")


@dataclass
class ContextRegistry:
    alpha: float
    sigma2: float
    mu: list[np.ndarray] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    t: int = 0
    update_rule: str = "normalized"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")

    @property
    def K(self) -> int:
        return len(self.mu)

    def copy(self) -> "ContextRegistry":
        return replace(self, mu=[m.copy() for m in self.mu], counts=list(self.counts))

    def centroids(self) -> np.ndarray:
        return np.array(self.mu)


@dataclass
class Assignment:
    z_star: int
    is_new: bool
    posterior: np.ndarray


def _check_started(registry: ContextRegistry) -> None:
    if registry.t < 1 or registry.K < 1:
        raise ValueError("registry has no seated task yet; seed it with the first task")


def seed_first(registry: ContextRegistry, x) -> ContextRegistry:
    """The very first task opens context 0 with no inference."""
    if registry.K:
        raise ValueError("registry already has contexts")
    out = registry.copy()
    out.mu.append(np.array(x, dtype=np.float64))
    out.counts.append(1)
    out.t = 1
    return out


def crp_prior(registry: ContextRegistry) -> np.ndarray:
    _check_started(registry)
    weights = np.array(registry.counts + [registry.alpha], dtype=np.float64)
    return weights / (registry.t + registry.alpha)


def log_likelihood(registry: ContextRegistry, x, k: int) -> float:
    """log N(x; mu_k, sigma2 I); ``k == K`` is the potential context centered on ``x``."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if not 0 <= k <= registry.K:
        raise IndexError(f"context {k} out of range 0..{registry.K}")
    sq = 0.0 if k == registry.K else float(np.sum((x - registry.mu[k]) ** 2))
    return -0.5 * d * np.log(2.0 * np.pi * registry.sigma2) - sq / (2.0 * registry.sigma2)


def likelihood(registry: ContextRegistry, x, k: int) -> float:
    return float(np.exp(log_likelihood(registry, x, k)))


def log_likelihoods(registry: ContextRegistry, x) -> np.ndarray:
    """Log densities of ``x`` under the K existing contexts."""
    return np.array([log_likelihood(registry, x, k) for k in range(registry.K)])


def posterior(registry: ContextRegistry, x) -> np.ndarray:
    _check_started(registry)
    logw = np.log(np.array(registry.counts + [registry.alpha], dtype=np.float64))
    logw = logw + np.array([log_likelihood(registry, x, k) for k in range(registry.K + 1)])
    top = logw.max()
    assert np.isfinite(top), "potential-context term must stay finite"
    w = np.exp(logw - top)
    return w / w.sum()


def update_params(registry: ContextRegistry, x, post) -> ContextRegistry:
    """One gradient step on every context's centroid, weighted by its posterior.

    ``post`` must have one entry per context (after any new context was added).
    A context with no seated task yet uses a count of 1 in its step size.
    """
    x = np.asarray(x, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if post.shape != (registry.K,):
        raise ValueError(f"need {registry.K} posterior entries, got {post.shape}")
    out = registry.copy()
    for k in range(out.K):
        p = post[k]
        if p == 0.0:
            continue
        m = max(out.counts[k], 1)
        grad = x - out.mu[k]
        if out.update_rule == "literal":
            grad = grad / out.sigma2
        out.mu[k] = out.mu[k] + (p / (m + p)) * grad
    return out


def detect(registry: ContextRegistry, x) -> tuple[Assignment, ContextRegistry]:
    """Assign ``x`` to an existing context or a new one. Counts are left to ``register``."""
    _check_started(registry)
    x = np.asarray(x, dtype=np.float64)
    post = posterior(registry, x)
    K = registry.K
    is_new = bool(np.all(post[K] > post[:K]))
    out = registry.copy()
    if is_new:
        out.mu.append(x.copy())
        out.counts.append(0)
        kept = post
    else:
        kept = post[:K]
    out = update_params(out, x, kept)
    # np.argmax returns the first maximum, so ties go to the lowest index
    z = int(np.argmax(log_likelihoods(out, x)))
    return Assignment(z, is_new, post), out


def register(registry: ContextRegistry, assignment: Assignment) -> ContextRegistry:
    if not 0 <= assignment.z_star < registry.K:
        raise IndexError(f"assignment {assignment.z_star} out of range for K={registry.K}")
    out = registry.copy()
    out.counts[assignment.z_star] += 1
    out.t += 1
    return out


def map_context(registry: ContextRegistry, x) -> int:
    """Most likely existing context for ``x``; never mutates or adds contexts."""
    if registry.K < 1:
        raise ValueError("registry has no contexts")
    return int(np.argmax(log_likelihoods(registry, x)))


def nearest_centroid(centroids: np.ndarray, x) -> int:
    d = np.sum((np.asarray(centroids) - np.asarray(x)) ** 2, axis=1)
    return int(np.argmin(d))


class ContextDetector(ClusterMixin, BaseEstimator):
    """Sequential CRP mixture with the usual fit / partial_fit / predict surface.

    Rows are processed strictly in order; ``fit`` restarts from an empty registry.

    Attributes
    ----------
    registry_ : ContextRegistry
    labels_ : ndarray of shape (n_seen,)
        Context assigned to each row at the time it arrived.
    new_context_ : ndarray of bool
    n_contexts_ : int
    """

    def __init__(self, alpha: float = 0.75, sigma2: float = 0.05,
                 update_rule: str = "normalized"):
        self.alpha = alpha
        self.sigma2 = sigma2
        self.update_rule = update_rule

    def _reset(self):
        self.registry_ = ContextRegistry(self.alpha, self.sigma2, update_rule=self.update_rule)
        self.labels_ = np.empty(0, dtype=int)
        self.new_context_ = np.empty(0, dtype=bool)
        self.posteriors_: list[np.ndarray] = []

    def fit(self, X, y=None):
        self._reset()
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "registry_"):
            self._reset()
        elif self.registry_.K and X.shape[1] != self.registry_.mu[0].size:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.registry_.mu[0].size}")
        labels, new = [], []
        reg = self.registry_
        for x in X:
            if reg.t == 0:
                reg = seed_first(reg, x)
                labels.append(0)
                new.append(True)
                self.posteriors_.append(np.ones(1))
                continue
            a, reg = detect(reg, x)
            reg = register(reg, a)
            labels.append(a.z_star)
            new.append(a.is_new)
            self.posteriors_.append(a.posterior)
        self.registry_ = reg
        self.labels_ = np.concatenate([self.labels_, np.array(labels, dtype=int)])
        self.new_context_ = np.concatenate([self.new_context_, np.array(new, dtype=bool)])
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def n_contexts_(self) -> int:
        check_is_fitted(self, "registry_")
        return self.registry_.K

    def predict(self, X):
        """MAP context per row under the current centroids; does not learn."""
        check_is_fitted(self, "registry_")
        X = check_array(X, dtype=np.float64)
        return np.array([map_context(self.registry_, x) for x in X], dtype=int)
