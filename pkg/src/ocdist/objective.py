"""
Local objectives ``f_i`` with value / gradient / Hessian oracles.

Two built-in families satisfy the strong-convexity bounds
``m1 I <= hess f_i <= m2 I``: quadratics and l2-regularized logistic
regression. Anything else plugs in through :class:`CustomObjective`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


def _as_vector(x, p):
    x = np.asarray(x, dtype=float)
    if x.shape != (p,):
        raise ValueError(f"expected a state of shape ({p},), got {x.shape}")
    return x


class QuadraticObjective:
    """``f(x) = 1/2 (x - b)^T A (x - b)``."""

    kind = "quadratic"

    def __init__(self, A, b):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if A.shape != (b.size, b.size):
            raise ValueError(f"A has shape {A.shape}, b has size {b.size}")
        if np.max(np.abs(A - A.T)) > 1e-12:
            raise ValueError("A must be symmetric")
        self.A = (A + A.T) / 2.0
        self.b = b
        self.dim = b.size

    def value(self, x):
        r = _as_vector(x, self.dim) - self.b
        return 0.5 * float(r @ self.A @ r)

    def gradient(self, x):
        return self.A @ (_as_vector(x, self.dim) - self.b)

    def hessian(self, x):
        _as_vector(x, self.dim)
        return self.A.copy()

    def curvature_bounds(self):
        eig = np.linalg.eigvalsh(self.A)
        return float(eig[0]), float(eig[-1])


class LogisticObjective:
    """Weighted logistic loss plus ``reg/2 ||x||^2``.

    ``f(x) = sum_s w_s log(1 + exp(-y_s a_s^T x)) / S + reg/2 ||x||^2``
    with labels ``y_s`` in ``{-1, +1}``.
    """

    kind = "logistic"

    def __init__(self, features, labels, reg, weights=None):
        self.features = np.atleast_2d(np.asarray(features, dtype=float))
        self.labels = np.asarray(labels, dtype=float)
        self.reg = float(reg)
        S = self.features.shape[0]
        self.weights = np.ones(S) if weights is None else np.asarray(weights, dtype=float)
        if self.labels.shape != (S,) or self.weights.shape != (S,):
            raise ValueError("features, labels and weights disagree on sample count")
        if self.reg <= 0:
            raise ValueError("regularizer weight must be positive for strong convexity")
        self.dim = self.features.shape[1]
        self._scale = self.weights / S

    def _margins(self, x):
        return self.labels * (self.features @ _as_vector(x, self.dim))

    def value(self, x):
        m = self._margins(x)
        return float(self._scale @ np.logaddexp(0.0, -m) + 0.5 * self.reg * (x @ x))

    def gradient(self, x):
        m = self._margins(x)
        s = 0.5 * (1.0 - np.tanh(0.5 * m))  # sigmoid(-m), overflow-free
        return -self.features.T @ (self._scale * s * self.labels) + self.reg * np.asarray(x, dtype=float)

    def hessian(self, x):
        m = self._margins(x)
        s = 0.5 * (1.0 - np.tanh(0.5 * m))
        c = self._scale * s * (1.0 - s)
        H = (self.features.T * c) @ self.features + self.reg * np.eye(self.dim)
        return (H + H.T) / 2.0

    def curvature_bounds(self):
        # sigma (1 - sigma) <= 1/4
        data = (self.features.T * np.abs(self._scale)) @ self.features / 4.0
        return self.reg, self.reg + float(np.linalg.eigvalsh(data)[-1])


@dataclass
class CustomObjective:
    dim: int
    value_fn: Callable
    gradient_fn: Callable
    hessian_fn: Callable
    bounds: tuple = (np.nan, np.nan)
    kind: str = "custom"

    def value(self, x):
        return float(self.value_fn(_as_vector(x, self.dim)))

    def gradient(self, x):
        return np.asarray(self.gradient_fn(_as_vector(x, self.dim)), dtype=float)

    def hessian(self, x):
        return np.asarray(self.hessian_fn(_as_vector(x, self.dim)), dtype=float)

    def curvature_bounds(self):
        return self.bounds


class ObjectiveSet:
    """The ``n`` local objectives with shared state dimension ``p`` and bounds ``m1 <= m2``.

    Bounds default to the tightest ones the objectives declare.
    """

    def __init__(self, objectives: Sequence, m1=None, m2=None):
        if not objectives:
            raise ValueError("need at least one objective")
        dims = {f.dim for f in objectives}
        if len(dims) != 1:
            raise ValueError(f"objectives disagree on dimension: {sorted(dims)}")
        self.objectives = list(objectives)
        self.p = dims.pop()
        lo, hi = zip(*(f.curvature_bounds() for f in objectives))
        self.m1 = float(np.min(lo)) if m1 is None else float(m1)
        self.m2 = float(np.max(hi)) if m2 is None else float(m2)
        if not (0 < self.m1 <= self.m2 < np.inf):
            raise ValueError(f"need 0 < m1 <= m2 < inf, got m1={self.m1}, m2={self.m2}")

    def __len__(self):
        return len(self.objectives)

    @property
    def n(self):
        return len(self.objectives)

    @property
    def kinds(self):
        return [f.kind for f in self.objectives]

    def value(self, i, x):
        return self.objectives[i].value(x)

    def gradient(self, i, x):
        return self.objectives[i].gradient(x)

    def hessian(self, i, x):
        return self.objectives[i].hessian(x)

    def gradients(self, X):
        """Local gradients at per-agent states ``X`` of shape ``(n, p)``."""
        return np.stack([f.gradient(x) for f, x in zip(self.objectives, X)])

    def hessians(self, X):
        return np.stack([f.hessian(x) for f, x in zip(self.objectives, X)])

    def total(self, x):
        """``F(x) = sum_i f_i(x)`` at a common point."""
        return float(sum(f.value(x) for f in self.objectives))

    def total_gradient(self, x):
        return np.sum([f.gradient(x) for f in self.objectives], axis=0)

    def total_hessian(self, x):
        return np.sum([f.hessian(x) for f in self.objectives], axis=0)


def fd_hessian(objectives: ObjectiveSet, i, x, step=1e-5):
    """Symmetrized forward-difference Jacobian of the gradient of ``f_i``.

    The step is scaled by ``1 + ||x||``.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = _as_vector(x, objectives.p)
    h = step * (1.0 + np.linalg.norm(x))
    g0 = objectives.gradient(i, x)
    J = np.empty((x.size, x.size))
    for j in range(x.size):
        xp = x.copy()
        xp[j] += h
        J[:, j] = (objectives.gradient(i, xp) - g0) / h
    return (J + J.T) / 2.0


def fd_gradient(objectives: ObjectiveSet, i, x, step=1e-6):
    """Central-difference gradient of ``f_i``, step scaled by ``1 + ||x||``."""
    x = _as_vector(x, objectives.p)
    h = step * (1.0 + np.linalg.norm(x))
    g = np.empty(x.size)
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = h
        g[j] = (objectives.value(i, x + e) - objectives.value(i, x - e)) / (2.0 * h)
    return g


def reference_minimizer(objectives: ObjectiveSet, tol=1e-12, max_iter=200, x0=None):
    """Minimizer of ``F = sum_i f_i`` by damped Newton with Armijo backtracking.

    Stops once ``||grad F(x)|| <= tol``.
    """
    x = np.zeros(objectives.p) if x0 is None else np.array(x0, dtype=float)
    for _ in range(max_iter):
        g = objectives.total_gradient(x)
        if np.linalg.norm(g) <= tol:
            return x
        step = -np.linalg.solve(objectives.total_hessian(x), g)
        t, fx, slope = 1.0, objectives.total(x), float(g @ step)
        while t > 1e-12 and objectives.total(x + t * step) > fx + 1e-4 * t * slope:
            t *= 0.5
        x_new = x + t * step
        if np.array_equal(x_new, x):
            # Newton step below rounding; the gradient is as small as it gets.
            if np.linalg.norm(g) <= max(tol, 1e3 * np.finfo(float).eps * (1 + np.abs(x).max()) * objectives.m2 * objectives.n):
                return x
            break
        x = x_new
    if np.linalg.norm(objectives.total_gradient(x)) <= tol:
        return x
    raise ConvergenceError(f"Newton did not reach ||grad F|| <= {tol} in {max_iter} iterations")


def random_spd(p, m1, m2, rng):
    """Random symmetric matrix with spectrum in ``[m1, m2]``; both endpoints are attained when ``p >= 2``."""
    Qm, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = rng.uniform(m1, m2, size=p)
    if p >= 2:
        eig[0], eig[1] = m1, m2
    A = (Qm * eig) @ Qm.T
    return (A + A.T) / 2.0


def random_quadratics(n, p, m1, m2, rng, spread=1.0):
    objs = [QuadraticObjective(random_spd(p, m1, m2, rng), spread * rng.standard_normal(p)) for _ in range(n)]
    return ObjectiveSet(objs, m1=m1, m2=m2)


def random_logistic(n, p, rng, samples=8, reg=0.5):
    objs = []
    for _ in range(n):
        X = rng.standard_normal((samples, p))
        y = np.where(rng.standard_normal(samples) > 0, 1.0, -1.0)
        objs.append(LogisticObjective(X, y, reg))
    return ObjectiveSet(objs)
