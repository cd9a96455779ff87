"""
Step functions for the distributed algorithms.

Every function here is pure: it maps an explicit iteration state (and
fixed parameters) to a direction or a next state. Who computes what, and
which messages that takes, is the simulator's business.

Per-agent quantities have shape ``(n, p)`` (Hessians ``(n, p, p)``);
matrix algebra runs on the agent-major stacked vectors of length ``n p``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import block_diag

from .consensus import ConsensusConfig, average_matrices, average_vectors
from .control import RiccatiSolution, _solve_checked
from .graph import IncidenceMap


@dataclass(frozen=True)
class StepSchedule:
    """DGD step sizes: ``constant`` uses ``eta``; ``harmonic`` uses ``c / (k + 1)``."""

    kind: str = "constant"
    eta: float = 0.1
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "harmonic"):
            raise ValueError(f"unknown step schedule {self.kind!r}")
        if self.kind == "constant" and self.eta < 0:
            raise ValueError("constant step must be non-negative")
        if self.kind == "harmonic" and self.c <= 0:
            raise ValueError("harmonic schedule needs c > 0")

    def __call__(self, k):
        if self.kind == "constant":
            return self.eta
        return self.c / (k + 1)


@dataclass(frozen=True)
class AlgorithmConfig:
    eta: float = 0.5
    inner_cap: Optional[int] = None
    dgd_schedule: StepSchedule = StepSchedule("harmonic", c=0.5)
    tol_grad: float = 1e-9
    tol_edge: float = 1e-9
    max_iter: int = 100

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.inner_cap is not None and self.inner_cap < 0:
            raise ValueError("inner_cap must be non-negative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass(frozen=True)
class IterationState:
    """Outer iteration ``k``: states, edge errors, local and averaged derivatives."""

    k: int
    x: np.ndarray
    e: np.ndarray
    grad: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]


def make_state(k, x, inc: IncidenceMap, objectives=None, consensus: ConsensusConfig = ConsensusConfig()):
    """Evaluate edge errors, local derivatives and their consensus averages at ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != inc.n:
        raise ValueError(f"states must have shape (n={inc.n}, p), got {x.shape}")
    e = inc.edge_errors(x)
    if objectives is None:
        return IterationState(k, x, e)
    grad = objectives.gradients(x)
    g = average_vectors(grad, consensus)
    h = average_matrices(objectives.hessians(x), consensus)
    return IterationState(k, x, e, grad, g, h)


def _h_matrix(state):
    return block_diag(*state.h)


def dgd_step(state: IterationState, W, schedule: StepSchedule):
    """``x_i(k+1) = sum_j W_ij x_j(k) - eta(k) grad f_i(x_i(k))``."""
    return W @ state.x - schedule(state.k) * state.grad


def docmc_direction(state: IterationState, sol: RiccatiSolution, inner_cap=None):
    """Inner-loop direction with ``k`` (or ``inner_cap``) refinements.

    ``d_0 = -(Gamma_P + h)^{-1} (g + B^T P e)``,
    ``d_l = -(Gamma_P + h)^{-1} (g - Gamma_P d_{l-1})``.
    """
    G = sol.gamma_P
    K = G + (_h_matrix(state) if state.h is not None else 0.0)
    g = np.ravel(state.g) if state.g is not None else np.zeros(G.shape[0])
    loops = state.k if inner_cap is None else min(state.k, inner_cap)
    rhs0 = g + sol.feedback(state.e)
    # one inverse serves every refinement
    Kinv = _solve_checked(K, np.eye(K.shape[0]), "Gamma_P + h")
    d = -Kinv @ rhs0
    for _ in range(loops):
        d = -Kinv @ (g - G @ d)
    return d.reshape(state.x.shape)


def docmc_direction_closed(state: IterationState, sol: RiccatiSolution, inner_cap=None):
    """The same direction in closed form.

    ``-[I - A^(m+1)] h^{-1} g - A^(m+1) Gamma_P^{-1} B^T P e`` with
    ``A = (Gamma_P + h)^{-1} Gamma_P`` and ``m`` the number of refinements.
    """
    G = sol.gamma_P
    h = _h_matrix(state)
    loops = state.k if inner_cap is None else min(state.k, inner_cap)
    A = _solve_checked(G + h, G, "Gamma_P + h")
    Am = np.linalg.matrix_power(A, loops + 1)
    newton = _solve_checked(h, np.ravel(state.g), "h")
    consensus = _solve_checked(G, sol.feedback(state.e), "Gamma_P")
    d = -(newton - Am @ newton) - Am @ consensus
    return d.reshape(state.x.shape)


def doaoc_direction(state: IterationState, sol: RiccatiSolution, eta, inner_cap=None):
    """Stacked DOAOC direction.

    ``dbar_0 = -eta (g + B^T P e)``, ``dbar_l = -eta g + (I - eta h) dbar_{l-1}``.
    """
    g = np.ravel(state.g)
    h = _h_matrix(state)
    loops = state.k if inner_cap is None else min(state.k, inner_cap)
    d = -eta * (g + sol.feedback(state.e))
    step = np.eye(g.size) - eta * h
    for _ in range(loops):
        d = -eta * g + step @ d
    return d.reshape(state.x.shape)


def doaoc_agent_direction(g_i, h_i, c_i, eta, loops):
    """One agent's DOAOC direction from its own averages and feedback ``c_i = (B^T P e)_i``.

    ``d^{l+1} = d^l - eta g_i - eta h_i d^l``.
    """
    d = -eta * (g_i + c_i)
    for _ in range(loops):
        d = d - eta * g_i - eta * (h_i @ d)
    return d


def centralized_step(x, g, h, variant="exact", eta=None, k=0, R=None):
    """One step of the single-state recursions (no edge errors, no ``P``).

    ``variant="exact"`` runs ``d_l = -(R + h)^{-1} (g - R d_{l-1})`` from
    ``d_0 = -(R + h)^{-1} g``; ``variant="eta"`` runs
    ``d_l = -eta g + (I - eta h) d_{l-1}`` from ``d_0 = -eta g``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if variant == "exact":
        R = np.eye(x.size) if R is None else np.atleast_2d(R)
        Kinv = np.linalg.inv(R + h)
        d = -Kinv @ g
        for _ in range(k):
            d = -Kinv @ (g - R @ d)
    elif variant == "eta":
        if eta is None:
            raise ValueError("variant 'eta' needs a step eta")
        d = -eta * g
        for _ in range(k):
            d = -eta * g + (np.eye(x.size) - eta * h) @ d
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return x + d


def consensus_only_step(state: IterationState, sol: RiccatiSolution):
    """Pure consensus step ``x - Gamma_P^{-1} B^T P e`` (no local objectives)."""
    d = -_solve_checked(sol.gamma_P, sol.feedback(state.e), "Gamma_P")
    return state.x + d.reshape(state.x.shape)
