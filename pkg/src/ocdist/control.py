"""
Riccati machinery behind the optimal-control algorithms.

The pairwise errors evolve as ``e(k+1) = e(k) + B u(k)`` with ``B`` the
incidence map (expanded by ``I_p``), weighted by ``Q`` and ``H`` per edge
and ``R`` per agent. This module solves the backward Riccati recursion,
forms ``Gamma_P = R + B^T P B`` and the averaging sequence
``M(l) = M(l-1) R Gamma_P^{-1}``, and checks the costate / equilibrium
equations on finite horizons.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .graph import IncidenceMap

COND_LIMIT = 1e12


class NumericalError(ArithmeticError):
    """Singular or ill-conditioned matrix, or a fixed-point iteration that stalls."""


def _psd(M, name, strict=False):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-12:
        raise ValueError(f"{name} is not symmetric")
    if strict:
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise ValueError(f"{name} is not positive definite") from None
    elif M.size and np.linalg.eigvalsh(M)[0] < -1e-12:
        raise ValueError(f"{name} is not positive semidefinite")
    return (M + M.T) / 2.0


@dataclass(frozen=True)
class CostWeights:
    """Per-agent weight blocks, each of shape ``(n, p, p)``.

    ``Q_i`` and ``H_i`` weight every error ``e_ij`` on agent ``i``'s outgoing
    edges; ``R_i`` weights agent ``i``'s input.
    """

    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.Q), np.shape(self.R), np.shape(self.H)}
        if len(shapes) != 1 or len(np.shape(self.Q)) != 3:
            raise ValueError(f"Q, R, H must share a shape (n, p, p); got {sorted(shapes)}")
        for name in "QH":
            for i, M in enumerate(getattr(self, name)):
                _psd(M, f"{name}_{i}")
        for i, M in enumerate(self.R):
            _psd(M, f"R_{i}", strict=True)

    @classmethod
    def scaled(cls, n, p, q=1.0, r=1.0, h=1.0):
        eye = np.broadcast_to(np.eye(p), (n, p, p))
        return cls(q * eye.copy(), r * eye.copy(), h * eye.copy())

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def p(self):
        return self.Q.shape[1]

    def stacked(self, inc: IncidenceMap):
        """Full ``(Q, R, H)``: edge-space ``Q``, ``H`` and agent-space ``R``."""
        if inc.n != self.n:
            raise ValueError(f"weights are for {self.n} agents, graph has {inc.n}")
        Q = block_diag(*[self.Q[i] for i, _ in inc.edges])
        H = block_diag(*[self.H[i] for i, _ in inc.edges])
        return Q, block_diag(*self.R), H


def _solve_checked(G, rhs, what="Gamma"):
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"{what} is numerically singular (condition number {cond:.3g})")
    return np.linalg.solve(G, rhs)


def riccati_map(P, Q, R, B):
    """One backward step ``Q + P - P B (R + B^T P B)^{-1} B^T P``."""
    G = R + B.T @ P @ B
    PB = P @ B
    out = Q + P - PB @ _solve_checked(G, PB.T)
    return (out + out.T) / 2.0


@dataclass(frozen=True)
class RiccatiSolution:
    """Stable Riccati solution and the matrices derived from it.

    ``residual`` is the max-norm fixed-point residual on the range of
    ``B``, the only edge-space directions that ``e = B x`` can take.
    """

    P: np.ndarray
    gamma_P: np.ndarray
    lbar: np.ndarray
    residual: float
    iterations: int
    B: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    n: int = 0
    p: int = 0

    @property
    def averaging(self):
        """``(1/n) 1 1^T`` expanded to the stacked state space."""
        return np.kron(np.full((self.n, self.n), 1.0 / self.n), np.eye(self.p))

    def feedback(self, e):
        """``B^T P e`` for stacked edge errors ``e``."""
        return self.B.T @ (self.P @ np.ravel(e))

    def summary(self):
        return {
            "iterations": int(self.iterations),
            "residual": float(self.residual),
            "P": self.P.tolist(),
            "gamma_P": self.gamma_P.tolist(),
        }


def range_basis(B, rtol=1e-10):
    """Orthonormal basis of ``range(B)``."""
    U, s, _ = np.linalg.svd(B, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s.max(initial=0.0), 1.0)))
    return U[:, :rank]


def solve_riccati(weights: CostWeights, inc: IncidenceMap, tol=1e-10, max_iter=10000):
    """Stable solution of the backward Riccati recursion started from ``P = H``.

    The error dynamics cannot leave ``range(B)``; on its orthogonal
    complement the recursion just accumulates ``Q`` and has no fixed point.
    The recursion is therefore run on ``range(B)`` and the result embedded
    back into edge space (zero on the complement).
    """
    Q, R, H = weights.stacked(inc)
    B = inc.expand(weights.p)
    U = range_basis(B)
    Bu, Qu, Pu = U.T @ B, U.T @ Q @ U, U.T @ H @ U
    for it in range(1, max_iter + 1):
        P_next = riccati_map(Pu, Qu, R, Bu)
        step = np.max(np.abs(P_next - Pu), initial=0.0)
        Pu = P_next
        if step <= tol:
            break
    else:
        raise NumericalError(f"Riccati recursion did not settle to {tol} in {max_iter} iterations")
    residual = float(np.max(np.abs(riccati_map(Pu, Qu, R, Bu) - Pu), initial=0.0))
    P = U @ Pu @ U.T
    P = (P + P.T) / 2.0
    gamma = R + B.T @ P @ B
    gamma = (gamma + gamma.T) / 2.0
    lbar = B.T @ P @ B @ np.linalg.inv(R)
    return RiccatiSolution(P, gamma, lbar, residual, it, B, R, U, inc.n, weights.p)


def riccati_sweep(weights: CostWeights, inc: IncidenceMap, steps):
    """Backward iterates ``P(N+1) = H, P(N), ...`` in full edge space (``steps`` of them after ``H``)."""
    Q, R, H = weights.stacked(inc)
    B = inc.expand(weights.p)
    P = H.copy()
    out = [P]
    for _ in range(steps):
        P = riccati_map(P, Q, R, B)
        out.append(P)
    return out


def m_sequence(sol: RiccatiSolution, count):
    """``[M(1), ..., M(count)]`` with ``M(1) = I`` and ``M(l) = M(l-1) R Gamma_P^{-1}``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    T = sol.R @ np.linalg.inv(sol.gamma_P)
    M = np.eye(T.shape[0])
    out = [M]
    for _ in range(count - 1):
        M = M @ T
        out.append(M)
    return out


def averaging_rank_ok(sol: RiccatiSolution, rtol=1e-9):
    """``rank(Lbar) = (n-1) p``, which averaging in the limit requires."""
    s = np.linalg.svd(sol.lbar, compute_uv=False)
    rank = int(np.sum(s > rtol * max(s.max(initial=0.0), 1.0)))
    return rank == (sol.n - 1) * sol.p


def m_limit_distance(sol: RiccatiSolution, l):
    """``||M(l) - (1/n) 1 1^T||_max``, or ``inf`` when averaging is impossible.

    When ``T = R Gamma_P^{-1}`` fixes the consensus direction on both sides
    (``R`` a multiple of the identity), ``M(l) - J = (T - J)^(l-1)`` exactly,
    and that deflated power is evaluated so the distance is not swamped by
    rounding in ``J``. Otherwise the plain product is used.
    """
    if l < 1:
        raise ValueError("l must be at least 1")
    if not averaging_rank_ok(sol):
        return float("inf")
    J = sol.averaging
    T = sol.R @ np.linalg.inv(sol.gamma_P)
    if np.max(np.abs(T @ J - J)) <= 1e-12 and np.max(np.abs(J @ T - J)) <= 1e-12:
        D = np.linalg.matrix_power(T - J, l - 1) if l > 1 else np.eye(T.shape[0]) - J
        return float(np.max(np.abs(D)))
    return float(np.max(np.abs(np.linalg.matrix_power(T, l - 1) - J)))


def contraction_spectrum(gamma_P, h):
    """Eigenvalues of ``(Gamma_P + h)^{-1} Gamma_P`` (real: similar to a symmetric matrix)."""
    C = np.linalg.cholesky(gamma_P)
    # C^T (Gamma + h)^{-1} C is symmetric and similar to (Gamma + h)^{-1} Gamma
    S = C.T @ np.linalg.solve(gamma_P + h, C)
    return np.linalg.eigvalsh((S + S.T) / 2.0)


# -- finite horizon -----------------------------------------------------------


@dataclass
class FbdeTrajectory:
    """States, inputs, costates and errors over ``k = 0..N+1``.

    ``lam[k]`` stores the costate ``lambda(k-1)``, so ``lam[0]`` is
    ``lambda(-1)`` and ``lam[N+1]`` the terminal ``lambda(N)``.
    """

    N: int
    x: np.ndarray      # (N+2, n p)
    u: np.ndarray      # (N+1, n p)
    lam: np.ndarray    # (N+2, n p)
    e: np.ndarray      # (N+2, |E| p)
    grads: np.ndarray  # (N+2, n p)

    def costate(self, k):
        """``lambda(k)`` for ``k = -1..N``."""
        return self.lam[k + 1]


def _horizon_setup(weights, inc, grads, N):
    Q, R, H = weights.stacked(inc)
    B = inc.expand(weights.p)
    grads = np.asarray(grads, dtype=float).reshape(N + 2, -1)
    if grads.shape[1] != B.shape[1]:
        raise ValueError(f"gradient schedule has width {grads.shape[1]}, expected {B.shape[1]}")
    return Q, R, H, B, grads


def fbde_trajectory(weights: CostWeights, inc: IncidenceMap, x0, grads, N):
    """Trajectory under the closed-form optimal input for an exogenous gradient schedule.

    ``grads[k]`` is ``grad f(k)`` for ``k = 0..N+1``. Uses the time-varying
    ``P(k)`` with ``P(N+1) = H`` and
    ``u(k) = -Gamma(k)^{-1} [B^T P(k+1) e(k) + sum_{l>k} M_k(l) grad f(l)]``,
    ``M_k(k+1) = I``, ``M_k(l) = M_k(l-1) R Gamma(l-1)^{-1}``.
    """
    Q, R, H, B, grads = _horizon_setup(weights, inc, grads, N)
    P = [None] * (N + 2)
    P[N + 1] = H
    for k in range(N, -1, -1):
        P[k] = riccati_map(P[k + 1], Q, R, B)
    gamma = [R + B.T @ P[k + 1] @ B for k in range(N + 1)]
    step = [R @ _solve_checked(G, np.eye(G.shape[0])) for G in gamma]  # R Gamma(k)^{-1}

    def future(k):
        # sum_{l=k+1}^{N+1} M_k(l) grad f(l); also returns the starting M = I
        total = np.zeros(B.shape[1])
        M = np.eye(B.shape[1])
        for l in range(k + 1, N + 2):
            if l > k + 1:
                M = M @ step[l - 1]
            total += M @ grads[l]
        return total

    dim = B.shape[1]
    x = np.zeros((N + 2, dim))
    u = np.zeros((N + 1, dim))
    x[0] = np.ravel(x0)
    for k in range(N + 1):
        e_k = B @ x[k]
        u[k] = -_solve_checked(gamma[k], B.T @ P[k + 1] @ e_k + future(k))
        x[k + 1] = x[k] + u[k]
    e = x @ B.T
    lam = np.zeros((N + 2, dim))
    for k in range(N + 2):
        # lambda(k-1) = B^T P(k) e(k) + grad f(k) + sum_{l>k} M_k(l) grad f(l)
        tail = future(k) if k <= N else np.zeros(dim)
        lam[k] = B.T @ P[k] @ e[k] + grads[k] + (step[k] @ tail if k <= N else 0.0)
    return FbdeTrajectory(N, x, u, lam, e, grads)


def fbde_oracle(weights: CostWeights, inc: IncidenceMap, x0, grads, N):
    """Inputs and costates from one linear solve of the two-point boundary problem.

    Unknowns ``u(0..N)`` and ``lambda(0..N)``; equations
    ``R u(k) + lambda(k) = 0``,
    ``lambda(k-1) - lambda(k) - B^T Q B x(k) = grad f(k)`` for ``k = 1..N``,
    ``lambda(N) - B^T H B x(N+1) = grad f(N+1)``,
    with ``x(k) = x(0) + sum_{j<k} u(j)``.
    """
    Q, R, H, B, grads = _horizon_setup(weights, inc, grads, N)
    d = B.shape[1]
    x0 = np.ravel(x0)
    nu = (N + 1) * d
    size = 2 * nu
    A = np.zeros((size, size))
    rhs = np.zeros(size)
    BQB, BHB = B.T @ Q @ B, B.T @ H @ B

    def ublk(j):
        return slice(j * d, (j + 1) * d)

    def lblk(j):
        return slice(nu + j * d, nu + (j + 1) * d)

    row = 0
    for k in range(N + 1):
        A[row:row + d, ublk(k)] = R
        A[row:row + d, lblk(k)] = np.eye(d)
        row += d
    for k in range(1, N + 1):
        r = slice(row, row + d)
        A[r, lblk(k - 1)] += np.eye(d)
        A[r, lblk(k)] -= np.eye(d)
        for j in range(k):
            A[r, ublk(j)] -= BQB
        rhs[r] = grads[k] + BQB @ x0
        row += d
    r = slice(row, row + d)
    A[r, lblk(N)] = np.eye(d)
    for j in range(N + 1):
        A[r, ublk(j)] -= BHB
    rhs[r] = grads[N + 1] + BHB @ x0
    sol = np.linalg.solve(A, rhs)
    return sol[:nu].reshape(N + 1, d), sol[nu:].reshape(N + 1, d)


@dataclass
class FbdeReport:
    residuals: dict
    tol: float

    @property
    def worst(self):
        return max((float(np.max(v, initial=0.0)) for v in self.residuals.values()), default=0.0)

    @property
    def ok(self):
        return self.worst <= self.tol

    def failures(self):
        """``(equation, step, residual)`` for every residual above ``tol``."""
        out = []
        for name, vals in self.residuals.items():
            for k, v in enumerate(np.atleast_1d(vals)):
                if v > self.tol:
                    out.append((name, k, float(v)))
        return out


def fbde_check(weights: CostWeights, inc: IncidenceMap, traj: FbdeTrajectory, tol=1e-9):
    """Residuals of the equilibrium, costate and terminal equations along ``traj``.

    Also compares the closed-form inputs and costates against
    :func:`fbde_oracle`. Residuals are max-norms, one per step.
    """
    Q, R, H, B, _ = _horizon_setup(weights, inc, traj.grads, traj.N)
    N = traj.N
    eq8 = [np.max(np.abs(R @ traj.u[k] + traj.costate(k))) for k in range(N + 1)]
    eq9 = [
        np.max(np.abs(traj.costate(k - 1) - (B.T @ Q @ traj.e[k] + traj.grads[k] + traj.costate(k))))
        for k in range(N + 1)
    ]
    terminal = [np.max(np.abs(traj.costate(N) - (B.T @ H @ traj.e[N + 1] + traj.grads[N + 1])))]
    dynamics = [np.max(np.abs(traj.x[k + 1] - traj.x[k] - traj.u[k])) for k in range(N + 1)]
    u_star, lam_star = fbde_oracle(weights, inc, traj.x[0], traj.grads, N)
    closed_u = np.max(np.abs(traj.u - u_star), axis=1)
    closed_lam = np.max(np.abs(traj.lam[1:] - lam_star), axis=1)
    residuals = {
        "equilibrium": np.array(eq8),
        "costate": np.array(eq9),
        "terminal": np.array(terminal),
        "dynamics": np.array(dynamics),
        "closed_form_input": closed_u,
        "closed_form_costate": closed_lam,
    }
    return FbdeReport(residuals, tol)
