"""
Property checks over generated and bundled instances.

Each check returns a :class:`CheckResult`; thresholds are arguments so
callers state them explicitly. :func:`run_all` is what ``selftest`` runs.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from . import algorithms as alg
from . import simulator as sim
from .config import ExperimentConfig, bundled_configs, load
from .control import (CostWeights, contraction_spectrum, fbde_check, fbde_trajectory, m_limit_distance,
                      solve_riccati)
from .graph import incidence, random_balanced_graph
from .harness import optimum_curvature, run_experiment
from .objective import fd_gradient, fd_hessian, random_quadratics, random_spd, reference_minimizer
from .rates import FLOOR, TraceTooShort, fit_rate


@dataclass
class CheckResult:
    name: str
    ok: bool
    value: float
    detail: str

    def line(self):
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class Instance:
    """A quadratic test instance with its optimum and Riccati solution."""

    graph: object
    objectives: object
    weights: CostWeights
    riccati: object
    x_star: np.ndarray
    seed: int

    @property
    def n(self):
        return self.graph.n

    @property
    def p(self):
        return self.objectives.p

    def h_star(self):
        return optimum_curvature(self.objectives, self.x_star)

    def rho(self):
        H = block_diag(*[self.h_star()] * self.n)
        return float(np.max(contraction_spectrum(self.riccati.gamma_P, H)))

    def c(self, eta):
        return float(np.linalg.norm(np.eye(self.p) - eta * self.h_star(), 2))


def quadratic_instance(seed, p=3, m1=0.02, m2=0.5, q=100.0):
    """Family used by the rate checks: ``n = 3 + seed % 4`` agents on a random balanced graph."""
    rng = np.random.default_rng(1000 + seed)
    n = 3 + seed % 4
    g = random_balanced_graph(n, rng)
    obj = random_quadratics(n, p, m1, m2, rng)
    w = CostWeights.scaled(n, p, q=q)
    return Instance(g, obj, w, solve_riccati(w, incidence(g)), reference_minimizer(obj), seed)


def _rate_params(inst, eta=None, max_iter=100):
    eta = 1.0 / inst.objectives.m2 if eta is None else eta
    return alg.AlgorithmConfig(eta=eta, max_iter=max_iter, tol_grad=1e-12, tol_edge=1e-12)


def docmc_trace(inst: Instance):
    """DOCMC from seeded independent starts (exact consensus)."""
    x0 = sim.initial_states(inst.n, inst.p, inst.seed)
    return sim.run_docmc(inst.graph, inst.objectives, inst.weights, _rate_params(inst), x0=x0,
                         riccati=inst.riccati, x_star=inst.x_star)


def doaoc_trace(inst: Instance, eta=None):
    """DOAOC from a seeded common start (exact consensus)."""
    x0 = sim.initial_states(inst.n, inst.p, inst.seed, "consensus")
    return sim.run_doaoc(inst.graph, inst.objectives, inst.weights, _rate_params(inst, eta), x0=x0,
                         riccati=inst.riccati, x_star=inst.x_star)


def bundled(names=None):
    return [load(name) for name in (names or bundled_configs())]


# -- criteria -----------------------------------------------------------------


def check_m_limit(graphs=20, l=500, tol=1e-8, tail=100, max_n=6, seed=0):
    rng = np.random.default_rng(seed)
    worst, monotone = 0.0, True
    for _ in range(graphs):
        n = int(rng.integers(2, max_n + 1))
        g = random_balanced_graph(n, rng)
        sol = solve_riccati(CostWeights.scaled(n, 1), incidence(g))
        dist = [m_limit_distance(sol, k) for k in range(l - tail, l + 1)]
        worst = max(worst, dist[-1])
        monotone &= bool(np.all(np.diff(dist) <= 0.0))
    ok = worst <= tol and monotone
    return CheckResult("M-limit", ok, worst,
                       f"max ||M({l}) - J||_max = {worst:.3g} (tol {tol:g}) over {graphs} graphs; "
                       f"nonincreasing over last {tail} steps: {monotone}")


def check_riccati(configs=None, tol=1e-10, sym_tol=1e-12):
    worst_res, worst_sym = 0.0, 0.0
    cfgs = configs if configs is not None else bundled()
    for cfg in cfgs:
        sol = solve_riccati(cfg.weights, incidence(cfg.graph))
        worst_res = max(worst_res, sol.residual)
        worst_sym = max(worst_sym, float(np.max(np.abs(sol.P - sol.P.T))))
    ok = worst_res <= tol and worst_sym <= sym_tol
    return CheckResult("Riccati residual", ok, worst_res,
                       f"residual {worst_res:.3g} (tol {tol:g}), asymmetry {worst_sym:.3g} (tol {sym_tol:g}) "
                       f"on {len(cfgs)} bundled instances")


def check_fbde(instances=20, tol=1e-9, max_horizon=10, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 6))
        p = int(rng.integers(1, 3))
        N = int(rng.integers(1, max_horizon + 1))
        g = random_balanced_graph(n, rng)
        w = CostWeights(*(np.stack([random_spd(p, 0.5, 2.0, rng) for _ in range(n)]) for _ in range(3)))
        inc = incidence(g)
        grads = rng.standard_normal((N + 2, n * p))
        traj = fbde_trajectory(w, inc, rng.standard_normal(n * p), grads, N)
        worst = max(worst, fbde_check(w, inc, traj, tol).worst)
    return CheckResult("FBDE consistency", worst <= tol, worst,
                       f"max equilibrium/costate residual {worst:.3g} (tol {tol:g}) over {instances} instances, N <= {max_horizon}")


def check_closed_form(instances=50, tol=1e-10, max_k=30, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        p = int(rng.integers(1, 4))
        g = random_balanced_graph(n, rng)
        inc = incidence(g)
        obj = random_quadratics(n, p, 0.1, 2.0, rng)
        sol = solve_riccati(CostWeights.scaled(n, p, q=float(rng.uniform(0.5, 10))), inc)
        state = alg.make_state(int(rng.integers(0, max_k + 1)), rng.standard_normal((n, p)), inc, obj)
        dev = np.max(np.abs(alg.docmc_direction(state, sol) - alg.docmc_direction_closed(state, sol)))
        worst = max(worst, float(dev))
    return CheckResult("closed-form equivalence", worst <= tol, worst,
                       f"max |loop - closed form| = {worst:.3g} (tol {tol:g}) over {instances} instances, k <= {max_k}")


def check_spectral(instances=50, m1=0.1, m2=2.0, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = np.inf, 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        p = int(rng.integers(1, 4))
        g = random_balanced_graph(n, rng)
        sol = solve_riccati(CostWeights.scaled(n, p, q=float(rng.uniform(0.5, 10))), incidence(g))
        h = block_diag(*[random_spd(p, m1, m2, rng) for _ in range(n)])
        eig = contraction_spectrum(sol.gamma_P, h)
        lo, hi = min(lo, float(eig.min())), max(hi, float(eig.max()))
    ok = 0.0 < lo and hi < 1.0
    return CheckResult("spectral precondition", ok, hi,
                       f"eigenvalues of (Gamma_P + h)^-1 Gamma_P in [{lo:.4g}, {hi:.10g}] over {instances} draws")


def check_consensus_contraction(seeds=range(8)):
    sigma = 0.0
    for s in seeds:
        trace = docmc_trace(quadratic_instance(s))
        cons = trace.column("consensus_err")
        ok = (cons[:-1] >= FLOOR) & (cons[1:] >= FLOOR)
        if ok.any():
            sigma = max(sigma, float(np.max(cons[1:][ok] / cons[:-1][ok])))
    return CheckResult("consensus contraction", sigma < 1.0, sigma,
                       f"max disagreement ratio sigma = {sigma:.4g} over {len(list(seeds))} DOCMC runs")


def _rate_check(name, runs, key):
    bad, consts = [], []
    for label, trace, base in runs:
        try:
            rep = fit_rate(trace, **{key: base})
        except TraceTooShort as exc:
            bad.append(f"{label}: {exc}")
            continue
        const = rep.r1 if key == "rho" else rep.r2
        consts.append(const)
        if rep.kind != "superlinear" or not np.isfinite(const):
            bad.append(f"{label}: {rep.classification}")
    worst = max(consts) if consts else np.inf
    sym = "r1" if key == "rho" else "r2"
    detail = f"{len(runs) - len(bad)}/{len(runs)} superlinear, max {sym} = {worst:.3g}"
    if bad:
        detail += "; " + "; ".join(bad)
    return CheckResult(name, not bad, worst, detail)


def check_docmc_superlinear(seeds=range(8)):
    runs = []
    for s in seeds:
        inst = quadratic_instance(s)
        runs.append((f"seed {s}", docmc_trace(inst), inst.rho()))
    return _rate_check("DOCMC superlinearity", runs, "rho")


def check_doaoc_superlinear(seeds=range(8)):
    runs = []
    for s in seeds:
        inst = quadratic_instance(s)
        eta = 1.0 / inst.objectives.m2
        c = inst.c(eta)
        if not c < 1.0:
            return CheckResult("DOAOC superlinearity", False, c, f"seed {s}: c = {c} is not below 1")
        runs.append((f"seed {s}", doaoc_trace(inst, eta), c))
    return _rate_check("DOAOC superlinearity", runs, "c")


def check_baseline(names=("cycle3_docmc", "cycle3_doaoc", "cycle3_dgd"), factor=5.0, tol=1e-8):
    docmc, doaoc, dgd = (run_experiment(cfg) for cfg in bundled(list(names)))
    its = {}
    for label, res in (("docmc", docmc), ("doaoc", doaoc), ("dgd", dgd)):
        hit = res.trace.iterations_to(tol)
        # a run that never gets there needs more than its whole trace
        its[label] = (hit, False) if hit is not None else (res.trace.iterations + 1, True)
    fast = max(its["docmc"][0], its["doaoc"][0])
    ok = not its["docmc"][1] and not its["doaoc"][1] and its["dgd"][0] >= factor * fast
    fmt = {k: (f">{v - 1}" if lower else str(v)) for k, (v, lower) in its.items()}
    return CheckResult("baseline contrast", ok, its["dgd"][0] / fast,
                       f"iterations to {tol:g}: dgd {fmt['dgd']}, docmc {fmt['docmc']}, doaoc {fmt['doaoc']} "
                       f"(need dgd >= {factor:g}x)")


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-12))


def check_derivatives(configs=None, points=10, grad_tol=1e-5, hess_tol=1e-3, seed=0):
    rng = np.random.default_rng(seed)
    worst_g = worst_h = 0.0
    kinds = set()
    for cfg in configs if configs is not None else bundled():
        obj = cfg.objectives
        if obj is None:
            continue
        kinds.update(obj.kinds)
        for i in range(obj.n):
            for _ in range(points):
                x = rng.standard_normal(obj.p)
                worst_g = max(worst_g, _rel(obj.gradient(i, x), fd_gradient(obj, i, x)))
                worst_h = max(worst_h, _rel(obj.hessian(i, x), fd_hessian(obj, i, x)))
    ok = worst_g <= grad_tol and worst_h <= hess_tol
    return CheckResult("derivative checks", ok, max(worst_g, worst_h),
                       f"gradient rel err {worst_g:.3g} (tol {grad_tol:g}), Hessian rel err {worst_h:.3g} "
                       f"(tol {hess_tol:g}); kinds {sorted(kinds)}")


def check_determinism(configs=None):
    cfgs = configs if configs is not None else bundled()
    differing = []
    with tempfile.TemporaryDirectory() as tmp:
        for idx, cfg in enumerate(cfgs):
            outs = []
            for rep in range(2):
                d = Path(tmp) / f"{idx}_{rep}"
                run_experiment(cfg, d)
                outs.append({f.name: f.read_bytes() for f in sorted(d.iterdir())})
            if outs[0] != outs[1]:
                differing.append(cfg.name)
    return CheckResult("determinism", not differing, float(len(differing)),
                       f"{len(cfgs) - len(differing)}/{len(cfgs)} bundled configs byte-identical across runs"
                       + (f"; differing: {differing}" if differing else ""))


def topology_violations(trace, graph, mode):
    """Messages that break the discipline: non-adjacent peers, or any agent-to-agent message in server mode."""
    bad = []
    for m in trace.messages:
        if mode == "peer":
            if sim.SERVER in (m.sender, m.receiver) or not graph.is_adjacent(m.sender, m.receiver):
                bad.append(m)
        elif (m.sender == sim.SERVER) == (m.receiver == sim.SERVER):
            bad.append(m)
    return bad


def check_topology(seeds=range(4)):
    counts = {"doaoc": 0, "docmc": 0}
    bad = {"doaoc": 0, "docmc": 0}
    for s in seeds:
        inst = quadratic_instance(s)
        for label, trace, mode in (("docmc", docmc_trace(inst), "server"), ("doaoc", doaoc_trace(inst), "peer")):
            counts[label] += len(trace.messages)
            bad[label] += len(topology_violations(trace, inst.graph, mode))
    ok = bad["doaoc"] == 0 and bad["docmc"] == 0
    return CheckResult("topology discipline", ok, float(bad["doaoc"] + bad["docmc"]),
                       f"DOAOC: {bad['doaoc']} of {counts['doaoc']} messages between non-adjacent agents; "
                       f"DOCMC: {bad['docmc']} of {counts['docmc']} agent-to-agent messages")


CHECKS = (
    check_m_limit, check_riccati, check_fbde, check_closed_form, check_spectral, check_consensus_contraction,
    check_docmc_superlinear, check_doaoc_superlinear, check_baseline, check_derivatives, check_determinism,
    check_topology,
)


def run_all(echo=None):
    """Run every check with its default thresholds; ``echo`` receives each result line."""
    results = []
    for fn in CHECKS:
        res = fn()
        results.append(res)
        if echo is not None:
            echo(res.line())
    return results


__all__ = ["CheckResult", "Instance", "quadratic_instance", "run_all", "topology_violations", "ExperimentConfig"]
