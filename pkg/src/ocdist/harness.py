"""
Experiment orchestration: run a config, fit its rate, check properties, write a report.

Exit codes: ``0`` success, ``2`` config error, ``3`` numerical failure,
``4`` property-check failure (including non-convergence within the cap).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from . import simulator as sim
from .config import ConfigError, ExperimentConfig
from .control import NumericalError, contraction_spectrum, solve_riccati
from .graph import incidence
from .objective import ConvergenceError, reference_minimizer
from .rates import TraceTooShort, fit_rate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PROPERTY = 0, 2, 3, 4
REPORT_VERSION = 1


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trace: sim.ConvergenceTrace
    report: dict
    exit_code: int
    files: dict = field(default_factory=dict)


def optimum_curvature(objectives, x_star):
    """Average Hessian ``h*`` at the optimum (every agent at ``x*``)."""
    n = objectives.n
    return objectives.hessians(np.tile(x_star, (n, 1))).mean(axis=0)


def envelope_bases(cfg: ExperimentConfig, x_star, sol=None):
    """Predicted envelope bases ``rho`` and ``c`` for the configured algorithm (``None`` where undefined)."""
    if cfg.objectives is None or cfg.algorithm == "dgd":
        return None, None
    h_star = optimum_curvature(cfg.objectives, x_star)
    n, p = cfg.graph.n, cfg.objectives.p
    c = float(np.linalg.norm(np.eye(p) - cfg.params.eta * h_star, 2))
    if cfg.algorithm == "centralized":
        if cfg.variant == "eta":
            return None, c
        R = cfg.weights.R[0]
        return float(np.max(contraction_spectrum(R, h_star))), None
    if cfg.star:
        G = block_diag(*cfg.weights.R)
    else:
        G = sol.gamma_P
    rho = float(np.max(contraction_spectrum(G, block_diag(*[h_star] * n))))
    if cfg.algorithm == "doaoc":
        return None, c
    return rho, None


def execute(cfg: ExperimentConfig):
    """Run the configured algorithm; returns ``(trace, x_star, riccati)``."""
    n = cfg.graph.n
    p = cfg.objectives.p if cfg.objectives is not None else cfg.weights.p
    mode = "consensus" if cfg.algorithm == "centralized" else cfg.initial_mode
    x0 = sim.initial_states(n, p, cfg.seed, mode, cfg.initial_scale)
    if cfg.algorithm == "consensus_only":
        sol = solve_riccati(cfg.weights, incidence(cfg.graph))
        trace = sim.run_consensus_only(cfg.graph, cfg.weights, cfg.params, x0, riccati=sol, seed=cfg.seed)
        return trace, x0.mean(axis=0), sol
    x_star = reference_minimizer(cfg.objectives)
    sol = None
    if cfg.algorithm in ("docmc", "doaoc") and not (cfg.algorithm == "docmc" and cfg.star):
        sol = solve_riccati(cfg.weights, incidence(cfg.graph))
    if cfg.algorithm == "docmc":
        trace = sim.run_docmc(cfg.graph, cfg.objectives, cfg.weights, cfg.params, seed=cfg.seed, x0=x0,
                              riccati=sol, x_star=x_star, star=cfg.star)
    elif cfg.algorithm == "doaoc":
        trace = sim.run_doaoc(cfg.graph, cfg.objectives, cfg.weights, cfg.params, seed=cfg.seed, x0=x0,
                              riccati=sol, x_star=x_star, consensus=cfg.consensus)
    elif cfg.algorithm == "dgd":
        trace = sim.run_dgd(cfg.graph, cfg.objectives, cfg.params, seed=cfg.seed, x0=x0, x_star=x_star)
    else:
        trace = sim.run_centralized(cfg.objectives, cfg.params, x0[0], variant=cfg.variant,
                                    R=cfg.weights.R[0], x_star=x_star, seed=cfg.seed)
    return trace, x_star, sol


def rate_section(trace, rho=None, c=None):
    """Rate fit as a report section; a too-short trace yields ``{"error": ...}``."""
    try:
        rep = fit_rate(trace, rho=rho, c=c)
    except TraceTooShort as exc:
        return {"error": str(exc)}
    out = rep.to_dict()
    out["kind"] = rep.kind
    return out


def build_report(cfg: ExperimentConfig, trace, rho, c):
    rate = rate_section(trace, rho, c)
    msgs, nbytes = trace.totals()
    checks = {}
    if cfg.checks.converge:
        checks["converged"] = {"ok": bool(trace.converged),
                               "detail": f"stopping rule met after {trace.iterations} iterations"
                               if trace.converged else f"not converged within {cfg.params.max_iter} iterations"}
    if cfg.checks.classification is not None:
        got = rate.get("kind")
        checks["classification"] = {"ok": got == cfg.checks.classification,
                                    "detail": f"expected {cfg.checks.classification}, measured "
                                              f"{rate.get('classification', rate.get('error'))}"}
    checks["conservation"] = {"ok": trace.conservation <= 1e-12,
                              "detail": f"max |e - B x| = {trace.conservation:.3g}"}
    return {
        "report_version": REPORT_VERSION,
        "name": cfg.name,
        "algorithm": trace.algorithm,
        "seed": cfg.seed,
        "n": cfg.graph.n,
        "converged": bool(trace.converged),
        "iterations": trace.iterations,
        "tol": cfg.checks.tol,
        "iterations_to_tol": trace.iterations_to(cfg.checks.tol),
        "final_error": float(trace.errors[-1]),
        "messages": msgs,
        "bytes": nbytes,
        "rho": rho,
        "c": c,
        "rate": rate,
        "checks": checks,
        "ok": all(v["ok"] for v in checks.values()),
    }


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Execute ``cfg``; write ``trace.csv``, ``trace.meta.json`` and ``report.json`` when ``out_dir`` is set.

    Numerical failures are reported with exit code 3 and an empty trace.
    """
    try:
        trace, x_star, sol = execute(cfg)
        if not np.all(np.isfinite(trace.column("err_to_opt"))):
            raise NumericalError("iterates became non-finite")
        rho, c = envelope_bases(cfg, x_star, sol)
    except (NumericalError, ConvergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        report = {"report_version": REPORT_VERSION, "name": cfg.name, "algorithm": cfg.algorithm,
                  "seed": cfg.seed, "error": f"{type(exc).__name__}: {exc}", "ok": False}
        result = ExperimentResult(cfg, sim.ConvergenceTrace(cfg.algorithm), report, EXIT_NUMERICAL)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            write_json(Path(out_dir) / "report.json", report)
            result.files["report"] = Path(out_dir) / "report.json"
        return result
    trace.meta.update(rho=rho, c=c, name=cfg.name)
    report = build_report(cfg, trace, rho, c)
    code = EXIT_OK if report["ok"] else EXIT_PROPERTY
    report["exit_code"] = code
    result = ExperimentResult(cfg, trace, report, code)
    if out_dir is not None:
        csv_path, meta_path = trace.write(out_dir, "trace")
        write_json(Path(out_dir) / "report.json", report)
        result.files = {"trace": csv_path, "meta": meta_path, "report": Path(out_dir) / "report.json"}
    return result


def refit(csv_path, meta_path=None):
    """Re-run the rate fit on a saved trace, taking ``rho`` and ``c`` from the adjacent metadata."""
    csv_path = Path(csv_path)
    if meta_path is None:
        meta_path = csv_path.with_suffix(".meta.json")
    meta = json.loads(Path(meta_path).read_text()) if Path(meta_path).is_file() else {}
    cols = sim.read_trace(csv_path)
    return rate_section(cols, meta.get("rho"), meta.get("c"))


COMPARE_COLUMNS = ("name", "algorithm", "seed", "converged", "iterations", "iterations_to_tol", "messages",
                   "bytes", "classification", "rho", "c")


def compare(configs, seed=None, out_dir=None):
    """Run several configs (all on ``seed`` when given) and join their summaries.

    Returns ``(rows, exit_code)``; the exit code is the worst of the individual runs.
    """
    rows, worst = [], EXIT_OK
    for idx, cfg in enumerate(configs):
        if seed is not None:
            cfg = cfg.with_seed(seed)
        sub = None if out_dir is None else Path(out_dir) / f"{idx:02d}_{cfg.name}"
        res = run_experiment(cfg, sub)
        rep = res.report
        rows.append({
            "name": cfg.name,
            "algorithm": rep.get("algorithm", cfg.algorithm),
            "seed": cfg.seed,
            "converged": rep.get("converged"),
            "iterations": rep.get("iterations"),
            "iterations_to_tol": rep.get("iterations_to_tol"),
            "messages": rep.get("messages"),
            "bytes": rep.get("bytes"),
            "classification": rep.get("rate", {}).get("classification", rep.get("error")),
            "rho": rep.get("rho"),
            "c": rep.get("c"),
        })
        worst = max(worst, res.exit_code)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_json(Path(out_dir) / "compare.json", rows)
    return rows, worst


def format_table(rows, columns=COMPARE_COLUMNS):
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


__all__ = ["ConfigError", "ExperimentResult", "run_experiment", "refit", "compare", "format_table",
           "envelope_bases", "execute", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERICAL", "EXIT_PROPERTY"]
