"""
Experiment configuration files (YAML, ``schema_version: 1``).

A config names a graph, local objectives, cost weights, one algorithm
and its parameters. Every error raised while loading is a
:class:`ConfigError` carrying the dotted key that caused it. Example::

    schema_version: 1
    seed: 0
    algorithm: docmc            # dgd | docmc | doaoc | centralized | consensus_only
    graph: {file: cycle3.graph} # or {edges: [[0, 1], [1, 2, 0.5]], n: 3} or {random: {n: 5, seed: 1}}
    objective: {kind: quadratic, p: 3, m1: 0.02, m2: 0.5, spread: 1.0}
    weights: {q: 100, r: 1, h: 1}
    params: {eta: 1/m2, inner_cap: null, max_iter: 100, tol_grad: 1e-9, tol_edge: 1e-9,
             dgd_schedule: {kind: harmonic, c: 0.5}}
    consensus: {mode: exact}    # linear: rounds defaults to 10 * diameter
    initial: {mode: random, scale: 1.0}
    checks: {converge: true, classification: superlinear, tol: 1e-8}

Relative file paths resolve against the config file's directory, then
against the bundled data directory. Agents are 0-based in inline edge
lists and 1-based in graph files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .algorithms import AlgorithmConfig, StepSchedule
from .consensus import ConsensusConfig
from .control import CostWeights
from .graph import DirectedGraph, GraphError, mixing_matrix, random_balanced_graph, read_graph, validate
from .objective import ObjectiveSet, QuadraticObjective, random_logistic, random_quadratics

SCHEMA_VERSION = 1
ALGORITHMS = ("dgd", "docmc", "doaoc", "centralized", "consensus_only")
CLASSES = ("superlinear", "linear", "sublinear")
TOP_KEYS = {"schema_version", "name", "seed", "algorithm", "graph", "objective", "weights", "params",
            "consensus", "initial", "star", "variant", "checks", "output"}


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


def data_dir():
    return Path(str(resources.files("ocdist") / "data"))


def bundled_configs():
    """Names of the bundled experiment configs (file stems)."""
    return sorted(p.stem for p in data_dir().glob("*.yaml"))


def resolve(path, base=None):
    """Find ``path`` as given, next to ``base``, or in the bundled data (``.yaml`` optional)."""
    path = Path(path)
    candidates = [path] if path.is_absolute() else [Path(base or ".") / path, data_dir() / path]
    for cand in candidates + [c.with_name(c.name + ".yaml") for c in candidates]:
        if cand.is_file():
            return cand
    return None


@dataclass(frozen=True)
class ChecksSpec:
    converge: bool = True
    classification: Optional[str] = None
    tol: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    graph: DirectedGraph
    objectives: Optional[ObjectiveSet]
    weights: CostWeights
    params: AlgorithmConfig
    consensus: ConsensusConfig
    seed: int = 0
    name: str = "experiment"
    initial_mode: str = "random"
    initial_scale: float = 1.0
    star: bool = False
    variant: str = "exact"
    checks: ChecksSpec = ChecksSpec()
    output: Optional[str] = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def with_seed(self, seed):
        """Same experiment with another seed (instances generated from the seed are rebuilt)."""
        raw = dict(self.raw, seed=int(seed))
        return from_dict(raw, self.raw.get("_base"), name=self.name)


# -- field helpers ------------------------------------------------------------


def _section(d, key, path):
    val = d.get(key, {})
    if val is None:
        return {}
    if not isinstance(val, dict):
        raise ConfigError(f"{path}{key}", f"expected a mapping, got {type(val).__name__}")
    return val


def _unknown(d, allowed, path):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}{key}", "unknown key")


def _number(d, key, path, default=None, lo=None, hi=None, integer=False, lo_open=False):
    if key not in d or d[key] is None:
        if default is None:
            raise ConfigError(f"{path}{key}", "required")
        return default
    val = d[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}{key}", f"expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{path}{key}", f"expected an integer, got {val!r}")
    if not np.isfinite(val):
        raise ConfigError(f"{path}{key}", "must be finite")
    if lo is not None and (val <= lo if lo_open else val < lo):
        raise ConfigError(f"{path}{key}", f"must be {'>' if lo_open else '>='} {lo}, got {val}")
    if hi is not None and val > hi:
        raise ConfigError(f"{path}{key}", f"must be <= {hi}, got {val}")
    return int(val) if integer else float(val)


def _choice(d, key, path, options, default):
    val = d.get(key, default)
    if val not in options:
        raise ConfigError(f"{path}{key}", f"must be one of {list(options)}, got {val!r}")
    return val


def _eta(val, objectives, path):
    """Step as a number or as ``"<a>/m2"`` relative to the curvature bound."""
    if isinstance(val, str):
        text = val.replace(" ", "")
        if text.endswith("/m2") and objectives is not None:
            try:
                num = float(text[:-3])
            except ValueError:
                raise ConfigError(path, f"cannot parse step {val!r}") from None
            return num / objectives.m2
        raise ConfigError(path, f"cannot parse step {val!r} (number or 'a/m2')")
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
        raise ConfigError(path, f"step must be a positive number, got {val!r}")
    return float(val)


# -- sections -----------------------------------------------------------------


def _graph(d, base, seed):
    _unknown(d, {"file", "edges", "n", "random"}, "graph.")
    given = [k for k in ("file", "edges", "random") if k in d]
    if len(given) != 1:
        raise ConfigError("graph", "give exactly one of file, edges, random")
    try:
        if "file" in d:
            path = resolve(d["file"], base)
            if path is None:
                raise ConfigError("graph.file", f"no such file {d['file']!r}")
            g = read_graph(path)
        elif "edges" in d:
            n = _number(d, "n", "graph.", integer=True, lo=2)
            edges = []
            for idx, item in enumerate(d["edges"] or []):
                if not isinstance(item, (list, tuple)) or len(item) not in (2, 3):
                    raise ConfigError(f"graph.edges[{idx}]", f"expected [i, j] or [i, j, w], got {item!r}")
                edges.append(tuple(item) if len(item) == 3 else (item[0], item[1], 1))
            g = DirectedGraph.from_edges(n, edges)
        else:
            r = _section(d, "random", "graph.")
            _unknown(r, {"n", "seed", "cycles"}, "graph.random.")
            n = _number(r, "n", "graph.random.", integer=True, lo=2)
            rng = np.random.default_rng(_number(r, "seed", "graph.random.", default=seed, integer=True, lo=0))
            cycles = r.get("cycles")
            g = random_balanced_graph(n, rng, n_cycles=cycles)
    except GraphError as exc:
        raise ConfigError("graph", str(exc)) from None
    diag = validate(g)
    if not diag.ok:
        raise ConfigError("graph", f"graph must be balanced and strongly connected ({diag.witness})")
    return g


def _objectives(d, n, seed):
    if not d:
        return None
    kind = _choice(d, "kind", "objective.", ("quadratic", "logistic"), None)
    rng = np.random.default_rng(_number(d, "seed", "objective.", default=seed, integer=True, lo=0))
    if kind == "quadratic":
        _unknown(d, {"kind", "seed", "p", "m1", "m2", "spread", "A", "b"}, "objective.")
        if "A" in d or "b" in d:
            try:
                A = np.asarray(d["A"], dtype=float)
                b = np.asarray(d["b"], dtype=float)
                objs = [QuadraticObjective(A[i], b[i]) for i in range(n)]
            except (KeyError, IndexError, ValueError, TypeError) as exc:
                raise ConfigError("objective.A", f"need {n} symmetric blocks and {n} vectors ({exc})") from None
            try:
                return ObjectiveSet(objs)
            except ValueError as exc:
                raise ConfigError("objective.A", str(exc)) from None
        p = _number(d, "p", "objective.", default=2, integer=True, lo=1)
        m1 = _number(d, "m1", "objective.", default=0.1, lo=0, lo_open=True)
        m2 = _number(d, "m2", "objective.", default=1.0, lo=m1)
        spread = _number(d, "spread", "objective.", default=1.0, lo=0)
        return random_quadratics(n, p, m1, m2, rng, spread=spread)
    _unknown(d, {"kind", "seed", "p", "samples", "reg"}, "objective.")
    p = _number(d, "p", "objective.", default=2, integer=True, lo=1)
    samples = _number(d, "samples", "objective.", default=8, integer=True, lo=1)
    reg = _number(d, "reg", "objective.", default=0.5, lo=0, lo_open=True)
    return random_logistic(n, p, rng, samples=samples, reg=reg)


def _params(d, objectives):
    _unknown(d, {"eta", "inner_cap", "max_iter", "tol_grad", "tol_edge", "dgd_schedule"}, "params.")
    eta = _eta(d.get("eta", "1/m2" if objectives is not None else 0.5), objectives, "params.eta")
    if objectives is not None and eta >= 2.0 / objectives.m2:
        raise ConfigError("params.eta", f"must be below 2/m2 = {2.0 / objectives.m2:g}, got {eta:g}")
    cap = d.get("inner_cap")
    if cap is not None:
        cap = _number(d, "inner_cap", "params.", integer=True, lo=0)
    s = _section(d, "dgd_schedule", "params.")
    _unknown(s, {"kind", "eta", "c"}, "params.dgd_schedule.")
    kind = _choice(s, "kind", "params.dgd_schedule.", ("constant", "harmonic"), "harmonic")
    if kind == "constant":
        step = s.get("eta", 0.1)
        schedule = StepSchedule("constant", eta=0.0 if step == 0 else _eta(step, objectives, "params.dgd_schedule.eta"))
    else:
        schedule = StepSchedule("harmonic", c=_number(s, "c", "params.dgd_schedule.", default=0.5, lo=0, lo_open=True))
    return AlgorithmConfig(
        eta=eta,
        inner_cap=cap,
        dgd_schedule=schedule,
        tol_grad=_number(d, "tol_grad", "params.", default=1e-9, lo=0, lo_open=True),
        tol_edge=_number(d, "tol_edge", "params.", default=1e-9, lo=0, lo_open=True),
        max_iter=_number(d, "max_iter", "params.", default=100, integer=True, lo=0),
    )


def _consensus(d, graph):
    _unknown(d, {"mode", "rounds"}, "consensus.")
    mode = _choice(d, "mode", "consensus.", ("exact", "linear"), "exact")
    if mode == "exact":
        return ConsensusConfig()
    rounds = _number(d, "rounds", "consensus.", default=10 * graph.diameter(), integer=True, lo=1)
    try:
        W = mixing_matrix(graph)
    except GraphError as exc:
        raise ConfigError("consensus", str(exc)) from None
    return ConsensusConfig("linear", rounds, W)


def from_dict(raw, base=None, name="experiment"):
    """Build an :class:`ExperimentConfig` from parsed YAML; ``base`` resolves relative paths."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    _unknown({k: v for k, v in raw.items() if k != "_base"}, TOP_KEYS, "")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    seed = _number(raw, "seed", "", default=0, integer=True, lo=0)
    algorithm = _choice(raw, "algorithm", "", ALGORITHMS, None)
    graph = _graph(_section(raw, "graph", ""), base, seed)
    obj_spec = _section(raw, "objective", "")
    if algorithm != "consensus_only" and not obj_spec:
        raise ConfigError("objective", f"required for algorithm {algorithm!r}")
    objectives = _objectives(obj_spec, graph.n, seed) if algorithm != "consensus_only" else None
    p = objectives.p if objectives is not None else int(_number(obj_spec, "p", "objective.", default=2, integer=True, lo=1))
    w = _section(raw, "weights", "")
    _unknown(w, {"q", "r", "h"}, "weights.")
    weights = CostWeights.scaled(
        graph.n, p,
        q=_number(w, "q", "weights.", default=1.0, lo=0),
        r=_number(w, "r", "weights.", default=1.0, lo=0, lo_open=True),
        h=_number(w, "h", "weights.", default=1.0, lo=0),
    )
    init = _section(raw, "initial", "")
    _unknown(init, {"mode", "scale"}, "initial.")
    checks = _section(raw, "checks", "")
    _unknown(checks, {"converge", "classification", "tol"}, "checks.")
    converge = checks.get("converge", True)
    if not isinstance(converge, bool):
        raise ConfigError("checks.converge", f"expected true or false, got {converge!r}")
    star = raw.get("star", False)
    if not isinstance(star, bool):
        raise ConfigError("star", f"expected true or false, got {star!r}")
    out = raw.get("output")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output", "expected a directory path")
    return ExperimentConfig(
        algorithm=algorithm,
        graph=graph,
        objectives=objectives,
        weights=weights,
        params=_params(_section(raw, "params", ""), objectives),
        consensus=_consensus(_section(raw, "consensus", ""), graph),
        seed=seed,
        name=str(raw.get("name", name)),
        initial_mode=_choice(init, "mode", "initial.", ("random", "consensus"), "random"),
        initial_scale=_number(init, "scale", "initial.", default=1.0, lo=0),
        star=star,
        variant=_choice(raw, "variant", "", ("exact", "eta"), "exact"),
        checks=ChecksSpec(
            converge=converge,
            classification=_choice(checks, "classification", "checks.", CLASSES + (None,), None),
            tol=_number(checks, "tol", "checks.", default=1e-8, lo=0, lo_open=True),
        ),
        output=out,
        raw=dict(raw, _base=None if base is None else str(base)),
    )


def loads(text, base=None, name="experiment"):
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "<root>"
        raise ConfigError(where, f"YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    return from_dict(raw, base, name)


def load(path):
    """Load a config file; bare names such as ``cycle3_docmc`` refer to bundled configs."""
    found = resolve(path)
    if found is None:
        raise ConfigError("<file>", f"no such config {str(path)!r}")
    return loads(found.read_text(), base=found.parent, name=found.stem)

