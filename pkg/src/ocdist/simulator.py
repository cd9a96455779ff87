"""
Deterministic synchronous-round simulation.

Agents (and, for DOCMC, a parameter server) exchange explicit messages
through an in-process :class:`Network`. Every message is serialized with
a fixed little-endian layout so byte counts are reproducible, and the
network refuses any message that does not follow the topology:
peer-to-peer runs may only talk along graph edges (either direction),
server runs only between an agent and the server.

Each run produces a :class:`ConvergenceTrace` with one row per outer
iteration.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import algorithms as alg
from .consensus import ConsensusConfig
from .control import CostWeights, RiccatiSolution, solve_riccati
from .graph import DirectedGraph, incidence, mixing_matrix
from .objective import ObjectiveSet, reference_minimizer

SERVER = -1
KINDS = ("gradient", "hessian", "edge_error", "direction", "state")
TRACE_COLUMNS = ("k", "err_to_opt", "consensus_err", "edge_norm", "f_gap", "msgs", "bytes")


class TopologyError(RuntimeError):
    """A message was sent over a link the topology does not have."""


# -- payloads -----------------------------------------------------------------


def encode(arr):
    """``uint32`` rank, ``uint32`` dims, then float64 entries, all little-endian."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + arr.tobytes()


def decode(buf):
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    data = np.frombuffer(buf, dtype="<f8", offset=4 + 4 * ndim)
    return data.reshape(shape).astype(float)


def encode_sym(M):
    """Symmetric matrix as its upper triangle, ``p (p + 1) / 2`` entries."""
    M = np.asarray(M, dtype=float)
    return encode(M[np.triu_indices(M.shape[0])])


def decode_sym(buf):
    v = decode(buf)
    p = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    M = np.zeros((p, p))
    M[np.triu_indices(p)] = v
    return M + np.triu(M, 1).T


@dataclass(frozen=True)
class Message:
    round: int
    step: int
    sender: int
    receiver: int
    kind: str
    payload: bytes = field(repr=False)
    origin: int = SERVER

    @property
    def nbytes(self):
        return len(self.payload)


class Network:
    """Message queues with a global barrier (:meth:`deliver`)."""

    def __init__(self, graph: DirectedGraph, mode):
        if mode not in ("peer", "server"):
            raise ValueError(f"unknown network mode {mode!r}")
        self.graph = graph
        self.mode = mode
        self.log = []
        self._pending = []

    def allowed(self, a, b):
        if a == b:
            return False
        if self.mode == "server":
            return (a == SERVER) != (b == SERVER)
        return a != SERVER and b != SERVER and self.graph.is_adjacent(a, b)

    def send(self, msg: Message):
        if msg.kind not in KINDS:
            raise ValueError(f"unknown payload kind {msg.kind!r}")
        if not self.allowed(msg.sender, msg.receiver):
            raise TopologyError(f"no {self.mode} link {msg.sender} -> {msg.receiver}")
        self._pending.append(msg)

    def deliver(self):
        """Barrier: hand out everything sent since the last call, ordered by sender."""
        inbox = {}
        for msg in sorted(self._pending, key=lambda m: (m.receiver, m.sender, m.origin, KINDS.index(m.kind))):
            inbox.setdefault(msg.receiver, []).append(msg)
        self.log.extend(self._pending)
        self._pending = []
        return inbox


# -- trace --------------------------------------------------------------------


@dataclass
class ConvergenceTrace:
    algorithm: str
    rows: list = field(default_factory=list)
    states: list = field(default_factory=list)
    messages: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    conservation: float = 0.0
    converged: bool = False
    meta: dict = field(default_factory=dict)

    def column(self, name):
        idx = TRACE_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows], dtype=float)

    @property
    def errors(self):
        return self.column("err_to_opt")

    @property
    def iterations(self):
        return len(self.rows) - 1

    def iterations_to(self, tol):
        """First ``k`` with ``err_to_opt <= tol``, or ``None``."""
        hits = np.nonzero(self.errors <= tol)[0]
        return int(hits[0]) if hits.size else None

    def totals(self):
        return int(self.column("msgs").sum()), int(self.column("bytes").sum())

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k, err, cons, edge, gap, msgs, nbytes in self.rows:
            w.writerow([k, repr(float(err)), repr(float(cons)), repr(float(edge)), repr(float(gap)), msgs, nbytes])
        return buf.getvalue()

    def write(self, out_dir, stem="trace"):
        """Write ``<stem>.csv`` and ``<stem>.meta.json``; returns both paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        meta_path = out / f"{stem}.meta.json"
        csv_path.write_text(self.csv_text())
        meta = dict(self.meta, algorithm=self.algorithm, converged=self.converged,
                    conservation=self.conservation, iterations=self.iterations)
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return csv_path, meta_path


def read_trace(csv_path):
    """Rows of a trace CSV as a dict of float columns."""
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"{csv_path}: expected columns {TRACE_COLUMNS}, got {reader.fieldnames}")
        rows = list(reader)
    return {c: np.array([float(r[c]) for r in rows]) for c in TRACE_COLUMNS}


class _Recorder:
    def __init__(self, name, objectives, x_star, inc):
        self.trace = ConvergenceTrace(name)
        self.objectives = objectives
        self.x_star = x_star
        self.inc = inc
        ref = x_star if np.ndim(x_star) == 1 else np.mean(x_star, axis=0)
        self.f_star = objectives.total(ref) if objectives is not None else 0.0

    def row(self, k, x, msgs, nbytes):
        xbar = x.mean(axis=0)
        err = float(np.linalg.norm(x - self.x_star))
        cons = float(np.linalg.norm(x - xbar))
        edge = float(np.linalg.norm(self.inc.edge_errors(x))) if self.inc is not None else 0.0
        gap = self.objectives.total(xbar) - self.f_star if self.objectives is not None else 0.0
        self.trace.rows.append((k, err, cons, edge, float(gap), msgs, nbytes))
        self.trace.states.append(x.copy())


def initial_states(n, p, seed, mode="random", scale=1.0, center=None):
    """Seeded initial states: independent draws, or one shared draw when ``mode="consensus"``."""
    rng = np.random.default_rng(seed)
    if mode == "random":
        x = scale * rng.standard_normal((n, p))
    elif mode == "consensus":
        x = np.tile(scale * rng.standard_normal(p), (n, 1))
    else:
        raise ValueError(f"unknown initial-state mode {mode!r}")
    if center is not None:
        x = x + np.asarray(center, dtype=float)
    return x


def _stopped(objectives, x, inc, config):
    mean_grad = np.linalg.norm(objectives.gradients(x).mean(axis=0))
    return mean_grad <= config.tol_grad and np.linalg.norm(inc.edge_errors(x)) <= config.tol_edge


def _prepare(graph, objectives, x0, seed):
    if objectives.n != graph.n:
        raise ValueError(f"{objectives.n} objectives for {graph.n} agents")
    x = initial_states(graph.n, objectives.p, seed) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (graph.n, objectives.p):
        raise ValueError(f"initial states must have shape {(graph.n, objectives.p)}, got {x.shape}")
    return x


def _drive(rec, x, net, config, round_fn, stop_fn):
    """Synchronous outer loop: one row per round, the last row at the stopping state."""
    for k in range(config.max_iter + 1):
        stop = stop_fn(x)
        if stop or k == config.max_iter:
            rec.trace.converged = bool(stop)
            rec.row(k, x, 0, 0)
            break
        start = len(net.log)
        t0 = time.perf_counter()
        x_next = round_fn(k, x)
        new = net.log[start:]
        rec.row(k, x, len(new), sum(m.nbytes for m in new))
        rec.trace.wall.append(time.perf_counter() - t0)
        x = x_next
    rec.trace.messages = net.log
    return rec.trace


def _loops(k, config):
    return k if config.inner_cap is None else min(k, config.inner_cap)


def _meta(sol, config, seed, x_star, **extra):
    meta = {
        "seed": seed,
        "x_star": [float(v) for v in np.ravel(x_star)],
        "config": {
            "eta": config.eta,
            "inner_cap": config.inner_cap,
            "tol_grad": config.tol_grad,
            "tol_edge": config.tol_edge,
            "max_iter": config.max_iter,
            "dgd_schedule": {"kind": config.dgd_schedule.kind, "eta": config.dgd_schedule.eta,
                             "c": config.dgd_schedule.c},
        },
    }
    if sol is not None:
        meta["riccati"] = {"residual": sol.residual, "iterations": sol.iterations}
    meta.update(extra)
    return meta


def run_docmc(graph: DirectedGraph, objectives: ObjectiveSet, weights: CostWeights, config: alg.AlgorithmConfig,
              seed=0, x0=None, riccati: Optional[RiccatiSolution] = None, x_star=None, star=False):
    """Parameter-server execution of DOCMC.

    Per round: agents evaluate local gradient and Hessian, sense their
    outgoing edge errors (a relative measurement, not a message) and send
    all three to the server; the server forms the averages, runs the
    inner direction loop and sends each agent its block; agents update.
    With ``star=True`` no edge errors are used and the server applies the
    single-state recursion with ``R_i`` in place of ``Gamma_P``.
    """
    inc = incidence(graph)
    sol = None if star else (riccati if riccati is not None else solve_riccati(weights, inc))
    x = _prepare(graph, objectives, x0, seed)
    x_star = reference_minimizer(objectives) if x_star is None else np.asarray(x_star, dtype=float)
    rec = _Recorder("docmc-star" if star else "docmc", objectives, x_star, inc)
    net = Network(graph, "server")
    n, p = x.shape

    def round_fn(k, x):
        for i in range(n):
            net.send(Message(k, 0, i, SERVER, "gradient", encode(objectives.gradient(i, x[i])), i))
            net.send(Message(k, 0, i, SERVER, "hessian", encode_sym(objectives.hessian(i, x[i])), i))
            if not star and graph.out_neighbors(i):
                delta = np.array([x[i] - x[j] for j in graph.out_neighbors(i)])
                net.send(Message(k, 0, i, SERVER, "edge_error", encode(delta), i))
        got = {(m.sender, m.kind): m.payload for m in net.deliver().get(SERVER, [])}
        grad = np.stack([decode(got[(i, "gradient")]) for i in range(n)])
        hess = np.stack([decode_sym(got[(i, "hessian")]) for i in range(n)])
        g = np.broadcast_to(grad.mean(axis=0), (n, p)).copy()
        h = np.broadcast_to(hess.mean(axis=0), (n, p, p)).copy()
        if star:
            d = np.stack([
                alg.centralized_step(np.zeros(p), g[i], h[i], "exact", k=_loops(k, config), R=weights.R[i])
                for i in range(n)
            ])
        else:
            e = np.concatenate([decode(got[(i, "edge_error")]) for i in range(n) if (i, "edge_error") in got])
            rec.trace.conservation = max(rec.trace.conservation, float(np.max(np.abs(e - inc.edge_errors(x)))))
            d = alg.docmc_direction(alg.IterationState(k, x, e, grad, g, h), sol, config.inner_cap)
        for i in range(n):
            net.send(Message(k, 1, SERVER, i, "direction", encode(d[i])))
        inbox = net.deliver()
        return np.stack([x[i] + decode(inbox[i][0].payload) for i in range(n)])

    trace = _drive(rec, x, net, config, round_fn, lambda x: _stopped(objectives, x, inc, config))
    trace.meta = _meta(sol, config, seed, x_star, star=star)
    return trace


def _flood(net, graph, k, step, kind, own):
    """Relay every agent's payload to all agents over graph edges.

    ``own`` maps agent -> payload bytes. Each sub-round, agents forward
    what they learned in the previous one to all neighbours. Returns the
    per-agent ``{origin: payload}`` tables and the next free step index.
    """
    known = {i: {i: own[i]} for i in own}
    fresh = {i: [i] for i in own}
    while any(fresh.values()):
        for i in sorted(fresh):
            for origin in fresh[i]:
                for j in graph.neighbors(i):
                    net.send(Message(k, step, i, j, kind, known[i][origin], origin))
        inbox = net.deliver()
        fresh = {i: [] for i in own}
        for j, msgs in inbox.items():
            for m in msgs:
                if m.origin not in known[j]:
                    known[j][m.origin] = m.payload
                    fresh[j].append(m.origin)
        fresh = {i: sorted(v) for i, v in fresh.items()}
        step += 1
    return known, step


def _mix(net, graph, k, step, kind, W, values, rounds, pack, unpack):
    """``rounds`` of linear consensus: each agent sends its value to neighbours with ``W_ij > 0``."""
    n = len(values)
    for _ in range(rounds):
        for i in range(n):
            for j in graph.neighbors(i):
                if W[j, i] > 0:
                    net.send(Message(k, step, i, j, kind, pack(values[i]), i))
        inbox = net.deliver()
        new = []
        for i in range(n):
            recv = {m.sender: unpack(m.payload) for m in inbox.get(i, []) if m.kind == kind}
            recv[i] = values[i]
            new.append(sum(W[i, j] * recv[j] for j in sorted(recv)))
        values = new
        step += 1
    return values, step


def run_doaoc(graph: DirectedGraph, objectives: ObjectiveSet, weights: CostWeights, config: alg.AlgorithmConfig,
              seed=0, x0=None, riccati: Optional[RiccatiSolution] = None, x_star=None,
              consensus: ConsensusConfig = ConsensusConfig()):
    """Peer-to-peer execution of DOAOC.

    Per round: a consensus protocol gives every agent ``g_i`` and ``h_i``
    (flooding for ``exact``, ``W`` mixing for ``linear``); agents swap
    states with neighbours to get their edge errors, relay them so each
    can evaluate its block of ``B^T P e``, run the local direction loop
    and update. Only neighbour messages are used.
    """
    inc = incidence(graph)
    sol = riccati if riccati is not None else solve_riccati(weights, inc)
    x = _prepare(graph, objectives, x0, seed)
    x_star = reference_minimizer(objectives) if x_star is None else np.asarray(x_star, dtype=float)
    rec = _Recorder("doaoc", objectives, x_star, inc)
    net = Network(graph, "peer")
    n, p = x.shape
    eta = config.eta
    W = consensus.mixing if consensus.mixing is not None else (mixing_matrix(graph) if consensus.mode == "linear" else None)

    def round_fn(k, x):
        step = 0
        grads = [objectives.gradient(i, x[i]) for i in range(n)]
        hessians = [objectives.hessian(i, x[i]) for i in range(n)]
        if consensus.mode == "exact":
            kg, step = _flood(net, graph, k, step, "gradient", {i: encode(grads[i]) for i in range(n)})
            kh, step = _flood(net, graph, k, step, "hessian", {i: encode_sym(hessians[i]) for i in range(n)})
            g = [np.stack([decode(kg[i][o]) for o in range(n)]).mean(axis=0) for i in range(n)]
            h = [np.stack([decode_sym(kh[i][o]) for o in range(n)]).mean(axis=0) for i in range(n)]
        else:
            g, step = _mix(net, graph, k, step, "gradient", W, grads, consensus.rounds, encode, decode)
            h, step = _mix(net, graph, k, step, "hessian", W, hessians, consensus.rounds, encode_sym, decode_sym)
            h = [(m + m.T) / 2.0 for m in h]
        # neighbour exchange of states gives each agent its own edge errors
        for i in range(n):
            for j in graph.neighbors(i):
                net.send(Message(k, step, i, j, "state", encode(x[i]), i))
        inbox = net.deliver()
        step += 1
        deltas = {}
        for i in range(n):
            seen = {m.sender: decode(m.payload) for m in inbox.get(i, [])}
            outs = graph.out_neighbors(i)
            if outs:
                deltas[i] = np.array([x[i] - seen[j] for j in outs])
        known, step = _flood(net, graph, k, step, "edge_error", {i: encode(deltas[i]) for i in deltas})
        d = np.empty_like(x)
        worst = 0.0
        for i in range(n):
            table = known.get(i, {})
            e = np.concatenate([decode(table[o]) for o in sorted(deltas)])
            worst = max(worst, float(np.max(np.abs(e - inc.edge_errors(x)))))
            c_i = sol.feedback(e).reshape(n, p)[i]
            d[i] = alg.doaoc_agent_direction(g[i], h[i], c_i, eta, _loops(k, config))
        rec.trace.conservation = max(rec.trace.conservation, worst)
        return x + d

    trace = _drive(rec, x, net, config, round_fn, lambda x: _stopped(objectives, x, inc, config))
    trace.meta = _meta(sol, config, seed, x_star, consensus={"mode": consensus.mode, "rounds": consensus.rounds})
    return trace


def run_dgd(graph: DirectedGraph, objectives: ObjectiveSet, config: alg.AlgorithmConfig, seed=0, x0=None,
            x_star=None, W=None):
    """Synchronous DGD: neighbours swap states, then mix and take a local gradient step."""
    inc = incidence(graph)
    W = mixing_matrix(graph) if W is None else np.asarray(W)
    x = _prepare(graph, objectives, x0, seed)
    x_star = reference_minimizer(objectives) if x_star is None else np.asarray(x_star, dtype=float)
    rec = _Recorder("dgd", objectives, x_star, inc)
    net = Network(graph, "peer")
    n = graph.n
    schedule = config.dgd_schedule

    def round_fn(k, x):
        for i in range(n):
            for j in graph.neighbors(i):
                if W[j, i] > 0:
                    net.send(Message(k, 0, i, j, "state", encode(x[i]), i))
        inbox = net.deliver()
        out = np.empty_like(x)
        step = schedule(k)
        for i in range(n):
            recv = {m.sender: decode(m.payload) for m in inbox.get(i, [])}
            recv[i] = x[i]
            mixed = sum(W[i, j] * recv[j] for j in sorted(recv))
            out[i] = mixed - step * objectives.gradient(i, x[i])
        return out

    trace = _drive(rec, x, net, config, round_fn, lambda x: _stopped(objectives, x, inc, config))
    trace.meta = _meta(None, config, seed, x_star)
    return trace


def run_centralized(objectives: ObjectiveSet, config: alg.AlgorithmConfig, x0, variant="exact", R=None, x_star=None,
                    seed=0):
    """Single shared state driven by the averaged gradient and Hessian (no network)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = objectives.n
    x_star = reference_minimizer(objectives) if x_star is None else np.asarray(x_star, dtype=float)
    rec = _Recorder(f"centralized-{variant}", objectives, np.tile(x_star, (n, 1)), None)
    net = Network(DirectedGraph.from_edges(2, [(0, 1), (1, 0)]), "peer")  # stays empty

    def round_fn(k, X):
        xc = X[0]
        g = objectives.gradients(X).mean(axis=0)
        h = objectives.hessians(X).mean(axis=0)
        nxt = alg.centralized_step(xc, g, h, variant, eta=config.eta, k=_loops(k, config), R=R)
        return np.tile(nxt, (n, 1))

    def stop(X):
        return np.linalg.norm(objectives.gradients(X).mean(axis=0)) <= config.tol_grad

    trace = _drive(rec, np.tile(x0, (n, 1)), net, config, round_fn, stop)
    trace.meta = _meta(None, config, seed, x_star, variant=variant)
    return trace


def run_consensus_only(graph: DirectedGraph, weights: CostWeights, config: alg.AlgorithmConfig, x0,
                       riccati: Optional[RiccatiSolution] = None, seed=0):
    """``f_i = 0``: the server applies ``x - Gamma_P^{-1} B^T P e``; the target is the initial mean."""
    inc = incidence(graph)
    sol = riccati if riccati is not None else solve_riccati(weights, inc)
    x = np.array(x0, dtype=float)
    target = np.tile(x.mean(axis=0), (graph.n, 1))
    rec = _Recorder("consensus_only", None, target, inc)
    net = Network(graph, "server")
    n = graph.n

    def round_fn(k, x):
        for i in range(n):
            if graph.out_neighbors(i):
                delta = np.array([x[i] - x[j] for j in graph.out_neighbors(i)])
                net.send(Message(k, 0, i, SERVER, "edge_error", encode(delta), i))
        got = {m.sender: m.payload for m in net.deliver().get(SERVER, [])}
        e = np.concatenate([decode(got[i]) for i in sorted(got)])
        nxt = alg.consensus_only_step(alg.IterationState(k, x, e), sol)
        for i in range(n):
            net.send(Message(k, 1, SERVER, i, "direction", encode(nxt[i] - x[i])))
        inbox = net.deliver()
        return np.stack([x[i] + decode(inbox[i][0].payload) for i in range(n)])

    trace = _drive(rec, x, net, config, round_fn, lambda x: np.linalg.norm(inc.edge_errors(x)) <= config.tol_edge)
    trace.meta = _meta(sol, config, seed, target[0])
    return trace
