"""Sim(3) pose graph over chunk transforms and its Levenberg-Marquardt optimizer.

Edge residuals are ``log(Z^-1 S_from^-1 S_to)`` for a measurement ``Z``;
sequential and loop edges are weighted equally.  States are updated by right
perturbation ``S <- S exp(delta)`` and the first node is held fixed to remove
the global Sim(3) gauge freedom.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import FormatError, GraphError, LogSingularityError
from .sim3 import (
    Sim3, compose_batch, exp_batch, inverse_batch, log_batch, right_jacobian_inv, stack, unstack,
)

logger = logging.getLogger(__name__)

EDGE_KINDS = ("sequential", "loop")


@dataclass
class Edge:
    source: int
    target: int
    measurement: Sim3
    kind: str = "sequential"

    def __post_init__(self):
        if self.kind not in EDGE_KINDS:
            raise ValueError(f"edge kind must be one of {EDGE_KINDS}, got {self.kind!r}")


@dataclass
class PoseGraph:
    """Chunk nodes keyed by id (chunk-to-world :class:`Sim3`) and relative-transform edges."""

    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)

    @classmethod
    def from_chain(cls, world, sequential, first=1):
        """Graph from chunk-to-world states and ``S_{k,k+1}`` measurements."""
        g = cls({first + i: S for i, S in enumerate(world)})
        for i, Z in enumerate(sequential):
            g.add_edge(first + i, first + i + 1, Z, "sequential")
        return g

    @property
    def ids(self):
        return sorted(self.nodes)

    def add_edge(self, source, target, measurement, kind="loop"):
        self.edges.append(Edge(source, target, measurement, kind))

    def copy(self):
        return PoseGraph(dict(self.nodes), list(self.edges))

    def validate(self):
        ids = self.ids
        if not ids:
            raise GraphError("graph has no nodes")
        for e in self.edges:
            if e.source not in self.nodes or e.target not in self.nodes:
                raise GraphError(f"edge {e.source}->{e.target} references a missing node")
            if e.source == e.target:
                raise GraphError(f"self-loop edge on node {e.source}")
        seq = [(e.source, e.target) for e in self.edges if e.kind == "sequential"]
        if sorted(seq) != list(zip(ids, ids[1:])):
            raise GraphError("sequential edges must connect each consecutive node pair exactly once")
        adj = {k: set() for k in ids}
        for e in self.edges:
            adj[e.source].add(e.target)
            adj[e.target].add(e.source)
        seen = {ids[0]}
        todo = deque([ids[0]])
        while todo:
            for nb in adj[todo.popleft()] - seen:
                seen.add(nb)
                todo.append(nb)
        if len(seen) != len(ids):
            raise GraphError(f"graph is not connected: {sorted(set(ids) - seen)} unreachable from {ids[0]}")


def edge_residual(nodes, edge):
    """Tangent 7-vector ``log(Z^-1 S_from^-1 S_to)``."""
    S = edge.measurement.inverse() @ nodes[edge.source].inverse() @ nodes[edge.target]
    try:
        return S.log()
    except LogSingularityError as exc:
        raise LogSingularityError(f"log branch singularity on edge {edge.source}->{edge.target}") from exc


def total_cost(graph):
    return float(sum(np.sum(edge_residual(graph.nodes, e) ** 2) for e in graph.edges))


@dataclass
class LmConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-8
    damping_up: float = 10.0
    damping_down: float = 2.0
    cost_tol: float = 1e-10
    step_tol: float = 1e-10
    jacobian_mode: str = "numeric"
    fd_step: float = 1e-6
    abs_cost_tol: float = 1e-24
    max_damping: float = 1e12

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        for name in ("initial_damping", "cost_tol", "step_tol", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.damping_up > 1 and self.damping_down > 1):
            raise ValueError("damping factors must exceed 1")
        if self.jacobian_mode not in ("numeric", "analytic"):
            raise ValueError("jacobian_mode must be 'numeric' or 'analytic'")


@dataclass
class LmReport:
    initial_cost: float
    final_cost: float
    accepted_steps: int
    iterations: int
    converged: bool
    reason: str
    history: list = field(default_factory=list)

    @property
    def mean_iteration_time(self):
        times = [h["time"] for h in self.history if "time" in h]
        return float(np.mean(times)) if times else 0.0


class _Problem:
    """Array view of a graph for batched residual and Jacobian evaluation."""

    def __init__(self, graph):
        self.ids = graph.ids
        pos = {k: i for i, k in enumerate(self.ids)}
        self.src = np.array([pos[e.source] for e in graph.edges], dtype=int)
        self.dst = np.array([pos[e.target] for e in graph.edges], dtype=int)
        zs, zR, zt = stack([e.measurement for e in graph.edges]) if graph.edges else (
            np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3)))
        self.zinv = inverse_batch(zs, zR, zt)
        self.edges = graph.edges

    def _residuals(self, a, b):
        rel = compose_batch(*inverse_batch(*a), *b)
        m = compose_batch(*self.zinv, *rel)
        try:
            return log_batch(*m)
        except LogSingularityError:
            for i in range(len(self.edges)):
                try:
                    log_batch(m[0][i], m[1][i], m[2][i])
                except LogSingularityError as exc:
                    e = self.edges[i]
                    raise LogSingularityError(
                        f"log branch singularity on edge {e.source}->{e.target}") from exc
            raise

    @staticmethod
    def _take(state, idx):
        return state[0][idx], state[1][idx], state[2][idx]

    def residuals(self, state):
        return self._residuals(self._take(state, self.src), self._take(state, self.dst))

    def numeric_jacobians(self, state, h):
        # (a exp(e))^-1 b = exp(-e) a^-1 b, so every perturbation reuses the relative pose
        a = self._take(state, self.src)
        b = self._take(state, self.dst)
        n = len(self.src)
        rel = compose_batch(*inverse_batch(*a), *b)
        steps = np.concatenate([np.eye(7) * h, -np.eye(7) * h])
        es, eR, et = exp_batch(steps)
        es_i, eR_i, et_i = inverse_batch(es, eR, et)

        def tile(x):
            return np.broadcast_to(x[None], (14,) + x.shape).reshape((14 * n,) + x.shape[1:])

        def per_step(x):
            return np.repeat(x, n, axis=0)

        rel_t = tuple(tile(x) for x in rel)
        za = compose_batch(*(tile(x) for x in self.zinv), per_step(es_i), per_step(eR_i), per_step(et_i))
        left = compose_batch(*za, *rel_t)
        zr = compose_batch(*(tile(x) for x in self.zinv), *rel_t)
        right = compose_batch(*zr, per_step(es), per_step(eR), per_step(et))
        m = tuple(np.concatenate([x, y]) for x, y in zip(left, right))
        try:
            res = log_batch(*m).reshape(2, 2, 7, n, 7)
        except LogSingularityError:
            self.residuals(state)
            raise
        Ja = ((res[0, 0] - res[0, 1]) / (2 * h)).transpose(1, 2, 0)
        Jb = ((res[1, 0] - res[1, 1]) / (2 * h)).transpose(1, 2, 0)
        return Ja, Jb

    def analytic_jacobians(self, state, r):
        n = len(self.src)
        Ja = np.empty((n, 7, 7))
        Jb = np.empty((n, 7, 7))
        nodes = unstack(*state)
        for i in range(n):
            Jinv = right_jacobian_inv(r[i])
            rel = nodes[self.dst[i]].inverse() @ nodes[self.src[i]]
            Jb[i] = Jinv
            Ja[i] = -Jinv @ rel.adjoint()
        return Ja, Jb


def edge_jacobians(graph, mode="numeric", h=1e-6):
    """Per-edge Jacobians of the residual w.r.t. right perturbations of source and target."""
    prob = _Problem(graph)
    state = stack([graph.nodes[k] for k in prob.ids])
    if mode == "numeric":
        return prob.numeric_jacobians(state, h)
    return prob.analytic_jacobians(state, prob.residuals(state))


def optimize(graph, cfg=None):
    """Levenberg-Marquardt over the 7-D tangent spaces of all nodes but the first.

    Returns ``(optimized_graph, LmReport)``.  A step is accepted only if it
    lowers the total cost; otherwise the damping is raised and the step
    recomputed.
    """
    cfg = cfg or LmConfig()
    graph.validate()
    prob = _Problem(graph)
    ids = prob.ids
    K = len(ids)
    state = stack([graph.nodes[k] for k in ids])
    r = prob.residuals(state)
    cost = float(np.sum(r * r))
    report = LmReport(cost, cost, 0, 0, False, "")
    mu = cfg.initial_damping
    nvar = 7 * (K - 1)

    if K == 1 or not graph.edges:
        report.converged, report.reason = True, "nothing to optimize"
    while not report.reason:
        if cost <= cfg.abs_cost_tol:
            report.converged, report.reason = True, "cost below absolute tolerance"
            break
        if report.iterations >= cfg.max_iterations:
            report.reason = "max_iterations"
            break
        t0 = time.perf_counter()
        report.iterations += 1
        if cfg.jacobian_mode == "numeric":
            Ja, Jb = prob.numeric_jacobians(state, cfg.fd_step)
        else:
            Ja, Jb = prob.analytic_jacobians(state, r)
        J = np.zeros((len(prob.src), 7, K, 7))
        rows = np.arange(len(prob.src))
        J[rows, :, prob.src, :] += Ja
        J[rows, :, prob.dst, :] += Jb
        J = J.reshape(7 * len(rows), 7 * K)[:, 7:]
        H = J.T @ J
        g = J.T @ r.reshape(-1)

        accepted = False
        while True:
            try:
                factor = cho_factor(H + mu * np.eye(nvar))
            except LinAlgError:
                mu *= cfg.damping_up
                if mu > cfg.max_damping:
                    raise GraphError(f"normal equations could not be factored (damping {mu:.3g})")
                continue
            delta = -cho_solve(factor, g).reshape(K - 1, 7)
            inc = exp_batch(delta)
            new_state = [a.copy() for a in state]
            upd = compose_batch(state[0][1:], state[1][1:], state[2][1:], *inc)
            new_state[0][1:], new_state[1][1:], new_state[2][1:] = upd
            new_r = prob.residuals(new_state)
            new_cost = float(np.sum(new_r * new_r))
            step = float(np.linalg.norm(delta))
            if new_cost < cost:
                accepted = True
                break
            mu *= cfg.damping_up
            if mu > cfg.max_damping or step < cfg.step_tol:
                break
        elapsed = time.perf_counter() - t0
        entry = {"iteration": report.iterations, "damping": mu, "accepted": accepted, "time": elapsed}
        if not accepted:
            entry["cost"] = cost
            report.history.append(entry)
            report.converged, report.reason = True, "no cost decrease"
            break
        rel = (cost - new_cost) / cost
        state, r, cost = tuple(new_state), new_r, new_cost
        report.accepted_steps += 1
        entry["cost"] = cost
        entry["step"] = step
        report.history.append(entry)
        logger.debug("LM iter %d cost %.6e damping %.2e", report.iterations, cost, mu)
        mu = max(mu / cfg.damping_down, 1e-15)
        if rel < cfg.cost_tol:
            report.converged, report.reason = True, "relative cost decrease below cost_tol"
        elif step < cfg.step_tol:
            report.converged, report.reason = True, "step below step_tol"

    report.final_cost = cost
    out = PoseGraph(dict(zip(ids, unstack(*state))), list(graph.edges))
    return out, report


def apply_correction(graph, world_transforms=None):
    """Chunk-to-world transforms taken from the graph's node states, in id order."""
    if world_transforms is not None and len(world_transforms) != len(graph.nodes):
        raise ValueError("world transform count does not match graph nodes")
    return [graph.nodes[k] for k in graph.ids]


def _sim3_fields(S):
    t = S.translation
    q = S.quaternion()
    return [t[0], t[1], t[2], q[0], q[1], q[2], q[3], S.scale]


def _parse_sim3(vals):
    t = np.array(vals[0:3])
    q = np.array(vals[3:7])
    return Sim3.from_quaternion(t, q, vals[7])


def dumps_graph(graph):
    lines = []
    for k in graph.ids:
        lines.append("VERTEX_SIM3 %d %s" % (k, " ".join(repr(float(v)) for v in _sim3_fields(graph.nodes[k]))))
    for e in graph.edges:
        vals = " ".join(repr(float(v)) for v in _sim3_fields(e.measurement))
        lines.append(f"EDGE_SIM3 {e.source} {e.target} {vals} {e.kind}")
    return "\n".join(lines) + "\n"


def loads_graph(text, name="<string>"):
    g = PoseGraph()
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "VERTEX_SIM3" and len(parts) == 10:
                g.nodes[int(parts[1])] = _parse_sim3([float(v) for v in parts[2:10]])
            elif parts[0] == "EDGE_SIM3" and len(parts) == 12:
                g.add_edge(int(parts[1]), int(parts[2]), _parse_sim3([float(v) for v in parts[3:11]]), parts[11])
            else:
                raise FormatError(f"unrecognised record {parts[0]!r} with {len(parts)} fields")
        except (ValueError, FormatError) as exc:
            raise FormatError(f"{name}:{lineno}: {exc}") from exc
    return g


def save_graph(graph, path):
    with open(path, "w") as f:
        f.write(dumps_graph(graph))


def load_graph(path):
    with open(path) as f:
        return loads_graph(f.read(), str(path))


class PoseGraphOptimizer(BaseEstimator):
    """Estimator wrapper: ``fit(graph)`` runs LM and stores ``graph_`` and ``report_``.

    Parameters mirror :class:`LmConfig`.
    """

    def __init__(self, max_iterations=50, initial_damping=1e-8, damping_up=10.0, damping_down=2.0,
                 cost_tol=1e-10, step_tol=1e-10, jacobian_mode="numeric"):
        self.max_iterations = max_iterations
        self.initial_damping = initial_damping
        self.damping_up = damping_up
        self.damping_down = damping_down
        self.cost_tol = cost_tol
        self.step_tol = step_tol
        self.jacobian_mode = jacobian_mode

    def fit(self, graph, y=None):
        cfg = LmConfig(self.max_iterations, self.initial_damping, self.damping_up, self.damping_down,
                       self.cost_tol, self.step_tol, self.jacobian_mode)
        self.graph_, self.report_ = optimize(graph, cfg)
        self.n_iter_ = self.report_.accepted_steps
        return self

    def transform(self, graph=None):
        """Optimized chunk-to-world transforms in node-id order."""
        check_is_fitted(self, "graph_")
        return apply_correction(self.graph_)
