"""End-to-end backend: sequential alignment, loop closure, global optimization, export."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .align import IrlsConfig
from .chunks import (
    ChunkSpec, ChunkStore, accumulate_world, align_pair, align_sequence, export_fused, plan_chunks,
)
from .exceptions import FormatError, GraphError, PipelineError, Sim3ReconError
from .formats import parse_bool, read_keyvalue, write_tum
from .graph import LmConfig, PoseGraph, apply_correction, optimize, save_graph
from .loops import (
    LoopConfig, assign_chunks, compose_loop_constraint, detect_loops, loop_chunk_frames,
    normalize_descriptors, read_descriptors, read_loop_pairs,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SEQUENTIAL = 3
EXIT_LOOP = 4
EXIT_OPTIMIZATION = 5
EXIT_EXPORT = 6

STAGE_EXIT_CODES = {
    "input": EXIT_INPUT,
    "sequential alignment": EXIT_SEQUENTIAL,
    "accumulate": EXIT_SEQUENTIAL,
    "loop closure": EXIT_LOOP,
    "optimization": EXIT_OPTIMIZATION,
    "export": EXIT_EXPORT,
}

TRAJECTORY_FILE = "trajectory.txt"
POINTS_FILE = "points.ply"
REPORT_FILE = "report.json"
SUMMARY_FILE = "summary.txt"
GRAPH_INITIAL_FILE = "graph_initial.g2o"
GRAPH_OPTIMIZED_FILE = "graph_optimized.g2o"


@dataclass
class PipelineConfig:
    """Flat pipeline configuration; every key can appear in a ``key = value`` file.

    ``chunk_size``/``overlap`` of 0 mean "infer from the chunk files" and
    ``half_width`` 0 means ``chunk_size // 4``.
    """

    chunk_dir: str = ""
    output_dir: str = "out"
    descriptor_file: str = ""
    loop_pairs_file: str = ""
    scenario_file: str = ""
    chunk_size: int = 0
    overlap: int = 0
    stride: int = 4
    median_factor: float = 0.1
    confidence_combine: str = "geometric"
    irls_max_iterations: int = 10
    huber_factor: float = 1.345
    huber_delta: float = 0.0
    irls_tol: float = 1e-8
    similarity_threshold: float = 0.85
    min_separation: int = 100
    nms_window: int = 25
    max_candidates: int = 32
    half_width: int = 0
    residual_gate: bool = True
    gate_factor: float = 3.0
    lm_max_iterations: int = 50
    lm_initial_damping: float = 1e-8
    lm_damping_up: float = 10.0
    lm_damping_down: float = 2.0
    lm_cost_tol: float = 1e-10
    lm_step_tol: float = 1e-10
    jacobian_mode: str = "numeric"
    loop_closure: bool = True
    irls: bool = True
    confidence_weighting: bool = True
    keep_factor: float = 0.75
    write_points: bool = True
    max_resident: int = 0

    def irls_config(self):
        return IrlsConfig(
            max_iterations=self.irls_max_iterations if self.irls else 1,
            huber_delta=self.huber_delta if self.huber_delta > 0 else None,
            huber_factor=self.huber_factor,
            convergence_tol=self.irls_tol,
        )

    def loop_config(self):
        return LoopConfig(self.similarity_threshold, self.min_separation, self.nms_window, self.max_candidates)

    def lm_config(self):
        return LmConfig(
            max_iterations=self.lm_max_iterations, initial_damping=self.lm_initial_damping,
            damping_up=self.lm_damping_up, damping_down=self.lm_damping_down,
            cost_tol=self.lm_cost_tol, step_tol=self.lm_step_tol, jacobian_mode=self.jacobian_mode,
        )

    def to_dict(self):
        return asdict(self)

    def update(self, mapping):
        """Return a copy with string or typed values from ``mapping`` applied."""
        known = {f.name for f in fields(self)}
        kw = self.to_dict()
        for key, value in mapping.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(PipelineConfig, key)
            if isinstance(default, bool):
                kw[key] = parse_bool(value)
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = str(value)
        return PipelineConfig(**kw)

    @classmethod
    def from_file(cls, path, overrides=None):
        cfg = cls().update(read_keyvalue(path))
        return cfg.update(overrides or {})


@dataclass
class PipelineResult:
    exit_code: int
    report: dict
    trajectory: object = None
    world_before: list = field(default_factory=list)
    world_after: list = field(default_factory=list)
    graph: object = None
    message: str = ""


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def _plan_from_store(store, cfg):
    try:
        headers = store.headers()
    except (OSError, FormatError) as exc:
        raise PipelineError("input", str(exc)) from exc
    ks = sorted(headers)
    if ks != list(range(1, len(ks) + 1)):
        raise PipelineError("input", f"chunk indices must be 1..K without gaps, found {ks}")
    plan = [(k, headers[k][0], headers[k][0] + headers[k][1]) for k in ks]
    n_frames = max(end for _, _, end in plan)
    L = cfg.chunk_size or plan[0][2] - plan[0][1]
    O = cfg.overlap or (plan[0][2] - plan[1][1] if len(plan) > 1 else max(L // 5, 1))
    try:
        spec = ChunkSpec(L, O, n_frames)
    except ValueError as exc:
        raise PipelineError("input", str(exc)) from exc
    expected = plan_chunks(spec)
    if expected != plan:
        raise PipelineError("input", f"chunk layout does not match L={L}, O={O}, N={n_frames}")
    return spec, plan


def _make_frontend(cfg, chunk_dir):
    from .synth import SCENARIO_FILE, SimScenario, SyntheticFrontend

    path = cfg.scenario_file or os.path.join(chunk_dir, SCENARIO_FILE)
    if not os.path.isfile(path):
        return None
    try:
        return SyntheticFrontend(SimScenario.load(path))
    except (ValueError, OSError) as exc:
        raise PipelineError("input", f"scenario file: {exc}", where=path) from exc


def _loop_pairs(cfg, chunk_dir, n_frames, warnings):
    if cfg.loop_pairs_file:
        try:
            pairs = read_loop_pairs(cfg.loop_pairs_file)
        except (OSError, FormatError) as exc:
            raise PipelineError("input", str(exc), where=cfg.loop_pairs_file) from exc
        return [p for p in pairs if 0 <= p.frame_i < n_frames and 0 <= p.frame_j < n_frames]
    path = cfg.descriptor_file or os.path.join(chunk_dir, "descriptors.vgld")
    if not os.path.isfile(path):
        warnings.append(f"no descriptor file at {path}; loop detection skipped")
        return []
    try:
        desc = read_descriptors(path)
    except (OSError, FormatError) as exc:
        raise PipelineError("input", str(exc), where=path) from exc
    if len(desc) != n_frames:
        raise PipelineError("input", f"{len(desc)} descriptors for {n_frames} frames", where=path)
    return detect_loops(normalize_descriptors(desc), cfg.loop_config())


def _loop_edges(cfg, store, frontend, pairs, plan, L, n_frames, seq_edges, report):
    """Loop measurements through loop-centric chunks; returns ``[(i, j, Z)]``."""
    align_kw = dict(stride=cfg.stride, median_factor=cfg.median_factor, combine=cfg.confidence_combine,
                    uniform_confidence=not cfg.confidence_weighting)
    half = cfg.half_width or max(L // 4, 1)
    seq_rel = [e.diagnostics["relative_residual"] for e in seq_edges]
    gate = cfg.gate_factor * float(np.median(seq_rel)) if seq_rel else np.inf
    entries = report["loops"]
    edges = []
    used = set()
    for p in assign_chunks(pairs, plan):
        entry = {"frame_i": p.frame_i, "frame_j": p.frame_j, "similarity": p.similarity,
                 "chunk_i": p.chunk_i, "chunk_j": p.chunk_j}
        entries.append(entry)
        if abs(p.chunk_i - p.chunk_j) <= 1:
            entry["status"] = "skipped: same or adjacent chunks"
            continue
        key = (min(p.chunk_i, p.chunk_j), max(p.chunk_i, p.chunk_j))
        if key in used:
            entry["status"] = "skipped: chunk pair already constrained"
            continue
        frames = loop_chunk_frames(p, half, n_frames)
        where = f"loop {p.frame_i}-{p.frame_j} (chunks {p.chunk_i}-{p.chunk_j})"
        try:
            loop_chunk = frontend.render(frames)
            ci = store.load(p.chunk_i)
            s_i, di = align_pair(ci, loop_chunk, cfg.irls_config(), **align_kw)
            store.release(p.chunk_i)
            cj = store.load(p.chunk_j)
            s_j, dj = align_pair(cj, loop_chunk, cfg.irls_config(), **align_kw)
            store.release(p.chunk_j)
        except (Sim3ReconError, ValueError) as exc:
            raise PipelineError("loop closure", str(exc), where=where) from exc
        entry["relative_residual_i"] = di["relative_residual"]
        entry["relative_residual_j"] = dj["relative_residual"]
        if cfg.residual_gate and max(di["relative_residual"], dj["relative_residual"]) > gate:
            entry["status"] = "rejected: residual gate"
            continue
        used.add(key)
        # S_j,loop o S_i,loop^-1 maps chunk i into chunk j; the graph edge i -> j stores its inverse
        Z = compose_loop_constraint(s_i, s_j).inverse()
        edges.append((p.chunk_i, p.chunk_j, Z))
        entry["status"] = "accepted"
    store.clear()
    return edges


def _summary(report):
    lines = [
        f"chunks: {report['chunks']}  frames: {report['frames']}",
        f"sequential edges: {len(report['sequential'])}",
        f"loop candidates: {len(report['loops'])}  accepted: "
        f"{sum(1 for e in report['loops'] if e.get('status') == 'accepted')}",
    ]
    lm = report.get("optimization")
    if lm:
        lines.append(f"LM: cost {lm['initial_cost']:.6e} -> {lm['final_cost']:.6e} in "
                     f"{lm['accepted_steps']} accepted steps ({lm['reason']})")
    for name, t in report["timings"].items():
        lines.append(f"time {name}: {t:.3f} s")
    lines.append(f"time total: {report['total_time']:.3f} s")
    for w in report["warnings"]:
        lines.append(f"warning: {w}")
    if report.get("error"):
        lines.append(f"error: {report['error']}")
    return "\n".join(lines) + "\n"


def run_pipeline(cfg, frontend=None, write_outputs=True):
    """Run every stage; never raises for stage failures, returns a :class:`PipelineResult`.

    ``frontend`` renders loop-centric chunks (an object with ``render(frame_ids)``).
    When omitted, a ``scenario.cfg`` next to the chunks creates a synthetic one;
    without any frontend loop closure is skipped with a warning.
    """
    stages = _Stages()
    report = {"config": cfg.to_dict(), "chunks": 0, "frames": 0, "sequential": [], "loops": [],
              "optimization": None, "warnings": [], "timings": stages.timings, "error": None}
    result = PipelineResult(EXIT_OK, report)
    t_start = time.perf_counter()
    try:
        _run(cfg, frontend, write_outputs, stages, report, result)
    except PipelineError as exc:
        result.exit_code = STAGE_EXIT_CODES.get(exc.stage, EXIT_INPUT)
        result.message = str(exc)
        report["error"] = str(exc)
        logger.error("%s", exc)
    report["total_time"] = float(sum(stages.timings.values()))
    report["wall_time"] = time.perf_counter() - t_start
    report["exit_code"] = result.exit_code
    if write_outputs and cfg.output_dir and os.path.isdir(cfg.output_dir):
        with open(os.path.join(cfg.output_dir, REPORT_FILE), "w") as f:
            json.dump(report, f, indent=2, default=float)
        with open(os.path.join(cfg.output_dir, SUMMARY_FILE), "w") as f:
            f.write(_summary(report))
    return result


def _run(cfg, frontend, write_outputs, stages, report, result):
    if not cfg.chunk_dir or not os.path.isdir(cfg.chunk_dir):
        raise PipelineError("input", f"chunk directory {cfg.chunk_dir!r} does not exist")
    try:
        store = ChunkStore(cfg.chunk_dir, cfg.max_resident or None)
    except ValueError as exc:
        raise PipelineError("input", str(exc)) from exc
    if len(store) == 0:
        raise PipelineError("input", "no chunks found", where=cfg.chunk_dir)
    if write_outputs:
        try:
            os.makedirs(cfg.output_dir, exist_ok=True)
        except OSError as exc:
            raise PipelineError("export", str(exc), where=cfg.output_dir) from exc

    spec, plan = stages.run("plan", _plan_from_store, store, cfg)
    report["chunks"], report["frames"] = len(plan), spec.total_frames

    seq = stages.run("sequential alignment", align_sequence, store, cfg.irls_config(), cfg.stride,
                     cfg.median_factor, cfg.confidence_combine, not cfg.confidence_weighting)
    report["sequential"] = [{"k": e.k, **e.diagnostics} for e in seq]
    world = stages.run("accumulate", accumulate_world, seq, plan[0][0])
    result.world_before = world

    loop_edges = []
    if cfg.loop_closure and len(plan) > 2:
        frontend = frontend or _make_frontend(cfg, cfg.chunk_dir)
        if frontend is None:
            report["warnings"].append("no frontend available for loop-centric chunks; loop closure skipped")
        else:
            pairs = stages.run("loop detection", _loop_pairs, cfg, cfg.chunk_dir, spec.total_frames,
                               report["warnings"])
            loop_edges = stages.run("loop closure", _loop_edges, cfg, store, frontend, pairs, plan,
                                    spec.chunk_size, spec.total_frames, seq, report)

    graph = PoseGraph.from_chain(world, [e.transform for e in seq], first=plan[0][0])
    for i, j, Z in loop_edges:
        graph.add_edge(i, j, Z, "loop")
    if write_outputs:
        try:
            save_graph(graph, os.path.join(cfg.output_dir, GRAPH_INITIAL_FILE))
        except OSError as exc:
            raise PipelineError("export", str(exc), where=GRAPH_INITIAL_FILE) from exc

    if loop_edges:
        try:
            graph, lm = stages.run("optimization", optimize, graph, cfg.lm_config())
        except (GraphError, Sim3ReconError, ValueError) as exc:
            raise PipelineError("optimization", str(exc)) from exc
        report["optimization"] = {
            "initial_cost": lm.initial_cost, "final_cost": lm.final_cost,
            "accepted_steps": lm.accepted_steps, "iterations": lm.iterations,
            "converged": lm.converged, "reason": lm.reason, "history": lm.history,
        }
    corrected = apply_correction(graph, world)
    result.world_after = corrected
    result.graph = graph

    ply = os.path.join(cfg.output_dir, POINTS_FILE) if write_outputs and cfg.write_points else None
    try:
        traj = stages.run("export", export_fused, store, corrected, cfg.keep_factor, ply)
        if write_outputs:
            write_tum(traj, os.path.join(cfg.output_dir, TRAJECTORY_FILE))
            save_graph(graph, os.path.join(cfg.output_dir, GRAPH_OPTIMIZED_FILE))
    except OSError as exc:
        raise PipelineError("export", str(exc), where=cfg.output_dir) from exc
    result.trajectory = traj
