"""Command-line interface: ``sim3recon {run, simulate, eval, graph}``.

Exit codes: 0 success, 2 bad input or configuration (also argument errors),
3 sequential alignment failed, 4 loop closure failed, 5 global optimization
failed, 6 export or output I/O failed.  ``SIM3RECON_MAX_RESIDENT`` overrides
how many chunks may be held in memory at once.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile

from .chunks import RESIDENCY_ENV
from .exceptions import FormatError, GraphError, Sim3ReconError
from .formats import read_keyvalue, read_ply, read_trajectory
from .graph import LmConfig, load_graph, optimize, save_graph, total_cost
from .metrics import ALIGNMENTS, align_trajectory, ate_rmse, cloud_metrics
from .pipeline import (
    EXIT_EXPORT, EXIT_INPUT, EXIT_OK, EXIT_OPTIMIZATION, GRAPH_INITIAL_FILE, PipelineConfig, run_pipeline,
)
from .synth import SimScenario, generate

logger = logging.getLogger("sim3recon")


def _parse_sets(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _pipeline_config(args):
    mapping = read_keyvalue(args.config) if args.config else {}
    for flag, key in (("chunks", "chunk_dir"), ("out", "output_dir"), ("descriptors", "descriptor_file"),
                      ("loops", "loop_pairs_file"), ("scenario", "scenario_file")):
        value = getattr(args, flag, None)
        if value is not None:
            mapping[key] = value
    for flag, key in (("no_loop_closure", "loop_closure"), ("no_irls", "irls"),
                      ("no_confidence_weighting", "confidence_weighting")):
        if getattr(args, flag, False):
            mapping[key] = "false"
    mapping.update(_parse_sets(args.set))
    return PipelineConfig().update(mapping)


def _add_pipeline_args(p):
    p.add_argument("--config", help="key = value pipeline configuration file")
    p.add_argument("--chunks", help="directory with chunk_XXXXX.vglc files")
    p.add_argument("--descriptors", help="descriptor file (default: <chunks>/descriptors.vgld)")
    p.add_argument("--loops", help="loop override file with 'i j' frame pairs")
    p.add_argument("--scenario", help="simulator scenario used to render loop-centric chunks")
    p.add_argument("--no-loop-closure", action="store_true")
    p.add_argument("--no-irls", action="store_true", help="single confidence-weighted Umeyama solve")
    p.add_argument("--no-confidence-weighting", action="store_true", help="treat every confidence as 1")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any configuration key")


def cmd_run(args):
    cfg = _pipeline_config(args)
    result = run_pipeline(cfg)
    if result.exit_code == EXIT_OK:
        print(f"wrote results to {cfg.output_dir}")
    else:
        print(f"error: {result.message}", file=sys.stderr)
    return result.exit_code


def cmd_simulate(args):
    mapping = read_keyvalue(args.config) if args.config else {}
    for flag, key in (("seed", "seed"), ("kind", "trajectory_kind"), ("frames", "n_frames")):
        value = getattr(args, flag)
        if value is not None:
            mapping[key] = value
    mapping.update(_parse_sets(args.set))
    scenario = SimScenario.from_dict(mapping)
    try:
        out = generate(scenario, args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXPORT
    print(f"wrote {len(out.chunks)} chunks, {len(out.descriptors)} descriptors to {args.out}; "
          f"planted loop pairs: {len(out.ground_truth.planted_loops)}")
    return EXIT_OK


def cmd_eval(args):
    result = {}
    coarse = None
    if args.est or args.ref:
        if not (args.est and args.ref):
            raise ValueError("--est and --ref must be given together")
        est = read_trajectory(args.est, args.format)
        ref = read_trajectory(args.ref, args.format)
        if args.match_timestamps:
            common = sorted(set(est.timestamps) & set(ref.timestamps))
            ie = [list(est.timestamps).index(t) for t in common]
            ir = [list(ref.timestamps).index(t) for t in common]
            est_pos, ref_pos = est.positions[ie], ref.positions[ir]
        else:
            est_pos, ref_pos = est.positions, ref.positions
        result["ate_rmse"] = ate_rmse(est_pos, ref_pos, args.alignment)
        result["alignment"] = args.alignment
        result["poses"] = len(est_pos)
        # camera centres give the coarse Sim3 placement of the predicted cloud before ICP
        coarse = align_trajectory(est_pos, ref_pos, "sim3")
    if args.est_cloud or args.ref_cloud:
        if not (args.est_cloud and args.ref_cloud):
            raise ValueError("--est-cloud and --ref-cloud must be given together")
        pred = read_ply(args.est_cloud)[0].astype(float)
        if coarse is not None:
            pred = coarse.act(pred)
        m = cloud_metrics(pred, read_ply(args.ref_cloud)[0], args.icp_iterations)
        result.update(accuracy=m.accuracy, completeness=m.completeness, chamfer=m.chamfer,
                      icp_iterations=m.icp_iterations)
    if not result:
        raise ValueError("nothing to evaluate: give --est/--ref and/or --est-cloud/--ref-cloud")
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_graph_dump(args):
    """Build the un-optimized pose graph from chunks and write it as text."""
    cfg = _pipeline_config(args).update({"lm_max_iterations": "0", "write_points": "false"})
    with tempfile.TemporaryDirectory() as work:
        result = run_pipeline(cfg.update({"output_dir": work}))
        if result.exit_code != EXIT_OK:
            print(f"error: {result.message}", file=sys.stderr)
            return result.exit_code
        shutil.copyfile(os.path.join(work, GRAPH_INITIAL_FILE), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_graph_load(args):
    try:
        graph = load_graph(args.file)
        graph.validate()
    except (OSError, FormatError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    info = {"nodes": len(graph.nodes), "edges": len(graph.edges),
            "loop_edges": sum(e.kind == "loop" for e in graph.edges), "cost": total_cost(graph)}
    if args.optimize:
        lm = LmConfig(**_lm_overrides(args.set))
        try:
            graph, rep = optimize(graph, lm)
        except (Sim3ReconError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_OPTIMIZATION
        info.update(final_cost=rep.final_cost, accepted_steps=rep.accepted_steps, reason=rep.reason,
                    mean_iteration_ms=1000.0 * rep.mean_iteration_time)
        if args.out:
            try:
                save_graph(graph, args.out)
            except OSError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_EXPORT
    print(json.dumps(info, indent=2))
    return EXIT_OK


def _lm_overrides(items):
    kw = {}
    for key, value in _parse_sets(items).items():
        default = getattr(LmConfig, key, None)
        if default is None:
            raise ValueError(f"unknown LM option {key!r}")
        kw[key] = type(default)(value)
    return kw


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sim3recon",
        description="Chunked Sim(3) reconstruction backend.",
        epilog=f"Exit codes: 0 ok, 2 input/config, 3 sequential alignment, 4 loop closure, "
               f"5 optimization, 6 export. {RESIDENCY_ENV} sets the chunk cache size.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline on a chunk directory")
    _add_pipeline_args(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="generate a synthetic chunk sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value scenario file")
    p.add_argument("--seed", type=int)
    p.add_argument("--kind", choices=["straight", "circuit_with_loop", "figure_eight"])
    p.add_argument("--frames", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="trajectory and point-cloud metrics")
    p.add_argument("--est", help="estimated trajectory (TUM or KITTI)")
    p.add_argument("--ref", help="reference trajectory (TUM or KITTI)")
    p.add_argument("--format", default="auto", choices=["auto", "tum", "kitti"])
    p.add_argument("--alignment", default="sim3", choices=list(ALIGNMENTS))
    p.add_argument("--match-timestamps", action="store_true", help="pair poses by timestamp")
    p.add_argument("--est-cloud", help="predicted PLY (pre-aligned by the trajectories when both are given)")
    p.add_argument("--ref-cloud", help="reference PLY")
    p.add_argument("--icp-iterations", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("graph", help="pose-graph text files")
    gsub = p.add_subparsers(dest="graph_command", required=True)
    d = gsub.add_parser("dump", help="write the un-optimized pose graph of a chunk directory")
    _add_pipeline_args(d)
    d.add_argument("--out", required=True, help="output graph file")
    d.set_defaults(func=cmd_graph_dump)
    ld = gsub.add_parser("load", help="validate (and optionally optimize) a graph file")
    ld.add_argument("file")
    ld.add_argument("--optimize", action="store_true")
    ld.add_argument("--out", help="where to write the optimized graph")
    ld.add_argument("--set", action="append", metavar="KEY=VALUE", help="LM options")
    ld.set_defaults(func=cmd_graph_load)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
