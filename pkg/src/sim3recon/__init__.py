"""Chunked Sim(3) reconstruction backend: robust chunk alignment, loop closure and pose-graph optimization."""

from .align import (
    AlignResult, CorrespondenceSet, IrlsConfig, RobustSim3Aligner, confidence_gate, irls_align,
    weighted_umeyama,
)
from .chunks import (
    ChunkPointMap, ChunkSpec, ChunkStore, accumulate_world, align_pair, align_sequence, export_fused,
    plan_chunks,
)
from .exceptions import (
    DegenerateConfigurationError, FormatError, GraphError, InsufficientCorrespondencesError,
    LogSingularityError, NotAdjacentError, PipelineError, Sim3ReconError,
)
from .formats import Trajectory, read_ply, read_trajectory, write_pointcloud_stream, write_tum
from .graph import (
    LmConfig, PoseGraph, PoseGraphOptimizer, apply_correction, edge_residual, load_graph, optimize,
    save_graph, total_cost,
)
from .loops import LoopConfig, LoopDetector, LoopPair, compose_loop_constraint, detect_loops, loop_chunk_frames
from .metrics import ate_rmse, cloud_metrics
from .pipeline import PipelineConfig, run_pipeline
from .sim3 import Sim3
from .synth import SimScenario, SyntheticFrontend, generate, oracle_edges

__version__ = "0.1.0"

__all__ = [
    "AlignResult",
    "ChunkPointMap",
    "ChunkSpec",
    "ChunkStore",
    "CorrespondenceSet",
    "DegenerateConfigurationError",
    "FormatError",
    "GraphError",
    "InsufficientCorrespondencesError",
    "IrlsConfig",
    "LmConfig",
    "LogSingularityError",
    "LoopConfig",
    "LoopDetector",
    "LoopPair",
    "NotAdjacentError",
    "PipelineConfig",
    "PipelineError",
    "PoseGraph",
    "PoseGraphOptimizer",
    "RobustSim3Aligner",
    "Sim3",
    "Sim3ReconError",
    "SimScenario",
    "SyntheticFrontend",
    "Trajectory",
    "accumulate_world",
    "align_pair",
    "align_sequence",
    "apply_correction",
    "ate_rmse",
    "cloud_metrics",
    "compose_loop_constraint",
    "confidence_gate",
    "detect_loops",
    "edge_residual",
    "export_fused",
    "generate",
    "irls_align",
    "load_graph",
    "loop_chunk_frames",
    "optimize",
    "oracle_edges",
    "plan_chunks",
    "read_ply",
    "read_trajectory",
    "run_pipeline",
    "save_graph",
    "total_cost",
    "weighted_umeyama",
    "write_pointcloud_stream",
    "write_tum",
]
