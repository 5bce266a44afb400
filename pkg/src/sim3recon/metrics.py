"""Trajectory and point-cloud evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points
from .align import weighted_umeyama
from .exceptions import DegenerateConfigurationError, InsufficientCorrespondencesError
from .formats import Trajectory
from .sim3 import Sim3

ALIGNMENTS = ("sim3", "se3", "none")


def _positions(traj):
    if isinstance(traj, Trajectory):
        return traj.positions
    return check_points(traj, "trajectory")


def align_trajectory(estimated, reference, alignment="sim3"):
    """Sim3 (or SE3) that best maps estimated positions onto the reference ones."""
    if alignment not in ALIGNMENTS:
        raise ValueError(f"alignment must be one of {ALIGNMENTS}")
    est, ref = _positions(estimated), _positions(reference)
    if len(est) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    if alignment == "none":
        return Sim3.identity()
    return weighted_umeyama(est, ref, with_scale=alignment == "sim3")


def ate_rmse(estimated, reference, alignment="sim3"):
    """Absolute trajectory error: RMSE of camera positions after optional alignment.

    Both inputs are :class:`Trajectory` objects or ``(n, 3)`` position arrays,
    matched frame by frame.
    """
    est, ref = _positions(estimated), _positions(reference)
    if len(est) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    if len(est) < 2:
        raise ValueError("need at least two poses")
    if np.array_equal(est, ref):
        return 0.0
    S = align_trajectory(est, ref, alignment)
    err = np.linalg.norm(S.act(est) - ref, axis=1)
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class CloudMetrics:
    accuracy: float
    completeness: float
    chamfer: float
    transform: Sim3
    icp_iterations: int
    icp_costs: list


def icp(predicted, reference, iterations=20, tol=1e-9, tree=None):
    """Point-to-point rigid ICP moving ``predicted`` onto ``reference``.

    Returns ``(transform, iterations_run, costs)`` where ``costs[i]`` is the
    mean squared nearest-neighbour distance before iteration ``i`` and the last
    entry is the final one.
    """
    P = check_points(predicted, "predicted")
    Q = check_points(reference, "reference")
    tree = tree or cKDTree(Q)
    S = Sim3.identity()
    costs = []
    run = 0
    for _ in range(iterations):
        moved = S.act(P)
        dist, idx = tree.query(moved)
        costs.append(float(np.mean(dist * dist)))
        if costs[-1] == 0.0:
            break
        try:
            step = weighted_umeyama(moved, Q[idx], with_scale=False)
        except (DegenerateConfigurationError, InsufficientCorrespondencesError):
            break
        S_new = step @ S
        run += 1
        motion = np.linalg.norm(step.log())
        S = S_new
        if motion < tol:
            break
    dist, _ = tree.query(S.act(P))
    costs.append(float(np.mean(dist * dist)))
    return S, run, costs


def cloud_metrics(predicted, reference, icp_iterations=20):
    """Accuracy (pred -> ref), completeness (ref -> pred) and their mean, after rigid ICP."""
    P = check_points(predicted, "predicted")
    Q = check_points(reference, "reference")
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("point sets must be non-empty")
    tree_q = cKDTree(Q)
    if icp_iterations > 0:
        S, run, costs = icp(P, Q, icp_iterations, tree=tree_q)
    else:
        S, run, costs = Sim3.identity(), 0, []
    moved = S.act(P)
    acc = float(np.mean(tree_q.query(moved)[0]))
    comp = float(np.mean(cKDTree(moved).query(Q)[0]))
    return CloudMetrics(acc, comp, 0.5 * (acc + comp), S, run, costs)
