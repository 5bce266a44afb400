"""Synthetic stand-in for the neural frontend.

Cameras drive along a parametric trajectory through a corridor-like scene
(ground plane, two facades, a distant backdrop).  Every chunk is rendered in
its own Sim(3) frame: the true chunk-to-world transform ``T_k`` is a random
walk of per-chunk drift increments.  On top of that gauge each chunk carries a
small within-chunk warp, pivoted on its middle camera and growing linearly
across the chunk, so that overlapping chunks disagree slightly.  Chaining
overlap alignments then accumulates genuine drift that only loop closure can
remove.  Loop-centric chunks are rendered without the warp.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial.transform import Rotation

from .align import CorrespondenceSet
from .chunks import ChunkPointMap, ChunkSpec, ChunkStore, plan_chunks
from .formats import Trajectory, parse_bool, read_keyvalue, write_keyvalue, write_tum
from .loops import LoopPair, assign_chunks, compose_loop_constraint, write_descriptors
from .sim3 import Sim3, compose_batch, exp_batch

TRAJECTORY_KINDS = ("straight", "circuit_with_loop", "figure_eight")
CHUNK_FRAMES = ("first_camera", "world")
CAMERA_HEIGHT = 1.6
DESCRIPTOR_DIM = 16

SCENARIO_FILE = "scenario.cfg"
DESCRIPTOR_FILE = "descriptors.vgld"
GROUNDTRUTH_FILE = "groundtruth.txt"


@dataclass
class SimScenario:
    """Everything needed to regenerate a synthetic sequence bit for bit.

    Drift magnitudes are per chunk: ``drift_rotation_deg`` (degrees),
    ``drift_scale_pct`` (percent) and ``drift_translation`` (metres).  They
    set both the gauge random walk and the within-chunk warp.  Outliers come
    in two kinds: ``outlier_fraction`` of the pixels carry
    ``outlier_confidence`` and ``confident_outlier_fraction`` keep the inlier
    confidence.  With
    ``chunk_frame = first_camera`` a chunk's coordinates are anchored on its
    first camera (as a feed-forward reconstruction model would output them);
    with ``world`` they coincide with the world frame up to drift.  Noise and
    ``wall_distance`` are in metres; ``image_height * image_width`` pixels per
    frame is the scene point density.
    """

    seed: int = 0
    trajectory_kind: str = "circuit_with_loop"
    n_frames: int = 1500
    chunk_size: int = 75
    overlap: int = 15
    image_height: int = 24
    image_width: int = 32
    step_length: float = 0.375
    frames_per_lap: int = 1340
    radius: float = 80.0
    wall_distance: float = 6.0
    wall_height: float = 8.0
    backdrop_distance: float = 60.0
    drift_rotation_deg: float = 0.3
    drift_scale_pct: float = 0.5
    drift_translation: float = 0.05
    noise_sigma: float = 0.02
    outlier_fraction: float = 0.15
    outlier_confidence: float = 0.05
    confident_outlier_fraction: float = 0.03
    inlier_confidence: float = 1.0
    descriptor_noise: float = 0.01
    with_poses: bool = True
    chunk_frame: str = "first_camera"

    def __post_init__(self):
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ValueError(f"trajectory_kind must be one of {TRAJECTORY_KINDS}")
        if self.chunk_frame not in CHUNK_FRAMES:
            raise ValueError(f"chunk_frame must be one of {CHUNK_FRAMES}")
        if not (0.0 <= self.outlier_fraction and 0.0 <= self.confident_outlier_fraction
                and self.outlier_fraction + self.confident_outlier_fraction <= 1.0):
            raise ValueError("outlier fractions must be >= 0 and sum to at most 1")
        for name in ("noise_sigma", "drift_rotation_deg", "drift_scale_pct", "drift_translation",
                     "descriptor_noise", "outlier_confidence", "inlier_confidence"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_frames", "image_height", "image_width", "frames_per_lap"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        ChunkSpec(self.chunk_size, self.overlap, self.n_frames)

    @property
    def chunk_spec(self):
        return ChunkSpec(self.chunk_size, self.overlap, self.n_frames)

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        write_keyvalue(self.to_dict(), path)

    @classmethod
    def from_dict(cls, mapping):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in mapping.items():
            if key not in kinds:
                raise ValueError(f"unknown scenario key {key!r}")
            default = getattr(cls, key)
            if isinstance(default, bool):
                kw[key] = parse_bool(value)
            elif isinstance(default, int):
                kw[key] = int(value)
            elif isinstance(default, float):
                kw[key] = float(value)
            else:
                kw[key] = str(value)
        return cls(**kw)

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_keyvalue(path))


def _rng(scenario, *key):
    return np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=key))


def _path(scenario, f):
    """Planar positions ``(n, 2)`` (world x, z) along the trajectory at frame parameters ``f``."""
    f = np.asarray(f, dtype=float)
    kind = scenario.trajectory_kind
    if kind == "straight":
        s = f * scenario.step_length
        return np.stack([3.0 * np.sin(s / 40.0), s], axis=-1)
    phase = 2.0 * np.pi * f / scenario.frames_per_lap
    if kind == "circuit_with_loop":
        # the speed follows the lap length so that a lap closes exactly
        R = scenario.radius
        return np.stack([R * (1.0 - np.cos(phase)), R * np.sin(phase)], axis=-1)
    R = scenario.radius
    return np.stack([R * np.sin(phase), R * np.sin(phase) * np.cos(phase)], axis=-1)


def camera_poses(scenario, frames=None):
    """World camera-to-world rotations ``(n, 3, 3)`` and centres ``(n, 3)``.

    Camera axes: x right, y down, z forward; world y points up.
    """
    f = np.arange(scenario.n_frames) if frames is None else np.asarray(frames)
    xz = _path(scenario, f)
    d = _path(scenario, f + 0.5) - _path(scenario, f - 0.5)
    heading = np.arctan2(d[:, 0], d[:, 1])
    fwd = np.stack([np.sin(heading), np.zeros_like(heading), np.cos(heading)], axis=1)
    down = np.tile([0.0, -1.0, 0.0], (len(f), 1))
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd], axis=2)
    c = np.stack([xz[:, 0], np.full(len(f), CAMERA_HEIGHT), xz[:, 1]], axis=1)
    return R, c


def headings(scenario, frames=None):
    R, _ = camera_poses(scenario, frames)
    return np.arctan2(R[:, 0, 2], R[:, 2, 2])


def _rays(scenario):
    H, W = scenario.image_height, scenario.image_width
    focal = W / 2.0
    u = (np.arange(W) + 0.5 - W / 2.0) / focal
    v = (np.arange(H) + 0.5 - H / 2.0) / focal
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def _depths(scenario, frames):
    """Ray parameter ``t`` along the un-normalized pixel rays, shape ``(F, H, W)``."""
    rays = _rays(scenario)
    dx, dy, dz = rays[..., 0], rays[..., 1], rays[..., 2]
    frames = np.asarray(frames, dtype=float)
    # facades move in and out with the distance travelled, so frames differ
    wiggle = 1.0 + 0.15 * np.sin(frames * scenario.step_length / 7.0)
    wall = scenario.wall_distance * wiggle[:, None, None]
    with np.errstate(divide="ignore"):
        ground = np.where(dy > 0, CAMERA_HEIGHT / dy, np.inf)
        side = np.where(dx != 0, wall / np.abs(dx)[None], np.inf)
    on_wall = side * dy[None] >= -(scenario.wall_height - CAMERA_HEIGHT)
    side = np.where(on_wall, side, np.inf)
    t = np.minimum(ground[None], side)
    return np.minimum(t, scenario.backdrop_distance / dz)


def world_points(scenario, frames):
    """Noise-free world points ``(F, H, W, 3)`` seen by ``frames``."""
    frames = np.asarray(frames)
    R, c = camera_poses(scenario, frames)
    local = _rays(scenario)[None] * _depths(scenario, frames)[..., None]
    return np.einsum("fij,fhwj->fhwi", R, local) + c[:, None, None, :]


def _drift_tangent(scenario, rng, n):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    omega = axis * (rng.normal(size=(n, 1)) * np.deg2rad(scenario.drift_rotation_deg))
    ups = rng.normal(size=(n, 3)) * scenario.drift_translation / np.sqrt(3.0)
    lam = rng.normal(size=(n, 1)) * scenario.drift_scale_pct / 100.0
    return np.concatenate([ups, omega, lam], axis=1)


@dataclass
class SimGroundTruth:
    """Ground truth of one generated sequence.

    ``chunk_to_world[k-1]`` maps chunk ``k``'s frame into the world and
    ``warps[k-1]`` is the tangent of that chunk's within-chunk warp.
    """

    scenario: SimScenario
    plan: list
    trajectory: Trajectory
    chunk_to_world: list
    warps: np.ndarray
    planted_loops: list

    def scene_points(self, frames):
        return world_points(self.scenario, frames)

    def chunk_of(self, k):
        return self.plan[k - 1]


def _warp_batch(scenario, k_plan, xi, frames):
    """Per-frame warp Sim3 batch pivoted on the chunk's middle camera."""
    _, start, end = k_plan
    mid = 0.5 * (start + end - 1)
    tau = (np.asarray(frames, dtype=float) - mid) / scenario.chunk_size
    _, pivot = camera_poses(scenario, [int(round(mid))])
    s, R, t = exp_batch(tau[:, None] * xi[None])
    # P exp(tau xi) P^-1 with P a pure translation to the pivot
    t = t + pivot[0] - s[:, None] * np.einsum("nij,j->ni", R, pivot[0])
    return s, R, t


def _apply(s, R, t, pts):
    return s[:, None, None, None] * np.einsum("fij,fhwj->fhwi", R, pts) + t[:, None, None, :]


def _render(scenario, frames, to_local, warp, rng, chunk_index):
    """Render ``frames`` into a chunk frame given by Sim3 ``to_local`` (world -> chunk)."""
    frames = np.asarray(frames)
    X = world_points(scenario, frames)
    F, H, W = X.shape[:3]
    X = X + rng.normal(scale=scenario.noise_sigma, size=X.shape) if scenario.noise_sigma > 0 else X
    Rc, cc = camera_poses(scenario, frames)
    if warp is not None:
        ws, wR, wt = warp
        X = _apply(ws, wR, wt, X)
        cs, cR, ct = compose_batch(ws, wR, wt, np.ones(F), Rc, cc)
    else:
        cs, cR, ct = np.ones(F), Rc, cc
    conf = np.full((F, H, W), scenario.inlier_confidence)
    n_low = int(round(scenario.outlier_fraction * H * W))
    n_out = n_low + int(round(scenario.confident_outlier_fraction * H * W))
    if n_out > 0:
        lo = X.reshape(-1, 3).min(axis=0)
        hi = X.reshape(-1, 3).max(axis=0)
        for i in range(F):
            idx = rng.choice(H * W, size=n_out, replace=False)
            flat = X[i].reshape(-1, 3)
            flat[idx] = rng.uniform(lo, hi, size=(n_out, 3))
            # the first n_low are flagged by the frontend; the rest look like inliers
            conf[i].reshape(-1)[idx[:n_low]] = scenario.outlier_confidence
    ls, lR, lt = to_local.scale, to_local.rotation, to_local.translation
    local = ls * np.einsum("ij,fhwj->fhwi", lR, X) + lt
    poses = None
    if scenario.with_poses:
        ps, pR, pt = compose_batch(np.float64(ls), lR, lt, cs, cR, ct)
        q = Rotation.from_matrix(pR).as_quat()
        q[q[:, 3] < 0] *= -1
        poses = np.concatenate([pt, q], axis=1)
    return ChunkPointMap(chunk_index, int(frames[0]), local, conf, poses,
                         frame_ids=frames.astype(np.int64))


def planted_loops(scenario, max_distance=0.5, max_heading_deg=10.0, min_separation=100):
    """Frame pairs ``(i, j)`` revisiting the same place with the same heading."""
    _, c = camera_poses(scenario)
    hd = headings(scenario)
    out = []
    if scenario.trajectory_kind != "circuit_with_loop":
        return out
    lap = scenario.frames_per_lap
    for i in range(0, scenario.n_frames - lap):
        j = i + lap
        dh = abs((hd[i] - hd[j] + np.pi) % (2 * np.pi) - np.pi)
        if (j - i > min_separation and np.linalg.norm(c[i] - c[j]) < max_distance
                and np.rad2deg(dh) < max_heading_deg):
            out.append((i, j))
    return out


def descriptors(scenario):
    """Unit-norm 16-D place descriptors from random Fourier features of position and heading."""
    _, c = camera_poses(scenario)
    hd = headings(scenario)
    q = np.stack([c[:, 0] / 4.0, c[:, 2] / 4.0, 2.0 * np.cos(hd), 2.0 * np.sin(hd)], axis=1)
    freqs = _rng(scenario, 3).normal(size=(DESCRIPTOR_DIM // 2, 4))
    phase = q @ freqs.T
    d = np.concatenate([np.cos(phase), np.sin(phase)], axis=1)
    if scenario.descriptor_noise > 0:
        d = d + _rng(scenario, 4).normal(scale=scenario.descriptor_noise, size=d.shape)
    return (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)


class SyntheticFrontend:
    """Renders chunks for a scenario; used for sequence chunks and loop-centric chunks."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.plan = plan_chunks(scenario.chunk_spec)
        rng = _rng(scenario, 0)
        K = len(self.plan)
        steps = _drift_tangent(scenario, rng, K)
        steps[0] = 0.0
        self.warps = _drift_tangent(scenario, rng, K)
        incs = exp_batch(steps)
        drift = [Sim3.identity()]
        for k in range(1, K):
            drift.append(drift[-1] @ Sim3._trusted(incs[0][k], incs[1][k], incs[2][k]))
        self.chunk_to_world = [self._anchor(start) @ D for (_, start, _), D in zip(self.plan, drift)]

    def _anchor(self, frame):
        if self.scenario.chunk_frame == "world":
            return Sim3.identity()
        R, c = camera_poses(self.scenario, [frame])
        return Sim3(1.0, R[0], c[0])

    def chunk(self, k):
        """Sequence chunk ``k`` (1-based)."""
        plan = self.plan[k - 1]
        frames = np.arange(plan[1], plan[2])
        warp = _warp_batch(self.scenario, plan, self.warps[k - 1], frames)
        to_local = self.chunk_to_world[k - 1].inverse()
        return _render(self.scenario, frames, to_local, warp, _rng(self.scenario, 1, k), k)

    def loop_gauge(self, frame_ids):
        frame_ids = np.asarray(frame_ids, dtype=np.int64)
        rng = _rng(self.scenario, 2, int(frame_ids[0]), int(frame_ids[-1]), len(frame_ids))
        return self._anchor(int(frame_ids[0])) @ Sim3.exp(_drift_tangent(self.scenario, rng, 1)[0] * 10.0)

    def render(self, frame_ids, chunk_index=0):
        """Loop-centric chunk over arbitrary ``frame_ids``: own random frame, no warp."""
        frame_ids = np.asarray(frame_ids, dtype=np.int64)
        if len(frame_ids) == 0:
            raise ValueError("no frames to render")
        gauge = self.loop_gauge(frame_ids)
        rng = _rng(self.scenario, 5, int(frame_ids[0]), int(frame_ids[-1]), len(frame_ids))
        return _render(self.scenario, frame_ids, gauge.inverse(), None, rng, chunk_index)

    def ground_truth(self):
        R, c = camera_poses(self.scenario)
        q = Rotation.from_matrix(R).as_quat()
        q[q[:, 3] < 0] *= -1
        traj = Trajectory(np.arange(self.scenario.n_frames, dtype=float), c, q)
        return SimGroundTruth(self.scenario, self.plan, traj, list(self.chunk_to_world),
                              self.warps.copy(), planted_loops(self.scenario))


@dataclass
class SimOutput:
    chunks: object
    descriptors: np.ndarray
    ground_truth: SimGroundTruth


def generate(scenario, out_dir=None):
    """Generate a full sequence.

    Without ``out_dir`` the chunks are returned as a list.  With ``out_dir``
    they are written one at a time (chunk files, descriptor file, scenario
    config, ground-truth TUM trajectory) and a :class:`ChunkStore` is returned
    in their place.
    """
    front = SyntheticFrontend(scenario)
    desc = descriptors(scenario)
    gt = front.ground_truth()
    if out_dir is None:
        chunks = [front.chunk(k) for k, _, _ in front.plan]
        return SimOutput(chunks, desc, gt)
    os.makedirs(out_dir, exist_ok=True)
    store = ChunkStore(out_dir)
    for k, _, _ in front.plan:
        store.save(front.chunk(k))
    write_descriptors(desc, os.path.join(out_dir, DESCRIPTOR_FILE))
    scenario.save(os.path.join(out_dir, SCENARIO_FILE))
    write_tum(gt.trajectory, os.path.join(out_dir, GROUNDTRUTH_FILE))
    return SimOutput(ChunkStore(out_dir), desc, gt)


def oracle_edges(gt, loop_pairs=None):
    """Exact relative transforms from the true chunk-to-world states.

    Returns ``(sequential, loops)``: ``sequential[k-1]`` is ``T_k^-1 T_{k+1}``
    and ``loops`` holds ``(chunk_i, chunk_j, T_i^-1 T_j)`` for each frame pair
    (default: the planted loops).
    """
    T = gt.chunk_to_world
    seq = [T[k].inverse() @ T[k + 1] for k in range(len(T) - 1)]
    pairs = gt.planted_loops if loop_pairs is None else loop_pairs
    pairs = [p if isinstance(p, LoopPair) else LoopPair(int(p[0]), int(p[1]), 1.0) for p in pairs]
    loops = []
    for p in assign_chunks(pairs, gt.plan):
        if p.chunk_i != p.chunk_j:
            loops.append((p.chunk_i, p.chunk_j, T[p.chunk_i - 1].inverse() @ T[p.chunk_j - 1]))
    return seq, loops


def oracle_loop_alignments(front, chunk_i, chunk_j, frame_ids):
    """Exact alignments of the loop-centric chunk into chunks ``i`` and ``j`` and their composition."""
    gauge = front.loop_gauge(frame_ids)
    s_i = front.chunk_to_world[chunk_i - 1].inverse() @ gauge
    s_j = front.chunk_to_world[chunk_j - 1].inverse() @ gauge
    return s_i, s_j, compose_loop_constraint(s_i, s_j)


def scene_correspondences(n=10000, outlier_fraction=0.3, noise_rel=0.01, outlier_confidence=1.0,
                          seed=0, scenario=None):
    """Corresponded scene points for registration tests.

    Targets are world points of frames spread around one lap, sources the same points seen in
    a random Sim(3) frame.  Inlier noise has standard deviation ``noise_rel``
    times the scene extent (largest bounding-box side).  A fraction of
    targets is replaced by points uniform in the bounding box and tagged with
    ``outlier_confidence``.

    Returns ``(correspondences, true_transform, sigma, outlier_mask)`` where
    ``true_transform`` maps sources onto the inlier targets.
    """
    scenario = scenario or SimScenario(seed=seed, backdrop_distance=30.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6,)))
    span = min(scenario.n_frames, scenario.frames_per_lap)
    frames = np.linspace(0, span - 1, 16, endpoint=False).astype(int)
    pts = world_points(scenario, frames).reshape(-1, 3)
    pts = pts[rng.choice(len(pts), size=n, replace=len(pts) < n)]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    sigma = noise_rel * float(np.max(hi - lo))
    truth = Sim3.exp(np.r_[rng.normal(size=3) * 5.0, rng.normal(size=3) * 0.5, rng.normal() * 0.3])
    source = truth.inverse().act(pts)
    target = pts + rng.normal(scale=sigma, size=pts.shape)
    outlier = np.zeros(n, dtype=bool)
    outlier[rng.choice(n, size=int(round(outlier_fraction * n)), replace=False)] = True
    target[outlier] = rng.uniform(lo, hi, size=(int(outlier.sum()), 3))
    conf = np.where(outlier, outlier_confidence, 1.0)
    return CorrespondenceSet(source, target, conf), truth, sigma, outlier
