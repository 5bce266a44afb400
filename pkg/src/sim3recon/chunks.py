"""Chunk partitioning, the on-disk chunk store and sequential chunk alignment."""

from __future__ import annotations

import logging
import os
import re
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .align import confidence_gate, irls_align
from .exceptions import FormatError, NotAdjacentError, PipelineError, Sim3ReconError
from .formats import PlyStreamWriter, Trajectory
from .sim3 import Sim3

logger = logging.getLogger(__name__)

VGLC_MAGIC = b"VGLC"
VGLC_VERSION = 1
_VGLC_HEADER = struct.Struct("<4sIIIIIIB")
RESIDENCY_ENV = "SIM3RECON_MAX_RESIDENT"


@dataclass(frozen=True)
class ChunkSpec:
    chunk_size: int
    overlap: int
    total_frames: int

    def __post_init__(self):
        if not (0 < self.overlap < self.chunk_size):
            raise ValueError(f"need 0 < overlap < chunk_size, got O={self.overlap}, L={self.chunk_size}")
        if self.total_frames < 1:
            raise ValueError("total_frames must be positive")


def plan_chunks(spec):
    """``[(k, frame_start, frame_end), ...]`` with 1-based ``k`` and half-open frame ranges.

    Chunk k starts at ``(k-1)(L-O)``; adjacent chunks share exactly ``O``
    frames.  A trailing chunk with ``O`` frames or fewer would add nothing and
    is merged into its predecessor.
    """
    L, O, N = spec.chunk_size, spec.overlap, spec.total_frames
    if N <= L:
        return [(1, 0, N)]
    step = L - O
    K = 1 + -(-(N - L) // step)
    plan = [(k, (k - 1) * step, min((k - 1) * step + L, N)) for k in range(1, K + 1)]
    if plan[-1][2] - plan[-1][1] <= O:
        k, s, _ = plan[-2]
        plan = plan[:-2] + [(k, s, N)]
    return plan


@dataclass(eq=False)
class ChunkPointMap:
    """Per-frame point maps of one chunk in its own (chunk-local) Sim(3) frame.

    ``points`` is ``(F, H, W, 3)`` float32 and ``confidence`` ``(F, H, W)``.
    ``poses`` optionally holds per-frame camera-to-chunk poses as
    ``(tx, ty, tz, qx, qy, qz, qw)`` rows.  ``frame_ids`` defaults to the
    contiguous range starting at ``frame_start``; loop-centric chunks built
    from two disjoint windows set it explicitly.
    """

    chunk_index: int
    frame_start: int
    points: np.ndarray
    confidence: np.ndarray
    poses: np.ndarray | None = None
    frame_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        self.confidence = np.asarray(self.confidence, dtype=np.float32)
        if self.points.ndim != 4 or self.points.shape[-1] != 3:
            raise ValueError(f"points must be (F, H, W, 3), got {self.points.shape}")
        if self.confidence.shape != self.points.shape[:3]:
            raise ValueError("confidence must be (F, H, W) matching points")
        if self.poses is not None:
            self.poses = np.asarray(self.poses, dtype=np.float32).reshape(self.n_frames, 7)
        if self.frame_ids is None:
            self.frame_ids = np.arange(self.frame_start, self.frame_start + self.n_frames)
        else:
            self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
            if len(self.frame_ids) != self.n_frames:
                raise ValueError("frame_ids length must equal the frame count")

    @property
    def n_frames(self):
        return self.points.shape[0]

    @property
    def shape(self):
        return self.points.shape[:3]

    @property
    def contiguous(self):
        return np.array_equal(self.frame_ids, np.arange(self.frame_start, self.frame_start + self.n_frames))

    def confidence_median(self):
        return float(np.median(self.confidence))

    def camera_poses(self):
        """Per-frame ``(rotation (F,3,3), center (F,3))`` in chunk coordinates, or None."""
        if self.poses is None:
            return None
        p = self.poses.astype(np.float64)
        q = p[:, 3:]
        R = Rotation.from_quat(q / np.linalg.norm(q, axis=1, keepdims=True)).as_matrix()
        return R, p[:, :3]

    def equals(self, other):
        same_poses = (self.poses is None and other.poses is None) or (
            self.poses is not None and other.poses is not None and np.array_equal(self.poses, other.poses)
        )
        return (
            self.chunk_index == other.chunk_index
            and self.frame_start == other.frame_start
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.confidence, other.confidence)
            and np.array_equal(self.frame_ids, other.frame_ids)
            and same_poses
        )


def encode_chunk(chunk):
    if not chunk.contiguous:
        raise ValueError("only contiguous chunks can be serialized")
    F, H, W = chunk.shape
    parts = [
        _VGLC_HEADER.pack(VGLC_MAGIC, VGLC_VERSION, chunk.chunk_index, chunk.frame_start, F, H, W,
                          int(chunk.poses is not None)),
        chunk.points.astype("<f4").tobytes(),
        chunk.confidence.astype("<f4").tobytes(),
    ]
    if chunk.poses is not None:
        parts.append(chunk.poses.astype("<f4").tobytes())
    return b"".join(parts)


def decode_chunk(data, name="<bytes>"):
    if len(data) < _VGLC_HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, index, start, F, H, W, has_poses = _VGLC_HEADER.unpack_from(data)
    if magic != VGLC_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != VGLC_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    n = F * H * W
    expected = _VGLC_HEADER.size + 4 * (3 * n + n + (7 * F if has_poses else 0))
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes, got {len(data)}")
    off = _VGLC_HEADER.size
    pts = np.frombuffer(data, "<f4", 3 * n, off).reshape(F, H, W, 3)
    off += 12 * n
    conf = np.frombuffer(data, "<f4", n, off).reshape(F, H, W)
    off += 4 * n
    poses = np.frombuffer(data, "<f4", 7 * F, off).reshape(F, 7) if has_poses else None
    return ChunkPointMap(index, start, pts.astype(np.float32), conf.astype(np.float32),
                         None if poses is None else poses.astype(np.float32))


def write_chunk(chunk, path):
    with open(path, "wb") as f:
        f.write(encode_chunk(chunk))


def read_chunk(path):
    with open(path, "rb") as f:
        return decode_chunk(f.read(), os.fspath(path))


_CHUNK_FILE = re.compile(r"^chunk_(\d+)\.vglc$")


class ChunkStore:
    """Disk-backed chunk collection with a bounded in-memory LRU cache.

    At most ``max_resident`` chunks are held at once (default 2, overridable
    through the ``SIM3RECON_MAX_RESIDENT`` environment variable).  Loads and
    evictions are serialized by a lock.
    """

    def __init__(self, root, max_resident=None):
        self.root = os.fspath(root)
        if max_resident is None:
            max_resident = int(os.environ.get(RESIDENCY_ENV, 2))
        if max_resident < 1:
            raise ValueError("max_resident must be >= 1")
        self.max_resident = max_resident
        self.index = {}
        self._cache = OrderedDict()
        self._lock = threading.Lock()
        self.peak_resident = 0
        self.loads = 0
        if os.path.isdir(self.root):
            for name in sorted(os.listdir(self.root)):
                m = _CHUNK_FILE.match(name)
                if m:
                    self.index[int(m.group(1))] = os.path.join(self.root, name)

    def path_for(self, k):
        return os.path.join(self.root, f"chunk_{k:05d}.vglc")

    def save(self, chunk):
        os.makedirs(self.root, exist_ok=True)
        path = self.path_for(chunk.chunk_index)
        write_chunk(chunk, path)
        self.index[chunk.chunk_index] = path
        return path

    def indices(self):
        return sorted(self.index)

    def __len__(self):
        return len(self.index)

    def load(self, k):
        with self._lock:
            if k in self._cache:
                self._cache.move_to_end(k)
                return self._cache[k]
            if k not in self.index:
                raise KeyError(f"chunk {k} not in store")
            while len(self._cache) >= self.max_resident:
                self._cache.popitem(last=False)
            chunk = read_chunk(self.index[k])
            self._cache[k] = chunk
            self.loads += 1
            self.peak_resident = max(self.peak_resident, len(self._cache))
            return chunk

    def release(self, k):
        with self._lock:
            self._cache.pop(k, None)

    def clear(self):
        with self._lock:
            self._cache.clear()

    @property
    def resident(self):
        return len(self._cache)

    def headers(self):
        """``{k: (frame_start, n_frames)}`` read from file headers only."""
        out = {}
        for k, path in self.index.items():
            with open(path, "rb") as f:
                head = f.read(_VGLC_HEADER.size)
            if len(head) < _VGLC_HEADER.size:
                raise FormatError(f"{path}: truncated header")
            magic, _, _, start, F, _, _, _ = _VGLC_HEADER.unpack(head)
            if magic != VGLC_MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}")
            out[k] = (start, F)
        return out


def overlap_correspondences(a, b, stride=4, median_factor=0.1, combine="geometric", uniform_confidence=False):
    """Pair ``a`` and ``b`` pixels at identical (global frame, pixel) locations.

    Pixels are taken on a regular ``stride`` grid over every shared frame, then
    gated with :func:`confidence_gate` against each chunk's whole-chunk median
    confidence.  Source points come from ``b``, targets from ``a``.  With
    ``uniform_confidence`` every confidence is replaced by 1 first.
    """
    shared, ia, ib = np.intersect1d(a.frame_ids, b.frame_ids, return_indices=True)
    if len(shared) == 0:
        raise NotAdjacentError(f"chunks {a.chunk_index} and {b.chunk_index} share no frames")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("chunks differ in image size")
    sl = (slice(None), slice(None, None, stride), slice(None, None, stride))
    pa = a.points[ia][sl].reshape(-1, 3)
    pb = b.points[ib][sl].reshape(-1, 3)
    if uniform_confidence:
        ca = np.ones(len(pa))
        cb = np.ones(len(pb))
        med_a = med_b = 1.0
    else:
        ca = a.confidence[ia][sl].reshape(-1)
        cb = b.confidence[ib][sl].reshape(-1)
        med_a, med_b = a.confidence_median(), b.confidence_median()
    return confidence_gate(pa, ca, pb, cb, median_factor, med_a, med_b, combine)


def target_radius(points):
    c = points.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum((points - c) ** 2, axis=1))))


def align_pair(a, b, cfg=None, stride=4, median_factor=0.1, combine="geometric", uniform_confidence=False):
    """Sim(3) mapping chunk ``b``'s frame into chunk ``a``'s, plus diagnostics."""
    corr = overlap_correspondences(a, b, stride, median_factor, combine, uniform_confidence)
    result = irls_align(corr, cfg)
    diag = {
        "correspondences": len(corr),
        "iterations": result.iterations_used,
        "final_cost": result.final_cost,
        "median_residual": result.median_residual,
        "relative_residual": result.median_residual / max(target_radius(corr.target_points), 1e-12),
    }
    return result.transform, diag


@dataclass
class SequentialEdge:
    k: int
    transform: Sim3
    diagnostics: dict


def align_sequence(store, cfg=None, stride=4, median_factor=0.1, combine="geometric", uniform_confidence=False):
    """Relative transforms ``S_{k,k+1}`` for every adjacent chunk pair in ``store``.

    Only the two chunks involved in a pair are resident at any time.
    """
    ks = store.indices()
    edges = []
    for k, k_next in zip(ks, ks[1:]):
        where = f"chunks {k}-{k_next}"
        try:
            a = store.load(k)
            b = store.load(k_next)
            S, diag = align_pair(a, b, cfg, stride, median_factor, combine, uniform_confidence)
        except (Sim3ReconError, ValueError) as exc:
            raise PipelineError("sequential alignment", str(exc), where) from exc
        finally:
            store.release(k)
        logger.debug("%s: %s", where, diag)
        edges.append(SequentialEdge(k, S, diag))
    store.clear()
    return edges


def accumulate_world(edges, first=1):
    """Chunk-to-world transforms: identity for the first chunk, then prefix products."""
    world = [Sim3.identity()]
    expected = first
    for e in edges:
        k, S = (e.k, e.transform) if isinstance(e, SequentialEdge) else e
        if k != expected:
            raise PipelineError("accumulate", f"missing sequential edge for chunk {expected}", where=expected)
        world.append(world[-1] @ S)
        expected += 1
    return world


def _grey(conf, scale):
    v = np.clip(conf / scale, 0.0, 1.0) * 255.0
    g = v.astype(np.uint8)
    return np.stack([g, g, g], axis=1)


def export_fused(store, world_transforms, keep_factor=0.75, ply_path=None):
    """Stream gated world-frame points to ``ply_path`` and return the camera trajectory.

    Each global frame is emitted by exactly one chunk, the earliest one that
    contains it.  Points survive when their confidence exceeds ``keep_factor``
    times the chunk's mean confidence.  When a chunk carries no camera poses,
    a frame's position falls back to the centroid of its surviving points.
    """
    ks = store.indices()
    if len(ks) != len(world_transforms):
        raise ValueError(f"{len(ks)} chunks but {len(world_transforms)} world transforms")
    writer = PlyStreamWriter(ply_path) if ply_path is not None else None
    stamps, positions, quats = [], [], []
    emitted_until = -1
    try:
        for k, S in zip(ks, world_transforms):
            try:
                chunk = store.load(k)
            except (OSError, FormatError) as exc:
                raise PipelineError("export", str(exc), where=f"chunk {k}") from exc
            own = chunk.frame_ids > emitted_until
            if not np.any(own):
                store.release(k)
                continue
            emitted_until = int(chunk.frame_ids.max())
            conf = chunk.confidence[own].astype(np.float64)
            pts = chunk.points[own].astype(np.float64)
            threshold = keep_factor * float(np.mean(chunk.confidence, dtype=np.float64))
            keep = conf > threshold
            if writer is not None:
                world_pts = S.act(pts[keep])
                writer.write(world_pts, _grey(conf[keep], 2.0 * threshold / max(keep_factor, 1e-12)))
            cams = chunk.camera_poses()
            frames = chunk.frame_ids[own]
            if cams is not None:
                R_loc, c_loc = cams[0][own], cams[1][own]
                R_world = S.rotation @ R_loc
                c_world = S.act(c_loc)
            else:
                R_world = np.repeat(S.rotation[None], len(frames), axis=0)
                c_world = np.empty((len(frames), 3))
                for i in range(len(frames)):
                    sel = pts[i][keep[i]]
                    if len(sel) == 0:
                        sel = pts[i].reshape(-1, 3)
                    c_world[i] = S.act(sel.reshape(-1, 3).mean(axis=0))
            q = Rotation.from_matrix(R_world).as_quat()
            q[q[:, 3] < 0] *= -1
            stamps.append(frames.astype(float))
            positions.append(c_world)
            quats.append(q)
            store.release(k)
    except Exception:
        if writer is not None:
            writer.abort()
        raise
    if writer is not None:
        try:
            writer.close()
        except OSError as exc:
            raise PipelineError("export", str(exc), where=ply_path) from exc
    return Trajectory(np.concatenate(stamps), np.concatenate(positions), np.concatenate(quats))
