"""Loop-closure candidate detection from global image descriptors and loop constraints."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import FormatError

VGLD_MAGIC = b"VGLD"
VGLD_VERSION = 1
_VGLD_HEADER = struct.Struct("<4sIII")


@dataclass
class LoopConfig:
    similarity_threshold: float = 0.85
    min_separation: int = 100
    nms_window: int = 25
    max_candidates: int = 32

    def __post_init__(self):
        if not 0 < self.similarity_threshold < 1:
            raise ValueError("similarity_threshold must lie in (0, 1)")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if self.nms_window < 1:
            raise ValueError("nms_window must be >= 1")
        if self.max_candidates < 1:
            raise ValueError("max_candidates must be >= 1")


@dataclass(frozen=True)
class LoopPair:
    frame_i: int
    frame_j: int
    similarity: float
    chunk_i: int | None = None
    chunk_j: int | None = None


def check_descriptors(desc, tol=1e-6):
    d = check_array(desc, dtype=np.float64, ensure_min_samples=0, input_name="descriptors")
    if len(d) and np.abs(np.linalg.norm(d, axis=1) - 1.0).max() > tol:
        raise ValueError("descriptors must be L2-normalized")
    return d


def normalize_descriptors(desc):
    d = np.asarray(desc, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def candidate_pairs(desc, threshold, min_separation, block=1024):
    """All ``(i, j, sim)`` with ``i < j``, ``j - i > min_separation`` and cosine ``sim >= threshold``."""
    n = len(desc)
    out_i, out_j, out_s = [], [], []
    for r0 in range(0, n, block):
        rows = desc[r0:r0 + block]
        sim = rows @ desc.T
        ii, jj = np.nonzero(sim >= threshold)
        gi = ii + r0
        keep = jj - gi > min_separation
        out_i.append(gi[keep])
        out_j.append(jj[keep])
        out_s.append(sim[ii[keep], jj[keep]])
    if not out_i:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_s)


def detect_loops(desc, cfg=None):
    """Loop candidates after similarity/separation filtering and non-maximum suppression.

    A candidate is suppressed when an already accepted, stronger pair lies
    within ``nms_window`` frames on both endpoints.  The result is sorted by
    similarity (descending, ties by ``(i, j)``) and truncated to
    ``max_candidates``.
    """
    cfg = cfg or LoopConfig()
    d = check_descriptors(desc)
    ci, cj, cs = candidate_pairs(d, cfg.similarity_threshold, cfg.min_separation)
    order = np.lexsort((cj, ci, -cs))
    kept = []
    for idx in order:
        i, j = int(ci[idx]), int(cj[idx])
        if any(abs(i - a) < cfg.nms_window and abs(j - b) < cfg.nms_window for a, b, _ in kept):
            continue
        kept.append((i, j, float(cs[idx])))
        if len(kept) >= cfg.max_candidates:
            break
    return [LoopPair(i, j, s) for i, j, s in kept]


def owning_chunk(frame, plan):
    """Earliest chunk of ``plan`` (``[(k, start, end), ...]``) containing ``frame``."""
    for k, start, end in plan:
        if start <= frame < end:
            return k
    raise ValueError(f"frame {frame} outside every chunk")


def assign_chunks(pairs, plan):
    return [LoopPair(p.frame_i, p.frame_j, p.similarity, owning_chunk(p.frame_i, plan), owning_chunk(p.frame_j, plan))
            for p in pairs]


def loop_chunk_frames(pair, half_width, n_frames):
    """Sorted union of the frame windows centred on both loop endpoints, clamped to ``[0, n_frames)``."""
    i, j = (pair.frame_i, pair.frame_j) if isinstance(pair, LoopPair) else pair
    a = np.arange(max(i - half_width, 0), min(i + half_width, n_frames - 1) + 1)
    b = np.arange(max(j - half_width, 0), min(j + half_width, n_frames - 1) + 1)
    return np.union1d(a, b)


def compose_loop_constraint(s_i_loop, s_j_loop):
    """``S_j,loop o S_i,loop^-1``: maps chunk i's frame into chunk j's through the loop chunk."""
    return s_j_loop @ s_i_loop.inverse()


def encode_descriptors(desc):
    d = np.ascontiguousarray(desc, dtype="<f4")
    n, dim = d.shape
    return _VGLD_HEADER.pack(VGLD_MAGIC, VGLD_VERSION, n, dim) + d.tobytes()


def decode_descriptors(data, name="<bytes>"):
    if len(data) < _VGLD_HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, n, dim = _VGLD_HEADER.unpack_from(data)
    if magic != VGLD_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != VGLD_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if len(data) != _VGLD_HEADER.size + 4 * n * dim:
        raise FormatError(f"{name}: size does not match {n}x{dim} descriptors")
    return np.frombuffer(data, "<f4", n * dim, _VGLD_HEADER.size).reshape(n, dim).astype(np.float32)


def write_descriptors(desc, path):
    with open(path, "wb") as f:
        f.write(encode_descriptors(desc))


def read_descriptors(path):
    with open(path, "rb") as f:
        return decode_descriptors(f.read(), str(path))


def read_loop_pairs(path):
    """Loop override file: one ``i j`` pair of frame indices per line."""
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'i j'")
            i, j = sorted(int(p) for p in parts)
            pairs.append(LoopPair(i, j, 1.0))
    return pairs


class LoopDetector(BaseEstimator):
    """Estimator wrapper around :func:`detect_loops`.

    ``fit(X)`` takes an ``(n_frames, dim)`` descriptor matrix (rows are
    normalized if needed) and stores the surviving pairs in ``loop_pairs_``.

    Parameters
    ----------
    similarity_threshold : float, default=0.85
    min_separation : int, default=100
    nms_window : int, default=25
    max_candidates : int, default=32
    """

    def __init__(self, similarity_threshold=0.85, min_separation=100, nms_window=25, max_candidates=32):
        self.similarity_threshold = similarity_threshold
        self.min_separation = min_separation
        self.nms_window = nms_window
        self.max_candidates = max_candidates

    def fit(self, X, y=None):
        X = normalize_descriptors(check_array(X, dtype=np.float64, input_name="X"))
        cfg = LoopConfig(self.similarity_threshold, self.min_separation, self.nms_window, self.max_candidates)
        self.loop_pairs_ = detect_loops(X, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None):
        """Array of ``(frame_i, frame_j)`` rows for the fitted pairs."""
        check_is_fitted(self, "loop_pairs_")
        return np.array([(p.frame_i, p.frame_j) for p in self.loop_pairs_], dtype=int).reshape(-1, 2)
