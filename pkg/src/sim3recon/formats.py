"""Text and binary file formats: streaming PLY, TUM / KITTI trajectories, key=value configs."""

from __future__ import annotations

import os
import shutil
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import FormatError

PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
])


def ply_header(count):
    return (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {count}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    ).encode("ascii")


class PlyStreamWriter:
    """Binary little-endian PLY writer with memory independent of the point count.

    Vertex records are spooled to a temporary file next to ``path``; on
    :meth:`close` the header (now with the final count) is written and the
    spool is copied behind it in fixed-size blocks.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(self.path))
        fd, self._spool_path = tempfile.mkstemp(prefix=".ply-", dir=directory)
        self._spool = os.fdopen(fd, "wb")
        self.count = 0
        self.closed = False

    def write(self, points, colors=None):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rec = np.empty(len(pts), dtype=PLY_DTYPE)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if colors is None:
            col = np.full((len(pts), 3), 255, dtype=np.uint8)
        else:
            col = np.asarray(colors).reshape(-1, 3)
            if len(col) != len(pts):
                raise ValueError("colors and points differ in length")
            col = col.astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
        self._spool.write(rec.tobytes())
        self.count += len(pts)

    def close(self):
        if self.closed:
            return
        self._spool.close()
        try:
            with open(self.path, "wb") as out, open(self._spool_path, "rb") as body:
                out.write(ply_header(self.count))
                shutil.copyfileobj(body, out, 1 << 20)
        finally:
            os.unlink(self._spool_path)
            self.closed = True

    def abort(self):
        if not self.closed:
            self._spool.close()
            os.unlink(self._spool_path)
            self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_pointcloud_stream(batches, path):
    """Write an iterable of ``(points, colors)`` batches as one PLY; returns the count."""
    with PlyStreamWriter(path) as writer:
        for points, colors in batches:
            writer.write(points, colors)
    return writer.count


def read_ply(path):
    """Read a file written by :class:`PlyStreamWriter`; returns ``(points, colors)``."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    count = None
    for line in header:
        if line.startswith("element vertex "):
            count = int(line.split()[2])
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    body = data[end + len(b"end_header\n"):]
    if len(body) != count * PLY_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {count} vertices, body has {len(body)} bytes")
    rec = np.frombuffer(body, dtype=PLY_DTYPE)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return pts, col


@dataclass
class Trajectory:
    """Frame-indexed camera poses: positions ``(n, 3)`` and unit quaternions ``(n, 4)`` xyzw."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quaternions) != n:
            raise ValueError("timestamps, positions and quaternions differ in length")
        norms = np.linalg.norm(self.quaternions, axis=1)
        if n and np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("quaternions must be unit length")

    def __len__(self):
        return len(self.timestamps)

    def rotations(self):
        return Rotation.from_quat(self.quaternions).as_matrix()


def _fmt(x):
    return repr(float(x))


def write_tum(traj, path):
    with open(path, "w") as f:
        for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            f.write(" ".join(_fmt(v) for v in (ts, *p, *q)) + "\n")


def read_tum(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


def read_kitti(path):
    """KITTI odometry poses: 12 numbers per line, a row-major 3x4 camera-to-world matrix."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 fields, got {len(parts)}")
            rows.append([float(v) for v in parts])
    M = np.array(rows, dtype=float).reshape(-1, 3, 4)
    q = Rotation.from_matrix(M[:, :, :3]).as_quat() if len(M) else np.zeros((0, 4))
    return Trajectory(np.arange(len(M), dtype=float), M[:, :, 3], q)


def write_kitti(traj, path):
    R = traj.rotations()
    with open(path, "w") as f:
        for Ri, p in zip(R, traj.positions):
            M = np.hstack([Ri, p[:, None]])
            f.write(" ".join(_fmt(v) for v in M.reshape(-1)) + "\n")


def read_trajectory(path, fmt="auto"):
    if fmt == "auto":
        with open(path) as f:
            first = next((ln for ln in f if ln.strip() and not ln.startswith("#")), "")
        fmt = "kitti" if len(first.split()) == 12 else "tum"
    if fmt == "tum":
        return read_tum(path)
    if fmt == "kitti":
        return read_kitti(path)
    raise ValueError(f"unknown trajectory format {fmt!r}")


def read_keyvalue(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Values stay strings."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_keyvalue(mapping, path):
    with open(path, "w") as f:
        for key, value in mapping.items():
            f.write(f"{key} = {value}\n")


def parse_bool(value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
