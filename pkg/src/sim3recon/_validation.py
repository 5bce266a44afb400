"""Input validation helpers built on scikit-learn's ``check_array``."""

import numpy as np
from sklearn.utils.validation import check_array


def check_points(points, name="points", allow_empty=False):
    """Return ``points`` as a finite float64 ``(n, 3)`` array."""
    arr = check_array(
        points, dtype=np.float64, ensure_2d=True, ensure_min_samples=0 if allow_empty else 1,
        input_name=name,
    )
    if arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {arr.shape}")
    return arr


def check_weights(weights, n, name="weights"):
    w = check_array(weights, dtype=np.float64, ensure_2d=False, ensure_min_samples=0, input_name=name)
    if w.ndim != 1 or w.shape[0] != n:
        raise ValueError(f"{name} must have shape ({n},), got {w.shape}")
    if np.any(w < 0):
        raise ValueError(f"{name} must be non-negative")
    return w


def check_paired(source, target):
    src = check_points(source, "source_points")
    tgt = check_points(target, "target_points")
    if src.shape != tgt.shape:
        raise ValueError(f"point sets differ in shape: {src.shape} vs {tgt.shape}")
    return src, tgt


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
