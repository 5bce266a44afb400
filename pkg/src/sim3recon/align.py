"""Robust Sim(3) registration of corresponded point sets.

Closed-form weighted Umeyama solves are wrapped in an iteratively reweighted
least-squares loop whose weights combine per-pair confidence with the Huber
influence function.  :class:`RobustSim3Aligner` exposes the same machinery as a
scikit-learn style estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paired, check_points, check_positive, check_weights
from .exceptions import DegenerateConfigurationError, InsufficientCorrespondencesError
from .sim3 import Sim3

MAD_TO_SIGMA = 1.4826
DELTA_FLOOR = 1e-9


@dataclass
class CorrespondenceSet:
    """Paired points: ``source`` (chunk k+1 frame) maps onto ``target`` (chunk k frame)."""

    source_points: np.ndarray
    target_points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.source_points, self.target_points = check_paired(self.source_points, self.target_points)
        self.confidence = check_weights(self.confidence, len(self.source_points), "confidence")

    def __len__(self):
        return len(self.source_points)

    def subset(self, mask):
        return CorrespondenceSet(self.source_points[mask], self.target_points[mask], self.confidence[mask])


@dataclass
class IrlsConfig:
    """IRLS settings.

    ``huber_delta`` fixes the Huber threshold; when None it is recomputed every
    iteration as ``huber_factor * 1.4826 * MAD(residuals)``.  A
    ``convergence_tol`` of 0 runs exactly ``max_iterations`` reweighting rounds.
    """

    max_iterations: int = 10
    huber_delta: float | None = None
    huber_factor: float = 1.345
    convergence_tol: float = 1e-8
    min_points: int = 3
    with_scale: bool = True

    def __post_init__(self):
        if int(self.max_iterations) < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (np.isfinite(self.convergence_tol) and self.convergence_tol >= 0):
            raise ValueError("convergence_tol must be >= 0")
        if self.huber_delta is not None:
            check_positive(self.huber_delta, "huber_delta")
        check_positive(self.huber_factor, "huber_factor")
        if int(self.min_points) < 3:
            raise ValueError("min_points must be >= 3")


@dataclass
class AlignResult:
    transform: Sim3
    final_weights: np.ndarray
    iterations_used: int
    final_cost: float
    residuals: np.ndarray = field(repr=False)
    huber_delta: float = float("inf")

    @property
    def median_residual(self):
        return float(np.median(self.residuals)) if len(self.residuals) else 0.0


def weighted_umeyama(source, target, weights=None, with_scale=True):
    """Closed-form Sim(3) minimising ``sum w_i |target_i - S source_i|^2``.

    Parameters
    ----------
    source, target : array-like of shape (n, 3)
    weights : array-like of shape (n,), optional
        Non-negative weights; uniform when omitted.
    with_scale : bool
        When False the scale is locked to 1 (rigid fit).

    Raises
    ------
    InsufficientCorrespondencesError
        Fewer than three strictly positive weights.
    DegenerateConfigurationError
        Weighted source points are coincident or collinear.
    """
    src, tgt = check_paired(source, target)
    w = np.ones(len(src)) if weights is None else check_weights(weights, len(src))
    if np.count_nonzero(w > 0) < 3:
        raise InsufficientCorrespondencesError()
    wsum = w.sum()
    wn = w / wsum
    mu_s = wn @ src
    mu_t = wn @ tgt
    ds = src - mu_s
    dt = tgt - mu_t
    cov_s = (ds * wn[:, None]).T @ ds
    var_s = np.trace(cov_s)
    eig = np.linalg.eigvalsh(cov_s)
    if var_s <= 0 or eig[1] <= 1e-12 * eig[2]:
        raise DegenerateConfigurationError()
    cross = (dt * wn[:, None]).T @ ds
    U, d, Vt = np.linalg.svd(cross)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    scale = float(d @ D / var_s) if with_scale else 1.0
    if not scale > 0:
        raise DegenerateConfigurationError()
    t = mu_t - scale * R @ mu_s
    return Sim3(scale, R, t)


def huber_weight(r, delta):
    """Huber ``rho'(r) / r``: 1 inside ``delta``, ``delta / r`` outside."""
    r = np.asarray(r, dtype=float)
    out = np.ones_like(r)
    big = r > delta
    out[big] = delta / r[big]
    return out


def huber_loss(r, delta):
    r = np.asarray(r, dtype=float)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def mad_delta(r, factor):
    mad = np.median(np.abs(r - np.median(r)))
    return max(factor * MAD_TO_SIGMA * mad, DELTA_FLOOR)


def irls_align(corr, cfg=None):
    """Confidence-weighted IRLS with Huber reweighting.

    Starts from weights equal to the confidences; each pass solves
    :func:`weighted_umeyama`, recomputes residuals and sets
    ``w_i = c_i * rho'(r_i) / r_i``.  Stops when the tangent-space change
    between consecutive transforms drops below ``cfg.convergence_tol`` or after
    ``cfg.max_iterations`` solves.
    """
    cfg = cfg or IrlsConfig()
    c = corr.confidence
    if len(corr) < cfg.min_points or np.count_nonzero(c > 0) < 3:
        raise InsufficientCorrespondencesError()
    src, tgt = corr.source_points, corr.target_points

    w = c.copy()
    S = weighted_umeyama(src, tgt, w, with_scale=cfg.with_scale)
    iterations = 1
    while True:
        r = np.linalg.norm(tgt - S.act(src), axis=1)
        delta = cfg.huber_delta if cfg.huber_delta is not None else mad_delta(r[c > 0], cfg.huber_factor)
        w = c * huber_weight(r, delta)
        if iterations >= cfg.max_iterations:
            break
        S_new = weighted_umeyama(src, tgt, w, with_scale=cfg.with_scale)
        iterations += 1
        change = np.linalg.norm((S.inverse() @ S_new).log())
        S = S_new
        if change < cfg.convergence_tol:
            r = np.linalg.norm(tgt - S.act(src), axis=1)
            w = c * huber_weight(r, delta)
            break
    cost = float(np.sum(huber_loss(r, delta)))
    return AlignResult(S, w, iterations, cost, r, float(delta))


def combine_confidence(conf_a, conf_b, mode="geometric"):
    if mode == "geometric":
        return np.sqrt(conf_a * conf_b)
    if mode == "min":
        return np.minimum(conf_a, conf_b)
    raise ValueError(f"unknown confidence combination {mode!r}")


def confidence_gate(points_a, conf_a, points_b, conf_b, median_factor=0.1,
                    median_a=None, median_b=None, combine="geometric"):
    """Drop pairs where either side falls below ``median_factor`` times its chunk median.

    ``points_a`` is the target side (chunk k), ``points_b`` the source side
    (chunk k+1).  ``median_a``/``median_b`` default to the medians of the given
    confidences; pass whole-chunk medians when the inputs are a subset.
    Non-finite points are dropped as well.
    """
    pa = check_points(points_a, "points_a", allow_empty=True)
    pb = check_points(points_b, "points_b", allow_empty=True)
    ca = np.asarray(conf_a, dtype=float).reshape(-1)
    cb = np.asarray(conf_b, dtype=float).reshape(-1)
    if not (len(pa) == len(pb) == len(ca) == len(cb)):
        raise ValueError("points and confidences must have matching lengths")
    if median_factor < 0:
        raise ValueError("median_factor must be >= 0")
    if len(pa) == 0:
        raise InsufficientCorrespondencesError()
    ma = np.median(ca) if median_a is None else median_a
    mb = np.median(cb) if median_b is None else median_b
    keep = (ca >= median_factor * ma) & (cb >= median_factor * mb)
    keep &= np.isfinite(pa).all(axis=1) & np.isfinite(pb).all(axis=1)
    keep &= (ca > 0) & (cb > 0) if median_factor > 0 else np.ones_like(keep)
    if not np.any(keep):
        raise InsufficientCorrespondencesError()
    return CorrespondenceSet(pb[keep], pa[keep], combine_confidence(ca[keep], cb[keep], combine))


class RobustSim3Aligner(TransformerMixin, BaseEstimator):
    """Estimate the Sim(3) mapping source points onto target points.

    ``fit(X, y, sample_weight)`` takes source points ``X``, target points ``y``
    and per-pair confidences; ``transform`` applies the fitted similarity.

    Parameters
    ----------
    irls : bool, default=True
        Reweight with the Huber influence function. When False a single
        confidence-weighted Umeyama solve is performed.
    max_iter : int, default=10
    huber_delta : float or None, default=None
        Fixed Huber threshold; residual-adaptive (MAD based) when None.
    huber_factor : float, default=1.345
    tol : float, default=1e-8
        Convergence threshold on the tangent-space change between iterates.
    with_scale : bool, default=True

    Attributes
    ----------
    transform_ : Sim3
    weights_ : ndarray of shape (n_samples,)
    n_iter_ : int
    cost_ : float
        Huber cost at the solution.
    """

    def __init__(self, irls=True, max_iter=10, huber_delta=None, huber_factor=1.345, tol=1e-8,
                 with_scale=True):
        self.irls = irls
        self.max_iter = max_iter
        self.huber_delta = huber_delta
        self.huber_factor = huber_factor
        self.tol = tol
        self.with_scale = with_scale

    def _config(self):
        return IrlsConfig(
            max_iterations=self.max_iter if self.irls else 1,
            huber_delta=self.huber_delta,
            huber_factor=self.huber_factor,
            convergence_tol=self.tol,
            with_scale=self.with_scale,
        )

    def fit(self, X, y, sample_weight=None):
        X, y = check_paired(X, y)
        conf = np.ones(len(X)) if sample_weight is None else sample_weight
        result = irls_align(CorrespondenceSet(X, y, conf), self._config())
        self.transform_ = result.transform
        self.weights_ = result.final_weights
        self.n_iter_ = result.iterations_used
        self.cost_ = result.final_cost
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.act(check_points(X, "X"))

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        return self.transform_.inverse().act(check_points(X, "X"))

    def score(self, X, y, sample_weight=None):
        """Negative weighted RMS residual (higher is better)."""
        X, y = check_paired(X, y)
        r2 = np.sum((self.transform(X) - y) ** 2, axis=1)
        w = np.ones(len(r2)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        return -float(np.sqrt(np.sum(w * r2) / np.sum(w)))
