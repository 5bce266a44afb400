"""Sim(3) group arithmetic, exp/log maps and Jacobian helpers.

Conventions
-----------
* A group element acts on a point as ``scale * rotation @ p + translation``.
* Tangent vectors are 7-vectors ordered ``(upsilon[3], omega[3], lambda)``:
  translational part, rotation vector (radians) and log-scale.
* ``compose(a, b)`` applies ``b`` first, then ``a``.

The batched functions (``exp_batch``, ``log_batch``, ...) work on arrays with
arbitrary leading dimensions and back both the :class:`Sim3` value type and the
pose-graph optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from .exceptions import LogSingularityError

# Taylor switchover on |omega| and |lambda|.
SMALL = 1e-5
# Rotation angles closer than this to pi are rejected by the logarithm.
PI_MARGIN = 1e-6
ORTHO_TOL = 1e-9


def hat(w):
    """Skew-symmetric matrices of shape ``(..., 3, 3)`` from ``(..., 3)`` vectors."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m):
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _hat3(w):
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _so3_exp_single(w):
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    t2 = theta * theta
    if theta < SMALL:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / t2
    K = _hat3(w)
    return np.eye(3) + a * K + b * (K @ K)


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    if w.shape == (3,):
        return _so3_exp_single(w.tolist())
    theta = np.linalg.norm(w, axis=-1)
    small = theta < SMALL
    th = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(th) / th)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(th)) / (th * th))
    K = hat(w)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def so3_log(R):
    """Rotation vectors from rotation matrices.

    Raises :class:`LogSingularityError` for angles within ``PI_MARGIN`` of pi.
    """
    R = np.asarray(R, dtype=float)
    if R.shape == (3, 3):
        return _so3_log_single(R)
    v = 0.5 * vee(R - np.swapaxes(R, -1, -2))
    sin_t = np.linalg.norm(v, axis=-1)
    cos_t = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta > np.pi - PI_MARGIN):
        raise LogSingularityError()
    small = theta < SMALL
    s = np.where(small, 1.0, sin_t)
    t2 = theta * theta
    factor = np.where(small, 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0, theta / s)
    return factor[..., None] * v


def _so3_log_single(R):
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = R.tolist()
    v = [0.5 * (r21 - r12), 0.5 * (r02 - r20), 0.5 * (r10 - r01)]
    sin_t = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    theta = math.atan2(sin_t, 0.5 * (r00 + r11 + r22 - 1.0))
    if theta > math.pi - PI_MARGIN:
        raise LogSingularityError()
    if theta < SMALL:
        t2 = theta * theta
        factor = 1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0
    else:
        factor = theta / sin_t
    return np.array([factor * v[0], factor * v[1], factor * v[2]])


_NSER = 30
_FACT = np.cumprod(np.concatenate([[1.0], np.arange(1, _NSER, dtype=float)]))


@lru_cache(maxsize=None)
def _moment_coefs(nmax):
    k = np.arange(_NSER)
    return 1.0 / (_FACT[:, None] * (np.arange(nmax + 1)[None, :] + k[:, None] + 1))


_FACT_F = [float(f) for f in _FACT]


def _moments(sigma, nmax):
    """m_n(sigma) = integral_0^1 t^n exp(sigma t) dt for n = 0..nmax."""
    sigma = np.asarray(sigma, dtype=float)
    out = np.empty((nmax + 1,) + sigma.shape)
    near = np.abs(sigma) < 2.0
    if np.any(near):
        # 30 power-series terms are exact to double precision for |sigma| < 2
        coef = _moment_coefs(nmax)
        pw = np.cumprod(np.concatenate([np.ones((np.count_nonzero(near), 1)),
                                        np.repeat(sigma[near][:, None], _NSER - 1, axis=1)], axis=1), axis=1)
        out[:, near] = (pw @ coef).T
    if np.any(~near):
        # upward recurrence, stable enough for |sigma| >= 2 and small nmax
        sf = sigma[~near]
        es = np.exp(sf)
        m = np.expm1(sf) / sf
        out[0, ~near] = m
        for n in range(1, nmax + 1):
            m = (es - n * m) / sf
            out[n, ~near] = m
    return out


# Below this angle (and for |sigma| < 2) W's coefficients come from a series in
# theta; the closed form loses digits when theta and sigma are both small.
_SERIES_THETA = 0.1
_SERIES_TERMS = 7


def _w_coeffs(theta, sigma):
    """Coefficients of W = c0 I + c1 K + c2 K^2 with W = int_0^1 e^{sigma t} exp(t K) dt."""
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    small_s = np.abs(sigma) < SMALL
    sg = np.where(small_s, 1.0, sigma)
    c0 = np.where(small_s, 1.0 + sigma / 2.0 + sigma**2 / 6.0 + sigma**3 / 24.0, np.expm1(sg) / sg)

    th = np.where(theta < SMALL, 1.0, theta)
    es = np.exp(sigma)
    ec = es * np.cos(th) - 1.0
    esn = es * np.sin(th)
    denom = sigma * sigma + th * th
    re = (ec * sigma + esn * th) / denom
    im = (esn * sigma - ec * th) / denom
    c1 = im / th
    c2 = (c0 - re) / (th * th)

    series = (theta < SMALL) | ((theta < _SERIES_THETA) & (np.abs(sigma) < 2.0))
    if np.any(series):
        n = 2 * _SERIES_TERMS
        c1 = np.array(c1, dtype=float)
        c2 = np.array(c2, dtype=float)
        m = _moments(sigma[series], n)
        t2 = theta[series] ** 2
        c1s = np.zeros_like(t2)
        c2s = np.zeros_like(t2)
        for j in range(1, n + 1):
            if j % 2:  # odd j: sin-series term for c1
                c1s = c1s + (-1) ** (j // 2) * t2 ** (j // 2) * m[j] / _FACT[j]
            else:
                c2s = c2s + (-1) ** (j // 2 - 1) * t2 ** (j // 2 - 1) * m[j] / _FACT[j]
        c1[series] = c1s
        c2[series] = c2s
    return c0, c1, c2


def _w_coeffs_scalar(theta, sigma):
    """Same as :func:`_w_coeffs` for one element, in plain floats."""
    if abs(sigma) < SMALL:
        c0 = 1.0 + sigma / 2.0 + sigma**2 / 6.0 + sigma**3 / 24.0
    else:
        c0 = math.expm1(sigma) / sigma
    if theta < SMALL or (theta < _SERIES_THETA and abs(sigma) < 2.0):
        n = 2 * _SERIES_TERMS
        if abs(sigma) < 2.0:
            pw = np.cumprod(np.r_[1.0, np.full(_NSER - 1, sigma)])
            m = (pw @ _moment_coefs(n)).tolist()
        else:
            es = math.exp(sigma)
            m = [math.expm1(sigma) / sigma]
            for j in range(1, n + 1):
                m.append((es - j * m[-1]) / sigma)
        t2 = theta * theta
        c1 = c2 = 0.0
        for j in range(1, n + 1):
            if j % 2:
                c1 += (-1) ** (j // 2) * t2 ** (j // 2) * m[j] / _FACT_F[j]
            else:
                c2 += (-1) ** (j // 2 - 1) * t2 ** (j // 2 - 1) * m[j] / _FACT_F[j]
        return c0, c1, c2
    es = math.exp(sigma)
    ec = es * math.cos(theta) - 1.0
    esn = es * math.sin(theta)
    denom = sigma * sigma + theta * theta
    re = (ec * sigma + esn * theta) / denom
    im = (esn * sigma - ec * theta) / denom
    return c0, im / theta, (c0 - re) / (theta * theta)


def w_matrix(omega, lam):
    omega = np.asarray(omega, dtype=float)
    if omega.ndim == 1:
        c0, c1, c2 = _w_coeffs_scalar(math.sqrt(float(omega @ omega)), float(lam))
        K = _hat3(omega.tolist())
        return c0 * np.eye(3) + c1 * K + c2 * (K @ K)
    theta = np.linalg.norm(omega, axis=-1)
    c0, c1, c2 = _w_coeffs(theta, lam)
    K = hat(omega)
    return c0[..., None, None] * np.eye(3) + c1[..., None, None] * K + c2[..., None, None] * (K @ K)


def exp_batch(xi):
    """Batched exponential. Returns ``(scale, rotation, translation)`` arrays."""
    xi = np.asarray(xi, dtype=float)
    ups, om, lam = xi[..., :3], xi[..., 3:6], xi[..., 6]
    R = so3_exp(om)
    t = np.einsum("...ij,...j->...i", w_matrix(om, lam), ups)
    return np.exp(lam), R, t


def log_batch(scale, R, t):
    scale = np.asarray(scale, dtype=float)
    om = so3_log(R)
    lam = np.log(scale)
    W = w_matrix(om, lam)
    ups = np.linalg.solve(W, np.asarray(t, dtype=float)[..., None])[..., 0]
    return np.concatenate([ups, om, lam[..., None]], axis=-1)


def compose_batch(sa, Ra, ta, sb, Rb, tb):
    R = Ra @ Rb
    t = sa[..., None] * np.einsum("...ij,...j->...i", Ra, tb) + ta
    return sa * sb, R, t


def inverse_batch(s, R, t):
    Rt = np.swapaxes(R, -1, -2)
    si = 1.0 / s
    return si, Rt, -si[..., None] * np.einsum("...ij,...j->...i", Rt, t)


def ad_matrix(xi):
    """7x7 matrix of the Lie bracket ``[xi, .]`` in (upsilon, omega, lambda) order."""
    xi = np.asarray(xi, dtype=float)
    ups, om, lam = xi[:3], xi[3:6], xi[6]
    A = np.zeros((7, 7))
    A[:3, :3] = hat(om) + lam * np.eye(3)
    A[:3, 3:6] = hat(ups)
    A[:3, 6] = -ups
    A[3:6, 3:6] = hat(om)
    return A


def right_jacobian(xi):
    """Right Jacobian ``Jr(xi) = int_0^1 exp(-t ad_xi) dt`` of the exponential."""
    A = -ad_matrix(xi)
    M = np.zeros((14, 14))
    M[:7, :7] = A
    M[:7, 7:] = np.eye(7)
    return expm(M)[:7, 7:]


def right_jacobian_inv(xi):
    return np.linalg.inv(right_jacobian(xi))


def _as_rotation(R):
    R = np.array(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError("rotation must be finite")
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation must be orthonormal with det +1")
    return R


@dataclass(frozen=True, eq=False)
class Sim3:
    """Immutable similarity transform ``p -> scale * rotation @ p + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = float(self.scale)
        if not np.isfinite(s) or s <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale!r}")
        R = _as_rotation(self.rotation)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls._trusted(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def _trusted(cls, s, R, t):
        # skips validation for results of group operations on valid inputs
        obj = object.__new__(cls)
        R = np.array(R, dtype=float)
        t = np.array(t, dtype=float)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(obj, "scale", float(s))
        object.__setattr__(obj, "rotation", R)
        object.__setattr__(obj, "translation", t)
        return obj

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(7)
        if not np.all(np.isfinite(xi)):
            raise ValueError("tangent vector must be finite")
        return cls._trusted(*exp_batch(xi))

    def log(self):
        """Tangent 7-vector ``(upsilon, omega, lambda)``."""
        return log_batch(np.float64(self.scale), self.rotation, self.translation)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        A = M[:3, :3]
        s = np.cbrt(np.linalg.det(A))
        return cls(s, A / s, M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw, scale=1.0):
        q = np.array(quat_xyzw, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not norm > 0:
            raise ValueError("quaternion must be non-zero")
        R = Rotation.from_quat(q / norm).as_matrix()
        obj = cls(scale, R, translation)
        if abs(norm - 1.0) < 1e-12:
            # keep the exact input so that text round-trips reproduce it
            q = -q if q[3] < 0 else q
            q.flags.writeable = False
            object.__setattr__(obj, "_quat", q)
        return obj

    def quaternion(self):
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        cached = self.__dict__.get("_quat")
        if cached is not None:
            return cached.copy()
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def compose(self, other):
        R = self.rotation
        return Sim3._trusted(self.scale * other.scale, R @ other.rotation,
                             self.scale * (R @ other.translation) + self.translation)

    __matmul__ = compose

    def inverse(self):
        Rt = self.rotation.T
        si = 1.0 / self.scale
        return Sim3._trusted(si, Rt, -si * (Rt @ self.translation))

    def act(self, points):
        """Apply to ``(..., 3)`` points."""
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return (
            abs(self.scale - other.scale) <= atol
            and np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def rotation_angle(self):
        c = np.clip(0.5 * (np.trace(self.rotation) - 1.0), -1.0, 1.0)
        return float(np.arccos(c))

    def adjoint(self):
        """7x7 adjoint: ``log(S exp(x) S^-1) = Ad_S x``."""
        A = np.zeros((7, 7))
        R, t = self.rotation, self.translation
        A[:3, :3] = self.scale * R
        A[:3, 3:6] = hat(t) @ R
        A[:3, 6] = -t
        A[3:6, 3:6] = R
        A[6, 6] = 1.0
        return A

    def __repr__(self):
        return (
            f"Sim3(scale={self.scale:.6g}, rotvec={np.round(so3_log(self.rotation), 6).tolist()}, "
            f"translation={np.round(self.translation, 6).tolist()})"
        )


def compose(a, b):
    return a.compose(b)


def inverse(s):
    return s.inverse()


def exp(xi):
    return Sim3.exp(xi)


def log(s):
    return s.log()


def act(s, points):
    return s.act(points)


def stack(transforms):
    """Arrays ``(scales, rotations, translations)`` from a sequence of :class:`Sim3`."""
    s = np.array([x.scale for x in transforms], dtype=float)
    R = np.array([x.rotation for x in transforms], dtype=float).reshape(-1, 3, 3)
    t = np.array([x.translation for x in transforms], dtype=float).reshape(-1, 3)
    return s, R, t


def unstack(s, R, t):
    return [Sim3._trusted(s[i], R[i], t[i]) for i in range(len(s))]
