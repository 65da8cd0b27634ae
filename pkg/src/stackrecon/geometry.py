"""Rigid transforms and the slice acquisition point-spread model.

Transforms are stored as unit quaternion + translation in float64;
serialization uses 4x4 row-major homogeneous matrices.  The PSF is an
axis-aligned Gaussian in the slice frame whose standard deviations follow
the usual FWHM convention: 1.2x the in-plane spacing and 1.0x the slice
thickness, divided by 2.355.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng

_FWHM = 2.355


def _qmul(q1, q2):
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_to_mat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _mat_to_quat(m):
    # Shepperd's method: pick the largest pivot for stability
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


@dataclass
class RigidTransform:
    """y = R(q) x + t with q a unit quaternion (w, x, y, z)."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.q)
        if n == 0:
            raise ValueError("zero quaternion")
        self.q = self.q / n

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_axis_angle(rotvec, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        w = np.asarray(rotvec, dtype=np.float64).reshape(3)
        theta = np.linalg.norm(w)
        if theta < 1e-12:
            # sin(theta/2)/theta -> 1/2 - theta^2/48
            s = 0.5 - theta * theta / 48.0
        else:
            s = np.sin(theta / 2) / theta
        q = np.concatenate(([np.cos(theta / 2)], w * s))
        return RigidTransform(q, np.asarray(t, dtype=np.float64))

    @property
    def matrix3(self) -> np.ndarray:
        return _quat_to_mat(self.q)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix3.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        q = _qmul(self.q, other.q)
        t = self.matrix3 @ other.t + self.t
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        qc = self.q * np.array([1.0, -1, -1, -1])
        r = _quat_to_mat(qc)
        return RigidTransform(qc, -(r @ self.t))

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix3
        m[:3, 3] = self.t
        return m

    @staticmethod
    def from_matrix(m, drift_tol: float = 1e-4) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        r = m[:3, :3]
        drift = np.abs(r @ r.T - np.eye(3)).max()
        if drift > drift_tol:
            warnings.warn(f"rotation block deviates from orthonormal by "
                          f"{drift:.2e}; re-orthonormalizing", stacklevel=2)
        return RigidTransform(_mat_to_quat(r), m[:3, 3])


def psf_covariance(r1: float, r2: float, r3: float) -> np.ndarray:
    """Diagonal PSF covariance (mm^2) for in-plane spacings r1, r2 and
    slice thickness r3."""
    if min(r1, r2, r3) <= 0:
        raise ValueError("spacings must be positive")
    s = np.array([1.2 * r1, 1.2 * r2, r3]) / _FWHM
    return np.diag(s * s)


def gaussian_weight(u: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Trivariate normal density at offsets u (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    det = np.linalg.det(cov)
    if det <= 0:
        raise ValueError("covariance must be positive definite")
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,ij,...j->...", u, inv, u)
    norm = 1.0 / (np.power(2 * np.pi, 1.5) * np.sqrt(det))
    return norm * np.exp(-0.5 * quad)


def sample_psf(cov: np.ndarray, count: int, key, counter_base: int = 0) -> np.ndarray:
    """count PSF offsets ~ N(0, cov), bit-reproducible per (key, counter).

    Counter layout is dense per sample so disjoint counter_base ranges give
    independent draws regardless of evaluation order.
    """
    cov = np.asarray(cov, dtype=np.float64)
    z = rng.normal_array(key, (count, 3), offset=counter_base * 3)
    off = np.abs(cov - np.diag(np.diag(cov))).max()
    if off == 0:
        return z * np.sqrt(np.diag(cov))
    chol = np.linalg.cholesky(cov)
    return z @ chol.T
