"""Synthetic phantoms and stack acquisition.

The simulator shares the PSF and transform code with the reconstructor:
each pixel of each slice is the Monte-Carlo mean of trilinear phantom
samples at PSF offsets, scaled by a smooth multiplicative bias field, a
per-slice factor, and additive Gaussian noise.  Motion is a per-slice
random walk whose step magnitudes are bounded by rate x interval.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import rng
from .core import Stack, Volume, centered_volume, sample_volume
from .geometry import RigidTransform, psf_covariance

_S_MOTION = 201
_S_PSF_SIM = 202
_S_NOISE = 203
_S_BIAS = 204
_S_SCALE = 205
_S_PERTURB = 206


@dataclass
class Ellipsoid:
    center: tuple
    semi_axes: tuple
    intensity: float
    rotation: tuple = (0.0, 0.0, 0.0)


@dataclass
class MotionSpec:
    trans_rate: float      # mm/s
    rot_rate: float        # deg/s
    interval: float = 1.0  # s between slices


MOTION_PRESETS = {
    "none": None,
    "mild": MotionSpec(2.0, 5.0, 1.0),
    "severe": MotionSpec(21.4, 59.7, 1.0),
}


def default_phantom() -> list[Ellipsoid]:
    """Nested-ellipsoid head phantom with values in [0, 1]."""
    return [
        Ellipsoid((0, 0, 0), (34, 30, 28), 0.30),
        Ellipsoid((0, 2, 0), (28, 24, 22), 0.62),
        Ellipsoid((-10, -4, 2), (9, 7, 8), 0.85, (0, 0, 0.5)),
        Ellipsoid((10, -4, 2), (9, 7, 8), 0.85, (0, 0, -0.5)),
        Ellipsoid((0, 8, -4), (12, 6, 5), 0.15, (0.4, 0, 0)),
        Ellipsoid((5, 14, 8), (4, 4, 4), 0.95),
        Ellipsoid((-6, 12, 8), (3.5, 3.5, 3.5), 0.05),
        Ellipsoid((0, -16, -6), (7, 5, 6), 0.45, (0, 0.6, 0)),
    ]


def make_phantom(spec: list[Ellipsoid] | None = None,
                 shape=(96, 96, 96), spacing: float = 0.8) -> Volume:
    """Rasterize ellipsoids onto a centered grid; later entries override."""
    if spec is None:
        spec = default_phantom()
    shape = tuple(int(v) for v in shape)
    sp = np.full(3, float(spacing))
    data = np.zeros(shape, dtype=np.float32)
    idx = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    pts = (idx - (np.array(shape) - 1) / 2) * sp
    flat = data.reshape(-1)
    for e in spec:
        rot = RigidTransform.from_axis_angle(e.rotation).matrix3
        local = (pts - np.asarray(e.center, dtype=np.float64)) @ rot
        q = np.sum((local / np.asarray(e.semi_axes, dtype=np.float64)) ** 2,
                   axis=1)
        flat[q <= 1.0] = e.intensity
    return centered_volume(data, sp)


_ORIENT_AXES = {
    # columns: world directions of (in-plane-1, in-plane-2, through-plane)
    "axial": np.eye(3),
    "coronal": np.array([[1.0, 0, 0], [0, 0, -1], [0, 1, 0]]).T,
    "sagittal": np.array([[0.0, 1, 0], [0, 0, 1], [1, 0, 0]]).T,
}


def _orientation_matrix(name: str) -> np.ndarray:
    if name not in _ORIENT_AXES:
        raise ValueError(f"unknown orientation {name!r}")
    r = _ORIENT_AXES[name]
    assert abs(np.linalg.det(r) - 1.0) < 1e-12
    return r


def _random_unit(gen) -> np.ndarray:
    v = gen.normal(size=3)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([1.0, 0, 0])


def _motion_walk(motion: MotionSpec, n_slices: int, key) -> list[RigidTransform]:
    """Cumulative world-frame motion at each slice acquisition time."""
    gen = rng.generator(key)
    cur = RigidTransform.identity()
    out = []
    for _ in range(n_slices):
        d_t = _random_unit(gen) * gen.uniform(0, motion.trans_rate * motion.interval)
        ang = np.deg2rad(gen.uniform(0, motion.rot_rate * motion.interval))
        d_r = _random_unit(gen) * ang
        step = RigidTransform.from_axis_angle(d_r, d_t)
        cur = step.compose(cur)
        out.append(cur)
    return out


_MONOMIALS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (2, 0, 0), (0, 2, 0),
              (0, 0, 2), (1, 1, 0), (1, 0, 1), (0, 1, 1))


def bias_log_field(coeffs, half_extent, offset, pts: np.ndarray) -> np.ndarray:
    """Evaluate the degree-2 log-bias polynomial at world points."""
    w = np.asarray(pts, dtype=np.float64) / np.asarray(half_extent)
    out = np.zeros(w.shape[0])
    for c, (i, j, k) in zip(coeffs, _MONOMIALS):
        out += c * w[:, 0] ** i * w[:, 1] ** j * w[:, 2] ** k
    return out - offset


def _make_bias(vol: Volume, scale: float, key):
    """Coefficients for a zero-mean (over the volume grid) log-bias field."""
    half = (np.array(vol.shape) - 1) / 2 * vol.spacing
    half = np.maximum(half, 1e-6)
    coeffs = rng.generator(key).normal(0.0, scale, len(_MONOMIALS))
    stride = max(1, vol.data.size // 40000)
    idx = np.indices(vol.shape).reshape(3, -1).T[::stride].astype(np.float64)
    pts = idx * vol.spacing + vol.origin
    offset = float(np.mean(bias_log_field(coeffs, half, 0.0, pts)))
    return coeffs, half, offset


def simulate_stack(vol: Volume, orientation: str, inplane: float,
                   thickness: float, gap: float = 0.0,
                   motion: MotionSpec | None = None,
                   bias_scale: float = 0.0, noise_sigma: float = 0.0,
                   scale_sigma: float = 0.0, k_sim: int = 256,
                   seed: int = 0, stack_id: int = 0):
    """Acquire one stack from a phantom volume; returns (Stack, truth)."""
    if inplane <= 0 or thickness <= 0 or gap < 0:
        raise ValueError("pixel spacing and thickness must be positive, "
                         "gap non-negative")
    if k_sim < 2 or k_sim % 2 != 0:
        raise ValueError(f"k_sim must be even and >= 2, got {k_sim}")
    r0 = _orientation_matrix(orientation)
    ext = (np.array(vol.shape) - 1) * vol.spacing
    ext_inplane = np.abs(r0[:, :2].T @ ext)
    ext_through = float(np.abs(r0[:, 2] @ ext))
    n1 = max(1, int(np.rint(ext_inplane[0] / inplane)))
    n2 = max(1, int(np.rint(ext_inplane[1] / inplane)))
    pitch = thickness + gap
    ns = max(1, int(np.rint(ext_through / pitch)))
    span = ((n1 - 1) * inplane, (n2 - 1) * inplane,
            (ns - 1) * pitch + thickness)
    reach = (ext_inplane[0] - inplane, ext_inplane[1] - inplane,
             ext_through - pitch)
    # micron slack absorbs float rounding in the extent arithmetic
    if any(s < r - 1e-6 for s, r in zip(span, reach)):
        raise ValueError("stack field of view cannot cover the phantom")

    nominal = []
    for i in range(ns):
        z = (i - (ns - 1) / 2) * pitch
        t = r0 @ np.array([0.0, 0.0, z])
        nominal.append(RigidTransform(_rot_to_quat(r0), t))
    if motion is None:
        transforms = nominal
        walk = [RigidTransform.identity()] * ns
    else:
        walk = _motion_walk(motion, ns, rng.derive_key(seed, _S_MOTION, stack_id))
        transforms = [w.compose(t0) for w, t0 in zip(walk, nominal)]

    if bias_scale > 0:
        coeffs, half, offset = _make_bias(
            vol, bias_scale, rng.derive_key(seed, _S_BIAS, stack_id))
    else:
        coeffs, half, offset = np.zeros(len(_MONOMIALS)), np.ones(3), 0.0

    scales = np.ones(ns)
    if scale_sigma > 0:
        scales = np.exp(rng.generator(rng.derive_key(seed, _S_SCALE, stack_id))
                        .normal(0.0, scale_sigma, ns))

    cov = psf_covariance(inplane, inplane, thickness)
    sigma = np.sqrt(np.diag(cov))
    a = (np.arange(n1) - (n1 - 1) / 2) * inplane
    b = (np.arange(n2) - (n2 - 1) / 2) * inplane
    aa, bb = np.meshgrid(a, b, indexing="ij")
    p = np.zeros((n1 * n2, 3))
    p[:, 0] = aa.ravel()
    p[:, 1] = bb.ravel()

    data = np.zeros((n1, n2, ns), dtype=np.float32)
    # every pixel in the FOV carries a real measurement (zero outside the
    # object is signal, not absence), so the acquisition mask is the full grid
    mask = np.ones((n1, n2, ns), dtype=bool)
    npix = n1 * n2
    counters = (np.arange(k_sim)[:, None] * 3 + np.arange(3)).astype(np.uint64)
    for i in range(ns):
        t = transforms[i]
        centers = t.apply(p)
        keys = rng.derive_keys(seed, _S_PSF_SIM, stack_id, i,
                               np.arange(npix))
        z = rng.normals(keys[:, None, None], counters[None, :, :])
        u = z * sigma
        pts = t.apply((p[:, None, :] + u).reshape(-1, 3))
        vals = sample_volume(vol, pts).reshape(npix, k_sim)
        mean = vals.mean(axis=1, dtype=np.float64)
        logb = bias_log_field(coeffs, half, offset, centers)
        pix = scales[i] * np.exp(logb) * mean
        if noise_sigma > 0:
            noise = rng.normals(rng.derive_key(seed, _S_NOISE, stack_id, i),
                                np.arange(npix, dtype=np.uint64))
            pix = pix + noise_sigma * noise
        data[:, :, i] = pix.reshape(n1, n2).astype(np.float32)

    stack = Stack(data, mask, (inplane, inplane, thickness), gap,
                  transforms, scales)
    truth = {
        "orientation": orientation,
        "bias_coeffs": [float(c) for c in coeffs],
        "bias_half_extent": [float(h) for h in half],
        "bias_offset": float(offset),
        "scales": [float(s) for s in scales],
        "noise_sigma": float(noise_sigma),
        "motion": None if motion is None else
            {"trans_rate": motion.trans_rate, "rot_rate": motion.rot_rate,
             "interval": motion.interval},
    }
    return stack, truth


_ORIENT_CYCLE = ("axial", "coronal", "sagittal")


def simulate_bundle(vol: Volume, n_stacks: int = 3, inplane: float = 0.8,
                    thickness: float = 2.4, gap: float = 0.0,
                    motion: MotionSpec | None = None, bias_scale: float = 0.0,
                    noise_sigma: float = 0.0, scale_sigma: float = 0.0,
                    k_sim: int = 256, seed: int = 0):
    """Orthogonal stacks cycling axial/coronal/sagittal orientations."""
    stacks, truths = [], []
    for s in range(n_stacks):
        st, tr = simulate_stack(
            vol, _ORIENT_CYCLE[s % 3], inplane, thickness, gap, motion,
            bias_scale, noise_sigma, scale_sigma, k_sim, seed, stack_id=s)
        stacks.append(st)
        truths.append(tr)
    return stacks, {"stacks": truths, "seed": int(seed)}


def perturb_transforms(transforms: list[RigidTransform], trans_sigma: float,
                       rot_sigma_deg: float, key) -> list[RigidTransform]:
    """Independent Gaussian perturbations per slice, composed in world."""
    gen = rng.generator(key)
    out = []
    rot_sigma = np.deg2rad(rot_sigma_deg)
    for t in transforms:
        d_t = gen.normal(0.0, trans_sigma, 3) if trans_sigma > 0 else np.zeros(3)
        d_r = gen.normal(0.0, rot_sigma, 3) if rot_sigma_deg > 0 else np.zeros(3)
        out.append(RigidTransform.from_axis_angle(d_r, d_t).compose(t))
    return out


def _rot_to_quat(r: np.ndarray) -> np.ndarray:
    from .geometry import _mat_to_quat
    return _mat_to_quat(r)
