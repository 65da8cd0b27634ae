"""Slice acquisition forward model.

Each observed pixel is modeled as a per-slice scale times the PSF-weighted
integral of bias x intensity over the field, estimated by importance
sampling: offsets are drawn from the PSF itself, so the mean estimate is
the plain average of bias x intensity over the sampled points, and the
pixel noise variance estimate keeps one extra factor of the PSF density.
Offsets landing outside the stack's mask are rejected and redrawn up to 8
times, then kept (counted) so the estimator never loses samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import rng
from .autodiff import (Var, add, mul, div, exp, square, vmean, reshape,
                       gather_rows, clamp, _acc)
from .core import Stack, Volume
from .field import FieldModel
from .geometry import psf_covariance, RigidTransform

# stream tags
_S_PSF = 101
_S_BATCH = 102

_MAX_ATTEMPTS = 8


@dataclass
class PixelTable:
    """Flattened view of every masked pixel across all stacks."""

    pos: np.ndarray          # (M, 3) slice-frame coords, third component 0
    intensity: np.ndarray    # (M,)
    slice_global: np.ndarray  # (M,) index into per-slice arrays
    pixel_ij: np.ndarray     # (M, 2) integer in-plane indices
    # per-slice arrays, concatenated over stacks
    slice_rot: np.ndarray    # (S, 3, 3)
    slice_trans: np.ndarray  # (S, 3)
    slice_stack: np.ndarray  # (S,) stack id per slice
    slice_local: np.ndarray  # (S,) slice index within its stack
    slice_center: np.ndarray  # (S, 3) world position of slice origin
    # per-stack arrays
    cov_diag: np.ndarray     # (n_stacks, 3) PSF variances
    step3: np.ndarray        # (n_stacks,) through-plane pitch r3 + gap
    inplane: np.ndarray      # (n_stacks, 2) spacings r1, r2
    dims: np.ndarray         # (n_stacks, 3) stack array dims
    mask_flat: np.ndarray    # concatenated uint8 masks
    mask_offset: np.ndarray  # (n_stacks,) offsets into mask_flat
    domain_lo: np.ndarray
    domain_hi: np.ndarray
    n_slices: int = 0

    @property
    def n_pixels(self) -> int:
        return self.pos.shape[0]


def build_pixel_table(stacks: list[Stack], expand: float = 0.05) -> PixelTable:
    pos, inten, sl_glob, pix_ij = [], [], [], []
    rot, trans, sl_stack, sl_local, centers = [], [], [], [], []
    cov, step3, inpl, dims, masks, moff = [], [], [], [], [], []
    world_min = np.full(3, np.inf)
    world_max = np.full(3, -np.inf)
    s_base = 0
    m_base = 0
    for sid, st in enumerate(stacks):
        a, b = st.inplane_coords()
        aa, bb = np.meshgrid(a, b, indexing="ij")
        cov.append(np.diag(psf_covariance(*st.spacing)))
        step3.append(st.spacing[2] + st.gap)
        inpl.append(st.spacing[:2])
        dims.append(st.data.shape)
        masks.append(st.mask.astype(np.uint8).ravel())
        moff.append(m_base)
        m_base += st.mask.size
        for i in range(st.n_slices):
            t = st.transforms[i]
            rot.append(t.matrix3)
            trans.append(t.t)
            sl_stack.append(sid)
            sl_local.append(i)
            centers.append(t.t.copy())
            m = st.mask[:, :, i]
            if not m.any():
                continue
            ai, bi = np.nonzero(m)
            p = np.zeros((ai.size, 3), dtype=np.float64)
            p[:, 0] = aa[ai, bi]
            p[:, 1] = bb[ai, bi]
            pos.append(p)
            inten.append(st.data[ai, bi, i])
            sl_glob.append(np.full(ai.size, s_base + i, dtype=np.int64))
            pix_ij.append(np.stack([ai, bi], axis=1).astype(np.int32))
            w = t.apply(p)
            world_min = np.minimum(world_min, w.min(axis=0))
            world_max = np.maximum(world_max, w.max(axis=0))
        s_base += st.n_slices
    if not pos:
        raise ValueError("no masked pixels in any stack")
    ext = world_max - world_min
    # pad at least to PSF reach so thin or single-slice geometry still
    # yields a usable (non-degenerate) field domain
    pad = np.maximum(expand * ext, 2.0 * np.sqrt(np.max(cov)))
    return PixelTable(
        pos=np.concatenate(pos),
        intensity=np.concatenate(inten).astype(np.float32),
        slice_global=np.concatenate(sl_glob),
        pixel_ij=np.concatenate(pix_ij),
        slice_rot=np.stack(rot),
        slice_trans=np.stack(trans),
        slice_stack=np.array(sl_stack, dtype=np.int64),
        slice_local=np.array(sl_local, dtype=np.int64),
        slice_center=np.stack(centers),
        cov_diag=np.stack(cov),
        step3=np.array(step3),
        inplane=np.stack(inpl),
        dims=np.array(dims, dtype=np.int64),
        mask_flat=np.concatenate(masks),
        mask_offset=np.array(moff, dtype=np.int64),
        domain_lo=world_min - pad,
        domain_hi=world_max + pad,
        n_slices=s_base,
    )


def sample_batch(table: PixelTable, batch: int, key) -> np.ndarray:
    """batch distinct pixel indices, deterministic per key."""
    if batch > table.n_pixels:
        raise ValueError(f"batch {batch} exceeds pixel count {table.n_pixels}")
    return rng.generator(key).choice(table.n_pixels, size=batch, replace=False)


def _psf_normals(keys: np.ndarray, attempt: int, k: int) -> np.ndarray:
    """(B, K, 3) standard normals, counters disjoint per attempt."""
    c = ((attempt * k + np.arange(k))[:, None] * 3
         + np.arange(3)[None, :]).astype(np.uint64)
    return rng.normals(keys[:, None, None], c[None, :, :])


def _mask_lookup(table: PixelTable, s_local, pix_ij, u, stack_of_pix):
    """Whether slice-frame offsets u (B, K, 3) stay inside the stack mask.

    The 3D mask region is the per-slice 2D mask extruded along the slice
    pitch: the in-plane offset picks the nearest pixel and the through-plane
    offset the nearest slice of the same stack.
    """
    r12 = table.inplane[stack_of_pix]          # (B, 2)
    d3 = table.step3[stack_of_pix]             # (B,)
    dims = table.dims[stack_of_pix]            # (B, 3)
    a = np.rint(pix_ij[:, 0, None] + u[:, :, 0] / r12[:, 0, None]).astype(np.int64)
    b = np.rint(pix_ij[:, 1, None] + u[:, :, 1] / r12[:, 1, None]).astype(np.int64)
    s = np.rint(s_local[:, None] + u[:, :, 2] / d3[:, None]).astype(np.int64)
    n1 = dims[:, 0, None]
    n2 = dims[:, 1, None]
    n3 = dims[:, 2, None]
    inside = ((a >= 0) & (a < n1) & (b >= 0) & (b < n2)
              & (s >= 0) & (s < n3))
    flat = (a * n2 + b) * n3 + s
    flat = np.where(inside, flat, 0)
    off = table.mask_offset[stack_of_pix][:, None]
    hit = table.mask_flat[off + flat].astype(bool)
    return inside & hit


def draw_offsets(table: PixelTable, idx: np.ndarray, k: int, seed: int,
                 step: int):
    """PSF offsets with mask rejection; returns (offsets, kept_outside)."""
    sg = table.slice_global[idx]
    stack_of_pix = table.slice_stack[sg]
    sigma = np.sqrt(table.cov_diag[stack_of_pix])     # (B, 3)
    keys = rng.derive_keys(seed, _S_PSF, step, idx)
    u = _psf_normals(keys, 0, k) * sigma[:, None, :]
    ok = _mask_lookup(table, table.slice_local[sg], table.pixel_ij[idx],
                      u, stack_of_pix)
    for attempt in range(1, _MAX_ATTEMPTS):
        if ok.all():
            break
        fresh = _psf_normals(keys, attempt, k) * sigma[:, None, :]
        u = np.where(ok[:, :, None], u, fresh)
        ok = _mask_lookup(table, table.slice_local[sg], table.pixel_ij[idx],
                          u, stack_of_pix)
    kept_outside = int(np.count_nonzero(~ok))
    return u, kept_outside


def _gaussian_diag(u: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Density of N(0, diag(var)) at u; var broadcast per leading dim."""
    quad = np.sum(u * u / var[:, None, :], axis=2)
    norm = 1.0 / (np.power(2 * np.pi, 1.5) * np.sqrt(np.prod(var, axis=1)))
    return norm[:, None] * np.exp(-0.5 * quad)


def _delta_world_op(table: PixelTable, sg: np.ndarray, base_pts: np.ndarray,
                    rot_leaf: Var, trans_leaf: Var) -> Var:
    """World points corrected by per-slice delta transforms.

    y = R(w_s) (y0 - c_s) + c_s + tau_s, rotating about each slice's own
    center so rotation and translation stay decoupled.  Backward uses the
    closed-form rotation-vector Jacobian d(R(w) x)/dw = -R(w) [x]_x Jr(w).
    """
    from scipy.spatial.transform import Rotation

    omega = rot_leaf.data.astype(np.float64)
    tau = trans_leaf.data.astype(np.float64)
    n_slices = omega.shape[0]
    rots = Rotation.from_rotvec(omega).as_matrix()       # (S, 3, 3)
    centers = table.slice_center                          # (S, 3)
    x = base_pts - centers[sg][:, None, :]                # (B, K, 3)
    r_g = rots[sg]                                        # (B, 3, 3)
    y = (np.einsum("bij,bkj->bki", r_g, x)
         + (centers[sg] + tau[sg])[:, None, :])
    out = Var(y.astype(np.float32), (rot_leaf, trans_leaf))

    def bwd(g):
        g = g.astype(np.float64)
        b = g.shape[0]
        gt = np.zeros((n_slices, 3))
        gsum = g.sum(axis=1)                              # (B, 3)
        np.add.at(gt, sg, gsum)
        # d(R x)/dw = -R [x]_x Jr(w); accumulate w-grads per slice
        gw = np.zeros((n_slices, 3))
        # [x]_x applied to Jr columns, contracted with R^T g
        rtg = np.einsum("bji,bkj->bki", r_g, g)           # R^T g, (B, K, 3)
        cross = np.cross(x, rtg)                          # [x]_x^T R^T g
        csum = np.empty((b, 3))
        np.sum(cross, axis=1, out=csum)
        jr = _rotvec_right_jacobian(omega)               # (S, 3, 3)
        contrib = np.einsum("bji,bj->bi", jr[sg], csum)
        np.add.at(gw, sg, contrib)
        _acc(rot_leaf, gw.astype(np.float32))
        _acc(trans_leaf, gt.astype(np.float32))

    out.bwd = bwd
    return out


def _rotvec_right_jacobian(omega: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3) for rotation vectors (S, 3)."""
    s = omega.shape[0]
    theta = np.linalg.norm(omega, axis=1)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta ** 2 / 24, (1 - np.cos(th)) / th ** 2)
    b = np.where(small, 1.0 / 6 - theta ** 2 / 120, (th - np.sin(th)) / th ** 3)
    wx = np.zeros((s, 3, 3))
    wx[:, 0, 1] = -omega[:, 2]
    wx[:, 0, 2] = omega[:, 1]
    wx[:, 1, 0] = omega[:, 2]
    wx[:, 1, 2] = -omega[:, 0]
    wx[:, 2, 0] = -omega[:, 1]
    wx[:, 2, 1] = omega[:, 0]
    return (np.eye(3)[None] - a[:, None, None] * wx
            + b[:, None, None] * (wx @ wx))


@dataclass
class RenderBatch:
    """Differentiable per-pixel quantities plus the sampling record."""

    ibar: Var                 # (B,) mean estimate
    var: Var                  # (B,) noise variance estimate
    v: Var                    # (B, K) field samples
    logb: Var                 # (B, K) log bias at samples
    offsets: np.ndarray       # (B, K, 3) slice-frame offsets
    points: np.ndarray        # (B, K, 3) world points
    intensity: np.ndarray     # (B,) observed values
    kept_outside: int = 0
    clamped: int = 0


def render_pixels(model: FieldModel, leaves: dict, table: PixelTable,
                  idx: np.ndarray, k: int, seed: int, step: int,
                  refine: bool = False) -> RenderBatch:
    """Estimate observed mean and variance for a batch of pixels.

    Keyed per (seed, step, pixel), so results for a pixel do not depend on
    what else shares the batch.
    """
    if k < 2 or k % 2:
        raise ValueError("psf sample count must be even and >= 2")
    b = idx.shape[0]
    sg = table.slice_global[idx]
    stack_of_pix = table.slice_stack[sg]
    u, kept_outside = draw_offsets(table, idx, k, seed, step)
    p = table.pos[idx][:, None, :] + u                    # slice frame
    base = (np.einsum("bij,bkj->bki", table.slice_rot[sg], p)
            + table.slice_trans[sg][:, None, :])          # (B, K, 3) world

    if refine:
        ypts = _delta_world_op(table, sg, base, leaves["delta_rot"],
                               leaves["delta_trans"])
        lo = model.domain_lo.astype(np.float32)
        scale = model.domain_scale.astype(np.float32)
        flat = reshape(ypts, (b * k, 3))
        unit_raw = mul(add(flat, -lo), scale)
        coords_var = clamp(unit_raw, 0.0, 1.0)
        coords = coords_var.data
        clamped = int(np.count_nonzero(coords != unit_raw.data))
    else:
        coords, clamped = model.normalize(base.reshape(-1, 3))
        coords_var = None

    sample_slice = np.repeat(sg, k)
    got = model.forward_samples(leaves, coords, sample_slice,
                                coords_var=coords_var,
                                heads=("V", "logB", "sigma2"))
    v_bk = reshape(got["V"], (b, k))
    logb_bk = reshape(got["logB"], (b, k))
    sig_bk = reshape(got["sigma2"], (b, k))
    for head in (v_bk, logb_bk, sig_bk):
        bad = ~np.isfinite(head.data)
        if bad.any():
            pix = int(idx[np.nonzero(bad.any(axis=1))[0][0]])
            ij = table.pixel_ij[pix]
            raise ValueError(
                f"non-finite model output at pixel {pix} "
                f"(slice {int(table.slice_global[pix])}, "
                f"ij {int(ij[0])},{int(ij[1])})")

    bias_bk = exp(logb_bk)
    scale_c = exp(gather_rows(leaves["logscale"], sg))    # (B,)
    g = _gaussian_diag(u, table.cov_diag[stack_of_pix]).astype(np.float32)

    ibar = mul(scale_c, vmean(mul(bias_bk, v_bk), axis=1))
    var = mul(square(scale_c),
              vmean(mul(Var(g), mul(square(bias_bk), sig_bk)), axis=1))
    return RenderBatch(ibar=ibar, var=var, v=v_bk, logb=logb_bk,
                       offsets=u, points=np.asarray(base, dtype=np.float64),
                       intensity=table.intensity[idx],
                       kept_outside=kept_outside, clamped=clamped)


def render_pixel(model: FieldModel, table: PixelTable, pixel: int, k: int,
                 seed: int, step: int = 0) -> RenderBatch:
    """Single-pixel convenience wrapper over render_pixels."""
    leaves = model.store.leaves()
    return render_pixels(model, leaves, table, np.array([pixel]), k,
                         seed, step)


def grid_from_box(lo, hi, spacing: float):
    """Cell-centered grid covering the box: (shape, spacing3, origin)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    n = np.maximum(1, np.rint(ext / spacing).astype(int))
    sp = np.full(3, float(spacing))
    center = (lo + hi) / 2
    origin = center - (n - 1) / 2 * sp
    return tuple(int(v) for v in n), sp, origin


def render_volume(model: FieldModel, shape, spacing, origin,
                  chunk: int = 262144, budget: int = 300_000_000,
                  features: bool = False):
    """Evaluate the field on a regular grid.

    Returns a Volume (and the Z feature grid when features=True).  Grids
    beyond the voxel budget are refused; render in chunks to a larger
    budget explicitly if that is really intended.
    """
    shape = tuple(int(v) for v in shape)
    total = int(np.prod(shape))
    if total > budget:
        raise ValueError(
            f"grid of {total} voxels exceeds the budget of {budget}; "
            "render a sub-grid or raise the budget")
    spacing = np.asarray(spacing, dtype=np.float64).reshape(-1)
    if spacing.size == 1:
        spacing = np.repeat(spacing, 3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    out = np.empty(total, dtype=np.float32)
    feat = np.empty((total, model.config.feat_dim), dtype=np.float32) \
        if features else None
    ny, nz = shape[1], shape[2]
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        flat = np.arange(start, stop)
        ij = np.empty((flat.size, 3), dtype=np.float64)
        ij[:, 0] = flat // (ny * nz)
        ij[:, 1] = (flat // nz) % ny
        ij[:, 2] = flat % nz
        world = origin + ij * spacing
        v, z, _ = model.eval_field(world)
        out[start:stop] = v
        if features:
            feat[start:stop] = z
    vol = Volume(out.reshape(shape), spacing, origin)
    if features:
        return vol, feat.reshape(shape + (model.config.feat_dim,))
    return vol
