"""Classical scattered-data interpolation reconstruction.

Every masked pixel is splatted into the target grid with an anisotropic
Gaussian whose covariance is the acquisition blur in the pixel's own slice
frame, and the volume is the weight-normalized average.  No model, no
bias or motion correction: this is the reference a learned reconstruction
has to beat.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .acquisition import build_pixel_table
from .core import Stack, Volume


@njit(cache=True, fastmath=True)
def _splat(world, values, sg, srot, sstack, cov, origin, spacing,
           vsum, wsum, cutoff):
    nx, ny, nz = vsum.shape
    c2 = cutoff * cutoff
    for m in range(world.shape[0]):
        s = sg[m]
        st = sstack[s]
        vx = cov[st, 0]
        vy = cov[st, 1]
        vz = cov[st, 2]
        sx = np.sqrt(vx)
        sy = np.sqrt(vy)
        sz = np.sqrt(vz)
        # conservative axis-aligned box around the rotated cutoff ellipsoid
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        for a in range(3):
            half = cutoff * (abs(srot[s, a, 0]) * sx
                             + abs(srot[s, a, 1]) * sy
                             + abs(srot[s, a, 2]) * sz)
            lo[a] = np.int64(np.ceil((world[m, a] - half - origin[a])
                                     / spacing[a]))
            hi[a] = np.int64(np.floor((world[m, a] + half - origin[a])
                                      / spacing[a]))
            if lo[a] < 0:
                lo[a] = 0
        if hi[0] > nx - 1:
            hi[0] = nx - 1
        if hi[1] > ny - 1:
            hi[1] = ny - 1
        if hi[2] > nz - 1:
            hi[2] = nz - 1
        val = values[m]
        for i in range(lo[0], hi[0] + 1):
            dx = origin[0] + i * spacing[0] - world[m, 0]
            for j in range(lo[1], hi[1] + 1):
                dy = origin[1] + j * spacing[1] - world[m, 1]
                for k in range(lo[2], hi[2] + 1):
                    dz = origin[2] + k * spacing[2] - world[m, 2]
                    # offset in the slice frame: d = R^T (y - p)
                    d0 = srot[s, 0, 0] * dx + srot[s, 1, 0] * dy \
                        + srot[s, 2, 0] * dz
                    d1 = srot[s, 0, 1] * dx + srot[s, 1, 1] * dy \
                        + srot[s, 2, 1] * dz
                    d2 = srot[s, 0, 2] * dx + srot[s, 1, 2] * dy \
                        + srot[s, 2, 2] * dz
                    q = d0 * d0 / vx + d1 * d1 / vy + d2 * d2 / vz
                    if q > c2:
                        continue
                    w = np.exp(-0.5 * q)
                    vsum[i, j, k] += w * val
                    wsum[i, j, k] += w


def splat_volume(stacks: list[Stack], shape, spacing, origin,
                 cutoff: float = 2.5) -> Volume:
    """Reconstruct onto the given grid by Gaussian splatting.

    cutoff is the support radius in standard deviations.  Voxels no pixel
    reaches stay 0.
    """
    table = build_pixel_table(stacks)
    sg = table.slice_global
    world = (np.einsum("mij,mj->mi", table.slice_rot[sg], table.pos)
             + table.slice_trans[sg])
    shape = tuple(int(v) for v in np.broadcast_to(shape, (3,)))
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64),
                              (3,)).copy()
    origin = np.asarray(origin, dtype=np.float64).reshape(3).copy()
    vsum = np.zeros(shape, dtype=np.float64)
    wsum = np.zeros(shape, dtype=np.float64)
    _splat(np.ascontiguousarray(world), table.intensity.astype(np.float64),
           sg.astype(np.int64), np.ascontiguousarray(table.slice_rot),
           table.slice_stack.astype(np.int64),
           np.ascontiguousarray(table.cov_diag), origin, spacing,
           vsum, wsum, float(cutoff))
    out = np.where(wsum > 1e-12, vsum / np.maximum(wsum, 1e-12), 0.0)
    return Volume(out.astype(np.float32), spacing, origin)


def splat_like(stacks: list[Stack], ref: Volume, cutoff: float = 2.5
               ) -> Volume:
    """Splat reconstruction on the grid of an existing volume."""
    return splat_volume(stacks, ref.shape, ref.spacing, ref.origin, cutoff)
