"""Shared data types: volumes on regular grids and slice stacks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit


@dataclass
class Volume:
    """Scalar volume on a regular grid.

    data is indexed [x, y, z]; origin is the world position of the center of
    voxel (0, 0, 0); direction columns are the world directions of the grid
    axes (identity for everything this package produces itself).
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)

    @property
    def shape(self):
        return self.data.shape

    @property
    def affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = self.direction @ np.diag(self.spacing)
        a[:3, 3] = self.origin
        return a

    def world_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        """Map world points (N, 3) to fractional voxel indices."""
        rel = (np.asarray(pts, dtype=np.float64) - self.origin) @ np.linalg.inv(
            self.direction).T
        return rel / self.spacing

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return idx * self.spacing @ self.direction.T + self.origin


def centered_volume(data: np.ndarray, spacing) -> Volume:
    """Volume whose grid is centered on the world origin."""
    data = np.asarray(data, dtype=np.float32)
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    shape = np.array(data.shape, dtype=np.float64)
    origin = -(shape - 1) / 2 * spacing
    return Volume(data, spacing, origin)


@dataclass
class Stack:
    """One acquired multi-slice stack.

    data/mask are indexed [in-plane-1, in-plane-2, slice].  spacing is
    (r1, r2, r3) with r3 the slice thickness; gap is the inter-slice gap.
    transforms map slice-frame coordinates (in-plane position, 0) of slice i
    to world coordinates, so the through-plane placement of each slice lives
    in its transform.  scales are the per-slice multiplicative factors used
    when the stack was simulated (all ones for real data).
    """

    data: np.ndarray
    mask: np.ndarray
    spacing: np.ndarray
    gap: float
    transforms: list
    scales: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        if self.data.shape != self.mask.shape:
            raise ValueError("stack data and mask shapes differ")
        if len(self.transforms) != self.data.shape[2]:
            raise ValueError("one transform per slice required")
        if self.scales is None:
            self.scales = np.ones(self.data.shape[2], dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)

    @property
    def n_slices(self) -> int:
        return self.data.shape[2]

    def inplane_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Slice-frame in-plane coordinates of pixel centers (mm)."""
        n1, n2 = self.data.shape[:2]
        a = (np.arange(n1) - (n1 - 1) / 2) * self.spacing[0]
        b = (np.arange(n2) - (n2 - 1) / 2) * self.spacing[1]
        return a, b


@njit(cache=True, fastmath=True)
def _trilinear(vol, pts, out):
    nx, ny, nz = vol.shape
    for n in range(pts.shape[0]):
        fx = pts[n, 0]
        fy = pts[n, 1]
        fz = pts[n, 2]
        if (fx < 0.0 or fx > nx - 1 or fy < 0.0 or fy > ny - 1
                or fz < 0.0 or fz > nz - 1):
            out[n] = 0.0
            continue
        x0 = int(fx)
        y0 = int(fy)
        z0 = int(fz)
        if x0 > nx - 2:
            x0 = nx - 2
        if y0 > ny - 2:
            y0 = ny - 2
        if z0 > nz - 2:
            z0 = nz - 2
        tx = fx - x0
        ty = fy - y0
        tz = fz - z0
        acc = 0.0
        for c in range(8):
            cx = x0 + (c & 1)
            cy = y0 + ((c >> 1) & 1)
            cz = z0 + ((c >> 2) & 1)
            wx = tx if (c & 1) else 1.0 - tx
            wy = ty if ((c >> 1) & 1) else 1.0 - ty
            wz = tz if ((c >> 2) & 1) else 1.0 - tz
            acc += wx * wy * wz * vol[cx, cy, cz]
        out[n] = acc


def sample_volume(vol: Volume, world_pts: np.ndarray) -> np.ndarray:
    """Trilinear samples of a volume at world points; 0 outside the grid."""
    idx = vol.world_to_voxel(world_pts).astype(np.float32)
    out = np.empty(idx.shape[0], dtype=np.float32)
    _trilinear(vol.data, np.ascontiguousarray(idx), out)
    return out
