"""Multiresolution hash-grid feature encoding on the unit cube.

Each level stores a feature table; a query point is trilinearly interpolated
from the 8 surrounding vertices of that level's lattice.  Levels whose dense
vertex grid fits in the table are addressed directly (injective); finer
levels hash vertex coordinates with the fixed prime set (1, 2654435761,
805459861) XOR-folded and masked to the table size.  The first `low_levels`
levels double as the coarse positional code consumed by the bias head, so
the concatenated feature vector keeps its low-frequency prefix property.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import rng
from .autodiff import Var, _acc

_P2 = np.uint64(2654435761)
_P3 = np.uint64(805459861)


@dataclass(frozen=True)
class HashGridSpec:
    levels: int = 16
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.382
    table_exp: int = 19
    low_levels: int = 4
    init_scale: float = 1e-4

    def __post_init__(self):
        if not (1 <= self.low_levels <= self.levels):
            raise ValueError("low_levels must lie in [1, levels]")
        if self.base_resolution < 1 or self.features < 1:
            raise ValueError("bad grid parameters")

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth ** level))

    def resolutions(self) -> np.ndarray:
        return np.array([self.resolution(l) for l in range(self.levels)],
                        dtype=np.int64)

    def level_sizes(self) -> np.ndarray:
        cap = 1 << self.table_exp
        sizes = []
        for r in self.resolutions():
            dense = (r + 1) ** 3
            sizes.append(dense if dense <= cap else cap)
        return np.array(sizes, dtype=np.int64)

    def level_offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.level_sizes())[:-1]))

    @property
    def total_rows(self) -> int:
        return int(self.level_sizes().sum())

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


def init_tables(spec: HashGridSpec, key) -> np.ndarray:
    gen = rng.generator(key)
    return gen.uniform(-spec.init_scale, spec.init_scale,
                       size=(spec.total_rows, spec.features)).astype(np.float32)


def hash_index(spec: HashGridSpec, level: int, vx: int, vy: int, vz: int) -> int:
    """Row index of a lattice vertex inside its level's table."""
    r = spec.resolution(level)
    size = int(spec.level_sizes()[level])
    if size == (r + 1) ** 3:
        return (vx * (r + 1) + vy) * (r + 1) + vz
    h = (np.uint64(vx) ^ (np.uint64(vy) * _P2) ^ (np.uint64(vz) * _P3))
    return int(h & np.uint64(size - 1))


@njit(cache=True, fastmath=True)
def _encode_fwd(coords, tables, res, offsets, sizes, nfeat, out):
    npts = coords.shape[0]
    nlev = res.shape[0]
    for l in range(nlev):
        r = res[l]
        base = offsets[l]
        size = sizes[l]
        dense = size == (r + 1) ** 3
        mask = np.uint64(size - 1)
        for n in range(npts):
            fx = coords[n, 0] * r
            fy = coords[n, 1] * r
            fz = coords[n, 2] * r
            x0 = int(fx)
            y0 = int(fy)
            z0 = int(fz)
            if x0 > r - 1:
                x0 = r - 1
            if y0 > r - 1:
                y0 = r - 1
            if z0 > r - 1:
                z0 = r - 1
            tx = fx - x0
            ty = fy - y0
            tz = fz - z0
            for c in range(8):
                cx = x0 + (c & 1)
                cy = y0 + ((c >> 1) & 1)
                cz = z0 + ((c >> 2) & 1)
                wx = tx if (c & 1) else 1.0 - tx
                wy = ty if ((c >> 1) & 1) else 1.0 - ty
                wz = tz if ((c >> 2) & 1) else 1.0 - tz
                w = wx * wy * wz
                if dense:
                    h = (cx * (r + 1) + cy) * (r + 1) + cz
                else:
                    h = np.int64((np.uint64(cx) ^ (np.uint64(cy) * _P2)
                                  ^ (np.uint64(cz) * _P3)) & mask)
                row = base + h
                for f in range(nfeat):
                    out[n, l * nfeat + f] += w * tables[row, f]


@njit(cache=True, fastmath=True)
def _encode_bwd(coords, tables, gout, res, offsets, sizes, nfeat,
                gtab, gcoords, want_coords):
    npts = coords.shape[0]
    nlev = res.shape[0]
    for l in range(nlev):
        r = res[l]
        base = offsets[l]
        size = sizes[l]
        dense = size == (r + 1) ** 3
        mask = np.uint64(size - 1)
        for n in range(npts):
            fx = coords[n, 0] * r
            fy = coords[n, 1] * r
            fz = coords[n, 2] * r
            x0 = int(fx)
            y0 = int(fy)
            z0 = int(fz)
            if x0 > r - 1:
                x0 = r - 1
            if y0 > r - 1:
                y0 = r - 1
            if z0 > r - 1:
                z0 = r - 1
            tx = fx - x0
            ty = fy - y0
            tz = fz - z0
            for c in range(8):
                cx = x0 + (c & 1)
                cy = y0 + ((c >> 1) & 1)
                cz = z0 + ((c >> 2) & 1)
                sx = 1.0 if (c & 1) else -1.0
                sy = 1.0 if ((c >> 1) & 1) else -1.0
                sz = 1.0 if ((c >> 2) & 1) else -1.0
                wx = tx if (c & 1) else 1.0 - tx
                wy = ty if ((c >> 1) & 1) else 1.0 - ty
                wz = tz if ((c >> 2) & 1) else 1.0 - tz
                w = wx * wy * wz
                if dense:
                    h = (cx * (r + 1) + cy) * (r + 1) + cz
                else:
                    h = np.int64((np.uint64(cx) ^ (np.uint64(cy) * _P2)
                                  ^ (np.uint64(cz) * _P3)) & mask)
                row = base + h
                if want_coords:
                    dot = 0.0
                    for f in range(nfeat):
                        g = gout[n, l * nfeat + f]
                        gtab[row, f] += w * g
                        dot += g * tables[row, f]
                    gcoords[n, 0] += dot * sx * wy * wz * r
                    gcoords[n, 1] += dot * wx * sy * wz * r
                    gcoords[n, 2] += dot * wx * wy * sz * r
                else:
                    for f in range(nfeat):
                        gtab[row, f] += w * gout[n, l * nfeat + f]


def _level_arrays(spec: HashGridSpec, levels: int):
    return (spec.resolutions()[:levels], spec.level_offsets()[:levels],
            spec.level_sizes()[:levels])


def encode_op(tables: Var, coords: np.ndarray, spec: HashGridSpec,
              coords_var: Var | None = None, levels: int | None = None) -> Var:
    """Graph node for the encoding; coords must already lie in [0,1]^3.

    When coords_var is given (its .data must be coords) the op also routes
    gradients to the coordinates, which is what transform refinement needs.
    """
    nlev = spec.levels if levels is None else levels
    res, offs, sizes = _level_arrays(spec, nlev)
    coords = np.ascontiguousarray(coords, dtype=np.float32)
    out = np.zeros((coords.shape[0], nlev * spec.features), dtype=np.float32)
    _encode_fwd(coords, tables.data, res, offs, sizes, spec.features, out)
    parents = (tables,) if coords_var is None else (tables, coords_var)
    node = Var(out, parents)

    def bwd(g):
        gtab = np.zeros_like(tables.data)
        want = coords_var is not None
        gc = np.zeros(coords.shape, dtype=np.float32) if want else \
            np.zeros((0, 3), dtype=np.float32)
        _encode_bwd(coords, tables.data, np.ascontiguousarray(g, dtype=np.float32),
                    res, offs, sizes, spec.features, gtab, gc, want)
        _acc(tables, gtab)
        if want:
            _acc(coords_var, gc)

    node.bwd = bwd
    return node


def _validate(coords: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float32).reshape(-1, 3)
    if coords.size and (coords.min() < -tol or coords.max() > 1 + tol):
        raise ValueError("encode: coordinates outside the unit cube")
    return np.clip(coords, 0.0, 1.0)


def encode(tables, coords, spec: HashGridSpec) -> np.ndarray:
    """Validating ndarray-in, ndarray-out encoding (full level range)."""
    coords = _validate(coords)
    tables = tables.data if isinstance(tables, Var) else tables
    out = np.zeros((coords.shape[0], spec.out_dim), dtype=np.float32)
    res, offs, sizes = _level_arrays(spec, spec.levels)
    _encode_fwd(np.ascontiguousarray(coords), tables, res, offs, sizes,
                spec.features, out)
    return out


def low_level_encode(tables, coords, spec: HashGridSpec) -> np.ndarray:
    """Only the first low_levels levels (the coarse positional code)."""
    coords = _validate(coords)
    tables = tables.data if isinstance(tables, Var) else tables
    nlev = spec.low_levels
    out = np.zeros((coords.shape[0], nlev * spec.features), dtype=np.float32)
    res, offs, sizes = _level_arrays(spec, nlev)
    _encode_fwd(np.ascontiguousarray(coords), tables, res, offs, sizes,
                spec.features, out)
    return out
