"""Deterministic counter-based random streams.

Monte-Carlo draws here must be reproducible per logical site (seed, step,
slice, pixel, sample) no matter how the work is batched or re-ordered, so
stateful generators are out.  Instead every value is a pure function of a
64-bit key and a counter: splitmix64 output at ``key + (counter+1)*GOLDEN``.
Keys are folded from integer fields with the same mixer.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

# uint64 arithmetic is expected to wrap
_ERRSTATE = {"over": "ignore"}


def _mix(z):
    """splitmix64 finalizer; z is a uint64 scalar or ndarray."""
    with np.errstate(**_ERRSTATE):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def derive_key(*fields) -> np.uint64:
    """Fold integer fields into a stream key.  Order matters."""
    k = np.uint64(0x5851F42D4C957F2D)
    with np.errstate(**_ERRSTATE):
        for f in fields:
            k = _mix(k ^ (np.uint64(int(f) & _MASK) + _GOLDEN))
    return k


def derive_keys(*fields):
    """Vectorized derive_key: fields may be integer ndarrays (broadcast)."""
    k = np.uint64(0x5851F42D4C957F2D)
    with np.errstate(**_ERRSTATE):
        for f in fields:
            fa = np.asarray(f)
            if fa.dtype.kind not in "iu":
                fa = np.asarray(int(f), dtype=np.uint64)
            k = _mix(k ^ (fa.astype(np.uint64) + _GOLDEN))
    return k


def raw(key, counters):
    """uint64 stream values at the given counters (any-shape uint64 array)."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(**_ERRSTATE):
        return _mix(np.uint64(key) + (c + np.uint64(1)) * _GOLDEN)


def uniforms(key, counters):
    """float64 uniforms in [0, 1) at the given counters."""
    return (raw(key, counters) >> np.uint64(11)) * (2.0 ** -53)


def normals(key, counters):
    """Standard normals, one per counter, via Box-Muller.

    Consumes the doubled counter space (2c, 2c+1) internally so callers can
    treat counters as dense indices.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(**_ERRSTATE):
        u1 = uniforms(key, c * np.uint64(2))
        u2 = uniforms(key, c * np.uint64(2) + np.uint64(1))
    # 1 - u1 lies in (0, 1], keeping the log finite
    r = np.sqrt(-2.0 * np.log1p(-u1))
    return r * np.cos(2.0 * np.pi * u2)


def normal_array(key, shape, offset=0):
    """Array of standard normals with dense counters starting at offset."""
    n = int(np.prod(shape)) if shape else 1
    c = np.arange(offset, offset + n, dtype=np.uint64)
    return normals(key, c).reshape(shape)


def generator(key) -> np.random.Generator:
    """numpy Generator seeded from a stream key, for shuffles and init."""
    return np.random.Generator(np.random.Philox(key=int(np.uint64(key))))
