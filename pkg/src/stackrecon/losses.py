"""Training objective: heteroscedastic data term plus two regularizers.

The data term is the Gaussian negative log-likelihood of each observed
pixel under the rendered mean and variance, with the squared error scaled
by a fixed weight.  The field regularizer penalizes finite-difference
slopes between paired PSF sample points through an odd mix of linear,
quadratic, and Huber terms; the bias regularizer pins the grand mean of
the log bias to zero, fixing the bias/scale gauge.
"""
from __future__ import annotations

import numpy as np

from .autodiff import (Var, as_var, add, sub, mul, div, square, absolute,
                       huber, log, vsum, vmean, slice_cols)

DIST_FLOOR = 1e-9


def loss_slice(ibar, var, intensity, lam: float) -> Var:
    """Mean of lam * (I - Ibar)^2 / (2 sigma^2) + log(sigma^2) / 2."""
    ibar, var = as_var(ibar), as_var(var)
    if np.any(var.data <= 0):
        raise ValueError("non-positive pixel variance")
    target = np.asarray(intensity, dtype=np.float64)
    diff = sub(target, ibar)
    nll = add(mul(div(square(diff), mul(var, 2.0)), float(lam)),
              mul(log(var), 0.5))
    return vmean(nll)


def pair_distances(offsets: np.ndarray) -> np.ndarray:
    """Distances between paired PSF samples (k, k + K/2).

    Offsets live in the slice frame; rigid transforms preserve distances,
    so these equal the world-space pair distances exactly.
    """
    k = offsets.shape[1]
    if k < 2 or k % 2:
        raise ValueError("need an even number of samples >= 2")
    half = k // 2
    d = offsets[:, :half, :] - offsets[:, half:, :]
    return np.linalg.norm(d.astype(np.float64), axis=2)


def loss_regularization(v, offsets: np.ndarray, delta: float = 1.0,
                        counters: dict | None = None) -> Var:
    """Slope penalty sum(s + s^2 + huber(s)) * 2 / (K |B|).

    s is |V(x_k) - V(x_l)| over the pair distance; degenerate pairs (below
    DIST_FLOOR apart) are skipped by zeroing their weight and counted into
    counters["skipped_pairs"] when a counter dict is given.
    """
    v = as_var(v)
    b, k = v.data.shape
    half = k // 2
    dist = pair_distances(offsets)
    w = np.where(dist > DIST_FLOOR, 1.0 / np.maximum(dist, DIST_FLOOR), 0.0)
    if counters is not None:
        skipped = int(np.count_nonzero(dist <= DIST_FLOOR))
        counters["skipped_pairs"] = counters.get("skipped_pairs", 0) + skipped
    diff = absolute(sub(slice_cols(v, 0, half), slice_cols(v, half, k)))
    s = mul(diff, w.astype(np.float32))
    terms = add(add(s, square(s)), huber(s, delta))
    return mul(vsum(terms), 2.0 / (k * b))


def loss_bias(logb) -> Var:
    """Square of the grand mean of log bias over the batch samples."""
    return square(vmean(as_var(logb)))


def loss_total(l_slice, l_reg, l_bias, lambda_v: float, lambda_b: float) -> Var:
    for name, part in (("slice", l_slice), ("regularization", l_reg),
                       ("bias", l_bias)):
        if not np.all(np.isfinite(as_var(part).data)):
            raise ValueError(f"non-finite {name} loss term")
    return add(l_slice, add(mul(l_reg, float(lambda_v)),
                            mul(l_bias, float(lambda_b))))
