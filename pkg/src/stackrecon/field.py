"""Implicit intensity field with per-slice bias, variance, and scale heads.

The scalar intensity V(y) is the softplus of the sum of two branches: a
small MLP on the normalized coordinates (smooth, low-frequency) and an MLP
on the hash-grid features (detail).  Both branches also emit a feature
vector Z(y), summed the same way, which conditions the variance head.  The
bias head sees only the coarse levels of the grid code plus a per-slice
embedding, so it can express smooth slice-specific modulation but not
anatomy; its output is exponentiated, keeping the bias positive.  All MLPs
have one hidden layer of 64 ReLU units.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import rng
from .autodiff import (Var, ParamStore, affine, relu, softplus, exp,
                       slice_cols, concat_cols, gather_rows, add)
from .encoding import HashGridSpec, init_tables, encode_op

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 16
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.382
    table_exp: int = 19
    low_levels: int = 4
    feat_dim: int = 15
    embed_dim: int = 16
    hidden: int = 64
    init_scale: float = 1e-4
    coord_branch: bool = True
    # raw output of the variance head at init; softplus(-5) ~ 7e-3 puts the
    # starting noise estimate near realistic acquisition noise instead of
    # softplus(0) ~ 0.7, which would leave the data term badly down-weighted
    # for the first chunk of training
    var_bias_init: float = -5.0

    def grid_spec(self) -> HashGridSpec:
        return HashGridSpec(self.levels, self.features, self.base_resolution,
                            self.growth, self.table_exp, self.low_levels,
                            self.init_scale)


def _init_mlp(store: ParamStore, name: str, n_in: int, n_hidden: int,
              n_out: int, key, trainable: bool = True, zero: bool = False):
    gen = rng.generator(key)

    def he(n_i, n_o):
        lim = np.sqrt(6.0 / n_i)
        return gen.uniform(-lim, lim, size=(n_i, n_o)).astype(np.float32)

    if zero:
        store.register(name + ".W1", np.zeros((n_in, n_hidden), np.float32), trainable)
        store.register(name + ".b1", np.zeros(n_hidden, np.float32), trainable)
        store.register(name + ".W2", np.zeros((n_hidden, n_out), np.float32), trainable)
        store.register(name + ".b2", np.zeros(n_out, np.float32), trainable)
    else:
        store.register(name + ".W1", he(n_in, n_hidden), trainable)
        store.register(name + ".b1", np.zeros(n_hidden, np.float32), trainable)
        store.register(name + ".W2", he(n_hidden, n_out), trainable)
        store.register(name + ".b2", np.zeros(n_out, np.float32), trainable)


def mlp2(leaves: dict, name: str, x: Var) -> Var:
    h = relu(affine(x, leaves[name + ".W1"], leaves[name + ".b1"]))
    return affine(h, leaves[name + ".W2"], leaves[name + ".b2"])


class FieldModel:
    """Field + heads over a world-space box mapped to the unit cube."""

    def __init__(self, n_slices: int, domain_lo, domain_hi,
                 config: FieldConfig = FieldConfig(), seed: int = 0):
        self.config = config
        self.n_slices = int(n_slices)
        self.domain_lo = np.asarray(domain_lo, dtype=np.float64).reshape(3)
        self.domain_hi = np.asarray(domain_hi, dtype=np.float64).reshape(3)
        if np.any(self.domain_hi <= self.domain_lo):
            raise ValueError("degenerate domain box")
        self.grid = config.grid_spec()
        self.seed = int(seed)

        c = config
        store = ParamStore()
        store.register("tables", init_tables(self.grid, rng.derive_key(seed, 1)))
        _init_mlp(store, "coord", 3, c.hidden, 1 + c.feat_dim,
                  rng.derive_key(seed, 2), trainable=c.coord_branch,
                  zero=not c.coord_branch)
        _init_mlp(store, "grid", self.grid.out_dim, c.hidden, 1 + c.feat_dim,
                  rng.derive_key(seed, 3))
        _init_mlp(store, "bias", c.low_levels * c.features + c.embed_dim,
                  c.hidden, 1, rng.derive_key(seed, 4))
        _init_mlp(store, "var", c.feat_dim + c.embed_dim, c.hidden, 1,
                  rng.derive_key(seed, 5))
        store["var.b2"].data[...] = c.var_bias_init
        embed = rng.generator(rng.derive_key(seed, 6)).normal(
            0.0, 0.1, size=(self.n_slices, c.embed_dim)).astype(np.float32)
        store.register("embed", embed)
        store.register("logscale", np.zeros(self.n_slices, np.float32))
        # transform refinement deltas; frozen unless the trainer enables them
        store.register("delta_rot", np.zeros((self.n_slices, 3), np.float32),
                       trainable=False)
        store.register("delta_trans", np.zeros((self.n_slices, 3), np.float32),
                       trainable=False)
        self.store = store

    # -- coordinate mapping ------------------------------------------------
    def normalize(self, y_world: np.ndarray):
        """World points -> unit-cube coords; clamps and counts strays."""
        y = np.asarray(y_world, dtype=np.float64).reshape(-1, 3)
        u = (y - self.domain_lo) / (self.domain_hi - self.domain_lo)
        outside = int(np.count_nonzero(((u < 0) | (u > 1)).any(axis=1)))
        return np.clip(u, 0.0, 1.0).astype(np.float32), outside

    @property
    def domain_scale(self) -> np.ndarray:
        return 1.0 / (self.domain_hi - self.domain_lo)

    # -- graph builders ----------------------------------------------------
    def forward_samples(self, leaves: dict, coords_unit: np.ndarray,
                        slice_idx: np.ndarray | None = None,
                        coords_var: Var | None = None,
                        heads=("V",)) -> dict:
        """Build the graph at unit-cube points; returns Vars per head.

        heads may include "V", "Z", "logB", "sigma2".  slice_idx is required
        by the bias and variance heads.
        """
        c = self.config
        out: dict[str, Var] = {}
        enc = encode_op(leaves["tables"], coords_unit, self.grid,
                        coords_var=coords_var)
        need_z = "Z" in heads or "sigma2" in heads
        xin = coords_var if coords_var is not None else Var(coords_unit)
        raw_c = mlp2(leaves, "coord", xin)
        raw_g = mlp2(leaves, "grid", enc)
        both = add(raw_c, raw_g)
        if "V" in heads:
            out["V"] = softplus(slice_cols(both, 0, 1))
        if need_z:
            out["Z"] = slice_cols(both, 1, 1 + c.feat_dim)
        if "logB" in heads or "sigma2" in heads:
            if slice_idx is None:
                raise ValueError("slice_idx required for bias/variance heads")
            emb = gather_rows(leaves["embed"], np.asarray(slice_idx))
            if "logB" in heads:
                lowenc = slice_cols(enc, 0, c.low_levels * c.features)
                out["logB"] = mlp2(leaves, "bias", concat_cols([lowenc, emb]))
            if "sigma2" in heads:
                raw_s = mlp2(leaves, "var", concat_cols([out["Z"], emb]))
                out["sigma2"] = softplus(raw_s) + SIGMA_FLOOR
        return out

    # -- numpy evaluation --------------------------------------------------
    def eval_field(self, y_world: np.ndarray):
        """(V, Z) at world points, plus the out-of-domain count."""
        coords, outside = self.normalize(y_world)
        leaves = self.store.leaves()
        got = self.forward_samples(leaves, coords, heads=("V", "Z"))
        return (got["V"].data.reshape(-1).astype(np.float32),
                got["Z"].data.astype(np.float32), outside)

    def eval_bias(self, y_world: np.ndarray, slice_idx) -> np.ndarray:
        coords, _ = self.normalize(y_world)
        idx = np.broadcast_to(np.asarray(slice_idx, dtype=np.int64),
                              (coords.shape[0],))
        leaves = self.store.leaves()
        got = self.forward_samples(leaves, coords, idx, heads=("logB",))
        return np.exp(got["logB"].data.reshape(-1)).astype(np.float32)

    def eval_log_bias(self, y_world: np.ndarray, slice_idx) -> np.ndarray:
        coords, _ = self.normalize(y_world)
        idx = np.broadcast_to(np.asarray(slice_idx, dtype=np.int64),
                              (coords.shape[0],))
        leaves = self.store.leaves()
        got = self.forward_samples(leaves, coords, idx, heads=("logB",))
        return got["logB"].data.reshape(-1).astype(np.float32)

    def eval_variance(self, y_world: np.ndarray, slice_idx) -> np.ndarray:
        coords, _ = self.normalize(y_world)
        idx = np.broadcast_to(np.asarray(slice_idx, dtype=np.int64),
                              (coords.shape[0],))
        leaves = self.store.leaves()
        got = self.forward_samples(leaves, coords, idx, heads=("sigma2",))
        return got["sigma2"].data.reshape(-1).astype(np.float32)

    def slice_scales(self) -> np.ndarray:
        return np.exp(self.store["logscale"].data.astype(np.float64))

    # -- persistence -------------------------------------------------------
    def meta(self) -> dict:
        return {
            "kind": "field_model",
            "config": asdict(self.config),
            "n_slices": self.n_slices,
            "domain_lo": [float(v) for v in self.domain_lo],
            "domain_hi": [float(v) for v in self.domain_hi],
            "seed": self.seed,
        }

    @staticmethod
    def from_meta(meta: dict) -> "FieldModel":
        cfg = FieldConfig(**meta["config"])
        return FieldModel(meta["n_slices"], meta["domain_lo"],
                          meta["domain_hi"], cfg, meta.get("seed", 0))
