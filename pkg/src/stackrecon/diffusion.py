"""Deterministic diffusion refinement of a rendered volume.

A short noising schedule is applied to the rendered volume, then walked
back with a small noise-prediction MLP conditioned on the field features,
the current noisy value, the rendered value, and a sinusoidal code of the
schedule position.  The reverse walk is noise-free: each step removes the
predicted noise scaled by the schedule, and the last step solves for the
clean volume directly.  The head is trained self-supervised on the volume
being refined, so no external data is involved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .autodiff import (Var, ParamStore, AdamHyper, adam_step, backward,
                       concat_cols, square, sub, vmean)
from .field import _init_mlp, mlp2

_S_EPS = 401
_S_PICK = 402
_S_STEP = 403
_S_CHAIN = 404

GAMMA_EMBED_DIM = 8


@dataclass
class Schedule:
    alpha0: float
    t: int
    alphas: np.ndarray   # (t + 1,), index 0 unused (set to 1)
    gammas: np.ndarray   # (t + 1,), cumulative products, gamma_0 = 1


def make_schedule(alpha0: float, t: int) -> Schedule:
    """Per-step retention factors alpha_i = exp(-alpha0 * i) and their
    running products."""
    if not isinstance(t, (int, np.integer)) or t < 1:
        raise ValueError("step count t must be a positive integer")
    if not (0 < alpha0 < 1.0 / t):
        raise ValueError("need 0 < alpha0 < 1/t")
    i = np.arange(t + 1, dtype=np.float64)
    alphas = np.exp(-alpha0 * i)
    alphas[0] = 1.0
    gammas = np.cumprod(alphas)
    return Schedule(alpha0, int(t), alphas, gammas)


def forward_diffuse(v0: np.ndarray, sched: Schedule, i: int, key):
    """Noise the volume to schedule position i; returns (v_i, eps)."""
    if not 1 <= i <= sched.t:
        raise ValueError("diffusion index out of range")
    v0 = np.asarray(v0)
    eps = rng.normal_array(key, v0.shape)
    g = sched.gammas[i]
    vi = np.sqrt(g) * v0.astype(np.float64) + np.sqrt(1 - g) * eps
    return vi.astype(np.float32), eps.astype(np.float32)


def reverse_step(vi: np.ndarray, i: int, sched: Schedule,
                 eps_hat: np.ndarray) -> np.ndarray:
    """One deterministic denoising step from position i to i - 1."""
    if not 1 <= i <= sched.t:
        raise ValueError("diffusion index out of range")
    a = sched.alphas[i]
    g = sched.gammas[i]
    vi = np.asarray(vi, dtype=np.float64)
    eh = np.asarray(eps_hat, dtype=np.float64)
    return ((vi - (1 - a) / np.sqrt(1 - g) * eh) / np.sqrt(a))


def final_step(v1: np.ndarray, sched: Schedule,
               eps_hat: np.ndarray) -> np.ndarray:
    """Solve for the clean volume from position 1."""
    g = sched.gammas[1]
    v1 = np.asarray(v1, dtype=np.float64)
    eh = np.asarray(eps_hat, dtype=np.float64)
    return (v1 - np.sqrt(1 - g) * eh) / np.sqrt(g)


def gamma_embed(gamma: float) -> np.ndarray:
    """Sinusoidal code of the schedule position, 4 octaves."""
    f = np.array([1.0, 2.0, 4.0, 8.0]) * np.pi * gamma
    return np.concatenate([np.sin(f), np.cos(f)]).astype(np.float32)


class NoiseHead:
    """MLP predicting the injected noise at each sample."""

    def __init__(self, feat_dim: int = 15, hidden: int = 64, seed: int = 0):
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.seed = int(seed)
        self.store = ParamStore()
        n_in = feat_dim + 2 + GAMMA_EMBED_DIM
        _init_mlp(self.store, "nh", n_in, hidden, 1,
                  rng.derive_key(seed, 71))

    def forward(self, leaves: dict, z: np.ndarray, vi: np.ndarray,
                v0: np.ndarray, gamma: float) -> Var:
        n = z.shape[0]
        emb = np.broadcast_to(gamma_embed(gamma), (n, GAMMA_EMBED_DIM))
        x = concat_cols([Var(np.asarray(z, dtype=np.float32)),
                         Var(np.asarray(vi, dtype=np.float32).reshape(n, 1)),
                         Var(np.asarray(v0, dtype=np.float32).reshape(n, 1)),
                         Var(np.ascontiguousarray(emb))])
        return mlp2(leaves, "nh", x)

    def predict(self, z, vi, v0, gamma: float, chunk: int = 262144):
        """ndarray prediction, chunked to bound peak memory."""
        z = np.asarray(z, dtype=np.float32)
        vi = np.asarray(vi, dtype=np.float32).reshape(-1)
        v0 = np.asarray(v0, dtype=np.float32).reshape(-1)
        out = np.empty(vi.shape[0], dtype=np.float32)
        leaves = self.store.leaves()
        for s in range(0, vi.shape[0], chunk):
            e = min(s + chunk, vi.shape[0])
            out[s:e] = self.forward(leaves, z[s:e], vi[s:e], v0[s:e],
                                    gamma).data.reshape(-1)
        return out

    def meta(self) -> dict:
        return {"kind": "noise_head", "feat_dim": self.feat_dim,
                "hidden": self.hidden, "seed": self.seed}

    @staticmethod
    def from_meta(meta: dict) -> "NoiseHead":
        return NoiseHead(meta["feat_dim"], meta["hidden"], meta.get("seed", 0))


def train_noise_head(head: NoiseHead, z_grid: np.ndarray, v0_grid: np.ndarray,
                     sched: Schedule, iterations: int = 1000,
                     batch: int = 4096, lr: float = 1e-3,
                     seed: int = 0) -> list:
    """Self-supervised denoising-score training on one volume.

    Per iteration: pick a schedule position and a voxel batch, noise those
    voxels, and regress the injected noise with an MSE loss.
    """
    z_grid = np.asarray(z_grid, dtype=np.float32).reshape(-1, head.feat_dim)
    v0_grid = np.asarray(v0_grid, dtype=np.float32).reshape(-1)
    m = v0_grid.shape[0]
    batch = min(batch, m)
    hyper = AdamHyper(lr=lr)
    trace = []
    for it in range(iterations):
        i = 1 + int(rng.raw(rng.derive_key(seed, _S_PICK, it), 0) % sched.t)
        idx = rng.generator(rng.derive_key(seed, _S_STEP, it)).integers(0, m, batch)
        eps = rng.normals(rng.derive_key(seed, _S_EPS, it), idx)
        g = sched.gammas[i]
        vi = (np.sqrt(g) * v0_grid[idx] + np.sqrt(1 - g) * eps).astype(np.float32)
        leaves = head.store.leaves()
        pred = head.forward(leaves, z_grid[idx], vi, v0_grid[idx], g)
        loss = vmean(square(sub(pred, eps.astype(np.float32).reshape(-1, 1))))
        backward(loss)
        grads = {n: leaves[n].grad for n in leaves if leaves[n].grad is not None}
        adam_step(head.store, grads, hyper)
        trace.append({"iteration": it, "mse": float(loss.data)})
    return trace


def refine(head, z_grid: np.ndarray, v0: np.ndarray, sched: Schedule,
           seed: int = 0, head_fn=None) -> dict:
    """Run the full noise-and-walk-back chain on a rendered volume.

    head_fn, when given, replaces the trained head: it receives
    (v_current_flat, v0_flat, gamma_i, i) and must return predicted noise;
    the tests use this to drive the chain with a closed-form oracle.
    Returns the raw estimate, the literal combined volume v0 + v0_hat, and
    the combined volume affinely rescaled to v0's range.
    """
    v0 = np.asarray(v0)
    shape = v0.shape
    v0f = v0.astype(np.float64).reshape(-1)
    z_grid = np.asarray(z_grid, dtype=np.float32).reshape(v0f.shape[0], -1)
    vt, _ = forward_diffuse(v0f, sched, sched.t, rng.derive_key(seed, _S_CHAIN))
    v = vt.astype(np.float64)

    def predict(vcur, i):
        g = sched.gammas[i]
        if head_fn is not None:
            return np.asarray(head_fn(vcur, v0f, g, i), dtype=np.float64)
        return head.predict(z_grid, vcur.astype(np.float32), v0f, g
                            ).astype(np.float64)

    for i in range(sched.t, 1, -1):
        v = reverse_step(v, i, sched, predict(v, i))
    v0_hat = final_step(v, sched, predict(v, 1))

    combined = v0f + v0_hat
    lo0, hi0 = float(v0f.min()), float(v0f.max())
    loc, hic = float(combined.min()), float(combined.max())
    degenerate = (hic - loc) < 1e-12
    if degenerate:
        rescaled = np.full_like(combined, 0.5 * (lo0 + hi0))
    else:
        rescaled = (combined - loc) * ((hi0 - lo0) / (hic - loc)) + lo0
    return {
        "v0_hat": v0_hat.reshape(shape).astype(np.float32),
        "combined": combined.reshape(shape).astype(np.float32),
        "combined_rescaled": rescaled.reshape(shape).astype(np.float32),
        "degenerate_range": bool(degenerate),
    }
