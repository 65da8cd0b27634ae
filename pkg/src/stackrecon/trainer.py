"""Stochastic fitting loop for the field model.

Each iteration draws a pixel batch, renders it through the acquisition
model, evaluates the three losses, backpropagates, clips the global
gradient norm, and applies one Adam step.  Everything random is keyed by
(seed, stream, iteration), so a run is a pure function of its inputs and
can be bit-reproduced or resumed from a checkpoint mid-stream.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng, volio
from .acquisition import (PixelTable, build_pixel_table, sample_batch,
                          render_pixels)
from .autodiff import AdamHyper, adam_step, backward, clip_global_norm
from .config import TrainConfig
from .core import Stack
from .field import FieldModel
from .geometry import RigidTransform
from .losses import loss_slice, loss_regularization, loss_bias, loss_total

_S_BATCH = 7


@dataclass
class TrainReport:
    trace: list = field(default_factory=list)
    wall_per_100: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    aborted: bool = False
    iterations_run: int = 0


def build_model(table: PixelTable, cfg: TrainConfig) -> FieldModel:
    return FieldModel(table.n_slices, table.domain_lo, table.domain_hi,
                      cfg.field_config(), seed=cfg.seed)


def _snapshot(store):
    return ({n: p.data.copy() for n, p in store.groups.items()},
            {n: (p.m.copy(), p.v.copy()) for n, p in store.groups.items()},
            store.step)


def _restore(store, snap):
    data, moments, step = snap
    for n, p in store.groups.items():
        p.data[...] = data[n]
        p.m[...], p.v[...] = moments[n]
    store.step = step


def train(stacks: list[Stack], cfg: TrainConfig,
          model: FieldModel | None = None,
          table: PixelTable | None = None,
          trace_path=None, checkpoint_path=None):
    """Fit the field to the stacks; returns (model, table, report)."""
    if table is None:
        table = build_pixel_table(stacks)
    if model is None:
        model = build_model(table, cfg)
    store = model.store
    if cfg.refine_transforms:
        store["delta_rot"].trainable = True
        store["delta_trans"].trainable = True

    hyper = AdamHyper(lr=cfg.lr, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    lr_over = {"delta_rot": cfg.transform_lr, "delta_trans": cfg.transform_lr}
    report = TrainReport(counters={
        "kept_outside": 0, "clamped": 0, "grad_clipped": 0,
        "skipped_pairs": 0})
    snap = _snapshot(store)
    t0 = time.perf_counter()

    start = store.step
    for it in range(start, cfg.iterations):
        idx = sample_batch(table, cfg.batch_size,
                           rng.derive_key(cfg.seed, _S_BATCH, it))
        leaves = store.leaves()
        rb = render_pixels(model, leaves, table, idx, cfg.psf_samples,
                           cfg.seed, it, refine=cfg.refine_transforms)
        l_i = loss_slice(rb.ibar, rb.var, rb.intensity, cfg.lam)
        r_v = loss_regularization(rb.v, rb.offsets, cfg.huber_delta,
                                  report.counters)
        r_b = loss_bias(rb.logb)
        parts_ok = all(np.isfinite(float(x.data)) for x in (l_i, r_v, r_b))
        val = np.nan
        if parts_ok:
            total = loss_total(l_i, r_v, r_b, cfg.lambda_v, cfg.lambda_b)
            val = float(total.data)
        if not np.isfinite(val):
            _restore(store, snap)
            report.aborted = True
            report.counters["abort_iteration"] = it
            break

        backward(total)
        grads = {n: leaves[n].grad for n, p in store.groups.items()
                 if p.trainable and leaves[n].grad is not None}
        _, clipped = clip_global_norm(grads, cfg.grad_clip)
        if clipped:
            report.counters["grad_clipped"] += 1
        adam_step(store, grads, hyper, lr_over)
        # the per-slice gains share a pure gauge direction with the field
        # (C -> cC, V -> V/c leaves every prediction unchanged), and the
        # slope penalty is not scale invariant, so left free the optimizer
        # drifts V small while the gains compensate; re-centering the log
        # gains each step pins that mode without touching relative gains
        ls = store["logscale"]
        ls.data -= ls.data.mean(dtype=np.float64)

        report.counters["kept_outside"] += rb.kept_outside
        report.counters["clamped"] += rb.clamped
        report.iterations_run = it + 1
        if it % cfg.log_stride == 0 or it == cfg.iterations - 1:
            report.trace.append({
                "iteration": it,
                "loss_slice": float(l_i.data),
                "loss_reg": float(r_v.data),
                "loss_bias": float(r_b.data),
                "loss_total": val,
            })
        if it % 50 == 49:
            snap = _snapshot(store)
        if (it + 1) % 100 == 0:
            t1 = time.perf_counter()
            report.wall_per_100.append(t1 - t0)
            t0 = t1
        if (checkpoint_path is not None and cfg.checkpoint_every
                and (it + 1) % cfg.checkpoint_every == 0):
            volio.save_model_checkpoint(checkpoint_path, model)

    if trace_path is not None:
        volio.save_trace(trace_path, report.trace)
    if checkpoint_path is not None:
        volio.save_model_checkpoint(checkpoint_path, model)
    return model, table, report


def refined_transforms(model: FieldModel, table: PixelTable) -> list:
    """Per-slice transforms with the learned deltas folded in."""
    from scipy.spatial.transform import Rotation

    omega = model.store["delta_rot"].data.astype(np.float64)
    tau = model.store["delta_trans"].data.astype(np.float64)
    out = []
    for s in range(table.n_slices):
        base = RigidTransform.from_matrix(
            np.vstack([np.hstack([table.slice_rot[s],
                                  table.slice_trans[s][:, None]]),
                       [0, 0, 0, 1]]))
        rot = Rotation.from_rotvec(omega[s]).as_matrix()
        c = table.slice_center[s]
        delta = RigidTransform.from_matrix(
            np.vstack([np.hstack([rot, (c - rot @ c + tau[s])[:, None]]),
                       [0, 0, 0, 1]]))
        out.append(delta.compose(base))
    return out


def refine_transforms(stacks: list[Stack], cfg: TrainConfig,
                      model: FieldModel | None = None):
    """Co-optimize per-slice transform deltas with the field.

    Returns (transforms, model, table, report); with refinement disabled in
    the config it is forced on here, since that is the whole point.
    """
    cfg = replace(cfg, refine_transforms=True)
    model, table, report = train(stacks, cfg, model=model)
    return refined_transforms(model, table), model, table, report
