"""Command-line pipeline: simulate, reconstruct, refine, render, evaluate.

Exit codes: 0 success, 1 usage error (bad flags, malformed phantom spec),
2 runtime error (missing files, shape mismatches, failed runs).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import volio
from .acquisition import grid_from_box, render_volume
from .config import TrainConfig
from .core import Volume
from .diffusion import NoiseHead, make_schedule, refine, train_noise_head
from .figures import comparison_figure, convergence_figure
from .metrics import format_metrics_csv, metrics_row
from .simulator import (MOTION_PRESETS, Ellipsoid, make_phantom,
                        simulate_stack)
from .trainer import train

_ORIENTATIONS = ("axial", "coronal", "sagittal")


class UsageError(Exception):
    """Bad user input that argparse could not catch itself."""


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1 (argparse's default is 2, which we reserve for
    # runtime failures)
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _sibling(path, tag: str):
    root, ext = os.path.splitext(os.fspath(path))
    return f"{root}_{tag}{ext or '.nii'}"


def _with_ext(path, ext: str):
    return os.path.splitext(os.fspath(path))[0] + ext


def _apply_threads(n):
    if n is None:
        n = os.environ.get("STACKRECON_THREADS")
        if n is None:
            return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# simulate

def _load_phantom_spec(path):
    try:
        with open(path, "rb") as fh:
            doc = json.loads(fh.read())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read phantom spec {path}: {e}") from None
    if isinstance(doc, list):
        doc = {"ellipsoids": doc}
    if not isinstance(doc, dict):
        raise UsageError("phantom spec must be a JSON object or list")
    unknown = set(doc) - {"ellipsoids", "shape", "spacing"}
    if unknown:
        raise UsageError(f"unknown phantom spec keys: {sorted(unknown)}")
    ells = []
    for i, e in enumerate(doc.get("ellipsoids", [])):
        try:
            ells.append(Ellipsoid(
                tuple(float(v) for v in e["center"]),
                tuple(float(v) for v in e["semi_axes"]),
                float(e["intensity"]),
                tuple(float(v) for v in e.get("rotation", (0, 0, 0)))))
        except (KeyError, TypeError, ValueError) as err:
            raise UsageError(f"bad ellipsoid entry {i}: {err}") from None
        if any(a <= 0 for a in ells[-1].semi_axes):
            raise UsageError(f"ellipsoid {i}: semi-axes must be positive")
    if not ells:
        raise UsageError("phantom spec defines no ellipsoids")
    shape = doc.get("shape", (96, 96, 96))
    spacing = float(doc.get("spacing", 0.8))
    if spacing <= 0:
        raise UsageError("phantom spacing must be positive")
    return ells, tuple(int(v) for v in np.broadcast_to(shape, (3,))), spacing


def cmd_simulate(args):
    if args.phantom:
        ells, shape, spacing = _load_phantom_spec(args.phantom)
    else:
        ells = None
        shape = tuple(np.broadcast_to(args.shape, (3,)).astype(int))
        spacing = args.spacing
    if args.stacks < 1:
        raise UsageError("--stacks must be at least 1")
    vol = make_phantom(ells, shape, spacing)
    motion = MOTION_PRESETS[args.motion_preset]
    orients = args.orientations or [_ORIENTATIONS[s % 3]
                                    for s in range(args.stacks)]
    if len(orients) < args.stacks:
        orients = [orients[s % len(orients)] for s in range(args.stacks)]
    stacks, truths = [], []
    for s in range(args.stacks):
        st, tr = simulate_stack(
            vol, orients[s], args.inplane, args.thickness, args.gap,
            motion, args.bias_scale, args.noise, args.scale_sigma,
            k_sim=args.k_sim, seed=args.seed, stack_id=s)
        stacks.append(st)
        truths.append(tr)
    os.makedirs(args.out, exist_ok=True)
    volio.write_volume(os.path.join(args.out, "truth.nii"), vol)
    volio.save_bundle(args.out, stacks, truth={
        "truth_volume": "truth.nii",
        "seed": args.seed,
        "stacks": truths,
    })
    print(f"wrote {args.stacks} stacks + truth volume to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct

def _load_cfg(args) -> TrainConfig:
    if args.config:
        cfg = volio.load_config(args.config)
    else:
        cfg = TrainConfig()
    over = {}
    if args.iters is not None:
        over["iterations"] = args.iters
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "refine_transforms", False):
        over["refine_transforms"] = True
    if getattr(args, "no_consistency_branch", False):
        over["coord_branch"] = False
    return dataclasses.replace(cfg, **over) if over else cfg


def _render_model(model, resolution, like=None, features=False):
    if like is not None:
        ref = volio.read_volume(like)
        return render_volume(model, ref.shape, ref.spacing, ref.origin,
                             features=features)
    shape, sp, origin = grid_from_box(model.domain_lo, model.domain_hi,
                                      resolution)
    return render_volume(model, shape, sp, origin, features=features)


def _run_vdsg(model, cfg, cinr_vol: Volume, zgrid, seed: int):
    sched = make_schedule(cfg.alpha0, cfg.t)
    head = NoiseHead(feat_dim=cfg.feat_dim, seed=seed)
    zflat = zgrid.reshape(-1, zgrid.shape[-1])
    v0 = cinr_vol.data.reshape(-1).astype(np.float32)
    train_noise_head(head, zflat, v0, sched, iterations=cfg.noise_iters,
                     batch=cfg.noise_batch, lr=cfg.noise_lr, seed=seed)
    out = refine(head, zflat, v0, sched, seed=seed)
    shape = cinr_vol.shape

    def as_vol(flat):
        return Volume(flat.reshape(shape), cinr_vol.spacing,
                      cinr_vol.origin, cinr_vol.direction)

    return head, as_vol(out["combined_rescaled"]), as_vol(out["combined"])


def cmd_reconstruct(args):
    stacks, _ = volio.load_bundle(args.stacks)
    cfg = _load_cfg(args)
    model, table, report = train(stacks, cfg, checkpoint_path=args.out)
    volio.save_model_checkpoint(args.out, model)
    trace_path = args.trace or _with_ext(args.volume, "_trace.csv")
    volio.save_trace(trace_path, report.trace)
    if report.trace:
        convergence_figure(report.trace, _with_ext(trace_path, ".png"))
    if report.aborted:
        raise RuntimeError(
            "training aborted on a non-finite loss at iteration "
            f"{report.counters.get('abort_iteration')}")
    cinr_vol, zgrid = _render_model(model, args.resolution, args.like,
                                    features=True)
    if args.no_vdsg:
        volio.write_volume(args.volume, cinr_vol)
        print(f"wrote {args.volume} (refinement disabled)")
        return 0
    head, rescaled, literal = _run_vdsg(model, cfg, cinr_vol, zgrid, cfg.seed)
    volio.write_volume(args.volume, rescaled)
    volio.write_volume(_sibling(args.volume, "cinr"), cinr_vol)
    volio.write_volume(_sibling(args.volume, "literal"), literal)
    if args.head_out:
        volio.save_noise_head(args.head_out, head)
    print(f"wrote {args.volume} plus cinr/literal siblings; "
          f"checkpoint at {args.out}")
    return 0


# ---------------------------------------------------------------------------
# refine / render / evaluate

def cmd_refine(args):
    model = volio.load_model_checkpoint(args.checkpoint)
    cinr_vol, zgrid = _render_model(model, args.resolution, args.like,
                                    features=True)
    sched = make_schedule(args.alpha0, args.steps)
    head = NoiseHead(feat_dim=model.config.feat_dim, seed=args.seed)
    zflat = zgrid.reshape(-1, zgrid.shape[-1])
    v0 = cinr_vol.data.reshape(-1).astype(np.float32)
    train_noise_head(head, zflat, v0, sched, iterations=args.noise_iters,
                     seed=args.seed)
    out = refine(head, zflat, v0, sched, seed=args.seed)
    shape = cinr_vol.shape
    rescaled = Volume(out["combined_rescaled"].reshape(shape),
                      cinr_vol.spacing, cinr_vol.origin, cinr_vol.direction)
    literal = Volume(out["combined"].reshape(shape), cinr_vol.spacing,
                     cinr_vol.origin, cinr_vol.direction)
    volio.write_volume(args.out, rescaled)
    volio.write_volume(_sibling(args.out, "literal"), literal)
    if args.head_out:
        volio.save_noise_head(args.head_out, head)
    print(f"wrote {args.out} and {_sibling(args.out, 'literal')}")
    return 0


def cmd_render(args):
    model = volio.load_model_checkpoint(args.checkpoint)
    vol = _render_model(model, args.resolution, args.like)
    volio.write_volume(args.out, vol)
    print(f"wrote {args.out} {vol.shape}")
    return 0


def cmd_evaluate(args):
    ref = volio.read_volume(args.ref)
    data_range = args.range
    if data_range is None:
        data_range = float(ref.data.max() - ref.data.min())
        if data_range <= 0:
            data_range = 1.0
    rows = []
    vols = [("reference", ref)]
    for test_path in args.test:
        test = volio.read_volume(test_path)
        rows.append(metrics_row(args.ref, test_path, ref.data, test.data,
                                data_range))
        vols.append((os.path.basename(test_path), test))
    csv_text = format_metrics_csv(rows)
    volio._atomic_write(args.out, csv_text.encode())
    if not args.no_figure:
        comparison_figure(vols, args.figure or _with_ext(args.out, ".png"))
    sys.stdout.write(csv_text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="stackrecon",
                description="Slice-stack MRI reconstruction pipeline")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (default: STACKRECON_THREADS "
                        "env var, else all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="make synthetic slice stacks",
                       description="Simulate motion-corrupted slice stacks "
                                   "from an ellipsoid phantom.")
    s.add_argument("--out", required=True, help="output bundle directory")
    s.add_argument("--phantom", help="phantom spec JSON (default: built-in)")
    s.add_argument("--stacks", type=int, default=3)
    s.add_argument("--orientations", nargs="+", choices=_ORIENTATIONS,
                   help="orientation per stack (cycled if fewer given)")
    s.add_argument("--motion-preset", choices=sorted(MOTION_PRESETS),
                   default="none")
    s.add_argument("--noise", type=float, default=0.0,
                   help="additive noise sigma")
    s.add_argument("--bias-scale", type=float, default=0.0,
                   help="log-bias polynomial coefficient scale")
    s.add_argument("--scale-sigma", type=float, default=0.0,
                   help="per-slice log-scale jitter")
    s.add_argument("--inplane", type=float, default=0.8)
    s.add_argument("--thickness", type=float, default=2.4)
    s.add_argument("--gap", type=float, default=0.0)
    s.add_argument("--shape", type=int, default=96,
                   help="phantom grid size (cube)")
    s.add_argument("--spacing", type=float, default=0.8)
    s.add_argument("--k-sim", type=int, default=256,
                   help="blur samples per simulated pixel")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_simulate)

    r = sub.add_parser("reconstruct", help="fit the model to a bundle",
                       description="Train the implicit reconstruction on a "
                                   "stack bundle and render the volume.")
    r.add_argument("--stacks", required=True, help="bundle directory")
    r.add_argument("--config", help="training config JSON")
    r.add_argument("--out", required=True, help="model checkpoint path")
    r.add_argument("--volume", required=True, help="output volume path")
    r.add_argument("--resolution", type=float, default=0.8,
                   help="isotropic render spacing (mm)")
    r.add_argument("--like", help="render on the grid of this volume instead")
    r.add_argument("--iters", type=int, default=None,
                   help="override config iteration count")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--trace", help="loss trace CSV path")
    r.add_argument("--refine-transforms", action="store_true",
                   help="optimize slice pose corrections during training")
    r.add_argument("--no-consistency-branch", action="store_true",
                   help="ablation: zero and freeze the raw-coordinate branch")
    r.add_argument("--no-vdsg", action="store_true",
                   help="ablation: skip the diffusion refinement stage")
    r.add_argument("--head-out", help="save the trained noise head here")
    r.set_defaults(fn=cmd_reconstruct)

    f = sub.add_parser("refine", help="diffusion-refine a checkpoint",
                       description="Run the deterministic refinement chain "
                                   "on a trained model checkpoint.")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True, help="refined volume path")
    f.add_argument("--alpha0", type=float, default=0.001)
    f.add_argument("--steps", type=int, default=10)
    f.add_argument("--resolution", type=float, default=0.8)
    f.add_argument("--like", help="render on the grid of this volume")
    f.add_argument("--noise-iters", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--head-out", help="save the trained noise head here")
    f.set_defaults(fn=cmd_refine)

    d = sub.add_parser("render", help="render a checkpoint to a volume")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--resolution", type=float, default=0.8)
    d.add_argument("--like", help="render on the grid of this volume")
    d.set_defaults(fn=cmd_render)

    e = sub.add_parser("evaluate", help="compare volumes, write metrics CSV",
                       description="Quality metrics of test volumes against "
                                   "a reference, with a comparison figure.")
    e.add_argument("--ref", required=True)
    e.add_argument("--test", required=True, nargs="+")
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--range", type=float, default=None,
                   help="data range (default: reference max-min)")
    e.add_argument("--figure", help="comparison figure path "
                                    "(default: CSV path with .png)")
    e.add_argument("--no-figure", action="store_true")
    e.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args.threads)
        return args.fn(args)
    except UsageError as e:
        print(f"stackrecon: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as e:
        print(f"stackrecon: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
