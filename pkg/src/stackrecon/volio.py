"""File formats: NIfTI-1 volumes, stack bundles, checkpoints, configs.

The NIfTI support is deliberately a narrow subset: single-frame 3D float32,
little-endian, magic "n+1" with the data in the same file.  Anything else
is rejected loudly rather than half-read.  All writes go through a
temp-file + fsync + rename so a crash never leaves a torn file behind.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .config import TrainConfig, config_from_dict
from .core import Stack, Volume
from .geometry import RigidTransform

_HDR = struct.Struct(
    "<i10s18sihBB8h3fhhhh8ffffhBBffffii80s24shh6f12f16s4s")
assert _HDR.size == 348

_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"
_DT_FLOAT32 = 16


def _atomic_write(path, payload: bytes):
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    try:
        dfd = os.open(os.path.dirname(path) or ".", os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)
    except OSError:
        pass


# ---------------------------------------------------------------------------
# NIfTI-1 subset

def volume_to_bytes(vol: Volume) -> bytes:
    nx, ny, nz = vol.shape
    aff = vol.affine.astype(np.float32)
    hdr = _HDR.pack(
        348, b"", b"", 0, 0, ord("r"), 0,
        3, nx, ny, nz, 1, 1, 1, 1,
        0.0, 0.0, 0.0, 0,
        _DT_FLOAT32, 32, 0,
        1.0, float(vol.spacing[0]), float(vol.spacing[1]),
        float(vol.spacing[2]), 0.0, 0.0, 0.0, 0.0,
        352.0, 1.0, 0.0, 0, 0, 2,
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"stackrecon", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        aff[0, 0], aff[0, 1], aff[0, 2], aff[0, 3],
        aff[1, 0], aff[1, 1], aff[1, 2], aff[1, 3],
        aff[2, 0], aff[2, 1], aff[2, 2], aff[2, 3],
        b"", _MAGIC_SINGLE)
    payload = np.ravel(vol.data.astype("<f4", copy=False), order="F").tobytes()
    return hdr + b"\x00\x00\x00\x00" + payload


def write_volume(path, vol: Volume):
    _atomic_write(path, volume_to_bytes(vol))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 352:
        raise ValueError(f"{path}: too short to be a NIfTI file")
    if struct.unpack_from("<i", blob)[0] != 348:
        if struct.unpack_from(">i", blob)[0] == 348:
            raise ValueError(f"{path}: big-endian NIfTI is not supported")
        raise ValueError(f"{path}: not a NIfTI-1 file")
    f = _HDR.unpack_from(blob)
    magic = f[65]
    if magic == _MAGIC_PAIR:
        raise ValueError(f"{path}: two-file NIfTI (hdr/img) is not supported")
    if magic != _MAGIC_SINGLE:
        raise ValueError(f"{path}: bad NIfTI magic {magic!r}")
    if f[19] != _DT_FLOAT32:
        raise ValueError(f"{path}: only float32 volumes are supported "
                         f"(datatype {f[19]})")
    dim = f[7:15]
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise ValueError(f"{path}: only single-frame 3D volumes are "
                         f"supported (dim[0] = {dim[0]})")
    nx, ny, nz = int(dim[1]), int(dim[2]), int(dim[3])
    vox_offset = int(f[30])
    need = vox_offset + 4 * nx * ny * nz
    if len(blob) < need:
        raise ValueError(f"{path}: truncated payload "
                         f"({len(blob)} bytes, need {need})")
    data = np.frombuffer(blob, dtype="<f4", count=nx * ny * nz,
                         offset=vox_offset)
    data = data.reshape((nx, ny, nz), order="F").copy()
    sform_code = f[45]
    if sform_code > 0:
        m = np.array(f[52:64], dtype=np.float64).reshape(3, 4)
        spacing = np.linalg.norm(m[:, :3], axis=0)
        if np.any(spacing <= 0):
            raise ValueError(f"{path}: degenerate sform")
        direction = m[:, :3] / spacing
        origin = m[:, 3]
    else:
        spacing = np.array(f[23:26], dtype=np.float64)
        if np.any(spacing <= 0):
            raise ValueError(f"{path}: non-positive pixdim")
        direction = np.eye(3)
        origin = np.zeros(3)
    return Volume(data, spacing, origin, direction)


# ---------------------------------------------------------------------------
# stack bundles

BUNDLE_VERSION = 1
_META_NAME = "metadata.json"


def save_bundle(dirpath, stacks: list[Stack], truth: dict | None = None):
    dirpath = os.fspath(dirpath)
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    for s, st in enumerate(stacks):
        vol_name = f"stack_{s:03d}.nii"
        mask_name = f"mask_{s:03d}.nii"
        geom = _nominal_geometry(st)
        write_volume(os.path.join(dirpath, vol_name),
                     Volume(st.data, *geom))
        write_volume(os.path.join(dirpath, mask_name),
                     Volume(st.mask.astype(np.float32), *geom))
        entries.append({
            "volume": vol_name,
            "mask": mask_name,
            "spacing": [float(v) for v in st.spacing],
            "gap": float(st.gap),
            "transforms": [[[float(v) for v in row]
                            for row in t.to_matrix()]
                           for t in st.transforms],
            "scales": [float(v) for v in st.scales],
        })
    doc = {"format_version": BUNDLE_VERSION, "stacks": entries}
    if truth is not None:
        doc["truth"] = truth
    _atomic_write(os.path.join(dirpath, _META_NAME),
                  json.dumps(doc, indent=1, sort_keys=True).encode())


def _nominal_geometry(st: Stack):
    shape = np.array(st.data.shape, dtype=np.float64)
    spacing = np.array([st.spacing[0], st.spacing[1],
                        st.spacing[2] + st.gap])
    origin = -(shape - 1) / 2 * spacing
    return spacing, origin


def load_bundle(dirpath):
    dirpath = os.fspath(dirpath)
    meta_path = os.path.join(dirpath, _META_NAME)
    if not os.path.exists(meta_path):
        raise ValueError(f"{dirpath}: not a stack bundle (no {_META_NAME})")
    with open(meta_path, "rb") as fh:
        doc = json.loads(fh.read())
    version = doc.get("format_version")
    if version != BUNDLE_VERSION:
        raise ValueError(f"{dirpath}: unsupported bundle version {version!r}")
    stacks = []
    for entry in doc["stacks"]:
        vol_path = os.path.join(dirpath, entry["volume"])
        mask_path = os.path.join(dirpath, entry["mask"])
        if not os.path.exists(mask_path):
            raise ValueError(f"{dirpath}: missing mask file {entry['mask']}")
        vol = read_volume(vol_path)
        mask = read_volume(mask_path)
        n_slices = vol.data.shape[2]
        if len(entry["transforms"]) != n_slices:
            missing = min(len(entry["transforms"]), n_slices - 1)
            raise ValueError(
                f"{entry['volume']}: transform missing for slice {missing} "
                f"({len(entry['transforms'])} transforms, "
                f"{n_slices} slices)")
        transforms = [RigidTransform.from_matrix(np.array(m))
                      for m in entry["transforms"]]
        stacks.append(Stack(
            vol.data, mask.data > 0.5, entry["spacing"],
            float(entry.get("gap", 0.0)), transforms,
            np.array(entry["scales"]) if "scales" in entry else None))
    return stacks, doc.get("truth")


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SRCKPT01"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store, meta: dict):
    """ParamStore + Adam state + metadata in one deterministic container."""
    groups = []
    blobs = []
    for name in store.groups:
        p = store.groups[name]
        groups.append({
            "name": name,
            "shape": list(p.data.shape),
            "dtype": str(p.data.dtype),
            "trainable": bool(p.trainable),
        })
        for arr in (p.data, p.m, p.v):
            blobs.append(np.ascontiguousarray(arr).astype("<f4", copy=False)
                         .tobytes())
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "step": store.step,
         "meta": meta, "groups": groups},
        sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join([_CKPT_MAGIC, struct.pack("<I", len(header)), header]
                       + blobs)
    _atomic_write(path, payload)


def load_checkpoint(path):
    """Returns (ParamStore, meta).  Any mismatch is an error, not a guess."""
    from .autodiff import ParamStore

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    hlen = struct.unpack_from("<I", blob, 8)[0]
    if len(blob) < 12 + hlen:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[12:12 + hlen])
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    store = ParamStore()
    off = 12 + hlen
    for g in header["groups"]:
        shape = tuple(g["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrs = []
        for _ in range(3):
            end = off + 4 * n
            if len(blob) < end:
                raise ValueError(f"{path}: truncated checkpoint payload")
            arrs.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off)
                        .reshape(shape).copy())
            off = end
        store.register(g["name"], arrs[0], trainable=g["trainable"])
        store.groups[g["name"]].m = arrs[1]
        store.groups[g["name"]].v = arrs[2]
    store.step = int(header["step"])
    return store, header["meta"]


def save_model_checkpoint(path, model):
    save_checkpoint(path, model.store, model.meta())


def load_model_checkpoint(path):
    from .field import FieldModel

    store, meta = load_checkpoint(path)
    if meta.get("kind") != "field_model":
        raise ValueError(f"{path}: checkpoint does not hold a field model")
    model = FieldModel.from_meta(meta)
    _adopt_store(model.store, store)
    return model


def save_noise_head(path, head):
    save_checkpoint(path, head.store, head.meta())


def load_noise_head(path):
    from .diffusion import NoiseHead

    store, meta = load_checkpoint(path)
    if meta.get("kind") != "noise_head":
        raise ValueError(f"{path}: checkpoint does not hold a noise head")
    head = NoiseHead.from_meta(meta)
    _adopt_store(head.store, store)
    return head


def _adopt_store(target, loaded):
    if set(target.groups) != set(loaded.groups):
        raise ValueError("checkpoint parameter groups do not match the model")
    for name, p in loaded.groups.items():
        tp = target.groups[name]
        if tp.data.shape != p.data.shape:
            raise ValueError(f"checkpoint group {name!r} has shape "
                             f"{p.data.shape}, expected {tp.data.shape}")
        tp.data[...] = p.data
        tp.m[...] = p.m
        tp.v[...] = p.v
        tp.trainable = p.trainable
    target.step = loaded.step


# ---------------------------------------------------------------------------
# configs and traces

def parse_config(source) -> TrainConfig:
    """JSON text or mapping -> TrainConfig with defaults filled in."""
    if isinstance(source, TrainConfig):
        return source
    if isinstance(source, (str, bytes)):
        try:
            source = json.loads(source)
        except json.JSONDecodeError as e:
            raise ValueError(f"invalid config JSON: {e}") from None
    return config_from_dict(source)


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read())


TRACE_FIELDS = ("iteration", "loss_slice", "loss_reg", "loss_bias",
                "loss_total")


def save_trace(path, rows: list[dict]):
    lines = [",".join(TRACE_FIELDS)]
    for row in rows:
        lines.append(",".join(
            [str(row["iteration"])]
            + [repr(float(row[k])) for k in TRACE_FIELDS[1:]]))
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_trace(path) -> list[dict]:
    with open(path) as fh:
        lines = fh.read().strip().split("\n")
    if not lines or lines[0] != ",".join(TRACE_FIELDS):
        raise ValueError(f"{path}: not a loss trace file")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append({"iteration": int(parts[0]),
                     **{k: float(v) for k, v in zip(TRACE_FIELDS[1:],
                                                    parts[1:])}})
    return rows
