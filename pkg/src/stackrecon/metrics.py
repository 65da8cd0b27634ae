"""Volume comparison metrics: PSNR, SSIM, RMSE, NCC.

All four expect volumes of identical shape.  PSNR and SSIM take the data
range explicitly so constant references behave predictably; identical
volumes get a +inf PSNR sentinel.  SSIM uses a 7x7x7 uniform window with
the usual stabilizers C1 = (0.01 range)^2, C2 = (0.03 range)^2, unbiased
local covariance normalization, and averages over the interior (windows
that fit entirely inside the volume).
"""
from __future__ import annotations

import csv
import io
import math

import numpy as np
from scipy.ndimage import uniform_filter

SSIM_WINDOW = 7


def _check(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {test.shape}")
    if ref.size == 0:
        raise ValueError("empty volumes")
    return ref, test


def rmse(ref, test) -> float:
    ref, test = _check(ref, test)
    return float(np.sqrt(np.mean((ref - test) ** 2)))


def psnr(ref, test, data_range: float) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    ref, test = _check(ref, test)
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ncc(ref, test) -> float:
    """Pearson correlation over voxels."""
    ref, test = _check(ref, test)
    # ptp is exact for constant arrays; the demeaned norm is not
    if np.ptp(ref) == 0 or np.ptp(test) == 0:
        raise ValueError("constant volume has no correlation")
    a = ref.ravel() - ref.mean()
    b = test.ravel() - test.mean()
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def ssim(ref, test, data_range: float, window: int = SSIM_WINDOW) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    ref, test = _check(ref, test)
    if min(ref.shape) < window:
        raise ValueError(f"volume smaller than the {window}^3 window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    np_win = window ** ref.ndim
    cov_norm = np_win / (np_win - 1)

    ux = uniform_filter(ref, window)
    uy = uniform_filter(test, window)
    uxx = uniform_filter(ref * ref, window)
    uyy = uniform_filter(test * test, window)
    uxy = uniform_filter(ref * test, window)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    smap = (((2 * ux * uy + c1) * (2 * vxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2)))
    pad = window // 2
    interior = smap[tuple(slice(pad, s - pad) for s in smap.shape)]
    return float(interior.mean())


CSV_FIELDS = ("ref", "test", "psnr", "ssim", "rmse", "ncc", "range")


def metrics_row(ref_name: str, test_name: str, ref, test,
                data_range: float) -> dict:
    return {
        "ref": ref_name,
        "test": test_name,
        "psnr": psnr(ref, test, data_range),
        "ssim": ssim(ref, test, data_range),
        "rmse": rmse(ref, test),
        "ncc": ncc(ref, test),
        "range": float(data_range),
    }


def format_metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        for k in ("psnr", "ssim", "rmse", "ncc", "range"):
            v = out[k]
            out[k] = "inf" if math.isinf(v) else f"{v:.6f}"
        writer.writerow(out)
    return buf.getvalue()
