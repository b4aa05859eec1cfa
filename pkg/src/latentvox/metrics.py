"""Fidelity and task metrics: PSNR D1, Top-k accuracy, Bjontegaard deltas.

psnr_d1 uses a KD-tree only to find nearest-neighbor indices; squared
distances are recomputed exactly from the coordinates in float64 (integer
voxel coordinates are exactly representable), so the result is bit-identical
to the O(N*M) brute-force definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError


@dataclass
class D1Result:
    psnr: float
    mse: float        # max of the two directed mean squared errors
    mse_ab: float
    mse_ba: float
    infinite: bool


def _directed_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over a of squared distance to the nearest point of b (exact)."""
    idx = cKDTree(b).query(a, k=1)[1]
    d = a - b[idx]
    # integer-valued f64 squared distances are exact; the sum is exact too
    return float(np.einsum("ij,ij->i", d, d).sum()) / len(a)


def directed_mse_bruteforce(a, b) -> float:
    """O(N*M) reference used by the oracle tests."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    for p in a:
        total += float(np.min(np.sum((b - p) ** 2, axis=1)))
    return total / len(a)


def psnr_d1(a, b, bit_depth: int) -> D1Result:
    """Point-to-point geometry PSNR: 10*log10(3*peak^2 / max directed MSE)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("psnr_d1 requires two non-empty clouds")
    mse_ab = _directed_mse(a, b)
    mse_ba = _directed_mse(b, a)
    mse = max(mse_ab, mse_ba)
    peak = (1 << bit_depth) - 1
    if mse == 0.0:
        return D1Result(math.inf, 0.0, mse_ab, mse_ba, True)
    return D1Result(10.0 * math.log10(3.0 * peak * peak / mse), mse, mse_ab, mse_ba, False)


def topk_accuracy(logits, labels, k=1) -> float:
    """Percentage of rows whose label is among the k largest logits.

    Ties are broken toward the lowest class id (stable sort on -logits).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    order = np.argsort(-logits, axis=-1, kind="stable")[:, :k]
    hit = (order == labels[:, None]).any(axis=1)
    return float(100.0 * hit.mean())


# ---------------------------------------------------------------------------
# Bjontegaard deltas

def _check_curve(rates, quals, name):
    rates = np.asarray(rates, dtype=np.float64)
    quals = np.asarray(quals, dtype=np.float64)
    if len(rates) != len(quals):
        raise ConfigError(f"{name}: rates and qualities differ in length")
    if len(rates) < 4:
        raise ConfigError(f"{name}: bd_metric needs at least 4 points, got {len(rates)}")
    if np.any(rates <= 0):
        raise ConfigError(f"{name}: rates must be positive")
    if not np.all(np.isfinite(quals)):
        raise ConfigError(f"{name}: qualities must be finite")
    order = np.argsort(rates)
    return rates[order], quals[order]


def _poly_avg(x, y, lo, hi, degree):
    coeffs = np.polyfit(x, y, degree)
    integral = np.polyval(np.polyint(coeffs), hi) - np.polyval(np.polyint(coeffs), lo)
    return integral / (hi - lo)


def bd_metric(rates_ref, quals_ref, rates_test, quals_test, mode="quality", degree=3):
    """Bjontegaard delta between two RD curves.

    mode="quality": average vertical gap (test - ref) in quality units over the
    overlapping log10-rate interval. mode="rate": average relative rate
    difference in percent over the overlapping quality interval.
    """
    r1, q1 = _check_curve(rates_ref, quals_ref, "ref")
    r2, q2 = _check_curve(rates_test, quals_test, "test")
    if mode == "quality":
        x1, y1 = np.log10(r1), q1
        x2, y2 = np.log10(r2), q2
    elif mode == "rate":
        x1, y1 = q1, np.log10(r1)
        x2, y2 = q2, np.log10(r2)
    else:
        raise ConfigError(f"unknown bd mode {mode!r}")
    lo = max(x1.min(), x2.min())
    hi = min(x1.max(), x2.max())
    if hi <= lo:
        raise ConfigError("bd_metric: curves have no overlap")
    avg1 = _poly_avg(x1, y1, lo, hi, degree)
    avg2 = _poly_avg(x2, y2, lo, hi, degree)
    if mode == "quality":
        return float(avg2 - avg1)
    return float((10.0 ** (avg2 - avg1) - 1.0) * 100.0)


def bd_quality_fit(rates_ref, quals_ref, rates_test, quals_test):
    """BD quality delta with the fit degree lowered to n-1 for short curves.

    Returns (delta, fit_degree). Used for 3-point toy ladders where the
    strict >=4-point contract of bd_metric cannot hold.
    """
    n = min(len(rates_ref), len(rates_test))
    if n < 1:
        raise ConfigError("bd_quality_fit needs at least 1 point per curve")
    degree = min(3, n - 1)
    r1 = np.asarray(rates_ref, dtype=np.float64)
    q1 = np.asarray(quals_ref, dtype=np.float64)
    r2 = np.asarray(rates_test, dtype=np.float64)
    q2 = np.asarray(quals_test, dtype=np.float64)
    x1, x2 = np.log10(r1), np.log10(r2)
    lo = max(x1.min(), x2.min())
    hi = min(x1.max(), x2.max())
    if n == 1 or hi <= lo:
        # Zero-width overlap (e.g. a single-rung ladder): degree-0 fallback,
        # the mean quality gap evaluated pointwise.
        return float(np.mean(q2) - np.mean(q1)), 0
    delta = _poly_avg(x2, q2, lo, hi, degree) - _poly_avg(x1, q1, lo, hi, degree)
    return float(delta), degree
