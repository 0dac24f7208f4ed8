"""Risk-controlling calibration of per-dimension latent intervals.

The interval family is indexed by a scale ``lam >= 0``::

    T_lam(x)_d = [f_d - lam * (f_d - q_lo_d)_+,  f_d + lam * (q_hi_d - f_d)_+]

The controlled risk is the fraction of relevant (masked) latent dimensions
whose true value falls outside its interval. ``lambda_hat`` is the smallest
grid value whose upper confidence bound on that risk, and the bound at every
larger grid value, is at most ``alpha``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .encoder import EncoderOutput, check_mask

BOUNDS = ("hoeffding", "hoeffding-bentkus")


@dataclass(frozen=True)
class RiskSpec:
    alpha: float = 0.1
    delta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "delta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")


@dataclass
class IntervalSet:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def width(self):
        return self.hi - self.lo


def lambda_grid(lam_max=10.0, points=1000):
    """Evenly spaced, strictly increasing grid on ``[0, lam_max]``."""
    if points < 2 or lam_max <= 0:
        raise ValueError("lambda grid needs >= 2 points and a positive maximum")
    return np.linspace(0.0, float(lam_max), int(points))


def _check_grid(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) == 0 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("lambda grid must be a nonempty, strictly increasing, nonnegative sequence")
    return grid


def interval_at(out, lam):
    """Intervals of the scaled family at ``lam`` (crossed quantiles clamp to f)."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    f = np.asarray(out.point, dtype=np.float64)
    below = np.maximum(f - np.asarray(out.q_lo, dtype=np.float64), 0.0)
    above = np.maximum(np.asarray(out.q_hi, dtype=np.float64) - f, 0.0)
    return IntervalSet(f - lam * below, f + lam * above)


def calibrated_quantiles(out, lambda_hat):
    """``(q_cal_lo, q_cal_hi)``, the endpoints of ``interval_at(out, lambda_hat)``."""
    iv = interval_at(out, lambda_hat)
    return iv.lo, iv.hi


def coverage_loss(intervals, z, mask):
    """Fraction of masked dims whose ``z_d`` lies outside the closed interval.

    Works on a single ``(D,)`` vector (returns float) or a batch ``(n, D)``
    (returns per-sample array).
    """
    z = np.asarray(z, dtype=np.float64)
    lo, hi = np.asarray(intervals.lo), np.asarray(intervals.hi)
    if lo.shape != z.shape or hi.shape != z.shape:
        raise ValueError(f"interval shape {lo.shape} does not match latent shape {z.shape}")
    mask = check_mask(mask, z.shape[-1])
    covered = ((lo <= z) & (z <= hi))[..., mask]
    out = 1.0 - covered.sum(axis=-1) / mask.sum()
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Upper confidence bounds
# ---------------------------------------------------------------------------


def _check_ucb_args(mean, n, delta):
    if not 0.0 <= mean <= 1.0 or not math.isfinite(mean):
        raise ValueError(f"mean must lie in [0, 1], got {mean}")
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def hoeffding_ucb(mean, n, delta):
    """``mean + sqrt(log(1/delta) / (2n))``, clipped at 1."""
    _check_ucb_args(mean, n, delta)
    return min(1.0, mean + math.sqrt(math.log(1.0 / delta) / (2.0 * n)))


def hb_ucb(mean, n, delta, tol=1e-9):
    """Hoeffding-Bentkus upper confidence bound for a [0, 1]-valued mean.

    The smallest ``r`` in ``[mean, 1]`` with
    ``min(exp(-n h1(mean, r)), e * P(Bin(n, r) <= ceil(n mean))) <= delta``,
    where ``h1(a, b) = a log(a/b) + (1-a) log((1-a)/(1-b))``; found by
    bisection to absolute tolerance ``tol``.
    """
    _check_ucb_args(mean, n, delta)
    return kernels.hb_ucb(mean, int(n), delta, tol)


def ucb(mean, n, delta, bound="hoeffding-bentkus"):
    if bound == "hoeffding":
        return hoeffding_ucb(mean, n, delta)
    if bound == "hoeffding-bentkus":
        return hb_ucb(mean, n, delta)
    raise ValueError(f"unknown bound {bound!r}; choose from {BOUNDS}")


# ---------------------------------------------------------------------------
# Risk curves and lambda selection
# ---------------------------------------------------------------------------


def coverage_counts(out, z, mask, grid):
    """Covered masked-dim counts, int32 ``(n, len(grid))``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("need a nonempty (n, D) batch of latents")
    mask = check_mask(mask, z.shape[1])
    grid = _check_grid(grid)
    return kernels.coverage_counts(out.point, out.q_lo, out.q_hi, z, mask, grid)


def misses_to_risk(misses, n, m):
    return np.asarray(misses, dtype=np.float64) / (n * m)


def risk_curve(out, z, mask, grid):
    """Mean coverage loss over the calibration batch at every grid value."""
    counts = coverage_counts(out, z, mask, grid)
    n, m = len(counts), int(np.asarray(mask, dtype=bool).sum())
    misses = n * m - counts.sum(axis=0, dtype=np.int64)
    return misses_to_risk(misses, n, m)


def ucb_curve(risks, n, spec, bound="hoeffding-bentkus"):
    """Bound evaluated at each empirical risk (repeated values computed once)."""
    cache = {}
    out = np.empty(len(risks))
    for i, r in enumerate(np.asarray(risks, dtype=np.float64)):
        key = float(r)
        if key not in cache:
            cache[key] = ucb(min(max(key, 0.0), 1.0), n, spec.delta, bound)
        out[i] = cache[key]
    return out


def select_lambda(ucbs, grid, alpha):
    """Smallest grid value such that the bound is ``<= alpha`` there and at
    every larger grid value; ``None`` when even the largest value fails."""
    grid = _check_grid(grid)
    ucbs = np.asarray(ucbs, dtype=np.float64)
    if ucbs.shape != grid.shape:
        raise ValueError("ucb curve and grid lengths differ")
    best = None
    for i in range(len(grid) - 1, -1, -1):
        if ucbs[i] > alpha:
            break
        best = float(grid[i])
    return best


def max_admissible_misses(n, m, spec, bound="hoeffding-bentkus"):
    """Largest total miss count ``C`` (out of ``n*m``) whose risk ``C/(n m)``
    has bound ``<= alpha``; -1 if none.

    Valid because both bounds are nondecreasing in the empirical mean, so
    ``ucb(risk) <= alpha`` is equivalent to ``misses <= C``.
    """
    total = n * m
    if ucb(0.0, n, spec.delta, bound) > spec.alpha:
        return -1
    lo, hi = 0, total
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if ucb(mid / total, n, spec.delta, bound) <= spec.alpha:
            lo = mid
        else:
            hi = mid - 1
    return lo


def select_lambda_from_misses(misses, grid, limit):
    """:func:`select_lambda` on integer miss counts against a precomputed
    :func:`max_admissible_misses` limit."""
    ok = np.asarray(misses) <= limit
    if not ok[-1]:
        return None, -1
    bad = np.flatnonzero(~ok)
    i = int(bad[-1]) + 1 if len(bad) else 0
    return float(grid[i]), i


@dataclass
class CalibrationResult:
    lambda_hat: float | None
    grid: np.ndarray
    risk_curve: np.ndarray
    ucb_curve: np.ndarray
    n: int
    spec: RiskSpec = field(default_factory=RiskSpec)
    bound_kind: str = "hoeffding-bentkus"

    @property
    def feasible(self):
        return self.lambda_hat is not None

    def summary(self):
        return {
            "lambda_hat": self.lambda_hat,
            "feasible": self.feasible,
            "alpha": self.spec.alpha,
            "delta": self.spec.delta,
            "n": self.n,
            "bound_kind": self.bound_kind,
            "grid_min": float(self.grid[0]),
            "grid_max": float(self.grid[-1]),
            "grid_points": len(self.grid),
        }


def calibrate(out, z, mask, spec=None, grid=None, bound="hoeffding-bentkus"):
    """Full calibration: risk curve, bound curve and ``lambda_hat``."""
    spec = spec or RiskSpec()
    grid = lambda_grid() if grid is None else _check_grid(grid)
    if bound not in BOUNDS:
        raise ValueError(f"unknown bound {bound!r}; choose from {BOUNDS}")
    risks = risk_curve(out, z, mask, grid)
    n = len(np.asarray(z))
    ucbs = ucb_curve(risks, n, spec, bound)
    return CalibrationResult(select_lambda(ucbs, grid, spec.alpha), grid, risks, ucbs, n, spec, bound)


def write_calibration(result, directory):
    """``calibration.csv`` (lambda, empirical_risk, ucb) and ``calibration.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "calibration.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda", "empirical_risk", "ucb"])
        for lam, r, u in zip(result.grid, result.risk_curve, result.ucb_curve):
            w.writerow([repr(float(lam)), repr(float(r)), repr(float(u))])
    with open(directory / "calibration.json", "w") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_calibration(directory):
    directory = Path(directory)
    with open(directory / "calibration.json") as f:
        summary = json.load(f)
    with open(directory / "calibration.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    grid = np.array([float(r["lambda"]) for r in rows])
    return CalibrationResult(
        summary["lambda_hat"],
        grid,
        np.array([float(r["empirical_risk"]) for r in rows]),
        np.array([float(r["ucb"]) for r in rows]),
        int(summary["n"]),
        RiskSpec(summary["alpha"], summary["delta"]),
        summary["bound_kind"],
    )


__all__ = [
    "BOUNDS",
    "CalibrationResult",
    "EncoderOutput",
    "IntervalSet",
    "RiskSpec",
    "calibrate",
    "calibrated_quantiles",
    "coverage_counts",
    "coverage_loss",
    "hb_ucb",
    "hoeffding_ucb",
    "interval_at",
    "lambda_grid",
    "max_admissible_misses",
    "read_calibration",
    "risk_curve",
    "select_lambda",
    "select_lambda_from_misses",
    "ucb",
    "ucb_curve",
    "write_calibration",
]
