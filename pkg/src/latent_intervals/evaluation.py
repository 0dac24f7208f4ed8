"""Experiment protocols: repeated calibrate/evaluate splits and set-size
adaptivity across corruption levels."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import (
    RiskSpec,
    coverage_counts,
    interval_at,
    lambda_grid,
    max_admissible_misses,
    select_lambda_from_misses,
)
from .encoder import check_mask, predict
from .synth_gen import STREAM_ADAPTIVITY, STREAM_COVERAGE, make_samples, substream

HIST_BINS = 20


def empirical_risk(out, z, lam, mask):
    """Mean coverage loss of the scaled intervals at ``lam`` over a batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("empirical risk needs a nonempty (n, D) batch")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    mask = check_mask(mask, z.shape[1])
    counts = coverage_counts(out, z, mask, [float(lam)])[:, 0]
    m = int(mask.sum())
    return float((len(z) * m - counts.sum(dtype=np.int64)) / (len(z) * m))


def set_size(out, lambda_hat, mask):
    """Mean calibrated interval width over the masked dims (per sample)."""
    if lambda_hat is None or lambda_hat < 0:
        raise ValueError(f"lambda_hat must be a nonnegative number, got {lambda_hat}")
    iv = interval_at(out, lambda_hat)
    mask = check_mask(mask, np.shape(iv.lo)[-1])
    w = iv.width[..., mask].mean(axis=-1)
    return float(w) if np.ndim(w) == 0 else w


def _histogram(values, edges):
    counts, _ = np.histogram(values[np.isfinite(values)], bins=edges)
    return counts.tolist()


# ---------------------------------------------------------------------------
# Coverage trials
# ---------------------------------------------------------------------------


@dataclass
class CoverageTrialReport:
    """One row per trial. ``lambda_hat`` is NaN (and ``post_risk`` NaN) for
    trials whose calibration half admits no feasible grid value."""

    lambda_hat: np.ndarray
    pre_risk: np.ndarray
    post_risk: np.ndarray
    spec: RiskSpec
    bound_kind: str
    n_cal: int
    n_eval: int

    @property
    def n_trials(self):
        return len(self.pre_risk)

    def violations(self):
        """Trials whose post-calibration risk exceeds alpha (infeasible counts)."""
        post = self.post_risk
        return int(np.sum(~np.isfinite(post) | (post > self.spec.alpha)))

    def summary(self):
        edges = np.linspace(0.0, 1.0, 101)
        finite = np.isfinite(self.post_risk)
        return {
            "n_trials": self.n_trials,
            "alpha": self.spec.alpha,
            "delta": self.spec.delta,
            "bound_kind": self.bound_kind,
            "n_cal": self.n_cal,
            "n_eval": self.n_eval,
            "mean_pre_risk": float(np.mean(self.pre_risk)),
            "mean_post_risk": float(np.mean(self.post_risk[finite])) if finite.any() else None,
            "mean_lambda_hat": float(np.mean(self.lambda_hat[finite])) if finite.any() else None,
            "infeasible_trials": int(np.sum(~finite)),
            "violations": self.violations(),
            "histogram_bin_edges": "numpy.linspace(0, 1, 101)",
            "pre_risk_histogram": _histogram(self.pre_risk, edges),
            "post_risk_histogram": _histogram(self.post_risk, edges),
        }


def coverage_trials(out, z, mask, spec=None, n_trials=100, seed=0, grid=None, bound="hoeffding-bentkus"):
    """Repeated random 50-50 splits of a labelled pool: calibrate on one half,
    measure risk on the other half before (``lam = 1``) and after
    (``lam = lambda_hat``) calibration. Both risks use the same eval half."""
    spec = spec or RiskSpec()
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    if n < 100:
        raise ValueError(f"coverage trials need a pool of at least 100 samples, got {n}")
    mask = check_mask(mask, z.shape[1])
    m = int(mask.sum())
    counts = coverage_counts(out, z, mask, grid)
    raw = coverage_counts(out, z, mask, [1.0])[:, 0]
    n_cal = n // 2
    n_eval = n - n_cal
    limit = max_admissible_misses(n_cal, m, spec, bound)

    lam_hat = np.full(n_trials, np.nan)
    pre = np.empty(n_trials)
    post = np.full(n_trials, np.nan)
    for t in range(n_trials):
        perm = substream(seed, STREAM_COVERAGE, t).permutation(n)
        cal, ev = np.sort(perm[:n_cal]), np.sort(perm[n_cal:])
        misses = n_cal * m - counts[cal].sum(axis=0, dtype=np.int64)
        pre[t] = (n_eval * m - raw[ev].sum(dtype=np.int64)) / (n_eval * m)
        lam, idx = select_lambda_from_misses(misses, grid, limit)
        if lam is not None:
            lam_hat[t] = lam
            post[t] = (n_eval * m - counts[ev, idx].sum(dtype=np.int64)) / (n_eval * m)
    return CoverageTrialReport(lam_hat, pre, post, spec, bound, n_cal, n_eval)


def write_coverage_report(report, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "coverage.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trial", "lambda_hat", "pre_risk", "post_risk"])
        for t in range(report.n_trials):
            w.writerow([t, repr(float(report.lambda_hat[t])), repr(float(report.pre_risk[t])), repr(float(report.post_risk[t]))])
    with open(directory / "coverage.json", "w") as f:
        json.dump(report.summary(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Adaptivity
# ---------------------------------------------------------------------------


@dataclass
class AdaptivityReport:
    levels: list
    sizes: list = field(default_factory=list)
    lambda_hat: float = 1.0

    def means(self):
        return [float(np.mean(s)) for s in self.sizes]

    def summary(self):
        hi = max(float(np.max(s)) for s in self.sizes) if self.sizes else 1.0
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, HIST_BINS + 1)
        rows = []
        for spec, s in zip(self.levels, self.sizes):
            rows.append(
                {
                    "label": spec.label(),
                    "kind": spec.kind,
                    "parameter": spec.parameter,
                    "n": len(s),
                    "mean": float(np.mean(s)),
                    "median": float(np.median(s)),
                    "q10": float(np.quantile(s, 0.1)),
                    "q90": float(np.quantile(s, 0.9)),
                    "histogram": _histogram(np.asarray(s), edges),
                }
            )
        return {
            "lambda_hat": self.lambda_hat,
            "histogram_bin_edges": [float(e) for e in edges],
            "levels": rows,
        }


def adaptivity_study(params, lambda_hat, levels, n_per_level, seed, generator, policy, mask):
    """Calibrated set sizes on fresh samples at each corruption level.

    The same ``n_per_level`` latents are reused across levels (and masked
    levels share one noise field), so level-to-level differences reflect the
    corruption alone.
    """
    if len(levels) < 2:
        raise ValueError("adaptivity study needs at least two difficulty levels")
    mask = check_mask(mask, generator.dim)
    report = AdaptivityReport(list(levels), [], float(lambda_hat))
    for spec in levels:
        data = make_samples(n_per_level, generator, policy, seed, STREAM_ADAPTIVITY, specs=[spec] * n_per_level)
        out = predict(params, data.x)
        report.sizes.append(np.asarray(set_size(out, lambda_hat, mask)))
    return report


def write_adaptivity_report(report, directory, name="adaptivity"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{name}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["level", "kind", "parameter", "sample", "set_size"])
        for spec, sizes in zip(report.levels, report.sizes):
            for i, s in enumerate(sizes):
                w.writerow([spec.label(), spec.kind, f"{spec.parameter:g}", i, repr(float(s))])
    with open(directory / f"{name}.json", "w") as f:
        json.dump(report.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
