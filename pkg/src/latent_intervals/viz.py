"""Endpoint propagation through the generator and plot-data export.

Images are written as binary 8-bit PGM (``P5``, maxval 255, row-major,
pixel = round(255 * clip(v, 0, 1))).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import calibrated_quantiles, interval_at
from .encoder import check_mask, forward


def to_bytes(img):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"expected an (H, W) or (H, W, 1) image, got shape {np.shape(img)}")
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img):
    """Write a grayscale image in [0, 1] as binary PGM."""
    data = to_bytes(img)
    h, w = data.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e
    return path


def read_pgm(path):
    """Read a binary PGM written by :func:`write_pgm` as uint8 ``(H, W)``."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def endpoint_latent(out, lambda_hat, d, which):
    """Point prediction with coordinate ``d`` set to a calibrated endpoint."""
    point = np.asarray(out.point, dtype=np.float64)
    if point.ndim != 1:
        raise ValueError("endpoint_latent works on a single encoder output")
    if not 0 <= d < len(point):
        raise ValueError(f"dimension {d} out of range [0, {len(point)})")
    if which not in ("lower", "upper"):
        raise ValueError(f"which must be 'lower' or 'upper', got {which!r}")
    lo, hi = calibrated_quantiles(out, lambda_hat)
    z = point.copy()
    z[d] = lo[d] if which == "lower" else hi[d]
    return z


@dataclass
class EndpointPanel:
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    point: np.ndarray


def render_panel(params, lambda_hat, x, dims, out_dir, generator, mask=None):
    """Render lower/upper endpoint images for each dim in ``dims``.

    Writes ``input.pgm`` (plus ``input_mask.pgm`` for masked inputs),
    ``point.pgm``, ``d{d}_lower.pgm`` / ``d{d}_upper.pgm`` and a
    ``manifest.csv`` listing every file with its endpoint value.
    """
    mask = check_mask(np.ones(generator.dim, bool) if mask is None else mask, generator.dim)
    dims = [int(d) for d in dims]
    bad = [d for d in dims if not (0 <= d < generator.dim and mask[d])]
    if bad:
        raise ValueError(f"dims {bad} are not masked (relevant) dimensions")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = np.asarray(x)
    out = forward(params, x)
    point_img = generator.render(out.point)
    rows = [("input.pgm", "input", "", "")]
    write_pgm(out_dir / "input.pgm", x[..., 0])
    if x.shape[-1] > generator.channels:
        write_pgm(out_dir / "input_mask.pgm", x[..., -1])
        rows.append(("input_mask.pgm", "input_mask", "", ""))
    write_pgm(out_dir / "point.pgm", point_img)
    rows.append(("point.pgm", "point", "", ""))
    panels = []
    for d in dims:
        imgs = {}
        for which in ("lower", "upper"):
            z = endpoint_latent(out, lambda_hat, d, which)
            imgs[which] = generator.render(z)
            name = f"d{d}_{which}.pgm"
            write_pgm(out_dir / name, imgs[which])
            rows.append((name, which, d, repr(float(z[d]))))
        panels.append(EndpointPanel(d, imgs["lower"], imgs["upper"], point_img))
    with open(out_dir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["file", "kind", "dim", "latent_value"])
        w.writerows(rows)
    return panels


def interval_rows(out, lambda_hat, z_true, mask):
    """Per masked dim: raw and calibrated interval edges plus coverage flag."""
    z_true = np.asarray(z_true, dtype=np.float64)
    mask = check_mask(mask, len(z_true))
    cal = interval_at(out, lambda_hat)
    rows = []
    for d in np.flatnonzero(mask):
        covered = bool(cal.lo[d] <= z_true[d] <= cal.hi[d])
        rows.append(
            dict(
                d=int(d),
                f=float(out.point[d]),
                q_lo=float(out.q_lo[d]),
                q_hi=float(out.q_hi[d]),
                q_cal_lo=float(cal.lo[d]),
                q_cal_hi=float(cal.hi[d]),
                z_true=float(z_true[d]),
                covered=covered,
            )
        )
    return rows


def export_interval_plot_data(out, lambda_hat, z_true, mask, path):
    rows = interval_rows(out, lambda_hat, z_true, mask)
    cols = ["d", "f", "q_lo", "q_hi", "q_cal_lo", "q_cal_hi", "z_true", "covered"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["d"]] + [repr(r[c]) for c in cols[1:-1]] + [int(r["covered"])])
    return rows
