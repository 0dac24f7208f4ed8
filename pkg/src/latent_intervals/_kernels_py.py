"""Pure-Python/numpy implementations of the hot kernels.

Reference twin of ``_kernels.pyx``; selected automatically when the compiled
extension is unavailable. Both modules expose the same functions with the
same argument conventions.

Renderer kernels take factor *values* (already squashed into their ranges,
shape ``(B, 8)``) rather than raw latents.
"""

import math

import numpy as np

NAME = "python"


def _parts(values, height, width):
    v = np.asarray(values, dtype=np.float64)
    cx, cy, r, fg, bg, soft, phase, contrast = (v[:, i, None, None] for i in range(8))
    ys = np.arange(height, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(width, dtype=np.float64)[None, :] + 0.5
    dx = xs - cx
    dy = ys - cy
    dist = np.sqrt(dx * dx + dy * dy)
    t = np.clip((r - dist) / soft + 0.5, 0.0, 1.0)
    alpha = t * t * (3.0 - 2.0 * t)
    arg = 2.0 * np.pi * ys / (height / 4.0) + phase
    back = bg + contrast * np.sin(arg)
    raw = (1.0 - alpha) * back + alpha * fg
    return dict(
        r=r, fg=fg, soft=soft, contrast=contrast, dx=dx, dy=dy, dist=dist,
        t=t, alpha=alpha, arg=arg, back=back, raw=raw,
    )


def render(values, height, width):
    """Images ``(B, H, W)`` in [0, 1] for factor values ``(B, 8)``."""
    return np.clip(_parts(values, height, width)["raw"], 0.0, 1.0)


def render_jacobian(values, height, width):
    """``(img, jac)`` with ``jac[b, k] = d img[b] / d values[b, k]``."""
    p = _parts(values, height, width)
    t, alpha, back, dist = p["t"], p["alpha"], p["back"], p["dist"]
    B = alpha.shape[0]
    dalpha_dt = np.where((t > 0.0) & (t < 1.0), 6.0 * t * (1.0 - t), 0.0)
    g = (p["fg"] - back) * dalpha_dt
    has_dist = dist > 0.0
    safe = np.where(has_dist, dist, 1.0)
    inv_soft = 1.0 / p["soft"]
    jac = np.empty((B, 8, height, width))
    jac[:, 0] = g * inv_soft * p["dx"] / safe * has_dist
    jac[:, 1] = g * inv_soft * p["dy"] / safe * has_dist
    jac[:, 2] = g * inv_soft
    jac[:, 3] = alpha
    jac[:, 4] = 1.0 - alpha
    jac[:, 5] = g * (-(p["r"] - dist) * inv_soft * inv_soft)
    jac[:, 6] = (1.0 - alpha) * p["contrast"] * np.cos(p["arg"])
    jac[:, 7] = (1.0 - alpha) * np.sin(p["arg"])
    raw = p["raw"]
    jac *= ((raw > 0.0) & (raw < 1.0))[:, None]
    return np.clip(raw, 0.0, 1.0), jac


def render_vjp(values, target):
    """Mean absolute error against ``target`` ``(B, H, W)`` and its gradient
    with respect to the factor values, ``(loss (B,), grad (B, 8))``.

    A zero pixel difference takes the +1 branch of ``|.|``.
    """
    target = np.asarray(target, dtype=np.float64)
    B, height, width = target.shape
    img, jac = render_jacobian(values, height, width)
    diff = img - target
    npix = height * width
    sign = np.where(diff >= 0.0, 1.0, -1.0)
    grad = np.einsum("bkhw,bhw->bk", jac, sign) / npix
    return np.abs(diff).mean(axis=(1, 2)), grad


def coverage_counts(point, q_lo, q_hi, z, mask, lambdas):
    """Number of masked dims covered by the scaled interval, per sample and λ.

    Returns int32 ``(n, L)``. The interval at λ is
    ``[f - λ (f - q_lo)_+, f + λ (q_hi - f)_+]``, closed at both ends.
    """
    f = np.asarray(point, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    keep = np.asarray(mask, dtype=bool)
    f, z = f[:, keep], z[:, keep]
    below = np.maximum(f - np.asarray(q_lo, dtype=np.float64)[:, keep], 0.0)
    above = np.maximum(np.asarray(q_hi, dtype=np.float64)[:, keep] - f, 0.0)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    out = np.empty((len(f), len(lambdas)), dtype=np.int32)
    for j, lam in enumerate(lambdas):
        lo = f - lam * below
        hi = f + lam * above
        out[:, j] = ((lo <= z) & (z <= hi)).sum(axis=1)
    return out


def binom_logcdf(k, n, p):
    """``log P(Bin(n, p) <= k)`` by direct summation of pmf ratios.

    Sums outward from ``k`` (downward below the mode, upper tail above it)
    so every term is a geometric-ish decay and the loop stops early.
    """
    k, n = int(k), int(n)
    if k < 0:
        return -math.inf
    if k >= n or p <= 0.0:
        return 0.0
    if p >= 1.0:
        return -math.inf
    lp, lq = math.log(p), math.log1p(-p)
    mode = math.floor((n + 1) * p)
    if k < mode:
        log_pk = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * lp + (n - k) * lq
        ratio = (1.0 - p) / p
        s = 1.0
        term = 1.0
        i = k
        while i > 0:
            term *= i / (n - i + 1) * ratio
            s += term
            if term < 1e-17 * s:
                break
            i -= 1
        return log_pk + math.log(s)
    j = k + 1
    log_pj = math.lgamma(n + 1) - math.lgamma(j + 1) - math.lgamma(n - j + 1) + j * lp + (n - j) * lq
    ratio = p / (1.0 - p)
    s = 1.0
    term = 1.0
    i = j
    while i < n:
        term *= (n - i) / (i + 1) * ratio
        s += term
        if term < 1e-17 * s:
            break
        i += 1
    tail = math.exp(log_pj) * s
    return math.log1p(-min(tail, 1.0)) if tail < 1.0 else -math.inf


def _h1(a, b):
    if a <= 0.0:
        return -math.log1p(-b)
    return a * math.log(a / b) + (1.0 - a) * math.log((1.0 - a) / (1.0 - b))


def _loss_count(mean, n):
    x = n * mean
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 * max(1.0, x) else int(math.ceil(x))


def hb_log_tail(mean, n, r):
    """``log min(exp(-n h1(mean, r)), e * BinCDF(ceil(n mean); n, r))``."""
    k = _loss_count(mean, n)
    hoeff = -n * _h1(min(mean, r), r)
    bentkus = 1.0 + binom_logcdf(k, n, r)
    return min(hoeff, bentkus)


def hb_ucb(mean, n, delta, tol=1e-9):
    """Smallest r in [mean, 1] with tail probability <= delta (bisection).

    Returns the upper end of the final bracket, so the returned r always
    satisfies the tail condition.
    """
    if mean >= 1.0:
        return 1.0
    log_delta = math.log(delta)
    lo, hi = float(mean), 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if hb_log_tail(mean, n, mid) <= log_delta:
            hi = mid
        else:
            lo = mid
    return hi
