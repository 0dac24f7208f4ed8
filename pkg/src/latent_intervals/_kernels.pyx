# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; mirrors ``_kernels_py`` function for function."""

import numpy as np

from libc.math cimport sqrt, sin, cos, fabs, log, log1p, exp, lgamma, floor, ceil, round, INFINITY, M_PI

NAME = "compiled"


cdef inline double _clip01(double v) nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


def render(double[:, ::1] values, int height, int width):
    cdef Py_ssize_t B = values.shape[0]
    out = np.empty((B, height, width))
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t b, i, j
    cdef double cx, cy, r, fg, bg, soft, phase, contrast
    cdef double y, x, dx, dy, dist, t, alpha, back
    cdef double period = height / 4.0
    with nogil:
        for b in range(B):
            cx = values[b, 0]; cy = values[b, 1]; r = values[b, 2]; fg = values[b, 3]
            bg = values[b, 4]; soft = values[b, 5]; phase = values[b, 6]; contrast = values[b, 7]
            for i in range(height):
                y = i + 0.5
                back = bg + contrast * sin(2.0 * M_PI * y / period + phase)
                dy = y - cy
                for j in range(width):
                    x = j + 0.5
                    dx = x - cx
                    dist = sqrt(dx * dx + dy * dy)
                    t = _clip01((r - dist) / soft + 0.5)
                    alpha = t * t * (3.0 - 2.0 * t)
                    o[b, i, j] = _clip01((1.0 - alpha) * back + alpha * fg)
    return out


def render_vjp(double[:, ::1] values, double[:, :, ::1] target):
    cdef Py_ssize_t B = target.shape[0]
    cdef int height = target.shape[1]
    cdef int width = target.shape[2]
    loss = np.zeros(B)
    grad = np.zeros((B, 8))
    cdef double[::1] L = loss
    cdef double[:, ::1] G = grad
    cdef Py_ssize_t b, i, j
    cdef double cx, cy, r, fg, bg, soft, phase, contrast
    cdef double y, x, dx, dy, dist, t, alpha, back, arg, raw, img, diff, sgn
    cdef double g, inv_soft, sn, cs, inv_dist
    cdef double period = height / 4.0
    cdef double npix = height * width
    cdef double acc0, acc1, acc2, acc3, acc4, acc5, acc6, acc7, lacc
    with nogil:
        for b in range(B):
            cx = values[b, 0]; cy = values[b, 1]; r = values[b, 2]; fg = values[b, 3]
            bg = values[b, 4]; soft = values[b, 5]; phase = values[b, 6]; contrast = values[b, 7]
            inv_soft = 1.0 / soft
            acc0 = 0.0; acc1 = 0.0; acc2 = 0.0; acc3 = 0.0
            acc4 = 0.0; acc5 = 0.0; acc6 = 0.0; acc7 = 0.0; lacc = 0.0
            for i in range(height):
                y = i + 0.5
                arg = 2.0 * M_PI * y / period + phase
                sn = sin(arg)
                cs = cos(arg)
                back = bg + contrast * sn
                dy = y - cy
                for j in range(width):
                    x = j + 0.5
                    dx = x - cx
                    dist = sqrt(dx * dx + dy * dy)
                    t = _clip01((r - dist) / soft + 0.5)
                    alpha = t * t * (3.0 - 2.0 * t)
                    raw = (1.0 - alpha) * back + alpha * fg
                    img = _clip01(raw)
                    diff = img - target[b, i, j]
                    lacc += fabs(diff)
                    if not (raw > 0.0 and raw < 1.0):
                        continue
                    sgn = 1.0 if diff >= 0.0 else -1.0
                    if t > 0.0 and t < 1.0:
                        g = (fg - back) * 6.0 * t * (1.0 - t)
                        if dist > 0.0:
                            inv_dist = 1.0 / dist
                            acc0 += sgn * g * inv_soft * dx * inv_dist
                            acc1 += sgn * g * inv_soft * dy * inv_dist
                        acc2 += sgn * g * inv_soft
                        acc5 += sgn * g * (-(r - dist) * inv_soft * inv_soft)
                    acc3 += sgn * alpha
                    acc4 += sgn * (1.0 - alpha)
                    acc6 += sgn * (1.0 - alpha) * contrast * cs
                    acc7 += sgn * (1.0 - alpha) * sn
            L[b] = lacc / npix
            G[b, 0] = acc0 / npix; G[b, 1] = acc1 / npix; G[b, 2] = acc2 / npix
            G[b, 3] = acc3 / npix; G[b, 4] = acc4 / npix; G[b, 5] = acc5 / npix
            G[b, 6] = acc6 / npix; G[b, 7] = acc7 / npix
    return loss, grad


cdef inline Py_ssize_t _first_true_lo(double[::1] lam, double f, double a, double zz) nogil:
    # first index with f - lam*a <= zz; intervals are nested so the predicate is monotone
    cdef Py_ssize_t lo = 0, hi = lam.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if f - lam[mid] * a <= zz:
            hi = mid
        else:
            lo = mid + 1
    return lo


cdef inline Py_ssize_t _first_true_hi(double[::1] lam, double f, double b, double zz) nogil:
    cdef Py_ssize_t lo = 0, hi = lam.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if zz <= f + lam[mid] * b:
            hi = mid
        else:
            lo = mid + 1
    return lo


def coverage_counts(point, q_lo, q_hi, z, mask, lambdas):
    cdef double[:, ::1] F = np.ascontiguousarray(point, dtype=np.float64)
    cdef double[:, ::1] QL = np.ascontiguousarray(q_lo, dtype=np.float64)
    cdef double[:, ::1] QH = np.ascontiguousarray(q_hi, dtype=np.float64)
    cdef double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef unsigned char[::1] M = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef double[::1] lam = np.ascontiguousarray(lambdas, dtype=np.float64)
    cdef Py_ssize_t n = F.shape[0], D = F.shape[1], L = lam.shape[0]
    cdef Py_ssize_t i, d, l, start, s1, s2
    cdef double f, a, b, zz
    out = np.zeros((n, L), dtype=np.int32)
    cdef int[:, ::1] O = out
    with nogil:
        for i in range(n):
            for d in range(D):
                if not M[d]:
                    continue
                f = F[i, d]
                a = f - QL[i, d]
                if a < 0.0:
                    a = 0.0
                b = QH[i, d] - f
                if b < 0.0:
                    b = 0.0
                zz = Z[i, d]
                s1 = _first_true_lo(lam, f, a, zz)
                s2 = _first_true_hi(lam, f, b, zz)
                start = s1 if s1 > s2 else s2
                if start < L:
                    O[i, start] += 1
            for l in range(1, L):
                O[i, l] += O[i, l - 1]
    return out


cdef double _binom_logcdf(long k, long n, double p) nogil:
    cdef double lp, lq, log_pk, ratio, s, term, tail
    cdef long mode, i, j
    if k < 0:
        return -INFINITY
    if k >= n or p <= 0.0:
        return 0.0
    if p >= 1.0:
        return -INFINITY
    lp = log(p)
    lq = log1p(-p)
    mode = <long> floor((n + 1) * p)
    if k < mode:
        log_pk = lgamma(n + 1.0) - lgamma(k + 1.0) - lgamma(n - k + 1.0) + k * lp + (n - k) * lq
        ratio = (1.0 - p) / p
        s = 1.0
        term = 1.0
        i = k
        while i > 0:
            term *= (<double> i) / (n - i + 1) * ratio
            s += term
            if term < 1e-17 * s:
                break
            i -= 1
        return log_pk + log(s)
    j = k + 1
    log_pk = lgamma(n + 1.0) - lgamma(j + 1.0) - lgamma(n - j + 1.0) + j * lp + (n - j) * lq
    ratio = p / (1.0 - p)
    s = 1.0
    term = 1.0
    i = j
    while i < n:
        term *= (<double> (n - i)) / (i + 1) * ratio
        s += term
        if term < 1e-17 * s:
            break
        i += 1
    tail = exp(log_pk) * s
    if tail < 1.0:
        return log1p(-tail)
    return -INFINITY


def binom_logcdf(k, n, double p):
    return _binom_logcdf(<long> k, <long> n, p)


cdef inline double _h1(double a, double b) nogil:
    if a <= 0.0:
        return -log1p(-b)
    return a * log(a / b) + (1.0 - a) * log((1.0 - a) / (1.0 - b))


cdef inline long _loss_count(double mean, long n) nogil:
    cdef double x = n * mean
    cdef double r = round(x)
    cdef double scale = x if x > 1.0 else 1.0
    if fabs(x - r) < 1e-9 * scale:
        return <long> r
    return <long> ceil(x)


cdef inline double _hb_log_tail(double mean, long n, long k, double r) nogil:
    cdef double a = mean if mean < r else r
    cdef double hoeff = -n * _h1(a, r)
    cdef double bentkus = 1.0 + _binom_logcdf(k, n, r)
    return hoeff if hoeff < bentkus else bentkus


def hb_log_tail(double mean, n, double r):
    return _hb_log_tail(mean, <long> n, _loss_count(mean, <long> n), r)


def hb_ucb(double mean, n, double delta, double tol=1e-9):
    cdef long nn = <long> n
    cdef long k
    cdef double log_delta, lo, hi, mid
    if mean >= 1.0:
        return 1.0
    k = _loss_count(mean, nn)
    log_delta = log(delta)
    lo = mean
    hi = 1.0
    with nogil:
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if _hb_log_tail(mean, nn, k, mid) <= log_delta:
                hi = mid
            else:
                lo = mid
    return hi
