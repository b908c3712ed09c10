# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference layout."""
import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, exp, log, log1p, lgamma, sqrt, fabs, isinf

cnp.import_array()

NAME = "cython"

cdef double Z_LO = -8.5
cdef double Z_HI = 8.5
cdef int Z_PANELS = 24
cdef int S_PANELS = 48
cdef double S_HALF_WIDTH = 12.0
cdef double SQRT1_2 = 0.7071067811865475244
cdef double INV_SQRT_2PI = 0.3989422804014327


def scatter_add_rows(Py_ssize_t n_rows, const cnp.int64_t[::1] idx, const double[:, ::1] src):
    cdef Py_ssize_t n = src.shape[0], d = src.shape[1], i, j, r
    out = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        r = idx[i]
        for j in range(d):
            o[r, j] += src[i, j]
    return out


cdef inline double _ndtr(double x) nogil:
    return 0.5 * erfc(-x * SQRT1_2)


cdef double _betacf(double a, double b, double x) nogil:
    cdef double tiny = 1e-300
    cdef double qab = a + b, qap = a + 1.0, qam = a - 1.0
    cdef double c = 1.0, d = 1.0 - qab * x / qap, h, aa, delta
    cdef int m, m2
    if fabs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10001):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if fabs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if fabs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if fabs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if fabs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if fabs(delta - 1.0) < 1e-16:
            break
    return h


def betainc_reg(double a, double b, double x):
    cdef double front
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = exp(lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


cdef double _range_sf(double w, int k, double[::1] z, double[::1] wz,
                      double[::1] phi, double[::1] cdf_z) nogil:
    cdef Py_ssize_t i, n = z.shape[0]
    cdef double acc = 0.0, inner, p
    cdef int e
    for i in range(n):
        inner = _ndtr(z[i] + w) - cdf_z[i]
        p = 1.0
        for e in range(k - 1):
            p *= inner
        acc += wz[i] * phi[i] * p
    return 1.0 - k * acc


def _panel_nodes(double lo, double hi, int panels, gl_x, gl_w):
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * gl_x[None, :]).ravel()
    weights = (half[:, None] * gl_w[None, :]).ravel()
    return np.ascontiguousarray(nodes), np.ascontiguousarray(weights)


def studentized_range_sf(double q, int k, double df, gl_x, gl_w):
    cdef double s0, span, log_norm, acc = 0.0, dens
    cdef Py_ssize_t i, ns
    if q <= 0.0:
        return 1.0
    zn, zw = _panel_nodes(Z_LO, Z_HI, Z_PANELS, gl_x, gl_w)
    cdef double[::1] z = zn
    cdef double[::1] wz = zw
    cdef double[::1] phi = np.exp(-0.5 * zn * zn) * INV_SQRT_2PI
    cdf_arr = np.empty_like(zn)
    cdef double[::1] cdf_z = cdf_arr
    for i in range(z.shape[0]):
        cdf_z[i] = _ndtr(z[i])
    if isinf(df):
        return _range_sf(q, k, z, wz, phi, cdf_z)
    s0 = sqrt(max(df - 1.0, 0.0) / df)
    span = S_HALF_WIDTH / sqrt(df)
    sn, sw = _panel_nodes(max(0.0, s0 - span), s0 + span, S_PANELS, gl_x, gl_w)
    cdef double[::1] s = sn
    cdef double[::1] ws = sw
    ns = s.shape[0]
    log_norm = 0.5 * df * log(df) - lgamma(0.5 * df) - (0.5 * df - 1.0) * log(2.0)
    with nogil:
        for i in range(ns):
            dens = exp(log_norm + (df - 1.0) * log(s[i]) - 0.5 * df * s[i] * s[i])
            acc += ws[i] * dens * _range_sf(q * s[i], k, z, wz, phi, cdf_z)
    return acc
