"""Pure numpy implementations of the hot kernels.

Kept numerically identical in layout to ``_ckernels.pyx`` so the two
backends agree to rounding error.
"""
import math

import numpy as np
from scipy.special import ndtr

NAME = "python"

# quadrature layout shared with the compiled backend
Z_LO, Z_HI, Z_PANELS = -8.5, 8.5, 24
S_PANELS = 48
S_HALF_WIDTH = 12.0


def scatter_add_rows(n_rows, idx, src):
    out = np.zeros((n_rows, src.shape[1]), dtype=np.float64)
    np.add.at(out, idx, src)
    return out


def _betacf(a, b, x):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 10001):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc_reg(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _panel_nodes(lo, hi, panels, gl_x, gl_w):
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * gl_x[None, :]).ravel()
    weights = (half[:, None] * gl_w[None, :]).ravel()
    return nodes, weights


def _range_sf(w, k, z, wz):
    # P(range of k iid standard normals > w), for an array of w
    phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    inner = ndtr(z[None, :] + w[:, None]) - ndtr(z)[None, :]
    cdf = k * ((wz * phi)[None, :] * inner ** (k - 1)).sum(axis=1)
    return 1.0 - cdf


def studentized_range_sf(q, k, df, gl_x, gl_w):
    if q <= 0.0:
        return 1.0
    z, wz = _panel_nodes(Z_LO, Z_HI, Z_PANELS, gl_x, gl_w)
    if math.isinf(df):
        return float(_range_sf(np.array([q]), k, z, wz)[0])
    s0 = math.sqrt(max(df - 1.0, 0.0) / df)
    span = S_HALF_WIDTH / math.sqrt(df)
    s, ws = _panel_nodes(max(0.0, s0 - span), s0 + span, S_PANELS, gl_x, gl_w)
    log_norm = (
        0.5 * df * math.log(df) - math.lgamma(0.5 * df) - (0.5 * df - 1.0) * math.log(2.0)
    )
    dens = np.exp(log_norm + (df - 1.0) * np.log(s) - 0.5 * df * s * s)
    return float((ws * dens * _range_sf(q * s, k, z, wz)).sum())
