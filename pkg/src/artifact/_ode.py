"""Compiled Dormand-Prince 5(4) kernels for the pathwise ODEs.

All drivers are continuous and piecewise linear on a grid, so every ODE
is integrated cell by cell with the driver's slope frozen inside a cell.
The integrator restarts on each cell, which keeps the right-hand side
smooth within each adaptive step.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .models import disp, drift, transform_G

# Dormand-Prince tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200,
                          22 / 525, -1 / 40)

RHS_DIRECT, RHS_TRANSFORM, RHS_DOSS = 0, 1, 2
MAX_STEPS = 100_000


@njit(cache=True)
def _step_factor(errn):
    if errn == 0.0:
        return 5.0
    f = 0.9 * errn ** -0.2
    return min(5.0, max(0.2, f))


@njit(cache=True)
def flow_kernel(code, alpha, beta, rtol, atol):
    """Integrate d phi = sigma(phi) d eta, d L = sigma'(phi) d eta on [0, beta].

    Returns (phi, L, error_estimate, ok) with L = log of d phi / d alpha.
    """
    if beta == 0.0:
        return alpha, 0.0, 0.0, True
    sgn = 1.0 if beta > 0.0 else -1.0
    span = abs(beta)
    y0, y1 = alpha, 0.0
    eta = 0.0
    h = min(span, 0.1)
    k1a, k1b = disp(code, y0, 0), disp(code, y0, 1)
    errn = 0.0
    for _ in range(MAX_STEPS):
        last = eta + h >= span
        if last:
            h = span - eta
        hs = h * sgn
        z = y0 + hs * A21 * k1a
        k2a, k2b = disp(code, z, 0), disp(code, z, 1)
        z = y0 + hs * (A31 * k1a + A32 * k2a)
        k3a, k3b = disp(code, z, 0), disp(code, z, 1)
        z = y0 + hs * (A41 * k1a + A42 * k2a + A43 * k3a)
        k4a, k4b = disp(code, z, 0), disp(code, z, 1)
        z = y0 + hs * (A51 * k1a + A52 * k2a + A53 * k3a + A54 * k4a)
        k5a, k5b = disp(code, z, 0), disp(code, z, 1)
        z = y0 + hs * (A61 * k1a + A62 * k2a + A63 * k3a + A64 * k4a + A65 * k5a)
        k6a, k6b = disp(code, z, 0), disp(code, z, 1)
        n0 = y0 + hs * (B1 * k1a + B3 * k3a + B4 * k4a + B5 * k5a + B6 * k6a)
        n1 = y1 + hs * (B1 * k1b + B3 * k3b + B4 * k4b + B5 * k5b + B6 * k6b)
        k7a, k7b = disp(code, n0, 0), disp(code, n0, 1)
        e0 = hs * (E1 * k1a + E3 * k3a + E4 * k4a + E5 * k5a + E6 * k6a + E7 * k7a)
        e1 = hs * (E1 * k1b + E3 * k3b + E4 * k4b + E5 * k5b + E6 * k6b + E7 * k7b)
        errn = max(abs(e0) / (atol + rtol * max(abs(y0), abs(n0))),
                   abs(e1) / (atol + rtol * max(abs(y1), abs(n1))))
        if errn <= 1.0:
            eta += h
            y0, y1 = n0, n1
            k1a, k1b = k7a, k7b
            if last:
                return y0, y1, errn, True
        h = h * _step_factor(errn)
    return y0, y1, errn, False


@njit(cache=True)
def _rhs(kind, code, y, s, slope, g0, ftol):
    """Right-hand side at local time s inside a cell with g = g0 + slope s."""
    if kind == RHS_DIRECT:
        return drift(code, y, 0) + disp(code, y, 0) * slope
    if kind == RHS_TRANSFORM:
        x = transform_G(code, y + g0 + slope * s)
        return drift(code, x, 0) / disp(code, x, 0)
    phi, logd, _, _ = flow_kernel(code, y, g0 + slope * s, ftol, ftol)
    return drift(code, phi, 0) * math.exp(-logd)


@njit(cache=True)
def cell_kernel(kind, code, y, width, slope, g0, rtol, atol, ftol):
    """Integrate one cell of the given width; returns (y, error, ok)."""
    s = 0.0
    h = width
    k1 = _rhs(kind, code, y, 0.0, slope, g0, ftol)
    errn = 0.0
    for _ in range(MAX_STEPS):
        last = s + h >= width
        if last:
            h = width - s
        k2 = _rhs(kind, code, y + h * A21 * k1, s + C2 * h, slope, g0, ftol)
        k3 = _rhs(kind, code, y + h * (A31 * k1 + A32 * k2), s + C3 * h, slope, g0, ftol)
        k4 = _rhs(kind, code, y + h * (A41 * k1 + A42 * k2 + A43 * k3), s + C4 * h,
                  slope, g0, ftol)
        k5 = _rhs(kind, code, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4),
                  s + C5 * h, slope, g0, ftol)
        k6 = _rhs(kind, code, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5),
                  s + h, slope, g0, ftol)
        yn = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
        k7 = _rhs(kind, code, yn, s + h, slope, g0, ftol)
        e = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
        errn = abs(e) / (atol + rtol * max(abs(y), abs(yn)))
        if errn <= 1.0:
            s += h
            y = yn
            k1 = k7
            if last:
                return y, errn, True
        h = h * _step_factor(errn)
    return y, errn, False


@njit(cache=True)
def grid_kernel(kind, code, y0, times, g, rtol, atol, ftol):
    """Chain ``cell_kernel`` over all cells of a grid.

    For the transform and Doss kinds the cell offset g0 is the driver value
    at the left node (relative driver for the transform route).
    Returns (values, max_error, ok).
    """
    n = times.size - 1
    out = np.empty(n + 1)
    out[0] = y0
    y = y0
    worst = 0.0
    for i in range(n):
        width = times[i + 1] - times[i]
        slope = (g[i + 1] - g[i]) / width
        y, err, ok = cell_kernel(kind, code, y, width, slope, g[i], rtol, atol, ftol)
        if not ok:
            out[i + 1:] = np.nan
            return out, err, False
        worst = max(worst, err)
        out[i + 1] = y
    return out, worst, True


@njit(cache=True, parallel=True)
def direct_paths_kernel(code, xi, G, h, tol):
    """Direct route for many drivers (rows of G) on a uniform grid of mesh h."""
    n_paths, n1 = G.shape
    out = np.empty((n_paths, n1))
    ok = np.ones(n_paths, dtype=np.bool_)
    for p in prange(n_paths):
        y = xi[p]
        out[p, 0] = y
        for i in range(n1 - 1):
            slope = (G[p, i + 1] - G[p, i]) / h
            y, err, good = cell_kernel(RHS_DIRECT, code, y, h, slope, 0.0, tol, tol, tol)
            if not good:
                ok[p] = False
            out[p, i + 1] = y
    return out, ok


@njit(cache=True)
def sens_cell_kernel(code, x, w, width, slope, dslope, rtol, atol):
    """Direct route on one cell together with d x / d(parameter).

    The driver slope depends affinely on a parameter with derivative
    ``dslope``; the sensitivity ``w`` (initial value given) obeys the
    variational equation. Returns (x, sensitivity, ok).
    """
    s = 0.0
    h = width
    k1, l1 = _sens_rhs(code, x, w, slope, dslope)
    for _ in range(MAX_STEPS):
        last = s + h >= width
        if last:
            h = width - s
        k2, l2 = _sens_rhs(code, x + h * A21 * k1, w + h * A21 * l1, slope, dslope)
        k3, l3 = _sens_rhs(code, x + h * (A31 * k1 + A32 * k2), w + h * (A31 * l1 + A32 * l2),
                           slope, dslope)
        k4, l4 = _sens_rhs(code, x + h * (A41 * k1 + A42 * k2 + A43 * k3),
                           w + h * (A41 * l1 + A42 * l2 + A43 * l3), slope, dslope)
        k5, l5 = _sens_rhs(code, x + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4),
                           w + h * (A51 * l1 + A52 * l2 + A53 * l3 + A54 * l4), slope, dslope)
        k6, l6 = _sens_rhs(code, x + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5),
                           w + h * (A61 * l1 + A62 * l2 + A63 * l3 + A64 * l4 + A65 * l5),
                           slope, dslope)
        xn = x + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
        wn = w + h * (B1 * l1 + B3 * l3 + B4 * l4 + B5 * l5 + B6 * l6)
        k7, l7 = _sens_rhs(code, xn, wn, slope, dslope)
        e = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
        errn = abs(e) / (atol + rtol * max(abs(x), abs(xn)))
        if errn <= 1.0:
            s += h
            x, w = xn, wn
            k1, l1 = k7, l7
            if last:
                return x, w, True
        h = h * _step_factor(errn)
    return x, w, False


@njit(cache=True)
def _sens_rhs(code, x, w, slope, dslope):
    f = drift(code, x, 0) + disp(code, x, 0) * slope
    df = (drift(code, x, 1) + disp(code, x, 1) * slope) * w + disp(code, x, 0) * dslope
    return f, df

