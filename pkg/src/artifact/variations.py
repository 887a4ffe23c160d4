"""Hermite and trapezoidal variation functionals and their limit constants.

The covariance tables ``a`` and ``a_dagger`` of the trapezoid kernel
zeta_k = (1/2) dB_k - int_{k-1}^k (B_u - B_{k-1}) du (unit-spaced grid)
are evaluated in closed form through the primitives

    K(u) = |u|^{2H},  P(u) = sign(u)|u|^{2H+1}/(2H+1),
    Q(u) = |u|^{2H+2}/((2H+1)(2H+2)),

and, for lags |d| >= 8, through binomial series in 1/d that avoid the
catastrophic cancellation of the closed forms. Infinite sums over lags
are split into an exact head and an analytic tail summed with Hurwitz
zeta functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import binom, zeta

from .errors import DomainError

SERIES_LAG = 8
SERIES_TERMS = 40
TAIL_TOL = 1e-10
L_START, L_CAP = 1000, 10_000_000


def _check_hurst(H: float) -> None:
    if not 0.0 < H < 1.0:
        raise DomainError(f"Hurst parameter must lie in (0, 1), got {H}")


def hermite(q: int, xi):
    """Probabilists' Hermite polynomial H_q evaluated at ``xi``.

    Uses H_{q+1}(x) = x H_q(x) - q H_{q-1}(x).

    Examples
    --------
    >>> hermite(4, 0.0)
    3.0
    """
    if q < 0 or q > 10:
        raise DomainError("Hermite order must satisfy 0 <= q <= 10")
    x = np.asarray(xi, dtype=float)
    h_prev, h = np.zeros_like(x), np.ones_like(x)
    for j in range(q):
        h_prev, h = h, x * h - j * h_prev
    return float(h) if h.ndim == 0 else h


# ---------------------------------------------------------------------------
# closed forms and series for rho, a, a_dagger


def _K(u, H):
    return np.abs(u) ** (2 * H)


def _P(u, H):
    return np.sign(u) * np.abs(u) ** (2 * H + 1) / (2 * H + 1)


def _Q(u, H):
    return np.abs(u) ** (2 * H + 2) / ((2 * H + 1) * (2 * H + 2))


def _rho_series(n: np.ndarray, H: float) -> np.ndarray:
    u = 1.0 / n
    total = np.zeros_like(n)
    for j in range(SERIES_TERMS, 1, -2):
        total = total + binom(2 * H, j) * u**j
    return n ** (2 * H) * total


def rho(H: float, l):
    """Unit-lag increment correlation rho_H(l) = E[B_1 (B_{l+1} - B_l)].

    Examples
    --------
    >>> rho(0.5, 5)
    0.0
    """
    _check_hurst(H)
    lv = np.abs(np.asarray(l, dtype=float))
    if np.any(np.asarray(l) < 0):
        raise DomainError("lag must be non-negative")
    out = 0.5 * (_K(lv + 1, H) + _K(lv - 1, H) - 2 * _K(lv, H))
    big = lv >= SERIES_LAG
    if np.any(big):
        out = np.where(big, _rho_series(np.where(big, lv, SERIES_LAG), H), out)
    return float(out) if out.ndim == 0 else out


def _a_coeffs(H: float) -> np.ndarray:
    """Even-power coefficients c_j with a(n) = n^{2H}/2 sum_j c_j n^{-j}."""
    a1, a2 = 2 * H + 1, 2 * H + 2
    c = np.zeros(SERIES_TERMS + 1)
    for j in range(0, SERIES_TERMS + 1, 2):
        c[j] = (-0.5 * binom(2 * H, j) * (2.0 if j == 0 else 1.0)
                + (2.0 / a1) * binom(a1, j + 1)
                - (2.0 / (a1 * a2)) * binom(a2, j + 2))
    # the two leading coefficients vanish identically
    c[0] = c[2] = 0.0
    return c


def _a_lag(H: float, d: np.ndarray) -> np.ndarray:
    n = np.abs(d)
    closed = 0.5 * (-0.25 * (2 * _K(n, H) + _K(n + 1, H) + _K(n - 1, H))
                    + (_P(n + 1, H) - _P(n - 1, H))
                    - (_Q(n + 1, H) - 2 * _Q(n, H) + _Q(n - 1, H)))
    big = n >= SERIES_LAG
    if np.any(big):
        nb = np.where(big, n, SERIES_LAG)
        c = _a_coeffs(H)
        u = 1.0 / nb
        s = np.zeros_like(nb)
        for j in range(SERIES_TERMS, 3, -2):
            s = s + c[j] * u**j
        closed = np.where(big, 0.5 * nb ** (2 * H) * s, closed)
    return closed


def _adag_series(H: float, n: np.ndarray) -> np.ndarray:
    a1 = 2 * H + 1
    u = 1.0 / n
    s = np.zeros_like(n)
    for j in range(SERIES_TERMS - 1, 2, -2):
        s = s + (-0.5 * binom(2 * H, j) + binom(a1, j + 1) / a1) * u**j
    return n ** (2 * H) * s


def _adag_lag(H: float, d: np.ndarray) -> np.ndarray:
    # symmetric summation order keeps the value exactly odd in d
    closed = (0.25 * (_K(d - 1, H) - _K(d + 1, H))
              + 0.5 * ((_P(d + 1, H) + _P(d - 1, H)) - 2 * _P(d, H)))
    big = np.abs(d) >= SERIES_LAG
    if np.any(big):
        nb = np.where(big, np.abs(d), SERIES_LAG)
        closed = np.where(big, np.sign(d) * _adag_series(H, nb), closed)
    return closed


def _lag_args(k, l) -> np.ndarray:
    kk, ll = np.asarray(k), np.asarray(l)
    if np.any(kk < 1) or np.any(ll < 1):
        raise DomainError("grid indices k, l must be >= 1")
    return (kk - ll).astype(float)


def a_cov(H: float, k, l):
    """Covariance a_{k,l} of the unit-grid trapezoid kernels zeta_k, zeta_l.

    Examples
    --------
    >>> round(a_cov(0.5, 3, 3) * 12, 12)
    1.0
    """
    _check_hurst(H)
    out = _a_lag(H, _lag_args(k, l))
    return float(out) if out.ndim == 0 else out


def a_dagger(H: float, k, l):
    """Cross covariance a^dagger_{k,l} = E[dB_k zeta_l] on the unit grid."""
    _check_hurst(H)
    out = _adag_lag(H, _lag_args(k, l))
    return float(out) if out.ndim == 0 else out


def rho_tilde(H: float, l):
    """Kernel autocovariance rho~_H(l) = a_{1, l+1}."""
    return a_cov(H, 1, np.asarray(l) + 1)


# ---------------------------------------------------------------------------
# limit constants


def _poly_power(c: np.ndarray, q: int, degree: int) -> np.ndarray:
    out = np.zeros(degree + 1)
    out[0] = 1.0
    for _ in range(q):
        out = np.convolve(out, c)[: degree + 1]
    return out


def _zeta_tail(exponents: np.ndarray, weights: np.ndarray, L: int) -> Tuple[float, float]:
    """Sum_j w_j zeta(s_j, L+1) and a bound from the first omitted order."""
    terms = weights * zeta(exponents, L + 1.0)
    omitted = abs(terms[-1]) * 2.0 if terms.size else 0.0
    return float(np.sum(terms[::-1])), float(omitted)


def _rho_power_tail(H: float, q: int, L: int) -> Tuple[float, float]:
    # rho(l)^q = l^{2Hq} (sum_{i>=1} C(2H,2i) v^i)^q with v = l^{-2}
    n_terms = 12
    c = np.array([0.0] + [binom(2 * H, 2 * i) for i in range(1, n_terms + 1)])
    coeffs = _poly_power(c, q, q + n_terms)
    p = np.arange(q, q + n_terms + 1)
    w = coeffs[q:]
    return _zeta_tail(2 * p - 2 * H * q, w, L)


def _a_tail(H: float, L: int) -> Tuple[float, float]:
    c = _a_coeffs(H)
    j = np.arange(4, SERIES_TERMS + 1, 2)
    return _zeta_tail(j - 2 * H, 0.5 * c[j], L)


def _head_and_tail(head: Callable[[np.ndarray], np.ndarray],
                   tail: Callable[[int], Tuple[float, float]]) -> Tuple[float, int, float]:
    L = L_START
    while True:
        lags = np.arange(1, L + 1, dtype=float)
        t_val, bound = tail(L)
        if bound < TAIL_TOL or L >= L_CAP:
            values = head(lags)
            return float(np.sum(values[::-1]) + t_val), L, bound
        L *= 2


@dataclass
class SeriesResult:
    """Value of a lag series with the truncation used and its tail bound."""

    value: float
    truncation: int
    tail_bound: float


def sigma_qH_series(q: int, H: float) -> SeriesResult:
    """sigma_{q,H}^2 = q! (1 + 2 sum_{l>=1} rho_H(l)^q) with truncation data."""
    _check_hurst(H)
    if q < 2:
        raise DomainError("sigma_qH requires q >= 2")
    if H >= 1 - 1 / (2 * q):
        raise DomainError(f"series diverges: need H < 1 - 1/(2q) = {1 - 1 / (2 * q):.6g}")
    s, L, bound = _head_and_tail(lambda lag: rho(H, lag) ** q, lambda L: _rho_power_tail(H, q, L))
    return SeriesResult(math.factorial(q) * (1 + 2 * s), L, 2 * math.factorial(q) * bound)


def sigma_qH(q: int, H: float) -> float:
    """Hermite-variation CLT constant sigma_{q,H}.

    Examples
    --------
    >>> round(sigma_qH(3, 0.5) ** 2, 9)
    6.0
    """
    return math.sqrt(sigma_qH_series(q, H).value)


def sigma_tilde_series(H: float) -> SeriesResult:
    """sigma~_H^2 = (1/4)(1-H)/(1+H) + 2 sum_{l>=1} rho~_H(l)."""
    _check_hurst(H)
    s, L, bound = _head_and_tail(lambda lag: _a_lag(H, lag), lambda L: _a_tail(H, L))
    return SeriesResult(0.25 * (1 - H) / (1 + H) + 2 * s, L, 2 * bound)


def sigma_tilde(H: float) -> float:
    """Trapezoid-variation CLT constant sigma~_H."""
    return math.sqrt(sigma_tilde_series(H).value)


@dataclass
class LimitConstants:
    """Bundle of the constants for one Hurst parameter."""

    hurst: float
    q: int
    rho: List[float]
    sigma_qH: float
    sigma_tilde: float
    truncation: int
    tail_bound: float
    rho_tilde: List[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rho": self.rho, "sigma_qH": self.sigma_qH, "sigma_tilde": self.sigma_tilde,
                "truncation": self.truncation, "tail_bound": self.tail_bound}


def limit_constants(H: float, q: int = 3, n_lags: int = 10) -> LimitConstants:
    """Compute rho_H(0..n_lags), sigma_{q,H} and sigma~_H together."""
    sq = sigma_qH_series(q, H)
    st = sigma_tilde_series(H)
    lags = np.arange(n_lags + 1)
    return LimitConstants(
        hurst=H, q=q,
        rho=[float(v) for v in rho(H, lags)],
        sigma_qH=math.sqrt(sq.value), sigma_tilde=math.sqrt(st.value),
        truncation=max(sq.truncation, st.truncation),
        tail_bound=max(sq.tail_bound, st.tail_bound),
        rho_tilde=[float(v) for v in rho_tilde(H, lags[1:])],
    )


def covariance_table(H: float, n: int) -> np.ndarray:
    """Rows (k, l, a_{k,l}, a^dagger_{k,l}) for 1 <= k, l <= n."""
    k, l = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1), indexing="ij")
    k, l = k.ravel(), l.ravel()
    return np.column_stack([k, l, a_cov(H, k, l), a_dagger(H, k, l)])


# ---------------------------------------------------------------------------
# variation functionals on sampled paths


class WeightMeasure(Enum):
    """Probability measure on [0, 1] used to weight a cell's integrand."""

    LEFT = "left"
    MIDPOINT = "midpoint"
    TRAPEZOID = "trapezoid"
    UNIFORM = "uniform"


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def _cell_weights(f: Optional[Callable], mu: WeightMeasure, X: np.ndarray, m: int) -> np.ndarray:
    """F_{tau_{k-1} tau_k}(X) for every cell, X given on a fine dyadic grid."""
    n_fine = X.size - 1
    r = n_fine >> m
    if r << m != n_fine:
        raise DomainError("reference grid must refine the level-m grid dyadically")
    if f is None:
        return np.ones(1 << m)
    left = X[:-1:r]
    if mu is WeightMeasure.LEFT:
        return f(left)
    if mu is WeightMeasure.TRAPEZOID:
        return 0.5 * (f(left) + f(X[r::r]))
    if mu is WeightMeasure.MIDPOINT:
        if r < 2:
            raise DomainError("midpoint weights need a fine grid strictly finer than level m")
        return f(X[r // 2::r])
    t_fine = np.linspace(0.0, 1.0, n_fine + 1)
    starts = np.arange(1 << m) / (1 << m)
    theta = 0.5 * (_GL_NODES + 1.0)
    pts = starts[:, None] + theta[None, :] / (1 << m)
    vals = f(np.interp(pts.ravel(), t_fine, X)).reshape(pts.shape)
    return vals @ (0.5 * _GL_WEIGHTS)


def coarse_increments(B: np.ndarray, m: int) -> np.ndarray:
    """Level-m increments of a path given on a finer dyadic grid."""
    r = (B.size - 1) >> m
    return np.diff(B[::r])


def weighted_hermite_variation_process(q: int, f: Optional[Callable], mu: WeightMeasure,
                                       X: np.ndarray, B: np.ndarray, m: int, H: float) -> np.ndarray:
    """Partial sums W^(q)_m(tau_k), k = 0..2^m."""
    dB = coarse_increments(B, m)
    terms = _cell_weights(f, mu, X, m) * hermite(q, 2.0 ** (m * H) * dB)
    return np.concatenate([[0.0], np.cumsum(terms)])


def weighted_hermite_variation(q: int, f: Optional[Callable], mu: WeightMeasure,
                               X: np.ndarray, B: np.ndarray, m: int, t: float, H: float) -> float:
    """W^(q)_m(t) = sum_{k <= 2^m t} F_k(X) H_q(2^{mH} dB_k).

    Parameters
    ----------
    f : callable or None
        Weight function; ``None`` means f = 1.
    X, B : np.ndarray
        Reference solution and driver on a common fine dyadic grid.
    """
    proc = weighted_hermite_variation_process(q, f, mu, X, B, m, H)
    return float(proc[int(math.floor(t * (1 << m) + 1e-12))])


def trapezoid_kernels(B: np.ndarray, m: int) -> np.ndarray:
    """zeta_k = (1/2) Delta dB_k - int_cell (B_u - B_{tau_{k-1}}) du.

    The inner integral uses the trapezoid rule on the fine grid.
    """
    n_fine = B.size - 1
    r = n_fine >> m
    h = 1.0 / n_fine
    cells = np.lib.stride_tricks.sliding_window_view(B, r + 1)[::r] - B[:-1:r, None]
    inner = h * (cells[:, 1:-1].sum(axis=1) + 0.5 * cells[:, -1])
    return 0.5 * 2.0 ** (-m) * cells[:, -1] - inner


def trapezoid_variation_process(g: Optional[Callable], X: np.ndarray, B: np.ndarray, m: int) -> np.ndarray:
    """Partial sums U_m(tau_k) with weights g(X_{tau_{k-1}})."""
    w = _cell_weights(g, WeightMeasure.LEFT, X, m)
    return np.concatenate([[0.0], np.cumsum(w * trapezoid_kernels(B, m))])


def trapezoid_variation(g: Optional[Callable], X: np.ndarray, B: np.ndarray, m: int, t: float) -> float:
    """U_m(t) = sum_{k <= 2^m t} g(X_{tau_{k-1}}) zeta_k."""
    proc = trapezoid_variation_process(g, X, B, m)
    return float(proc[int(math.floor(t * (1 << m) + 1e-12))])
