"""Pathwise solution theory for dx = b(x) dt + sigma(x) d°g.

Three independent routes solve the equation for a continuous driver g
given on a grid (and interpolated linearly between nodes):

* ``doss_solution``: x_t = phi(a_t, g_t) with phi the flow of sigma and
  a the solution of a' = b(phi(a, g)) / d_1 phi(a, g);
* ``transform_solution``: x = G(y) with G the inverse of
  F = int dx / sigma and y' = (b / sigma)(G(y)) + g';
* ``direct_solution``: the ODE x' = b(x) + sigma(x) g' integrated cell
  by cell. This is the cheap route used by the Monte Carlo harness.

The module also provides the linearization J_t, directional derivatives,
symmetric (modified Riemann sum) integrals and iterated integrals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import _ode
from .errors import ContractError, DomainError, SolverError
from .models import CoefficientModel, get_model  # noqa: F401  (re-export)

FLOW_TOL = 1e-12
A_TOL = 1e-10
DIRECT_TOL = 1e-12


def _grid(g, times: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    g = np.ascontiguousarray(np.asarray(g, dtype=float))
    if g.ndim != 1 or g.size < 2:
        raise ContractError("driver must be a 1-d array with at least two nodes")
    if times is None:
        times = np.linspace(0.0, 1.0, g.size)
    times = np.ascontiguousarray(np.asarray(times, dtype=float))
    if times.shape != g.shape or np.any(np.diff(times) <= 0):
        raise ContractError("times must be strictly increasing and match the driver")
    return g, times


# ---------------------------------------------------------------------------
# flow and the Doss route


def flow_phi(model: CoefficientModel, alpha, beta, tol: float = FLOW_TOL):
    """Flow phi(alpha, beta) of sigma and its derivative d_1 phi.

    Integrates d phi / d eta = sigma(phi) together with
    d log(d_1 phi) / d eta = sigma'(phi) from eta = 0 to beta.

    Returns
    -------
    phi, dphi1 : float or np.ndarray
        Broadcast over ``alpha`` and ``beta``; ``dphi1 > 0``.

    Examples
    --------
    >>> m = get_model("constant", {"theta": 0.0, "c": 3.0})
    >>> flow_phi(m, 1.0, 2.0)
    (7.0, 1.0)
    """
    a, b = np.broadcast_arrays(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))
    phi = np.empty(a.shape)
    dphi = np.empty(a.shape)
    for idx in np.ndindex(a.shape):
        p, logd, err, ok = _ode.flow_kernel(model.code, float(a[idx]), float(b[idx]), tol, tol)
        if not ok:
            raise SolverError("flow integrator exceeded its step budget", err)
        phi[idx], dphi[idx] = p, np.exp(logd)
    if phi.ndim == 0:
        return float(phi), float(dphi)
    return phi, dphi


def solve_a(model: CoefficientModel, xi: float, g, times=None, tol: float = A_TOL,
            flow_tol: float = FLOW_TOL) -> np.ndarray:
    """Auxiliary path a with a' = b(phi(a, g)) / d_1 phi(a, g), a_0 = xi.

    The driver is shifted so that it starts at zero.
    """
    g, times = _grid(g, times)
    out, err, ok = _ode.grid_kernel(_ode.RHS_DOSS, model.code, float(xi), times, g - g[0],
                                    tol, tol, flow_tol)
    if not ok:
        raise SolverError("auxiliary ODE exceeded its step budget", err)
    return out


@dataclass(frozen=True, eq=False)
class ReferencePath:
    """Exact solution on the driver's grid.

    Attributes
    ----------
    times, driver, x : np.ndarray
        Grid, driver g and solution x.
    a : np.ndarray or None
        Auxiliary Doss path (only for the Doss route).
    J : np.ndarray
        Linearization factor J_t(g).
    """

    times: np.ndarray
    driver: np.ndarray
    xi: float
    x: np.ndarray
    a: Optional[np.ndarray]
    J: np.ndarray
    tolerance: float
    route: str

    def to_csv(self, path: str) -> None:
        """Write ``t,x,a,J`` rows with 17 significant digits."""
        a = self.a if self.a is not None else np.full_like(self.x, np.nan)
        np.savetxt(path, np.column_stack([self.times, self.x, a, self.J]), delimiter=",",
                   header="t,x,a,J", comments="", fmt="%.17g")


def doss_solution(model: CoefficientModel, xi: float, g, times=None, tol: float = A_TOL,
                  j_route: str = "auto") -> ReferencePath:
    """Solution x_t = phi(a_t, g_t) together with J_t.

    Parameters
    ----------
    j_route : {"auto", "product", "quadrature"}
        ``product`` requires an elliptic model; ``auto`` picks it when
        available and falls back to direct quadrature otherwise.
    """
    g, times = _grid(g, times)
    a = solve_a(model, xi, g, times, tol)
    x, _ = flow_phi(model, a, g - g[0])
    J = _pick_J(model, x, g, times, j_route)
    return ReferencePath(times, g, float(xi), x, a, J, tol, "doss")


def _pick_J(model, x, g, times, j_route):
    if j_route == "auto":
        j_route = "product" if model.elliptic else "quadrature"
    if j_route == "product":
        return J_product(model, x, times)
    if j_route == "quadrature":
        return J_quadrature(model, x, g, times)
    raise ContractError(f"unknown J route '{j_route}'")


def transform_solution(model: CoefficientModel, xi: float, g, times=None,
                       tol: float = A_TOL) -> np.ndarray:
    """Solution via x = G(y), y_t = F(xi) + int (b/sigma)(G(y)) du + g_t - g_0."""
    model.require_elliptic("transform route")
    g, times = _grid(g, times)
    z0 = model.F(float(xi))
    z, err, ok = _ode.grid_kernel(_ode.RHS_TRANSFORM, model.code, z0, times, g - g[0],
                                  tol, tol, tol)
    if not ok:
        raise SolverError("transform ODE exceeded its step budget", err)
    return model.G(z + (g - g[0]))


def direct_solution(model: CoefficientModel, xi: float, g, times=None,
                    tol: float = DIRECT_TOL) -> np.ndarray:
    """Solution of x' = b(x) + sigma(x) g' for the piecewise-linear driver."""
    g, times = _grid(g, times)
    x, err, ok = _ode.grid_kernel(_ode.RHS_DIRECT, model.code, float(xi), times, g, tol, tol, tol)
    if not ok:
        raise SolverError("direct ODE exceeded its step budget", err)
    return x


def direct_solution_batch(model: CoefficientModel, xi, G: np.ndarray,
                          tol: float = DIRECT_TOL) -> np.ndarray:
    """Direct route for each row of ``G`` (uniform grid on [0, 1])."""
    G = np.ascontiguousarray(G, dtype=float)
    xi_arr = np.broadcast_to(np.asarray(xi, dtype=float), (G.shape[0],)).copy()
    h = 1.0 / (G.shape[1] - 1)
    X, ok = _ode.direct_paths_kernel(model.code, xi_arr, G, h, tol)
    if not np.all(ok):
        raise SolverError("direct ODE exceeded its step budget on some paths")
    return X


def reference_solution(model: CoefficientModel, xi: float, g, times=None,
                       route: str = "direct", j_route: str = "auto") -> ReferencePath:
    """Reference path by the chosen route (``direct``, ``doss`` or ``transform``)."""
    if route == "doss":
        return doss_solution(model, xi, g, times, j_route=j_route)
    g, times = _grid(g, times)
    if route == "direct":
        x, tol = direct_solution(model, xi, g, times), DIRECT_TOL
    elif route == "transform":
        x, tol = transform_solution(model, xi, g, times), A_TOL
    else:
        raise ContractError(f"unknown route '{route}'")
    return ReferencePath(times, g, float(xi), x, None, _pick_J(model, x, g, times, j_route),
                         tol, route)


# ---------------------------------------------------------------------------
# linearization and directional derivatives


def _cumtrapz(y: np.ndarray, times: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(times))])


def _cum_symmetric(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(g))])


def J_product(model: CoefficientModel, x: np.ndarray, times: np.ndarray) -> np.ndarray:
    """J_t = sigma(x_t)/sigma(x_0) exp(int_0^t (W/sigma)(x_u) du)."""
    model.require_elliptic("product form of J")
    s = model.sigma(x)
    return s / s[0] * np.exp(_cumtrapz(model.W(x) / s, times))


def J_quadrature(model: CoefficientModel, x: np.ndarray, g: np.ndarray,
                 times: np.ndarray) -> np.ndarray:
    """J_t = exp(int b'(x) du + int sigma'(x) d°g) by modified Riemann sums."""
    return np.exp(_cumtrapz(model.b(x, 1), times) + _cum_symmetric(model.sigma(x, 1), g))


def directional_derivative(model: CoefficientModel, xi: float, g, h, times=None,
                           form: str = "integral",
                           reference: Optional[ReferencePath] = None) -> np.ndarray:
    """Derivative of the solution map in the direction h.

    ``form="integral"`` evaluates sigma(x_t) h_t + J_t int_0^t J_s^{-1} W(x_s) h_s ds;
    ``form="lipschitz"`` evaluates sigma(x_t) int_0^t exp(int_s^t (W/sigma)(x) du) dh_s,
    valid for Lipschitz h, with dh handled as a Stieltjes trapezoid sum.
    """
    model.require_elliptic("directional derivative")
    g, times = _grid(g, times)
    h = np.asarray(h, dtype=float)
    if h.shape != g.shape:
        raise ContractError("direction must live on the driver's grid")
    ref = reference if reference is not None else reference_solution(model, xi, g, times)
    x = ref.x
    if form == "integral":
        J = ref.J
        return model.sigma(x) * h + J * _cumtrapz(model.W(x) * h / J, times)
    if form == "lipschitz":
        E = _cumtrapz(model.W(x) / model.sigma(x), times)
        return model.sigma(x) * np.exp(E) * _cum_symmetric(np.exp(-E), h)
    raise ContractError(f"unknown form '{form}'")


# ---------------------------------------------------------------------------
# symmetric and iterated integrals


@dataclass(frozen=True)
class SymmetricIntegral:
    """Modified Riemann sum with a grid-halving diagnostic."""

    value: float
    halved: float

    @property
    def richardson(self) -> float:
        """Difference between the full-grid and half-grid sums."""
        return self.value - self.halved

    def __float__(self) -> float:
        return self.value


def _span(times: np.ndarray, s: float, t: float) -> slice:
    i = int(np.searchsorted(times, s - 1e-14))
    j = int(np.searchsorted(times, t - 1e-14))
    if not (0 <= i <= j < times.size) or abs(times[i] - s) > 1e-12 or abs(times[j] - t) > 1e-12:
        raise DomainError("integration limits must be grid nodes")
    return slice(i, j + 1)


def symmetric_integral(f: Callable, a, g, s: float, t: float, times=None) -> SymmetricIntegral:
    """sum 1/2 (f(a_{k-1}, g_{k-1}) + f(a_k, g_k)) (g_k - g_{k-1}) over [s, t].

    Parameters
    ----------
    f : callable
        Vectorized two-argument integrand f(a, g).
    a : array
        Bounded-variation companion path on the same grid as ``g``.
    """
    g, times = _grid(g, times)
    a = np.asarray(a, dtype=float)
    sl = _span(times, s, t)
    vals = f(a[sl], g[sl])
    gg = g[sl]
    full = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(gg)))
    if gg.size >= 3 and (gg.size - 1) % 2 == 0:
        v2, g2 = vals[::2], gg[::2]
        half = float(np.sum(0.5 * (v2[1:] + v2[:-1]) * np.diff(g2)))
    else:
        half = full
    return SymmetricIntegral(full, half)


def iterated_integral_path(word: Sequence[int], g: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Running iterated integral u -> g^{word}_{s u} with s the first node.

    The letters are integrated in order: the first letter is the innermost
    integral. Letter 0 stands for dt, letter 1 for d°g.
    """
    if len(word) == 0 or len(word) > 4 or any(w not in (0, 1) for w in word):
        raise DomainError("word must be a non-empty sequence over {0, 1} of length <= 4")
    paths = {0: times - times[0], 1: g - g[0]}
    inner = paths[word[0]].copy()
    for letter in word[1:]:
        inner = _cum_symmetric(inner, paths[letter])
    return inner


def iterated_integral(word: Sequence[int], g, s: float, t: float, times=None) -> float:
    """Nested modified Riemann sum for g^{word}_{s t} on the fine grid.

    Examples
    --------
    >>> import numpy as np
    >>> tt = np.linspace(0, 1, 9)
    >>> iterated_integral((1, 0), tt, 0.0, 1.0)
    0.5
    """
    g, times = _grid(g, times)
    sl = _span(times, s, t)
    return float(iterated_integral_path(word, g[sl], times[sl])[-1])


def cell_iterated_integrals(word: Sequence[int], g: np.ndarray, m: int) -> np.ndarray:
    """g^{word} over every level-m cell of a uniform fine grid on [0, 1]."""
    n = g.size - 1
    r = n >> m
    if r << m != n or r < 1:
        raise DomainError("fine grid must refine the level-m grid dyadically")
    cells = np.lib.stride_tricks.sliding_window_view(g, r + 1)[::r]
    t_local = np.arange(r + 1) / n
    paths = {0: np.broadcast_to(t_local, cells.shape), 1: cells - cells[:, :1]}
    inner = paths[word[0]].copy()
    for letter in word[1:]:
        incr = np.diff(paths[letter], axis=1)
        inner = np.concatenate([np.zeros((cells.shape[0], 1)),
                                np.cumsum(0.5 * (inner[:, 1:] + inner[:, :-1]) * incr, axis=1)],
                               axis=1)
    return inner[:, -1]


def taylor_expansion(model: CoefficientModel, x_s: float, g, s: float, t: float,
                     times=None) -> float:
    """Fourth-order expansion of x_t - x_s around x_s with iterated integrals."""
    g, times = _grid(g, times)
    sl = _span(times, s, t)
    gg, tt = g[sl], times[sl]
    dt, dg = tt[-1] - tt[0], gg[-1] - gg[0]
    I = {w: float(iterated_integral_path(w, gg, tt)[-1])
         for w in [(1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0)]}
    x = x_s
    b, b1, b2 = model.b(x), model.b(x, 1), model.b(x, 2)
    s0, s1, s2, s3 = (model.sigma(x, k) for k in range(4))
    ss1 = s0 * s1
    d_ss1 = s1 * s1 + s0 * s2                           # (sigma sigma')'
    dd_ss1 = 3 * s1 * s2 + s0 * s3                      # (sigma sigma')''
    third = s0 * d_ss1                                  # sigma (sigma sigma')'
    fourth = s0 * (s1 * d_ss1 + s0 * dd_ss1)            # sigma (sigma (sigma sigma')')'
    return (b * dt + s0 * dg + 0.5 * ss1 * dg**2 + third * dg**3 / 6 + fourth * dg**4 / 24
            + b * s1 * dg * dt + (s0 * b1 - b * s1) * I[(1, 0)] + 0.5 * b1 * b * dt**2
            + b * d_ss1 * I[(0, 1, 1)]
            + s0 * (b1 * s1 + b * s2) * I[(1, 0, 1)]
            + s0 * (s1 * b1 + s0 * b2) * I[(1, 1, 0)])


def taylor_remainder_check(model: CoefficientModel, xi: float, g, s: float, t: float,
                           times=None, reference: Optional[ReferencePath] = None) -> float:
    """x_t - x_s minus the fourth-order iterated-integral expansion."""
    g, times = _grid(g, times)
    ref = reference if reference is not None else reference_solution(model, xi, g, times)
    sl = _span(times, s, t)
    x_s, x_t = ref.x[sl.start], ref.x[sl.stop - 1]
    return float(x_t - x_s - taylor_expansion(model, x_s, g, s, t, times))


def shift_residual(model: CoefficientModel, xi: float, g, s: float, times=None,
                   route: str = "doss") -> float:
    """sup_t |x_{s+t}(xi, g) - x_t(x_s(xi, g), theta_s g)| over grid nodes."""
    g, times = _grid(g, times)
    full = reference_solution(model, xi, g, times, route=route).x
    i = int(np.searchsorted(times, s - 1e-14))
    tail = reference_solution(model, full[i], g[i:] - g[i], times[i:] - times[i], route=route).x
    return float(np.max(np.abs(full[i:] - tail)))

