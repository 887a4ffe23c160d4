"""Euler, Milstein and Crank-Nicolson schemes on dyadic grids.

Each scheme advances xi_{k-1} to xi_k with the increments (dt, dB) of one
cell; dense output inside a cell applies the same one-step rule with the
partial increments taken from the fine-grid driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from numba import njit, prange

from .errors import ContractError, InadmissibleStepError, SolverError
from .fbm import FbmPath, holder_ratio
from .models import CoefficientModel, disp, drift

CN_MARGIN = 0.9
CN_RESID_TOL = 1e-13
CN_UPDATE_TOL = 1e-15
NEWTON_MAX = 50
EPSILON_DEFAULT = 0.01

EULER, MILSTEIN, CN = 0, 1, 2


class SchemeKind(Enum):
    """The three supported one-step schemes."""

    EULER = "euler"
    MILSTEIN = "milstein"
    CRANK_NICOLSON = "cn"

    @property
    def code(self) -> int:
        return {"euler": EULER, "milstein": MILSTEIN, "cn": CN}[self.value]

    @classmethod
    def parse(cls, value) -> "SchemeKind":
        if isinstance(value, SchemeKind):
            return value
        aliases = {"crank-nicolson": "cn", "cranknicolson": "cn", "crank_nicolson": "cn"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ContractError(f"unknown scheme '{value}'") from None


def admissible_level(model: CoefficientModel, H: float, epsilon: float = EPSILON_DEFAULT) -> int:
    """Least integer m with m > max{1 + log2 sup|b'|, (1 + log2 sup|sigma'|)/(H - eps)}.

    A zero sup-bound removes its branch; the result is floored at 1.

    Examples
    --------
    >>> from .models import get_model
    >>> admissible_level(get_model("constant"), 0.5)
    1
    """
    if not 0 < epsilon < H:
        raise ContractError("need 0 < epsilon < H")
    branches = []
    if model.sup_db > 0:
        branches.append(1 + math.log2(model.sup_db))
    if model.sup_dsigma > 0:
        branches.append((1 + math.log2(model.sup_dsigma)) / (H - epsilon))
    if not branches:
        return 1
    return max(1, math.floor(max(branches)) + 1)


# ---------------------------------------------------------------------------
# compiled one-step rules


@njit(cache=True)
def _explicit_step(kind, code, x, dt, dB):
    b = drift(code, x, 0)
    s = disp(code, x, 0)
    out = x + b * dt + s * dB
    if kind == MILSTEIN:
        b1 = drift(code, x, 1)
        s1 = disp(code, x, 1)
        out += 0.5 * b * b1 * dt * dt + 0.5 * (s * b1 + s1 * b) * dt * dB + 0.5 * s * s1 * dB * dB
    return out


@njit(cache=True)
def cn_residual(code, x, eta, dt, dB):
    """F(eta) = eta - x - (b(x)+b(eta)) dt/2 - (sigma(x)+sigma(eta)) dB/2."""
    return (eta - x - 0.5 * (drift(code, x, 0) + drift(code, eta, 0)) * dt
            - 0.5 * (disp(code, x, 0) + disp(code, eta, 0)) * dB)


@njit(cache=True)
def _cn_bisect(code, x, dt, dB, center):
    w = abs(x) + 10.0
    lo, hi = center - w, center + w
    for _ in range(200):
        if cn_residual(code, x, lo, dt, dB) < 0.0 and cn_residual(code, x, hi, dt, dB) > 0.0:
            break
        w *= 2.0
        lo, hi = center - w, center + w
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if cn_residual(code, x, mid, dt, dB) > 0.0:
            hi = mid
        else:
            lo = mid
    a, b = cn_residual(code, x, lo, dt, dB), cn_residual(code, x, hi, dt, dB)
    return lo if abs(a) <= abs(b) else hi


@njit(cache=True)
def cn_solve(code, x, dt, dB, use_newton):
    """Root of the implicit CN equation.

    Returns (eta, newton_iterations, used_bisection). Newton starts from the
    Euler predictor and falls back to bisection if it fails to converge.
    """
    eta = x + drift(code, x, 0) * dt + disp(code, x, 0) * dB
    if use_newton:
        for it in range(NEWTON_MAX):
            F = cn_residual(code, x, eta, dt, dB)
            if abs(F) <= CN_RESID_TOL:
                return eta, it, False
            dF = 1.0 - 0.5 * drift(code, eta, 1) * dt - 0.5 * disp(code, eta, 1) * dB
            delta = F / dF
            eta -= delta
            if abs(delta) < CN_UPDATE_TOL:
                if abs(cn_residual(code, x, eta, dt, dB)) <= CN_RESID_TOL:
                    return eta, it + 1, False
                break
    return _cn_bisect(code, x, dt, dB, eta), NEWTON_MAX, True


@njit(cache=True)
def cn_contraction(sup_db, sup_ds, dt, dB):
    return 0.5 * sup_db * abs(dt) + 0.5 * sup_ds * abs(dB)


@njit(cache=True)
def step_kernel(kind, code, x, dt, dB):
    if kind == CN:
        eta, _, _ = cn_solve(code, x, dt, dB, True)
        return eta
    return _explicit_step(kind, code, x, dt, dB)


@njit(cache=True)
def run_kernel(kind, code, sup_db, sup_ds, xi, dt, dB, force):
    """Grid recursion; returns (values, iterations, admissible, max_residual)."""
    n = dB.size
    out = np.empty(n + 1)
    iters = np.zeros(n, dtype=np.int64)
    out[0] = xi
    admissible = True
    if kind == CN and not force:
        for k in range(n):
            if cn_contraction(sup_db, sup_ds, dt, dB[k]) > CN_MARGIN:
                admissible = False
                break
        if not admissible:
            out[:] = xi
            return out, iters, False, 0.0
    worst = 0.0
    x = xi
    for k in range(n):
        if kind == CN:
            x_new, it, _ = cn_solve(code, x, dt, dB[k], True)
            iters[k] = it
            worst = max(worst, abs(cn_residual(code, x, x_new, dt, dB[k])))
            x = x_new
        else:
            x = _explicit_step(kind, code, x, dt, dB[k])
        out[k + 1] = x
    return out, iters, admissible, worst


@njit(cache=True, parallel=True)
def run_batch_kernel(kind, code, sup_db, sup_ds, xi, B, r):
    """Run the scheme on every row of ``B`` (fine grid, ratio r to level m)."""
    n_paths = B.shape[0]
    n = (B.shape[1] - 1) // r
    dt = 1.0 / n
    out = np.empty((n_paths, n + 1))
    adm = np.ones(n_paths, dtype=np.bool_)
    for p in prange(n_paths):
        dB = np.empty(n)
        for k in range(n):
            dB[k] = B[p, (k + 1) * r] - B[p, k * r]
        vals, _, ok, _ = run_kernel(kind, code, sup_db, sup_ds, xi[p], dt, dB, False)
        out[p, :] = vals
        adm[p] = ok
    return out, adm


@njit(cache=True)
def dense_kernel(kind, code, coarse, B, r):
    """Dense output on every fine node from the grid values ``coarse``.

    Grid nodes copy ``coarse`` so both views agree bitwise.
    """
    n = coarse.size - 1
    h = 1.0 / (n * r)
    out = np.empty(n * r + 1)
    out[0] = coarse[0]
    for k in range(n):
        x = coarse[k]
        base = B[k * r]
        for j in range(1, r):
            out[k * r + j] = step_kernel(kind, code, x, j * h, B[k * r + j] - base)
        out[(k + 1) * r] = coarse[k + 1]
    return out


# ---------------------------------------------------------------------------
# public interface


def scheme_step(kind, model: CoefficientModel, xi_prev: float, dt: float, dB: float,
                t_offset: float = 0.0, check: bool = True) -> float:
    """Advance one step of the chosen scheme.

    ``t_offset`` is accepted for interface symmetry; the coefficients are
    autonomous so the rules do not depend on it.

    Examples
    --------
    >>> from .models import get_model
    >>> round(scheme_step("euler", get_model("constant"), 1.0, 0.25, 0.1), 12)
    1.325
    """
    kind = SchemeKind.parse(kind)
    if kind is SchemeKind.CRANK_NICOLSON:
        q = cn_contraction(model.sup_db, model.sup_dsigma, dt, dB)
        if check and q > CN_MARGIN:
            raise InadmissibleStepError(q)
        eta, _, _ = cn_solve(model.code, float(xi_prev), float(dt), float(dB), True)
        return float(eta)
    return float(_explicit_step(kind.code, model.code, float(xi_prev), float(dt), float(dB)))


def cn_step_bisection(model: CoefficientModel, xi_prev: float, dt: float, dB: float) -> float:
    """CN step solved by bisection only (used to cross-check Newton)."""
    eta, _, _ = cn_solve(model.code, float(xi_prev), float(dt), float(dB), False)
    return float(eta)


def cn_slope(model: CoefficientModel, eta: float, dt: float, dB: float) -> float:
    """d F / d eta of the implicit CN map at eta."""
    return float(1.0 - 0.5 * model.b(eta, 1) * dt - 0.5 * model.sigma(eta, 1) * dB)


@dataclass(frozen=True, eq=False)
class SchemeTrajectory:
    """Grid values of one scheme run with dense-output support.

    Attributes
    ----------
    admissible : bool
        For CN, whether every step met the contraction margin; inadmissible
        runs are stored as the constant trajectory xi.
    holder_admissible : bool or None
        For CN, whether the fine-grid Hoelder ratio of the driver is <= 1.
    newton_stats : np.ndarray or None
        Newton iterations per step (CN only).
    """

    kind: SchemeKind
    level: int
    xi: float
    values: np.ndarray
    admissible: bool = True
    holder_admissible: Optional[bool] = None
    newton_stats: Optional[np.ndarray] = None
    max_residual: float = 0.0
    model: Optional[CoefficientModel] = field(default=None, repr=False)
    path: Optional[FbmPath] = field(default=None, repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) / (self.values.size - 1)

    def dense(self, t: float) -> float:
        """Scheme value at an arbitrary fine-grid time t."""
        if self.path is None or self.model is None:
            raise ContractError("dense output needs the driving path and model")
        n = 1 << self.level
        nf = self.path.n_fine
        j = int(round(t * nf))
        if abs(j / nf - t) > 1e-12:
            raise ContractError("dense output is available on fine-grid times only")
        if j == 0:
            return self.xi
        r = nf // n
        if j % r == 0:
            return float(self.values[j // r])
        if not self.admissible:
            return self.xi
        k = j // r
        dB = self.path.values[j] - self.path.values[k * r]
        return float(step_kernel(self.kind.code, self.model.code, self.values[k],
                                 (j - k * r) / nf, dB))

    def dense_path(self) -> np.ndarray:
        """Dense output on every fine-grid node."""
        if self.path is None or self.model is None:
            raise ContractError("dense output needs the driving path and model")
        if not self.admissible:
            return np.full(self.path.n_fine + 1, self.xi)
        r = self.path.n_fine >> self.level
        return dense_kernel(self.kind.code, self.model.code, self.values,
                            np.ascontiguousarray(self.path.values), r)

    def to_csv(self, path: str) -> None:
        np.savetxt(path, np.column_stack([self.times, self.values]), delimiter=",",
                   header="t,x_scheme", comments="", fmt="%.17g")


def run_scheme(kind, model: CoefficientModel, xi: float, path: FbmPath,
               level: Optional[int] = None, force: bool = False,
               epsilon: float = EPSILON_DEFAULT, holder_check: bool = True) -> SchemeTrajectory:
    """Run a scheme over the level-m grid of ``path``.

    Parameters
    ----------
    level : int, optional
        Grid level m (defaults to ``path.level``).
    force : bool
        For CN, run even when m is below :func:`admissible_level` and ignore
        per-step contraction failures (steps then rely on bisection).
    """
    kind = SchemeKind.parse(kind)
    m = path.level if level is None else level
    dB = np.ascontiguousarray(np.diff(path.coarse(m)))
    dt = 1.0 / (1 << m)
    holder_ok = None
    if kind is SchemeKind.CRANK_NICOLSON:
        if not force and m < admissible_level(model, path.hurst, epsilon):
            raise ContractError(f"level {m} is below the admissible level; pass force=True")
        if holder_check:
            lam = path.hurst - epsilon
            holder_ok = holder_ratio(path, lam, 2.0 ** (-m)) <= 1.0
    vals, iters, adm, worst = run_kernel(kind.code, model.code, model.sup_db, model.sup_dsigma,
                                         float(xi), dt, dB, force)
    if not np.all(np.isfinite(vals)):
        raise SolverError("scheme produced non-finite values")
    stats = iters if kind is SchemeKind.CRANK_NICOLSON else None
    return SchemeTrajectory(kind, m, float(xi), vals, bool(adm), holder_ok, stats, float(worst),
                            model, path.at_level(m) if m != path.level else path)


def run_scheme_batch(kind, model: CoefficientModel, xi, B: np.ndarray, m: int):
    """Scheme values on the level-m grid for every row of the fine-grid array B.

    Returns
    -------
    values : np.ndarray, shape (n_paths, 2^m + 1)
    admissible : np.ndarray of bool
    """
    kind = SchemeKind.parse(kind)
    B = np.ascontiguousarray(B, dtype=float)
    r = (B.shape[1] - 1) >> m
    xi_arr = np.broadcast_to(np.asarray(xi, dtype=float), (B.shape[0],)).copy()
    return run_batch_kernel(kind.code, model.code, model.sup_db, model.sup_dsigma, xi_arr, B, r)
