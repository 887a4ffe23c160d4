"""Error decomposition of a scheme through its perturbation path.

For a scheme trajectory xi_0, ..., xi_n there is a unique piecewise-linear
path h on the level-m grid with X_{tau_k}(xi, B + h) = xi_k for every k.
Its increments kappa_k are found cell by cell: on cell k the exact flow
started at xi_{k-1} and driven by the shifted fBm plus kappa * (u / Delta)
must land on xi_k. The map kappa -> X is strictly increasing, so a
safeguarded Newton iteration with a bisection fallback always succeeds.

The module also holds the coefficient families that describe the leading
terms of the one-step errors and of kappa_k, and the four partial-sum
processes built from them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from numba import njit, prange

from ._ode import sens_cell_kernel
from .errors import ContractError, SolverError
from .fbm import FbmPath
from .flow import cell_iterated_integrals, direct_solution
from .models import CoefficientModel
from .schemes import SchemeKind, SchemeTrajectory, scheme_step

PERTURB_TOL = 1e-12
KAPPA_RESID_TOL = 1e-14
NEWTON_MAX = 50

Func = Callable[[np.ndarray], np.ndarray]

WORDS = ("011", "101", "110")
_WORD_TUPLES = {w: tuple(int(c) for c in w) for w in WORDS}


# ---------------------------------------------------------------------------
# coefficient families


@dataclass(frozen=True)
class CoefficientFamily:
    """Closed-form coefficient functions attached to one scheme.

    ``f_hat`` and ``f`` map the monomial degree i to the coefficient of
    (Delta B)^i in the one-step error and in kappa respectively. The
    ``phi_hat_words`` / ``phi_words`` entries multiply the iterated
    integrals B^{011}, B^{101}, B^{110}. Unused entries are None.
    """

    scheme: SchemeKind
    f_hat: Dict[int, Func]
    f: Dict[int, Func]
    g1_hat: Optional[Func] = None
    g1: Optional[Func] = None
    phi_hat: Optional[Func] = None
    phi: Optional[Func] = None
    phi_hat_words: Optional[Dict[str, Func]] = None
    phi_words: Optional[Dict[str, Func]] = None
    psi: Optional[Func] = None
    f4_dagger: Optional[Func] = None


_REQUIRED_ORDER = {SchemeKind.EULER: 2, SchemeKind.MILSTEIN: 4, SchemeKind.CRANK_NICOLSON: 4}


def _derivs(model: CoefficientModel, x, order: int):
    x = np.asarray(x, dtype=float)
    s = [model.sigma(x, k) for k in range(order)]
    b = [model.b(x, k) for k in range(min(order, 3))]
    return s, b


def coefficient_functions(scheme, model: CoefficientModel) -> CoefficientFamily:
    """Coefficient family of ``scheme`` for the model's b and sigma.

    Raises
    ------
    ContractError
        If the model does not register enough derivatives.
    """
    kind = SchemeKind.parse(scheme)
    need = _REQUIRED_ORDER[kind]
    if model.max_order < need:
        raise ContractError(f"{kind.value} family needs derivatives up to order {need}")

    if kind is SchemeKind.EULER:
        def f2_hat(x):
            s, _ = _derivs(model, x, 2)
            return -0.5 * s[0] * s[1]

        def f2(x):
            return -0.5 * model.sigma(np.asarray(x, dtype=float), 1)

        return CoefficientFamily(kind, {2: f2_hat}, {2: f2})

    def g1_hat(x):
        return model.W(np.asarray(x, dtype=float))

    def g1(x):
        x = np.asarray(x, dtype=float)
        return model.W(x) / model.sigma(x)

    # (sigma sigma')' and (b sigma')', (sigma b')' recur in both families
    def phi_hat_011(x):
        s, b = _derivs(model, x, 3)
        return -b[0] * (s[1] ** 2 + s[0] * s[2])

    def phi_hat_101(x):
        s, b = _derivs(model, x, 3)
        return -s[0] * (b[1] * s[1] + b[0] * s[2])

    def phi_hat_110(x):
        s, b = _derivs(model, x, 3)
        return -s[0] * (s[1] * b[1] + s[0] * b[2])

    def phi_011(x):
        s, b = _derivs(model, x, 3)
        return -b[0] * (s[1] ** 2 + s[0] * s[2]) / s[0]

    def phi_101(x):
        s, b = _derivs(model, x, 3)
        return -(b[1] * s[1] + b[0] * s[2])

    def phi_110(x):
        s, b = _derivs(model, x, 3)
        return -(s[1] * b[1] + s[0] * b[2])

    hat_words = {"011": phi_hat_011, "101": phi_hat_101, "110": phi_hat_110}
    words = {"011": phi_011, "101": phi_101, "110": phi_110}

    if kind is SchemeKind.CRANK_NICOLSON:
        def f3_hat(x):
            s, _ = _derivs(model, x, 3)
            return (s[0] ** 2 * s[2] + s[0] * s[1] ** 2) / 12.0

        def f4_hat(x):
            s, _ = _derivs(model, x, 4)
            return (s[0] ** 3 * s[3] + 5 * s[0] ** 2 * s[1] * s[2] + 2 * s[0] * s[1] ** 3) / 24.0

        def f3(x):
            s, _ = _derivs(model, x, 3)
            return (s[0] * s[2] + s[1] ** 2) / 12.0

        def f4(x):
            s, _ = _derivs(model, x, 4)
            return s[0] * (s[0] * s[3] + 3 * s[1] * s[2]) / 24.0

        def phi_hat(x):
            s, b = _derivs(model, x, 3)
            return (0.25 * (b[0] * s[1] ** 2 + s[0] ** 2 * b[2])
                    + 0.5 * (b[0] * s[0] * s[2] + s[0] * s[1] * b[1]))

        def phi(x):
            s, b = _derivs(model, x, 3)
            return (0.25 * (b[0] * s[1] ** 2 / s[0] + s[0] * b[2])
                    + 0.5 * (b[0] * s[2] + s[1] * b[1]))

        def psi(x):
            s, b = _derivs(model, x, 3)
            return 0.25 * (s[1] * b[1] + s[2] * b[0])

        return CoefficientFamily(kind, {3: f3_hat, 4: f4_hat}, {3: f3, 4: f4}, g1_hat, g1,
                                 phi_hat, phi, hat_words, words, psi)

    def f3_hat_m(x):
        s, _ = _derivs(model, x, 3)
        return -s[0] * (s[1] ** 2 + s[0] * s[2]) / 6.0

    def f4_hat_m(x):
        s, _ = _derivs(model, x, 4)
        return -s[0] * (s[1] ** 3 + 4 * s[0] * s[1] * s[2] + s[0] ** 2 * s[3]) / 24.0

    def f3_m(x):
        s, _ = _derivs(model, x, 3)
        return -(s[1] ** 2 + s[0] * s[2]) / 6.0

    def f4_m(x):
        s, _ = _derivs(model, x, 4)
        return -(s[0] ** 2 * s[3] - 3 * s[1] ** 3) / 24.0

    def f4_dagger(x):
        s, _ = _derivs(model, x, 4)
        return (s[0] ** 2 * s[3] + 6 * s[0] * s[1] * s[2] + 3 * s[1] ** 3) / 24.0

    def psi_m(x):
        s, b = _derivs(model, x, 3)
        return -0.25 * (s[1] * (s[0] * b[1] + s[1] * b[0]) + s[0] * (s[2] * b[0] + s[0] * b[2])) / s[0]

    def zero(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    return CoefficientFamily(kind, {3: f3_hat_m, 4: f4_hat_m}, {3: f3_m, 4: f4_m}, g1_hat, g1,
                             zero, zero, hat_words, words, psi_m, f4_dagger)


# ---------------------------------------------------------------------------
# cell flows and the kappa root solve


@njit(cache=True)
def _cell_flow(code, x0, dB, h, kappa, dslope, tol):
    """Exact flow over one coarse cell driven by the fine increments dB plus kappa.

    Returns (x_end, d x_end / d kappa, ok).
    """
    x = x0
    w = 0.0
    for j in range(dB.size):
        x, w, ok = sens_cell_kernel(code, x, w, h, dB[j] / h + kappa * dslope, dslope, tol, tol)
        if not ok:
            return x, w, False
    return x, w, True


@njit(cache=True)
def _solve_kappa(code, x0, target, dB, h, dslope, s0, tol):
    """kappa with flow(kappa) = target; returns (kappa, residual, flow(0), status).

    status: 0 Newton, 1 bisection, 2 integrator failure, 3 no bracket.
    """
    base, w, ok = _cell_flow(code, x0, dB, h, 0.0, dslope, tol)
    if not ok:
        return 0.0, np.nan, base, 2
    kappa = (target - base) / s0
    scale = 1.0 + abs(target)
    for _ in range(NEWTON_MAX):
        x, w, ok = _cell_flow(code, x0, dB, h, kappa, dslope, tol)
        if not ok:
            return kappa, np.nan, base, 2
        F = x - target
        if abs(F) <= KAPPA_RESID_TOL * scale:
            return kappa, F, base, 0
        step = F / w
        kappa -= step
        if abs(step) <= 1e-16 * (1.0 + abs(kappa)):
            x, w, ok = _cell_flow(code, x0, dB, h, kappa, dslope, tol)
            return kappa, x - target, base, 0
    # bisection on the increasing map kappa -> flow(kappa)
    width = abs(kappa) + 1.0
    lo, hi = kappa - width, kappa + width
    found = False
    for _ in range(200):
        flo, _, _ = _cell_flow(code, x0, dB, h, lo, dslope, tol)
        fhi, _, _ = _cell_flow(code, x0, dB, h, hi, dslope, tol)
        if flo <= target <= fhi:
            found = True
            break
        width *= 2.0
        lo, hi = kappa - width, kappa + width
    if not found:
        return kappa, np.nan, base, 3
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        fm, _, _ = _cell_flow(code, x0, dB, h, mid, dslope, tol)
        if fm > target:
            hi = mid
        else:
            lo = mid
    kappa = 0.5 * (lo + hi)
    x, _, _ = _cell_flow(code, x0, dB, h, kappa, dslope, tol)
    return kappa, x - target, base, 1


@njit(cache=True, parallel=True)
def _perturbation_kernel(code, xi_vals, sigma_prev, B, r, tol):
    n = xi_vals.size - 1
    nf = n * r
    h = 1.0 / nf
    dslope = float(n)
    kappa = np.empty(n)
    resid = np.empty(n)
    base = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    for k in prange(n):
        dB = np.empty(r)
        for j in range(r):
            dB[j] = B[k * r + j + 1] - B[k * r + j]
        kap, res, b0, st = _solve_kappa(code, xi_vals[k], xi_vals[k + 1], dB, h, dslope,
                                        sigma_prev[k], tol)
        kappa[k] = kap
        resid[k] = res
        base[k] = b0
        status[k] = st
    return kappa, resid, base, status


@dataclass(frozen=True, eq=False)
class PerturbationPath:
    """Piecewise-linear h on the level-m grid, stored by its increments.

    Attributes
    ----------
    kappa : np.ndarray
        kappa_1, ..., kappa_n with h(tau_k) - h(tau_{k-1}) = kappa_k.
    kappa_hat : np.ndarray
        One-step errors xi_k - X_Delta(xi_{k-1}, shifted B).
    residuals : np.ndarray
        Cell residuals X_Delta(xi_{k-1}, shifted B + kappa_k l) - xi_k.
    bisection_steps : int
        Number of cells where Newton fell back to bisection.
    """

    level: int
    kappa: np.ndarray
    kappa_hat: np.ndarray
    residuals: np.ndarray
    bisection_steps: int = 0

    @property
    def grid_values(self) -> np.ndarray:
        """h(tau_0), ..., h(tau_n)."""
        return np.concatenate([[0.0], np.cumsum(self.kappa)])

    def on_grid(self, n_fine: int) -> np.ndarray:
        """Values of h on a finer uniform grid (linear interpolation)."""
        n = self.kappa.size
        if n_fine % n:
            raise ContractError("fine grid must refine the level-m grid")
        t_fine = np.arange(n_fine + 1) / n_fine
        return np.interp(t_fine, np.arange(n + 1) / n, self.grid_values)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.grid_values)))

    def to_csv(self, path: str, kappa_tilde: Optional[np.ndarray] = None) -> None:
        """Write ``k,kappa,kappa_tilde,residual``; kappa_tilde is NaN if omitted."""
        n = self.kappa.size
        kt = np.full(n, np.nan) if kappa_tilde is None else np.asarray(kappa_tilde, dtype=float)
        np.savetxt(path, np.column_stack([np.arange(1, n + 1), self.kappa, kt, self.residuals]),
                   delimiter=",", header="k,kappa,kappa_tilde,residual", comments="",
                   fmt=["%d", "%.17g", "%.17g", "%.17g"])


def solve_perturbation(trajectory: SchemeTrajectory, model: CoefficientModel,
                       path: Optional[FbmPath] = None, tol: float = PERTURB_TOL) -> PerturbationPath:
    """Increments kappa_k of the perturbation path of a scheme run.

    The exact flow over each cell is integrated on the fine sub-grid of
    ``path`` (defaults to the trajectory's own path).
    """
    model.require_elliptic("perturbation path")
    path = trajectory.path if path is None else path
    if path is None:
        raise ContractError("a driving path is required")
    r = path.n_fine >> trajectory.level
    xi_vals = np.ascontiguousarray(trajectory.values, dtype=float)
    sig = np.ascontiguousarray(model.sigma(xi_vals[:-1]), dtype=float)
    kappa, resid, base, status = _perturbation_kernel(
        model.code, xi_vals, sig, np.ascontiguousarray(path.values), r, tol)
    if np.any(status >= 2):
        k = int(np.argmax(status >= 2)) + 1
        raise SolverError(f"kappa root not found on cell {k} (status {int(status[k - 1])})",
                          float(np.nanmax(np.abs(resid))) if np.any(np.isfinite(resid)) else np.nan)
    return PerturbationPath(trajectory.level, kappa, xi_vals[1:] - base, resid,
                            int(np.sum(status == 1)))


def global_residuals(perturbation: PerturbationPath, trajectory: SchemeTrajectory,
                     model: CoefficientModel, path: Optional[FbmPath] = None) -> np.ndarray:
    """X_{tau_k}(xi, B + h) - xi_k from one global solve with the shifted driver."""
    path = trajectory.path if path is None else path
    g = np.asarray(path.values) + perturbation.on_grid(path.n_fine)
    x = direct_solution(model, trajectory.xi, g)
    return x[:: path.n_fine >> trajectory.level] - trajectory.values


def one_step_error(scheme, model: CoefficientModel, xi_prev: float, cell: np.ndarray,
                   dt: float, tol: float = PERTURB_TOL) -> float:
    """One-step defect (xi_k - xi_{k-1}) - (X_dt(xi_{k-1}, cell driver) - xi_{k-1}).

    Parameters
    ----------
    cell : np.ndarray
        Driver values on a uniform fine grid covering the cell (any offset).
    dt : float
        Cell width.
    """
    cell = np.asarray(cell, dtype=float)
    if cell.ndim != 1 or cell.size < 2:
        raise ContractError("cell needs at least two driver values")
    dB = np.ascontiguousarray(np.diff(cell))
    h = dt / dB.size
    x_exact, _, ok = _cell_flow(model.code, float(xi_prev), dB, h, 0.0, 0.0, tol)
    if not ok:
        raise SolverError("cell flow exceeded its step budget")
    x_scheme = scheme_step(scheme, model, xi_prev, dt, cell[-1] - cell[0], check=False)
    return float(x_scheme - x_exact)


# ---------------------------------------------------------------------------
# main terms and partial-sum processes


def _cell_data(B: np.ndarray, m: int):
    B = np.asarray(B, dtype=float)
    r = (B.size - 1) >> m
    dB = np.diff(B[::r])
    trap = 0.5 * dB / (1 << m) - cell_iterated_integrals((1, 0), B, m)
    iters = {w: cell_iterated_integrals(_WORD_TUPLES[w], B, m) for w in WORDS}
    return dB, trap, iters


def _coarse_X(X: np.ndarray, m: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    n = 1 << m
    if (X.size - 1) % n:
        raise ContractError("reference path must live on a refinement of the level-m grid")
    return X[:: (X.size - 1) // n]


def main_term_kappa(scheme, model: CoefficientModel, X: np.ndarray, B: np.ndarray, m: int,
                    k: Optional[int] = None):
    """Main term kappa-tilde of kappa_k, evaluated at the reference X_{tau_{k-1}}.

    ``X`` and ``B`` live on the same fine grid. Returns all n values, or the
    value for cell ``k`` (1-based) when given.
    """
    fam = coefficient_functions(scheme, model)
    Xc = _coarse_X(X, m)[:-1]
    dB, trap, iters = _cell_data(B, m)
    delta = 2.0 ** (-m)
    if fam.scheme is SchemeKind.EULER:
        out = fam.f[2](Xc) * dB**2
    else:
        out = fam.f[3](Xc) * dB**3 + fam.f[4](Xc) * dB**4 + fam.g1(Xc) * trap
        out = out + fam.phi(Xc) * delta * dB**2
        for w in WORDS:
            out = out + fam.phi_words[w](Xc) * iters[w]
    return out if k is None else float(out[k - 1])


@dataclass(frozen=True, eq=False)
class PhiProcesses:
    """Right-continuous step processes Phi_1..Phi_4 sampled at tau_0..tau_n."""

    level: int
    values: np.ndarray  # shape (4, n + 1)

    def at(self, t) -> np.ndarray:
        """Values at time(s) t, using the floor of 2^m t."""
        idx = np.floor(np.asarray(t, dtype=float) * (1 << self.level) + 1e-12).astype(int)
        return self.values[:, np.clip(idx, 0, 1 << self.level)]

    def to_csv(self, path: str) -> None:
        n = self.values.shape[1] - 1
        np.savetxt(path, np.column_stack([np.arange(n + 1) / n, self.values.T]), delimiter=",",
                   header="t,phi1,phi2,phi3,phi4", comments="", fmt="%.17g")


def phi_processes(scheme, model: CoefficientModel, X: np.ndarray, B: np.ndarray,
                  m: int) -> PhiProcesses:
    """Partial sums Phi_1..Phi_4 of the main-term pieces.

    For the Euler scheme only Phi_1 (the f_2 sums) is non-zero.
    """
    fam = coefficient_functions(scheme, model)
    Xc = _coarse_X(X, m)[:-1]
    dB, trap, iters = _cell_data(B, m)
    delta = 2.0 ** (-m)
    n = dB.size
    terms = np.zeros((4, n))
    if fam.scheme is SchemeKind.EULER:
        terms[0] = fam.f[2](Xc) * dB**2
    else:
        g1 = fam.g1(Xc)
        terms[0] = fam.f[3](Xc) * dB**3 + fam.f[4](Xc) * dB**4
        terms[1] = g1 * trap
        terms[2] = fam.phi(Xc) * delta * dB**2 + sum(fam.phi_words[w](Xc) * iters[w] for w in WORDS)
        terms[3] = -g1 * model.sigma(Xc, 1) * dB * trap
    values = np.concatenate([np.zeros((4, 1)), np.cumsum(terms, axis=1)], axis=1)
    return PhiProcesses(m, values)
