"""Limit processes of the normalized scheme errors.

For every scheme the normalized error 2^{m gamma}(Xbar - X) tends to
sigma(X) U + J int_0^. J_s^{-1} W(X_s) U_s ds, where U is an explicit
combination of Lebesgue integrals, Ito integrals against Brownian motions
W, W~ independent of B, and symmetric integrals against B.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError
from .fbm import rng_for
from .flow import ReferencePath
from .models import CoefficientModel
from .perturbation import coefficient_functions
from .schemes import SchemeKind
from .variations import sigma_qH

# stream tags keep W and W~ independent of every fBm stream
STREAM_W = 0x57
STREAM_WT = 0x5754

# (lower, upper); Euler's range is open, the others include H = 1/2
_RANGES = {
    SchemeKind.EULER: (0.5, 1.0),
    SchemeKind.MILSTEIN: (1 / 3, 0.5),
    SchemeKind.CRANK_NICOLSON: (1 / 3, 0.5),
}


def _in_range(kind: SchemeKind, H: float) -> bool:
    lo, hi = _RANGES[kind]
    if kind is SchemeKind.EULER:
        return lo < H < hi
    return lo < H <= hi


def theoretical_rate(scheme, H: float) -> float:
    """Exponent gamma of the normalization 2^{m gamma}.

    Euler 2H - 1 on (1/2, 1); Milstein 4H - 1 and Crank-Nicolson 3H - 1/2
    on (1/3, 1/2].

    Examples
    --------
    >>> theoretical_rate("cn", 0.5)
    1.0
    """
    kind = SchemeKind.parse(scheme)
    if not _in_range(kind, H):
        lo, hi = _RANGES[kind]
        closing = ")" if kind is SchemeKind.EULER else "]"
        raise DomainError(f"{kind.value} limit theorem needs H in ({lo:.4g}, {hi:.4g}{closing}, got {H}")
    if kind is SchemeKind.EULER:
        return 2 * H - 1
    if kind is SchemeKind.MILSTEIN:
        return 4 * H - 1
    return 3 * H - 0.5


class Regime(Enum):
    SMOOTH = "1/2<H<1"
    ROUGH = "1/3<H<1/2"
    BROWNIAN = "H=1/2"


class Integrator(Enum):
    TIME = "du"
    ITO_W = "dW"
    ITO_W_TILDE = "dW~"
    STRAT_B = "o dB"


@dataclass(frozen=True)
class LimitTerm:
    """coefficient * int f(X_u) d(integrator)."""

    integrator: Integrator
    coefficient: float
    name: str
    function: object = field(repr=False, compare=False)


@dataclass(frozen=True)
class LimitProcessSpec:
    scheme: SchemeKind
    hurst: float
    regime: Regime
    terms: List[LimitTerm]

    @property
    def weak(self) -> bool:
        """True when the theorem only gives convergence in law."""
        return self.scheme is SchemeKind.CRANK_NICOLSON or (
            self.scheme is SchemeKind.MILSTEIN and self.regime is Regime.BROWNIAN)


def limit_spec(scheme, model: CoefficientModel, H: float) -> LimitProcessSpec:
    """Terms of U for the scheme and the regime selected by H."""
    kind = SchemeKind.parse(scheme)
    theoretical_rate(kind, H)
    model.require_elliptic("limit process")
    fam = coefficient_functions(kind, model)
    T = LimitTerm
    if kind is SchemeKind.EULER:
        return LimitProcessSpec(kind, H, Regime.SMOOTH,
                                [T(Integrator.TIME, 1.0, "f2", fam.f[2])])
    brownian = H == 0.5
    regime = Regime.BROWNIAN if brownian else Regime.ROUGH
    if kind is SchemeKind.MILSTEIN:
        if not brownian:
            terms = [T(Integrator.TIME, 3.0, "f4_dagger", fam.f4_dagger)]
        else:
            terms = [T(Integrator.TIME, 1.0, "psi", fam.psi),
                     T(Integrator.ITO_W, math.sqrt(6.0), "f3", fam.f[3]),
                     T(Integrator.STRAT_B, 3.0, "f3", fam.f[3]),
                     T(Integrator.TIME, 3.0, "f4_dagger", fam.f4_dagger),
                     T(Integrator.ITO_W_TILDE, 1 / math.sqrt(12.0), "g1", fam.g1)]
        return LimitProcessSpec(kind, H, regime, terms)
    if not brownian:
        terms = [T(Integrator.ITO_W, sigma_qH(3, H), "f3", fam.f[3])]
    else:
        terms = [T(Integrator.TIME, 1.0, "psi", fam.psi),
                 T(Integrator.ITO_W, math.sqrt(6.0), "f3", fam.f[3]),
                 T(Integrator.STRAT_B, 3.0, "f3", fam.f[3]),
                 T(Integrator.ITO_W_TILDE, 1 / math.sqrt(12.0), "g1", fam.g1)]
    return LimitProcessSpec(kind, H, regime, terms)


def brownian_increments(n: int, seed: int, index: int = 0, tilde: bool = False,
                        stream: Sequence[int] = ()) -> np.ndarray:
    """Increments of W (or W~) on a uniform grid of n cells over [0, 1]."""
    tag = STREAM_WT if tilde else STREAM_W
    rng = rng_for(seed, index, (tag, *stream))
    return rng.standard_normal(n) * math.sqrt(1.0 / n)


def simulate_limit_U(spec: LimitProcessSpec, X: np.ndarray, B: Optional[np.ndarray] = None,
                     seed: int = 0, index: int = 0, times: Optional[np.ndarray] = None,
                     dW: Optional[np.ndarray] = None, dW_tilde: Optional[np.ndarray] = None,
                     stream: Sequence[int] = ()) -> np.ndarray:
    """One sample of U on the fine grid of the reference X.

    Lebesgue terms use the trapezoid rule, Ito terms left-point sums against
    W and W~, and symmetric terms the trapezoid-in-f sums against B.
    Terms whose coefficient function vanishes on the whole path are dropped.
    Explicit ``dW`` / ``dW_tilde`` override the seeded streams.
    """
    X = np.asarray(X, dtype=float)
    n = X.size - 1
    times = np.linspace(0.0, 1.0, n + 1) if times is None else np.asarray(times, dtype=float)
    if times.shape != X.shape:
        raise ContractError("times and reference path differ in length")
    U = np.zeros(n + 1)
    for term in spec.terms:
        f = np.asarray(term.function(X), dtype=float)
        if not np.any(f):
            continue
        if term.integrator is Integrator.TIME:
            incr = 0.5 * (f[1:] + f[:-1]) * np.diff(times)
        elif term.integrator is Integrator.STRAT_B:
            if B is None:
                raise ContractError("symmetric term needs the driving fBm path")
            B = np.asarray(B, dtype=float)
            if B.shape != X.shape:
                raise ContractError("B and X must share the fine grid")
            incr = 0.5 * (f[1:] + f[:-1]) * np.diff(B)
        else:
            tilde = term.integrator is Integrator.ITO_W_TILDE
            given = dW_tilde if tilde else dW
            noise = (np.asarray(given, dtype=float) if given is not None
                     else brownian_increments(n, seed, index, tilde, stream))
            if noise.size != n:
                raise ContractError("Brownian increments do not match the grid")
            incr = f[:-1] * noise
        U[1:] += term.coefficient * np.cumsum(incr)
    return U


def error_limit_process(model: CoefficientModel, reference: ReferencePath,
                        U: np.ndarray) -> np.ndarray:
    """sigma(X) U + J int_0^. J_s^{-1} W(X_s) U_s ds by trapezoid quadrature."""
    U = np.asarray(U, dtype=float)
    if U.shape != reference.x.shape:
        raise ContractError("U must live on the reference grid")
    x, J, t = reference.x, reference.J, reference.times
    integrand = model.W(x) * U / J
    inner = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(t))])
    return model.sigma(x) * U + J * inner


def limit_to_csv(path: str, times: np.ndarray, U: np.ndarray, error_limit: np.ndarray) -> None:
    """Write ``t,U,error_limit`` with 17 significant digits."""
    np.savetxt(path, np.column_stack([times, U, error_limit]), delimiter=",",
               header="t,U,error_limit", comments="", fmt="%.17g")
