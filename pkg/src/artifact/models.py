"""Coefficient models b and sigma with analytic derivatives.

Every model is encoded as a small float array ``code`` so that compiled
kernels can evaluate b, sigma and their derivatives without Python
callbacks. The layout is ``[drift_kind, d0, d1, disp_kind, s0, s1]``.

Drift kinds
    0  affine      b(x) = d0 + d1 x
    1  cosine      b(x) = d0 cos x
Dispersion kinds
    0  constant    sigma(x) = s0
    1  hyperbolic  sigma(x) = s0 sqrt(1 + x^2)
    2  trig        sigma(x) = s0 + s1 sin x
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional

import numpy as np
from numba import njit

from .errors import ContractError, DomainError

DRIFT_AFFINE, DRIFT_COS = 0, 1
DISP_CONST, DISP_HYPERBOLIC, DISP_TRIG = 0, 1, 2
MAX_ORDER = 6


@njit(cache=True)
def _sin_derivative(x, k):
    r = k % 4
    if r == 0:
        return math.sin(x)
    if r == 1:
        return math.cos(x)
    if r == 2:
        return -math.sin(x)
    return -math.cos(x)


@njit(cache=True)
def drift(code, x, k):
    """k-th derivative of b at x."""
    kind = int(code[0])
    if kind == DRIFT_AFFINE:
        if k == 0:
            return code[1] + code[2] * x
        if k == 1:
            return code[2]
        return 0.0
    # cos x = sin(x + pi/2), so shift the derivative index by one
    return code[1] * _sin_derivative(x, k + 1)


@njit(cache=True)
def disp(code, x, k):
    """k-th derivative of sigma at x."""
    kind = int(code[3])
    s0 = code[4]
    if kind == DISP_CONST:
        return s0 if k == 0 else 0.0
    if kind == DISP_TRIG:
        if k == 0:
            return s0 + code[5] * math.sin(x)
        return code[5] * _sin_derivative(x, k)
    # hyperbolic: sigma^(k) = s0 P_k(x) (1+x^2)^((1-2k)/2)
    r = 1.0 + x * x
    x2 = x * x
    if k == 0:
        p = 1.0
    elif k == 1:
        p = x
    elif k == 2:
        p = 1.0
    elif k == 3:
        p = -3.0 * x
    elif k == 4:
        p = 12.0 * x2 - 3.0
    elif k == 5:
        p = -15.0 * x * (4.0 * x2 - 3.0)
    else:
        p = 45.0 * (8.0 * x2 * x2 - 12.0 * x2 + 1.0)
    return s0 * p * r ** (0.5 - k)


@njit(cache=True)
def wronskian(code, x):
    """W = sigma b' - sigma' b."""
    return disp(code, x, 0) * drift(code, x, 1) - disp(code, x, 1) * drift(code, x, 0)


@njit(cache=True)
def transform_F(code, x):
    """F(x) = int_0^x du / sigma(u) (elliptic dispersions only)."""
    kind = int(code[3])
    s0 = code[4]
    if kind == DISP_CONST:
        return x / s0
    if kind == DISP_HYPERBOLIC:
        return math.asinh(x) / s0
    s1 = code[5]
    if s1 == 0.0:
        return x / s0
    w = math.sqrt(s0 * s0 - s1 * s1)
    period = 2.0 * math.pi / w
    j = math.floor((x + math.pi) / (2.0 * math.pi))
    xr = x - 2.0 * math.pi * j
    base = (2.0 / w) * math.atan(s1 / w)
    if xr <= -math.pi:
        inner = -(2.0 / w) * 0.5 * math.pi - base
    else:
        inner = (2.0 / w) * math.atan((s0 * math.tan(0.5 * xr) + s1) / w) - base
    return j * period + inner


@njit(cache=True)
def transform_G(code, y):
    """G = F^{-1}."""
    kind = int(code[3])
    s0 = code[4]
    if kind == DISP_CONST:
        return s0 * y
    if kind == DISP_HYPERBOLIC:
        return math.sinh(s0 * y)
    s1 = code[5]
    if s1 == 0.0:
        return s0 * y
    w = math.sqrt(s0 * s0 - s1 * s1)
    z = 0.5 * w * y + math.atan(s1 / w)
    j = math.floor(z / math.pi + 0.5)
    zr = z - j * math.pi
    return 2.0 * math.pi * j + 2.0 * math.atan((w * math.tan(zr) - s1) / s0)


@njit(cache=True)
def _eval_drift(code, xs, k):
    out = np.empty(xs.size)
    for i in range(xs.size):
        out[i] = drift(code, xs[i], k)
    return out


@njit(cache=True)
def _eval_disp(code, xs, k):
    out = np.empty(xs.size)
    for i in range(xs.size):
        out[i] = disp(code, xs[i], k)
    return out


@njit(cache=True)
def _eval_F(code, xs):
    out = np.empty(xs.size)
    for i in range(xs.size):
        out[i] = transform_F(code, xs[i])
    return out


@njit(cache=True)
def _eval_G(code, ys):
    out = np.empty(ys.size)
    for i in range(ys.size):
        out[i] = transform_G(code, ys[i])
    return out


def _apply(kernel: Callable, code: np.ndarray, x, *args):
    arr = np.asarray(x, dtype=float)
    out = kernel(code, np.ascontiguousarray(arr.ravel()), *args).reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class CoefficientModel:
    """Drift and dispersion pair with analytic derivatives up to order 6.

    Parameters
    ----------
    name : str
        Registry name.
    code : np.ndarray
        Kernel encoding ``[drift_kind, d0, d1, disp_kind, s0, s1]``.
    sup_db, sup_dsigma : float
        Recorded sup|b'| and sup|sigma'| over the real line.
    sigma_inf : float or None
        Recorded inf sigma; ``None`` when no positive lower bound holds.
    params : dict
        Parameters the model was built from (for reports).
    """

    name: str
    code: np.ndarray
    sup_db: float
    sup_dsigma: float
    sigma_inf: Optional[float]
    params: Dict[str, Any] = field(default_factory=dict)
    max_order: int = MAX_ORDER

    @property
    def elliptic(self) -> bool:
        return self.sigma_inf is not None and self.sigma_inf > 0

    def _check_order(self, k: int) -> None:
        if not 0 <= k <= self.max_order:
            raise ContractError(f"derivative order {k} not registered (max {self.max_order})")

    def b(self, x, k: int = 0):
        """k-th derivative of the drift."""
        self._check_order(k)
        return _apply(_eval_drift, self.code, x, k)

    def sigma(self, x, k: int = 0):
        """k-th derivative of the dispersion."""
        self._check_order(k)
        return _apply(_eval_disp, self.code, x, k)

    def W(self, x):
        """The bracket sigma b' - sigma' b."""
        return self.sigma(x) * self.b(x, 1) - self.sigma(x, 1) * self.b(x)

    def require_elliptic(self, what: str) -> None:
        if not self.elliptic:
            raise ContractError(f"{what} requires inf sigma > 0; model '{self.name}' has none")

    def F(self, x):
        """Lamperti-type transform int_0^x du / sigma(u)."""
        self.require_elliptic("F")
        return _apply(_eval_F, self.code, x)

    def G(self, y):
        """Inverse of F."""
        self.require_elliptic("G")
        return _apply(_eval_G, self.code, y)

    def spot_check(self, lo: float = -5.0, hi: float = 5.0, n: int = 10001) -> bool:
        """Check the recorded inf sigma and sup bounds on a dense grid."""
        x = np.linspace(lo, hi, n)
        ok = bool(np.all(np.abs(self.b(x, 1)) <= self.sup_db + 1e-12))
        ok &= bool(np.all(np.abs(self.sigma(x, 1)) <= self.sup_dsigma + 1e-12))
        if self.sigma_inf is not None:
            ok &= bool(np.all(self.sigma(x) >= self.sigma_inf - 1e-12))
        return ok

    def describe(self) -> Dict[str, Any]:
        return {"name": self.name, "params": dict(self.params)}


def build_model(
    name: str,
    drift_kind: int,
    d0: float,
    d1: float,
    disp_kind: int,
    s0: float,
    s1: float = 0.0,
    params: Optional[Mapping[str, Any]] = None,
) -> CoefficientModel:
    """Assemble a model from raw kernel parameters, deriving its bounds."""
    code = np.array([drift_kind, d0, d1, disp_kind, s0, s1], dtype=float)
    sup_db = abs(d1) if drift_kind == DRIFT_AFFINE else abs(d0)
    if disp_kind == DISP_CONST:
        sup_ds, inf_s = 0.0, (s0 if s0 > 0 else None)
    elif disp_kind == DISP_HYPERBOLIC:
        if s0 <= 0:
            raise DomainError("hyperbolic dispersion needs a positive scale")
        sup_ds, inf_s = s0, s0
    elif disp_kind == DISP_TRIG:
        sup_ds = abs(s1)
        inf_s = s0 - abs(s1) if s0 - abs(s1) > 0 else None
    else:
        raise DomainError(f"unknown dispersion kind {disp_kind}")
    code.setflags(write=False)
    return CoefficientModel(name, code, float(sup_db), float(sup_ds), inf_s, dict(params or {}))


def _constant(theta: float = 0.5, c: float = 2.0) -> CoefficientModel:
    return build_model("constant", DRIFT_AFFINE, theta, 0.0, DISP_CONST, c,
                       params={"theta": theta, "c": c})


def _linear_drift(theta: float = -1.0, c: float = 1.0) -> CoefficientModel:
    return build_model("linear-drift", DRIFT_AFFINE, 0.0, theta, DISP_CONST, c,
                       params={"theta": theta, "c": c})


_SINH_DRIFTS = {"zero": (DRIFT_AFFINE, 0.0, 0.0), "neg": (DRIFT_AFFINE, 0.0, -1.0),
                "cos": (DRIFT_COS, 1.0, 0.0)}


def _sinh(drift: str = "neg") -> CoefficientModel:
    if drift not in _SINH_DRIFTS:
        raise DomainError(f"sinh drift must be one of {sorted(_SINH_DRIFTS)}")
    dk, d0, d1 = _SINH_DRIFTS[drift]
    return build_model("sinh", dk, d0, d1, DISP_HYPERBOLIC, 1.0, params={"drift": drift})


def _trig(drift: str = "cos") -> CoefficientModel:
    table = {"cos": (DRIFT_COS, 1.0, 0.0), "zero": (DRIFT_AFFINE, 0.0, 0.0)}
    if drift not in table:
        raise DomainError(f"trig drift must be one of {sorted(table)}")
    dk, d0, d1 = table[drift]
    return build_model("trig", dk, d0, d1, DISP_TRIG, 2.0, 1.0, params={"drift": drift})


MODEL_REGISTRY: Dict[str, Callable[..., CoefficientModel]] = {
    "constant": _constant,
    "linear-drift": _linear_drift,
    "sinh": _sinh,
    "trig": _trig,
}


def get_model(name: str, params: Optional[Mapping[str, Any]] = None) -> CoefficientModel:
    """Look up a registered model by name with optional JSON-style parameters.

    Examples
    --------
    >>> get_model("sinh", {"drift": "zero"}).sigma(0.0)
    1.0
    """
    if name not in MODEL_REGISTRY:
        raise DomainError(f"unknown model '{name}'; registered: {sorted(MODEL_REGISTRY)}")
    try:
        return MODEL_REGISTRY[name](**dict(params or {}))
    except TypeError as exc:
        raise DomainError(f"bad parameters for model '{name}': {exc}") from None
