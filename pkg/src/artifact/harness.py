"""Monte Carlo experiments: convergence rates, error distributions, variations.

Every path is keyed by (seed, index, stream) so results do not depend on
chunking or on the number of threads. Reports are plain dataclasses that
``emit`` writes as CSV and JSON with a provenance header (git describe,
config hash and master seed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import subprocess
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import ContractError, DomainError
from .fbm import MAX_FINE_LEVEL, sample_fbm, sample_fbm_batch
from .flow import ReferencePath, direct_solution_batch, reference_solution
from .limits import (error_limit_process, limit_spec, simulate_limit_U, theoretical_rate,
                     Integrator, LimitProcessSpec)
from .models import CoefficientModel, get_model
from .schemes import SchemeKind, admissible_level, run_scheme_batch
from .variations import (WeightMeasure, limit_constants, sigma_qH, trapezoid_variation_process,
                         weighted_hermite_variation_process)

# stream tags; the level m is appended so every level gets fresh paths
TAG_ERROR = 1
TAG_LIMIT = 2
TAG_VARIATION = 3

DEGENERATE_TOL = 1e-12


@dataclass
class ExperimentConfig:
    """Parameters shared by all experiments.

    ``m_range`` is inclusive. ``fine_offset`` sets the fine level M = m +
    fine_offset used by the reference solver and iterated integrals.
    """

    scheme: str = "euler"
    model: str = "sinh"
    model_params: Dict[str, Any] = field(default_factory=dict)
    hurst: float = 0.75
    m_range: Tuple[int, int] = (6, 12)
    m: int = 12
    n_paths: int = 64
    seed: int = 0
    xi: float = 0.5
    epsilon: float = 0.01
    fine_offset: int = 5
    force: bool = False
    chunk: int = 64
    mode: str = "auto"
    q: int = 3

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "m_range" in data:
            data["m_range"] = tuple(int(v) for v in data["m_range"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["m_range"] = list(self.m_range)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def kind(self) -> SchemeKind:
        return SchemeKind.parse(self.scheme)

    def build_model(self) -> CoefficientModel:
        return get_model(self.model, self.model_params)

    def levels(self) -> List[int]:
        lo, hi = self.m_range
        return list(range(lo, hi + 1))

    def validate(self, levels: Optional[Sequence[int]] = None) -> None:
        if self.n_paths < 1:
            raise ContractError("n_paths must be >= 1")
        if not 0.0 < self.hurst < 1.0:
            raise DomainError("Hurst parameter must lie in (0, 1)")
        if self.chunk < 1 or self.fine_offset < 0:
            raise ContractError("chunk must be >= 1 and fine_offset >= 0")
        levels = self.levels() if levels is None else list(levels)
        for m in levels:
            if m < 1 or m + self.fine_offset > MAX_FINE_LEVEL:
                raise DomainError(f"level {m} with fine offset {self.fine_offset} exceeds sampler limits")
        if self.kind is SchemeKind.CRANK_NICOLSON and not self.force:
            m_star = admissible_level(self.build_model(), self.hurst, self.epsilon)
            if min(levels) < m_star:
                raise ContractError(f"CN needs m >= {m_star} for this model; set force to override")


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield list(range(start, min(n, start + size)))


# ---------------------------------------------------------------------------
# convergence rates


@dataclass
class RateReport:
    """Sup-norm grid errors per level and the fitted log2-slope."""

    config: ExperimentConfig
    levels: List[int]
    mean_sup_error: List[float]
    median_sup_error: List[float]
    se: List[float]
    slope: float
    slope_se: float
    fit_levels: List[int]
    gamma: Optional[float]
    inadmissible_fraction: Optional[List[float]]
    degenerate: bool

    def to_json(self) -> Dict[str, Any]:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "config"}
        out["config"] = self.config.to_dict()
        if self.degenerate:
            out["flag"] = "degenerate: exact scheme"
        return out

    def rows(self) -> np.ndarray:
        return np.column_stack([self.levels, self.mean_sup_error, self.median_sup_error, self.se])


def sup_errors(config: ExperimentConfig, m: int, model: Optional[CoefficientModel] = None):
    """Per-path sup_k |xi_k - X_{tau_k}| at level m, and CN admissibility flags."""
    model = config.build_model() if model is None else model
    M = m + config.fine_offset
    r = 1 << config.fine_offset
    errs, adm = [], []
    for idx in _chunks(config.n_paths, config.chunk):
        B = sample_fbm_batch(M, config.hurst, config.seed, idx, stream=(TAG_ERROR, m))
        X = direct_solution_batch(model, config.xi, B)
        V, ok = run_scheme_batch(config.kind, model, config.xi, B, m)
        errs.append(np.max(np.abs(V - X[:, ::r]), axis=1))
        adm.append(ok)
    return np.concatenate(errs), np.concatenate(adm)


def fit_slope(levels: Sequence[int], values: Sequence[float]) -> Tuple[float, float]:
    """OLS slope of log2(values) against m with its standard error."""
    if len(levels) < 2:
        return math.nan, math.nan
    res = stats.linregress(np.asarray(levels, dtype=float), np.log2(np.asarray(values)))
    return float(res.slope), float(res.stderr)


def run_rate_experiment(config: ExperimentConfig) -> RateReport:
    """Mean and median sup-norm errors over ``m_range`` and their slope.

    The smallest level is dropped from the fit when more than 5% of its
    CN paths are inadmissible.
    """
    config.validate()
    if len(config.levels()) < 4:
        raise ContractError("a rate fit needs at least four levels")
    model = config.build_model()
    levels = config.levels()
    mean, median, se, inadm = [], [], [], []
    for m in levels:
        e, ok = sup_errors(config, m, model)
        mean.append(float(np.mean(e)))
        median.append(float(np.median(e)))
        se.append(float(np.std(e, ddof=1) / math.sqrt(e.size)) if e.size > 1 else math.nan)
        inadm.append(float(1.0 - np.mean(ok)))
    scale = 1.0 + abs(config.xi)
    degenerate = max(mean) <= DEGENERATE_TOL * scale
    fit = list(levels)
    if config.kind is SchemeKind.CRANK_NICOLSON and inadm[0] > 0.05:
        fit = fit[1:]
    if degenerate:
        slope, slope_se = math.nan, math.nan
    else:
        sel = [levels.index(m) for m in fit]
        slope, slope_se = fit_slope(fit, [mean[i] for i in sel])
    try:
        gamma = theoretical_rate(config.kind, config.hurst)
    except DomainError:
        gamma = None
    return RateReport(config, levels, mean, median, se, slope, slope_se, fit, gamma,
                      inadm if config.kind is SchemeKind.CRANK_NICOLSON else None, degenerate)


# ---------------------------------------------------------------------------
# error distributions


@dataclass
class DistributionReport:
    """Normalized errors against the limit process.

    Pathwise mode fills ``deviations``; weak mode fills the moment and KS
    fields. The JSON view only carries the fields of its own mode.
    """

    config: ExperimentConfig
    mode: str
    gamma: float
    normalized_error: np.ndarray
    limit_sample: np.ndarray
    deviations: Optional[np.ndarray] = None
    median_deviation: Optional[float] = None
    moments_error: Optional[Tuple[float, float]] = None
    moments_limit: Optional[Tuple[float, float]] = None
    conditional_second_moment: Optional[float] = None
    ks_distance: Optional[float] = None
    ks_pvalue: Optional[float] = None

    def to_json(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"mode": self.mode, "gamma": self.gamma,
                               "n_samples": int(self.normalized_error.size),
                               "config": self.config.to_dict()}
        if self.mode == "pathwise":
            out["median_deviation"] = self.median_deviation
            out["deviations"] = [float(v) for v in self.deviations]
        else:
            out["moments_error"] = list(self.moments_error)
            out["moments_limit"] = list(self.moments_limit)
            out["conditional_second_moment"] = self.conditional_second_moment
            out["ks_distance"] = self.ks_distance
            out["ks_pvalue"] = self.ks_pvalue
        return out

    def rows(self) -> np.ndarray:
        n = self.normalized_error.size
        return np.column_stack([np.arange(n), self.normalized_error, self.limit_sample])


def conditional_moments(spec: LimitProcessSpec, model: CoefficientModel, ref: ReferencePath,
                        B: np.ndarray) -> Tuple[float, float]:
    """Mean and variance at t = 1 of the error limit given the fBm path.

    The limit is affine in the Ito integrals, so given B it is Gaussian;
    stochastic Fubini turns the drift correction into an extra kernel
    J_1 int_u^1 J_s^{-1} W(X_s) ds in front of each dW_u.
    """
    x, J, t = ref.x, ref.J, ref.times
    n = x.size - 1
    zero_dw = np.zeros(n)
    deterministic = simulate_limit_U(spec, x, B, times=t, dW=zero_dw, dW_tilde=zero_dw)
    mean = float(error_limit_process(model, ref, deterministic)[-1])
    w = model.W(x) / J
    tail = np.concatenate([np.cumsum((0.5 * (w[1:] + w[:-1]) * np.diff(t))[::-1])[::-1], [0.0]])
    kernel = model.sigma(x[-1]) + J[-1] * tail
    var = 0.0
    for term in spec.terms:
        if term.integrator in (Integrator.ITO_W, Integrator.ITO_W_TILDE):
            c = term.coefficient * term.function(x) * kernel
            var += float(np.sum(c[:-1] ** 2 * np.diff(t)))
    return mean, var


def _limit_on_path(spec, model, B, xi, seed, index, stream):
    ref = reference_solution(model, xi, B)
    U = simulate_limit_U(spec, ref.x, B, seed=seed, index=index, stream=stream)
    return ref, error_limit_process(model, ref, U)


def run_distribution_experiment(config: ExperimentConfig) -> DistributionReport:
    """Compare 2^{m gamma}(Xbar - X) with sigma(X) U + J int J^{-1} W(X) U ds.

    Mode ``auto`` selects pathwise comparison for the in-probability limits
    (Euler, Milstein with H < 1/2) and moments plus a two-sample
    Kolmogorov-Smirnov test at t = 1 for the weak limits.
    """
    m = config.m
    config.validate([m])
    model = config.build_model()
    spec = limit_spec(config.kind, model, config.hurst)
    mode = config.mode
    if mode == "auto":
        mode = "weak" if spec.weak else "pathwise"
    if mode not in ("weak", "pathwise"):
        raise ContractError(f"unknown mode '{mode}'")
    if mode == "pathwise" and spec.weak:
        raise ContractError("pathwise comparison is meaningless for a weak limit")
    gamma = theoretical_rate(config.kind, config.hurst)
    norm = 2.0 ** (m * gamma)
    M = m + config.fine_offset
    r = 1 << config.fine_offset
    errs, lims, devs, cond = [], [], [], []
    for idx in _chunks(config.n_paths, config.chunk):
        B = sample_fbm_batch(M, config.hurst, config.seed, idx, stream=(TAG_ERROR, m))
        X = direct_solution_batch(model, config.xi, B)
        V, _ = run_scheme_batch(config.kind, model, config.xi, B, m)
        raw = V - X[:, ::r]
        # solver round-off is not scheme error; keeps exact schemes at exactly zero
        raw[np.abs(raw) <= DEGENERATE_TOL * (1.0 + np.abs(X[:, ::r]))] = 0.0
        E = norm * raw
        errs.append(E[:, -1])
        if mode == "pathwise":
            for row, i in enumerate(idx):
                _, L = _limit_on_path(spec, model, B[row], config.xi, config.seed, i, (TAG_ERROR, m))
                Lc = L[::r]
                scale = np.max(np.abs(Lc))
                gap = np.max(np.abs(E[row] - Lc))
                devs.append(gap / scale if scale > 0 else (0.0 if gap == 0 else math.inf))
                lims.append(Lc[-1])
        else:
            Bl = sample_fbm_batch(M, config.hurst, config.seed, idx, stream=(TAG_LIMIT, m))
            for row, i in enumerate(idx):
                ref, L = _limit_on_path(spec, model, Bl[row], config.xi, config.seed, i,
                                        (TAG_LIMIT, m))
                lims.append(L[-1])
                mu, var = conditional_moments(spec, model, ref, Bl[row])
                cond.append(mu * mu + var)
    E1, L1 = np.concatenate(errs), np.asarray(lims)
    report = DistributionReport(config, mode, gamma, E1, L1)
    if mode == "pathwise":
        d = np.asarray(devs)
        report.deviations = d
        report.median_deviation = float(np.median(d))
    else:
        report.moments_error = (float(np.mean(E1)), float(np.mean(E1**2)))
        report.moments_limit = (float(np.mean(L1)), float(np.mean(L1**2)))
        report.conditional_second_moment = float(np.mean(cond))
        ks = stats.ks_2samp(E1, L1)
        report.ks_distance, report.ks_pvalue = float(ks.statistic), float(ks.pvalue)
    return report


# ---------------------------------------------------------------------------
# variation theorems


@dataclass
class VariationReport:
    """Law of large numbers, variance and decay checks for the variations."""

    config: ExperimentConfig
    lln_value: float
    lln_limit: float
    variance: float
    variance_limit: float
    decay_levels: List[int]
    decay_medians: List[float]
    decay_exponent: float

    def to_json(self) -> Dict[str, Any]:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "config"}
        out["config"] = self.config.to_dict()
        return out


def hermite_lln(H: float, m: int, seed: int, index: int = 0, q: int = 2) -> float:
    """2^{m(qH - 1)} sum_k (dB_k)^q on one path; tends to E[Z^q] for even q."""
    path = sample_fbm(m, H, seed, index=index, stream=(TAG_VARIATION, m))
    dB = path.increments()
    return float(2.0 ** (m * (q * H - 1)) * np.sum(dB**q))


def simple_hermite_variance(q: int, H: float, m: int, n_paths: int, seed: int,
                            chunk: int = 256) -> float:
    """Sample variance of 2^{-m/2} sum_k H_q(2^{mH} dB_k) over independent paths."""
    vals = []
    for idx in _chunks(n_paths, chunk):
        B = sample_fbm_batch(m, H, seed, idx, stream=(TAG_VARIATION, m, q))
        for row in B:
            vals.append(2.0 ** (-m / 2) * weighted_hermite_variation_process(
                q, None, WeightMeasure.LEFT, row, row, m, H)[-1])
    return float(np.var(np.asarray(vals), ddof=1))


def trapezoid_decay(H: float, levels: Sequence[int], n_paths: int, seed: int,
                    exponent: float = 0.6, fine_offset: int = 5) -> List[float]:
    """Median over paths of 2^{exponent m} sup_t |U_m(t)| with weight g = 1."""
    out = []
    for m in levels:
        B = sample_fbm_batch(m + fine_offset, H, seed, range(n_paths), stream=(TAG_VARIATION, m, 0))
        sups = [np.max(np.abs(trapezoid_variation_process(None, row, row, m))) for row in B]
        out.append(float(2.0 ** (exponent * m) * np.median(sups)))
    return out


def run_variation_experiment(config: ExperimentConfig, lln_hurst: float = 0.6, lln_level: int = 14,
                             var_hurst: float = 0.5, var_level: int = 10,
                             decay_hurst: float = 0.4, decay_levels: Sequence[int] = range(6, 12),
                             decay_exponent: float = 0.6, decay_paths: int = 512) -> VariationReport:
    """LLN for quadratic variation, simple-variation variance and trapezoid decay."""
    q = config.q
    if not 1 / (2 * q) < var_hurst < 1 - 1 / (2 * q):
        raise DomainError(f"variance check needs 1/(2q) < H < 1 - 1/(2q) for q = {q}")
    if not 0.5 < lln_hurst < 1:
        raise DomainError("law of large numbers check uses 1/2 < H < 1")
    if not decay_exponent < 2 * decay_hurst:
        raise DomainError("decay exponent must stay below 2H")
    lln = hermite_lln(lln_hurst, lln_level, config.seed)
    var = simple_hermite_variance(q, var_hurst, var_level, config.n_paths, config.seed)
    decay = trapezoid_decay(decay_hurst, list(decay_levels), decay_paths, config.seed,
                            decay_exponent, config.fine_offset)
    return VariationReport(config, lln, 1.0, var, sigma_qH(q, var_hurst) ** 2,
                           list(decay_levels), decay, decay_exponent)


# ---------------------------------------------------------------------------
# output


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=10,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def provenance_header(config: Optional[ExperimentConfig], seed: Optional[int]) -> Dict[str, Any]:
    return {"git": git_describe(),
            "config_hash": config.config_hash() if config is not None else None,
            "seed": seed if seed is not None else (config.seed if config is not None else None)}


def write_csv(path: str, header: Dict[str, Any], columns: str, rows: np.ndarray,
               fmt) -> None:
    meta = "# " + json.dumps(header, sort_keys=True)
    np.savetxt(path, rows, delimiter=",", header=meta + "\n" + columns, comments="", fmt=fmt)


def write_json(path: str, header: Dict[str, Any], payload: Dict[str, Any]) -> None:
    body = {"meta": header, **payload}
    with open(path, "w") as fh:
        json.dump(to_jsonable(body), fh, indent=2, sort_keys=True)
        fh.write("\n")


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        # 17 significant digits survive a round trip through repr
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, SchemeKind):
        return obj.value
    return obj


def emit(report, out_dir: str, config: Optional[ExperimentConfig] = None,
         seed: Optional[int] = None) -> List[str]:
    """Write a report to ``out_dir`` and return the created paths.

    RateReport -> rates.csv, rates.json; DistributionReport -> dist.csv,
    dist.json; VariationReport -> variations.json; LimitConstants ->
    constants.json.
    """
    os.makedirs(out_dir, exist_ok=True)
    config = getattr(report, "config", config)
    header = provenance_header(config, seed)
    written = []
    if isinstance(report, RateReport):
        p = os.path.join(out_dir, "rates.csv")
        write_csv(p, header, "m,mean_sup_error,median_sup_error,se", report.rows(),
                   ["%d", "%.17g", "%.17g", "%.17g"])
        written.append(p)
        p = os.path.join(out_dir, "rates.json")
        write_json(p, header, report.to_json())
        written.append(p)
    elif isinstance(report, DistributionReport):
        p = os.path.join(out_dir, "dist.csv")
        write_csv(p, header, "sample_id,normalized_error,limit_sample", report.rows(),
                   ["%d", "%.17g", "%.17g"])
        written.append(p)
        p = os.path.join(out_dir, "dist.json")
        write_json(p, header, report.to_json())
        written.append(p)
    elif isinstance(report, VariationReport):
        p = os.path.join(out_dir, "variations.json")
        write_json(p, header, report.to_json())
        written.append(p)
    elif hasattr(report, "to_json") and hasattr(report, "sigma_qH"):
        p = os.path.join(out_dir, "constants.json")
        write_json(p, header, report.to_json())
        written.append(p)
    else:
        raise ContractError(f"cannot emit object of type {type(report).__name__}")
    return written


def constants_report(H: float, q: int = 3, n_lags: int = 10):
    """Limit constants for the CLI ``constants`` command."""
    return limit_constants(H, q, n_lags)
