"""Exact sampling of fractional Brownian motion on dyadic grids.

Paths are drawn by circulant embedding (Davies-Harte) of the fractional
Gaussian noise covariance, with an exact Cholesky fallback. Every path
owns an independent counter-based Philox stream keyed by
``(seed, index, *stream)`` so Monte Carlo results do not depend on the
order or the thread in which paths are generated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.linalg import lapack

from .errors import DomainError, FactorizationError

MAX_FINE_LEVEL = 22
MAX_CHOLESKY = 1 << 12
EIG_TOL = 1e-12


def _check_hurst(H: float) -> None:
    if not 0.0 < H < 1.0:
        raise DomainError(f"Hurst parameter must lie in (0, 1), got {H}")


def fbm_covariance(s, t, H: float):
    """Covariance R(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2.

    Examples
    --------
    >>> fbm_covariance(0.5, 1.0, 0.5)
    0.5
    """
    _check_hurst(H)
    s_arr, t_arr = np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    if np.any(s_arr < 0) or np.any(t_arr < 0) or np.any(s_arr > 1) or np.any(t_arr > 1):
        raise DomainError("times must lie in [0, 1]")
    two_h = 2.0 * H
    # symmetric form so that R(s, t) == R(t, s) bit for bit
    out = 0.5 * ((s_arr**two_h + t_arr**two_h) - np.abs(t_arr - s_arr) ** two_h)
    return float(out) if out.ndim == 0 else out


def rng_for(seed: int, index: int = 0, stream: Sequence[int] = ()) -> np.random.Generator:
    """Counter-based generator for one (seed, index, stream) key."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(index), *[int(s) for s in stream]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _fgn_autocov(n: int, H: float) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    return 0.5 * (np.abs(k + 1) ** (2 * H) + np.abs(k - 1) ** (2 * H) - 2 * k ** (2 * H))


@lru_cache(maxsize=32)
def _circulant_sqrt(M: int, H: float) -> Tuple[Optional[np.ndarray], float]:
    """Scaled square-root eigenvalues of the embedding, or None on failure."""
    n = 1 << M
    gam = _fgn_autocov(n, H)
    row = np.concatenate([gam, gam[-2:0:-1]])
    lam = np.fft.fft(row).real
    lmin, lmax = float(lam.min()), float(lam.max())
    if lmin < -EIG_TOL * lmax:
        return None, lmin
    out = np.sqrt(np.clip(lam, 0.0, None) / (2 * n))
    out.setflags(write=False)
    return out, lmin


@lru_cache(maxsize=8)
def _toeplitz_factor(n: int, H: float) -> np.ndarray:
    gam = _fgn_autocov(n, H)[:n]
    idx = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    return _cholesky(gam[idx])


def _cholesky(C: np.ndarray) -> np.ndarray:
    L, info = lapack.dpotrf(C, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(int(info) - 1)
    return L


@dataclass(frozen=True, eq=False)
class FbmPath:
    """One fBm sample on the fine dyadic grid t_i = i 2^{-fine_level}.

    Attributes
    ----------
    values : np.ndarray
        Read-only array of 2^fine_level + 1 values with values[0] = 0.
    level : int
        Coarse level m; coarse values are ``values[::2**(fine_level-level)]``.
    """

    hurst: float
    level: int
    fine_level: int
    values: np.ndarray
    seed: int
    index: int = 0
    sampler: str = "davies-harte"
    fallback: bool = False
    notes: Dict[str, object] = field(default_factory=dict)

    @property
    def n_fine(self) -> int:
        return self.values.size - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_fine + 1) / self.n_fine

    def ratio(self, m: Optional[int] = None) -> int:
        m = self.level if m is None else m
        if not 0 <= m <= self.fine_level:
            raise DomainError(f"level {m} not contained in fine level {self.fine_level}")
        return 1 << (self.fine_level - m)

    def coarse(self, m: Optional[int] = None) -> np.ndarray:
        """Values at the level-m grid points (exact fine-grid entries)."""
        return self.values[:: self.ratio(m)]

    def increments(self, m: Optional[int] = None) -> np.ndarray:
        return np.diff(self.coarse(m))

    def at_level(self, m: int) -> "FbmPath":
        """Same path viewed with a different coarse level."""
        self.ratio(m)
        return FbmPath(self.hurst, m, self.fine_level, self.values, self.seed, self.index,
                       self.sampler, self.fallback, dict(self.notes))

    def metadata(self) -> Dict[str, object]:
        return {"hurst": self.hurst, "level": self.level, "fine_level": self.fine_level,
                "seed": self.seed, "sampler": self.sampler, "fallback": self.fallback}

    def to_csv(self, path: str) -> None:
        """Write ``t,B`` rows with 17 significant digits."""
        np.savetxt(path, np.column_stack([self.times, self.values]), delimiter=",",
                   header="t,B", comments="", fmt="%.17g")

    def save_metadata(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)


def _check_level(M: int) -> None:
    if not 1 <= M <= MAX_FINE_LEVEL:
        raise DomainError(f"fine level must satisfy 1 <= M <= {MAX_FINE_LEVEL}, got {M}")


def _fgn_davies_harte(sqrt_lam: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(2 * n) + 1j * rng.standard_normal(2 * n)
    return np.fft.fft(sqrt_lam * z)[:n].real


def _fgn_cholesky(n: int, H: float, rng: np.random.Generator) -> np.ndarray:
    if n > MAX_CHOLESKY:
        raise DomainError(f"Cholesky fallback limited to n <= {MAX_CHOLESKY}")
    return _toeplitz_factor(n, H) @ rng.standard_normal(n)


def sample_increments(M: int, H: float, seed: int, index: int = 0,
                      stream: Sequence[int] = ()) -> Tuple[np.ndarray, bool]:
    """Fine-grid increments of one path and whether the fallback was used."""
    _check_hurst(H)
    _check_level(M)
    n = 1 << M
    rng = rng_for(seed, index, stream)
    sqrt_lam, _ = _circulant_sqrt(M, H)
    if sqrt_lam is None:
        fgn, fallback = _fgn_cholesky(n, H, rng), True
    else:
        fgn, fallback = _fgn_davies_harte(sqrt_lam, n, rng), False
    return fgn * float(n) ** (-H), fallback


def sample_fbm(fine_level: int, H: float, seed: int, level: Optional[int] = None,
               index: int = 0, stream: Sequence[int] = ()) -> FbmPath:
    """Exact fBm sample on the grid of mesh 2^{-fine_level}.

    Parameters
    ----------
    fine_level : int
        Fine level M; the path has 2^M + 1 values.
    H : float
        Hurst parameter.
    seed, index, stream
        Key of the counter-based random stream.
    level : int, optional
        Coarse level m (defaults to ``fine_level``).
    """
    inc, fallback = sample_increments(fine_level, H, seed, index, stream)
    values = np.concatenate([[0.0], np.cumsum(inc)])
    values.setflags(write=False)
    m = fine_level if level is None else level
    if not 1 <= m <= fine_level:
        raise DomainError("coarse level must satisfy 1 <= m <= fine_level")
    return FbmPath(H, m, fine_level, values, seed, index,
                   "cholesky" if fallback else "davies-harte", fallback)


def sample_fbm_batch(fine_level: int, H: float, seed: int, indices: Sequence[int],
                     stream: Sequence[int] = ()) -> np.ndarray:
    """Rows are the paths ``sample_fbm(fine_level, H, seed, index=i).values``."""
    n = 1 << fine_level
    out = np.zeros((len(indices), n + 1))
    for row, idx in enumerate(indices):
        inc, _ = sample_increments(fine_level, H, seed, int(idx), stream)
        np.cumsum(inc, out=out[row, 1:])
    return out


def sample_fbm_cholesky(n: int, H: float, seed: int, index: int = 0,
                        stream: Sequence[int] = ()) -> FbmPath:
    """Exact sample of (B_{1/n}, ..., B_1) by factorizing its covariance.

    ``n`` must be a power of two so the result lives on a dyadic grid.
    """
    _check_hurst(H)
    if n < 1 or n > MAX_CHOLESKY or n & (n - 1):
        raise DomainError(f"grid size must be a power of two in [1, {MAX_CHOLESKY}]")
    t = np.arange(1, n + 1) / n
    L = _cholesky(fbm_covariance(t[:, None], t[None, :], H))
    rng = rng_for(seed, index, stream)
    values = np.concatenate([[0.0], L @ rng.standard_normal(n)])
    values.setflags(write=False)
    M = int(round(math.log2(n)))
    return FbmPath(H, M, M, values, seed, index, "cholesky", False)


@njit(cache=True)
def _holder_ratio(values, lam, max_lag):
    n = values.size - 1
    best = 0.0
    for lag in range(1, max_lag + 1):
        scale = (lag / n) ** lam
        for i in range(n - lag + 1):
            r = abs(values[i + lag] - values[i]) / scale
            if r > best:
                best = r
    return best


def holder_ratio(path, lam: float, window: float) -> float:
    """sup |B_t - B_s| / (t - s)^lam over fine-grid pairs with 0 < t - s <= window.

    ``path`` is an :class:`FbmPath` or an array of values on [0, 1].
    The supremum only ranges over the fine grid, not the continuum.
    """
    if not 0.0 < lam < 1.0:
        raise DomainError("exponent must lie in (0, 1)")
    if not 0.0 < window <= 1.0:
        raise DomainError("window must lie in (0, 1]")
    values = np.asarray(path.values if isinstance(path, FbmPath) else path, dtype=float)
    n = values.size - 1
    max_lag = int(math.floor(window * n + 1e-9))
    return float(_holder_ratio(values, float(lam), max_lag))
