"""Empirical sorted effects and bootstrap uniform confidence bands.

The sorted effect at level ``u`` is the left-continuous generalized inverse of
the weighted distribution of cell effects. Cumulative weights are compared
against ``u - CDF_SLACK`` so that levels such as ``k/n`` with equal weights
land on the k-th order statistic despite summation rounding.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .effects import EffectVector
from .errors import ConfigError, DegenerateScaleError
from .resampling import DrawPlan, run_draws

CDF_SLACK = 1e-12
IQR_NORMAL = float(norm.ppf(0.75) - norm.ppf(0.25))  # 1.3489795...
QUANTILE_METHOD = "linear"  # type 7


@dataclass(frozen=True)
class QuantileGrid:
    u: tuple[float, ...]

    def __post_init__(self):
        u = np.atleast_1d(np.asarray(self.u, dtype=float))
        if u.ndim != 1 or u.size == 0:
            raise ConfigError("quantile grid must be a nonempty list")
        if not (np.all(u > 0) and np.all(u < 1)):
            raise ConfigError("quantile grid levels must lie strictly inside (0, 1)")
        if np.any(np.diff(u) <= 0):
            raise ConfigError("quantile grid must be strictly increasing")
        object.__setattr__(self, "u", tuple(float(v) for v in u))

    @classmethod
    def regular(cls, start: float, stop: float, step: float) -> "QuantileGrid":
        """Equally spaced levels from ``start`` to ``stop`` inclusive."""
        count = int(round((stop - start) / step)) + 1
        return cls(tuple(round(start + k * step, 12) for k in range(count)))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.u)

    def __len__(self) -> int:
        return len(self.u)


DEFAULT_GRID = QuantileGrid.regular(0.01, 0.98, 0.01)


def _grid(grid) -> np.ndarray:
    if isinstance(grid, QuantileGrid):
        return grid.values
    return QuantileGrid(tuple(np.atleast_1d(grid))).values


def weighted_cdf(effects: EffectVector, delta: float) -> float:
    """Total weight of the cells with effect at most ``delta`` (correctly rounded)."""
    return math.fsum(effects.weights[effects.values <= delta])


def empirical_spe(effects: EffectVector, grid) -> np.ndarray:
    """``inf{d : F(d) >= u}`` over the realized cell values, for each ``u`` in ``grid``."""
    u = _grid(grid)
    order = np.argsort(effects.values, kind="stable")
    v = effects.values[order]
    cum = np.cumsum(effects.weights[order].astype(np.longdouble))
    cum /= cum[-1]
    # cumulative weight at the last cell of each tie group
    ends = np.flatnonzero(np.r_[v[1:] != v[:-1], True])
    idx = np.searchsorted(cum[ends], u - CDF_SLACK, side="left")
    idx = np.minimum(idx, ends.size - 1)
    return v[ends[idx]].astype(float)


def rearrange_monotone(curve) -> np.ndarray:
    """Sort a discretized curve into increasing order."""
    curve = np.asarray(curve, dtype=float)
    if not np.all(np.isfinite(curve)):
        raise ValueError("rearrangement needs finite values")
    return np.sort(curve, kind="stable")


def iqr_scale(z: np.ndarray) -> np.ndarray:
    """Column-wise interquartile range over draws, rescaled to a normal sd."""
    q25, q75 = np.quantile(z, [0.25, 0.75], axis=0, method=QUANTILE_METHOD)
    return (q75 - q25) / IQR_NORMAL


@dataclass(frozen=True, eq=False)
class SortedEffectResult:
    """Point sorted effects, bootstrap draws and (rearranged) band endpoints."""

    grid: QuantileGrid
    spe: np.ndarray
    draws: np.ndarray
    sigma_half: np.ndarray
    t_crit: float | np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray
    raw_lower: np.ndarray
    raw_upper: np.ndarray
    alpha: float
    n: int
    spe_corrected: np.ndarray | None = None
    corrected_lower: np.ndarray | None = None
    corrected_upper: np.ndarray | None = None

    @property
    def u(self) -> np.ndarray:
        return self.grid.values

    @property
    def draw_mean(self) -> np.ndarray:
        return np.nanmean(self.draws, axis=0)


def bands_from_draws(spe, draws, n: int, alpha: float, grid, pointwise: bool = False) -> SortedEffectResult:
    """Band construction from a ``(B, m)`` matrix of bootstrap sorted effects.

    With ``pointwise`` the critical value is computed separately at each level,
    which is the singleton-grid case of the uniform band.
    """
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    spe = np.asarray(spe, dtype=float)
    draws = np.asarray(draws, dtype=float)
    grid = grid if isinstance(grid, QuantileGrid) else QuantileGrid(tuple(np.atleast_1d(grid)))
    good = draws[~np.isnan(draws).any(axis=1)]
    if good.shape[0] < 2:
        raise ConfigError("need at least two usable bootstrap draws")
    root_n = math.sqrt(n)
    z = root_n * (good - spe)
    sigma = iqr_scale(z)
    bad = np.flatnonzero(~(sigma > 0))
    if bad.size:
        where = [grid.u[k] for k in bad]
        raise DegenerateScaleError(f"bootstrap scale is zero at u = {where}", where)
    ratio = np.abs(z) / sigma
    if pointwise:
        t_crit = np.quantile(ratio, 1 - alpha, axis=0, method=QUANTILE_METHOD)
    else:
        t_crit = float(np.quantile(ratio.max(axis=1), 1 - alpha, method=QUANTILE_METHOD))
    half = t_crit * sigma / root_n
    raw_lower, raw_upper = spe - half, spe + half
    return SortedEffectResult(
        grid=grid,
        spe=spe,
        draws=draws,
        sigma_half=sigma,
        t_crit=t_crit,
        band_lower=rearrange_monotone(raw_lower),
        band_upper=rearrange_monotone(raw_upper),
        raw_lower=raw_lower,
        raw_upper=raw_upper,
        alpha=alpha,
        n=n,
    )


def spe_draw(pipeline, grid):
    """Wrap an effect pipeline into a draw function returning the sorted curve."""
    u = _grid(grid)

    def draw(omega):
        out = pipeline(omega)
        if isinstance(out, EffectVector):
            return empirical_spe(out, u)
        return np.asarray(out, dtype=float)

    return draw


def bootstrap_bands(
    pipeline,
    effects: EffectVector,
    grid,
    B: int = 500,
    alpha: float = 0.1,
    scheme: str = "exponential",
    seed: int = 0,
    n: int | None = None,
    threads: int = 1,
) -> SortedEffectResult:
    """Uniform confidence band for the sorted effect function.

    ``pipeline(omega)`` re-estimates effects and measure under bootstrap
    weights ``omega`` (length ``n``) and returns either an
    :class:`EffectVector` or the bootstrap sorted curve on ``grid``.
    """
    if B < 2:
        raise ConfigError("bootstrap bands need B >= 2")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    grid = grid if isinstance(grid, QuantileGrid) else QuantileGrid(tuple(grid))
    n = n if n is not None else getattr(pipeline, "n", None)
    if n is None:
        raise ConfigError("sample size n is required when the pipeline does not expose it")
    spe = empirical_spe(effects, grid)
    draws = run_draws(DrawPlan(B, n, scheme, seed), spe_draw(pipeline, grid), threads=threads)
    return bands_from_draws(spe, draws, n, alpha, grid)


def bias_correct(result: SortedEffectResult) -> SortedEffectResult:
    """Add the bootstrap bias-corrected curve ``2 spe - mean(draws)`` and its band."""
    corrected = 2 * result.spe - result.draw_mean
    half = result.t_crit * result.sigma_half / math.sqrt(result.n)
    return dataclasses.replace(
        result,
        spe_corrected=corrected,
        corrected_lower=rearrange_monotone(corrected - half),
        corrected_upper=rearrange_monotone(corrected + half),
    )
