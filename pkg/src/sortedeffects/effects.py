"""Partial effects evaluated at each cell of the inference sample.

A cell is one observation of the subpopulation, or one (observation, rank)
pair for the quantile family, where the rank grid is treated as equally
weighted atoms of the uniform rank distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .data import DesignSpec, Sample, build_design, build_design_derivative, weighted_measure
from .errors import ConfigError, EmptySampleError
from .estimators import FittedModel, fit_binary, fit_ols, fit_quantile

DERIVATIVE = "derivative"


@dataclass(frozen=True)
class EffectSpec:
    """Model family, design and contrast.

    ``contrast`` is either a pair ``(t0, t1)`` or the string ``"derivative"``
    for the marginal effect at the observed treatment value.
    """

    family: str
    design: DesignSpec
    contrast: tuple[float, float] | str = (0.0, 1.0)

    def __post_init__(self):
        if self.family not in ("mean", "binary-logit", "binary-probit", "quantile"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.contrast == DERIVATIVE:
            if not self.design.uses_treatment:
                raise ConfigError("derivative contrast needs design terms in the treatment")
        else:
            t0, t1 = (float(v) for v in self.contrast)
            if t0 == t1:
                raise ConfigError("contrast needs t0 != t1")
            object.__setattr__(self, "contrast", (t0, t1))
        if self.family == "quantile":
            grid = self.design.rank_grid
            if not grid:
                raise ConfigError("quantile family needs a rank grid")
            steps = np.diff(grid)
            if steps.size and np.ptp(steps) > 1e-9:
                raise ConfigError("rank grid must be equally spaced")
        elif self.design.rank_grid:
            raise ConfigError("rank grid is only used by the quantile family")

    @property
    def link(self) -> str | None:
        return self.family.split("-")[1] if self.family.startswith("binary") else None


@dataclass(frozen=True, eq=False)
class EffectVector:
    """Effect values per cell with the matching cell weights of the estimated measure.

    ``obs`` maps each cell back to its sample row and ``rank`` to its index in
    the rank grid (always 0 outside the quantile family). Cells are ordered
    lexicographically by (observation, rank).
    """

    values: np.ndarray
    weights: np.ndarray
    obs: np.ndarray
    rank: np.ndarray
    taus: tuple[float, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        obs = np.asarray(self.obs, dtype=np.intp).reshape(-1)
        rank = np.zeros_like(obs) if self.rank is None else np.asarray(self.rank, dtype=np.intp).reshape(-1)
        if not (v.shape == w.shape == obs.shape == rank.shape):
            raise ValueError("effect values, weights and cell indices must have equal length")
        if v.size == 0:
            raise EmptySampleError("effect vector has no cells")
        for name, arr in (("values", v), ("weights", w), ("obs", obs), ("rank", rank)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, values) -> "EffectVector":
        v = np.asarray(values, dtype=float).reshape(-1)
        return cls(v, np.full(v.size, 1.0 / v.size), np.arange(v.size), None)

    def __len__(self) -> int:
        return self.values.size

    @property
    def tau(self) -> np.ndarray:
        """Rank level of each cell (NaN outside the quantile family)."""
        if self.taus is None:
            return np.full(self.values.size, np.nan)
        return np.asarray(self.taus)[self.rank]


def _link(eta, link):
    if link == "logit":
        return special.expit(eta)
    return special.ndtr(eta)


def _link_density(eta, link):
    if link == "logit":
        p = special.expit(eta)
        return p * (1 - p)
    return np.exp(-0.5 * eta**2) / np.sqrt(2 * np.pi)


def contrast_designs(x: np.ndarray, spec: EffectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Design pair that the effect is computed from.

    For a discrete contrast these are ``P(t0, w)`` and ``P(t1, w)``; for the
    derivative, ``P(t, w)`` and ``dP/dt (t, w)`` at the observed treatment.
    """
    if spec.contrast == DERIVATIVE:
        return build_design(x, spec.design), build_design_derivative(x, spec.design)
    t0, t1 = spec.contrast
    return build_design(x, spec.design, t0), build_design(x, spec.design, t1)


def _effects_from_designs(beta: np.ndarray, designs, spec: EffectSpec) -> np.ndarray:
    """Effect matrix of shape (rows, k) with k rank levels (1 outside QR)."""
    a, b = designs
    if spec.contrast == DERIVATIVE:
        slope = b @ beta
        if spec.link is None:
            return slope
        return _link_density(a @ beta, spec.link) * slope
    if spec.link is None:
        return (b - a) @ beta
    return _link(b @ beta, spec.link) - _link(a @ beta, spec.link)


def _pack(eff: np.ndarray, p: np.ndarray, rows: np.ndarray, taus) -> EffectVector:
    k = eff.shape[1]
    return EffectVector(
        values=eff.reshape(-1),
        weights=np.repeat(p[rows] / k, k),
        obs=np.repeat(rows, k),
        rank=np.tile(np.arange(k), rows.size),
        taus=taus,
    )


def evaluate_effects(model: FittedModel, sample: Sample, spec: EffectSpec, measure: np.ndarray | None = None) -> EffectVector:
    """Partial effects at every subpopulation cell.

    ``measure`` overrides the normalized weights (defaults to
    :func:`weighted_measure`); cells of zero-weight rows are kept so that the
    cell set does not change across bootstrap draws.
    """
    if model.family != spec.family:
        raise ConfigError(f"model family {model.family!r} does not match effect spec {spec.family!r}")
    if model.beta.shape[0] != spec.design.d_p:
        raise ConfigError(f"model has {model.beta.shape[0]} coefficients, design has {spec.design.d_p} terms")
    if spec.family == "quantile" and tuple(model.grid or ()) != tuple(spec.design.rank_grid):
        raise ConfigError("model quantile grid does not match the design rank grid")
    p = weighted_measure(sample) if measure is None else np.asarray(measure, dtype=float)
    rows = np.flatnonzero(sample.s)
    eff = _effects_from_designs(model.beta, contrast_designs(sample.x[rows], spec), spec)
    return _pack(eff, p, rows, model.grid if spec.family == "quantile" else None)


def conditional_subset(effects: EffectVector, predicate) -> EffectVector:
    """Keep the cells selected by ``predicate`` and renormalize their weights.

    ``predicate`` is a boolean mask over cells or a callable
    ``predicate(obs, tau) -> mask`` evaluated on the cell index arrays.
    """
    mask = predicate(effects.obs, effects.tau) if callable(predicate) else predicate
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape != effects.values.shape:
        raise ValueError("predicate mask must have one entry per cell")
    total = effects.weights[mask].sum()
    if not mask.any() or not total > 0:
        raise EmptySampleError("cell predicate selects no cell with positive weight")
    return EffectVector(
        effects.values[mask],
        effects.weights[mask] / total,
        effects.obs[mask],
        effects.rank[mask],
        effects.taus,
    )


def _fit(X, y, w, spec: EffectSpec) -> FittedModel:
    if spec.family == "mean":
        return fit_ols(X, y, w)
    if spec.family == "quantile":
        return fit_quantile(X, y, w, spec.design.rank_grid)
    return fit_binary(X, y, w, spec.link)


def fit_model(sample: Sample, spec: EffectSpec, weights: np.ndarray | None = None) -> FittedModel:
    """Fit the family in ``spec`` on the observed design with the given weights."""
    w = sample.w if weights is None else weights
    return _fit(build_design(sample, spec.design), sample.y, w, spec)


class EffectPipeline:
    """Estimate-then-evaluate closure used for the point estimate and every draw.

    Calling the pipeline with bootstrap weights ``omega`` refits the model with
    sampling weights ``w * omega`` and rebuilds the measure from the same
    product, as the exchangeable bootstrap requires. Design matrices do not
    depend on the weights and are built once.
    """

    def __init__(self, sample: Sample, spec: EffectSpec, subset=None):
        self.sample = sample
        self.spec = spec
        self.subset = subset
        self._X = build_design(sample, spec.design)
        self._rows = np.flatnonzero(sample.s)
        self._designs = contrast_designs(sample.x[self._rows], spec)

    @property
    def n(self) -> int:
        return self.sample.n

    def fit(self, omega: np.ndarray | None = None) -> FittedModel:
        w = self.sample.w if omega is None else self.sample.w * np.asarray(omega, dtype=float)
        return _fit(self._X, self.sample.y, w, self.spec)

    def __call__(self, omega: np.ndarray | None = None) -> EffectVector:
        p = weighted_measure(self.sample, omega)
        model = self.fit(omega)
        eff = _effects_from_designs(model.beta, self._designs, self.spec)
        out = _pack(eff, p, self._rows, model.grid if self.spec.family == "quantile" else None)
        if self.subset is not None:
            out = conditional_subset(out, self.subset)
        return out

    def estimate(self) -> EffectVector:
        return self()
