"""Classification analysis of the least and most affected groups.

Cells with effect strictly below the ``u`` sorted effect form the least
affected group and cells strictly above the ``1 - u`` sorted effect the most
affected group; cells tied with a cutoff belong to neither. ``flipped``
swaps the two labels for effects that are predominantly negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Sample
from .effects import EffectVector
from .errors import ConfigError, DegenerateScaleError, EmptyGroupError, InstabilityError, NumericalError, ToleranceError
from .resampling import DrawPlan, run_draws
from .sorted_inference import QUANTILE_METHOD, empirical_spe, iqr_scale

MAX_SKIP_RATE = 0.5


@dataclass(frozen=True)
class GroupSpec:
    u: float = 0.1
    direction: str = "standard"

    def __post_init__(self):
        if not 0 < self.u < 0.5:
            raise ConfigError("group tail fraction u must lie in (0, 1/2)")
        if self.direction not in ("standard", "flipped"):
            raise ConfigError(f"unknown group direction {self.direction!r}")


@dataclass(frozen=True)
class LambdaTarget:
    """A moment ``E[Z^t | group]`` or a distribution value ``P(Z <= t | group)``.

    ``columns`` names the components of ``Z`` (covariates or the outcome) and
    ``t`` holds one exponent or threshold per column.
    """

    kind: str
    t: tuple[float, ...]
    columns: tuple[str, ...]
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("moment", "distribution"):
            raise ConfigError(f"unknown target kind {self.kind!r}")
        t = tuple(float(v) for v in np.atleast_1d(self.t))
        cols = tuple(self.columns) if not isinstance(self.columns, str) else (self.columns,)
        if len(t) != len(cols):
            raise ConfigError("target needs one index per column")
        if self.kind == "moment" and any(v < 0 or v != int(v) for v in t):
            raise ConfigError("moment exponents must be nonnegative integers")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "columns", cols)
        if not self.label:
            if self.kind == "moment" and sum(t) == 1:
                label = cols[t.index(1.0)]
            elif self.kind == "distribution" and len(cols) == 1:
                label = f"P({cols[0]}<={t[0]:g})"
            else:
                label = f"{self.kind}({','.join(cols)};{','.join(f'{v:g}' for v in t)})"
            object.__setattr__(self, "label", label)

    @classmethod
    def mean(cls, column: str) -> "LambdaTarget":
        return cls("moment", (1,), (column,), column)

    @classmethod
    def cdf(cls, column: str, threshold: float) -> "LambdaTarget":
        return cls("distribution", (threshold,), (column,), f"P({column}<={threshold:g})")

    def evaluate(self, sample: Sample) -> np.ndarray:
        """Per-observation value of ``Z^t`` or ``1(Z <= t)``."""
        z = np.column_stack([sample.column(c) for c in self.columns])
        t = np.asarray(self.t)
        if self.kind == "moment":
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.prod(z**t, axis=1)
            if not np.all(np.isfinite(out)):
                raise NumericalError(f"non-finite moment for target {self.label}")
            return out
        return np.all(z <= t, axis=1).astype(float)


def target_matrix(sample: Sample, targets) -> np.ndarray:
    return np.column_stack([tg.evaluate(sample) for tg in targets])


@dataclass(frozen=True, eq=False)
class Membership:
    least: np.ndarray
    most: np.ndarray
    lower_cut: float
    upper_cut: float


def classify(effects: EffectVector, group: GroupSpec, cutoffs=None) -> Membership:
    """Flag least and most affected cells.

    ``cutoffs`` are the sorted effects at ``u`` and ``1 - u``; they are
    computed from ``effects`` when omitted.
    """
    if cutoffs is None:
        lo, hi = empirical_spe(effects, [group.u, 1 - group.u])
    else:
        lo, hi = (float(c) for c in cutoffs)
    below = effects.values < lo
    above = effects.values > hi
    least, most = (below, above) if group.direction == "standard" else (above, below)
    for name, m in (("least", least), ("most", most)):
        if not effects.weights[m].sum() > 0:
            raise EmptyGroupError(
                f"{name} affected group is empty (cutoffs {lo:.6g}, {hi:.6g})", cutoffs=(lo, hi)
            )
    return Membership(least, most, float(lo), float(hi))


def _group_means(phi_cells: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # correctly rounded sums make the result independent of summation order
    w = weights[mask]
    prod = w[:, None] * phi_cells[mask]
    return np.array([math.fsum(col) for col in prod.T]) / math.fsum(w)


def group_statistic(sample: Sample, effects: EffectVector, mask, target: LambdaTarget) -> float:
    """Weighted mean of a target over the member cells, renormalized within the group."""
    mask = np.asarray(mask, dtype=bool)
    if not effects.weights[mask].sum() > 0:
        raise EmptyGroupError("group has no cell with positive weight")
    phi = target.evaluate(sample)[effects.obs]
    return float(_group_means(phi[:, None], effects.weights, mask)[0])


def exceedance_quantile(stats, alpha: float) -> float:
    """Smallest draw value ``c`` with ``mean(stats > c) <= alpha``.

    Paired with :func:`exceedance_pvalue` this gives ``p <= alpha`` exactly when
    the observed statistic is at least the critical value.
    """
    s = np.sort(np.asarray(stats, dtype=float))
    above = s.size - np.searchsorted(s, s, side="right")
    ok = above / s.size <= alpha
    return float(s[np.argmax(ok)])


def exceedance_pvalue(stats, observed: float) -> float:
    stats = np.asarray(stats, dtype=float)
    return float(np.count_nonzero(stats > observed) / stats.size)


@dataclass(frozen=True, eq=False)
class ClassificationReport:
    """Group estimates, bootstrap scales, joint critical value and p-values.

    ``estimate``, ``scale``, ``lower`` and ``upper`` have shape ``(L, T)`` for
    ``L`` linear combinations and ``T`` targets.
    """

    labels: tuple[str, ...]
    least: np.ndarray
    most: np.ndarray
    se_least: np.ndarray
    se_most: np.ndarray
    se_diff: np.ndarray
    combos: np.ndarray
    estimate: np.ndarray
    scale: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    t_crit: float
    statistic: float
    p_value: float
    block_pvalues: dict = field(default_factory=dict)
    draws: np.ndarray | None = None
    draw_stats: np.ndarray | None = None
    skipped: int = 0
    cutoffs: tuple[float, float] = (np.nan, np.nan)
    n: int = 0

    @property
    def diff(self) -> np.ndarray:
        return self.most - self.least


def _sup_stats(cz, scale, targets_idx=None):
    r = np.abs(cz) / scale
    if targets_idx is not None:
        r = r[..., targets_idx]
    return r.reshape(r.shape[0], -1).max(axis=1)


def joint_inference(
    pipeline,
    effects: EffectVector,
    sample: Sample,
    targets,
    combos=((-1.0, 1.0),),
    group: GroupSpec = GroupSpec(),
    B: int = 500,
    alpha: float = 0.1,
    seed: int = 0,
    scheme: str = "exponential",
    nulls=None,
    blocks: dict | None = None,
    threads: int = 1,
) -> ClassificationReport:
    """Joint bootstrap inference on linear combinations of the two group targets.

    ``combos`` are the 2-vectors ``c`` applied to (least, most); ``nulls`` the
    hypothesised values ``r`` with shape ``(L, T)`` (zero by default).
    ``blocks`` maps a name to a list of target indices and yields one
    block-restricted p-value per entry.
    """
    targets = list(targets)
    if not targets:
        raise ConfigError("classification needs at least one target")
    if B < 2:
        raise ConfigError("joint inference needs B >= 2")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    C = np.atleast_2d(np.asarray(combos, dtype=float))
    if C.shape[1] != 2:
        raise ConfigError("each linear combination must have two coefficients (least, most)")
    T = len(targets)
    r = np.zeros((C.shape[0], T)) if nulls is None else np.broadcast_to(np.asarray(nulls, dtype=float), (C.shape[0], T))
    phi = target_matrix(sample, targets)
    n = sample.n

    memb = classify(effects, group)
    phi_cells = phi[effects.obs]
    lam = np.vstack([
        _group_means(phi_cells, effects.weights, memb.least),
        _group_means(phi_cells, effects.weights, memb.most),
    ])

    def draw(omega):
        eff = pipeline(omega)
        try:
            m = classify(eff, group)
        except EmptyGroupError:
            return np.full(2 * T, np.nan)
        pc = phi[eff.obs]
        return np.concatenate([_group_means(pc, eff.weights, m.least), _group_means(pc, eff.weights, m.most)])

    draws = run_draws(DrawPlan(B, n, scheme, seed), draw, threads=threads)
    ok = ~np.isnan(draws).any(axis=1)
    skipped = int(B - ok.sum())
    if skipped > MAX_SKIP_RATE * B:
        raise InstabilityError(f"a group was empty in {skipped} of {B} bootstrap draws")
    if ok.sum() < 2:
        raise InstabilityError("fewer than two usable bootstrap draws")
    root_n = math.sqrt(n)
    z = root_n * (draws[ok].reshape(-1, 2, T) - lam)
    cz = np.einsum("lg,bgt->blt", C, z)
    scale = iqr_scale(cz)
    if np.any(~(scale > 0)):
        bad = [(targets[t].label, int(l)) for l, t in zip(*np.where(~(scale > 0)))]
        raise DegenerateScaleError(f"bootstrap scale is zero for (target, combination) {bad}", bad)

    est = C @ lam
    stats = _sup_stats(cz, scale)
    t_crit = exceedance_quantile(stats, alpha)
    obs_ratio = root_n * np.abs(est - r) / scale
    s = float(obs_ratio.max())
    block_p = {}
    for name, idx in (blocks or {}).items():
        idx = np.asarray(idx, dtype=int)
        block_p[name] = exceedance_pvalue(_sup_stats(cz, scale, idx), float(obs_ratio[:, idx].max()))

    se = iqr_scale(z) / root_n
    se_diff = iqr_scale(z[:, 1] - z[:, 0]) / root_n
    return ClassificationReport(
        labels=tuple(tg.label for tg in targets),
        least=lam[0],
        most=lam[1],
        se_least=se[0],
        se_most=se[1],
        se_diff=se_diff,
        combos=C,
        estimate=est,
        scale=scale,
        lower=est - t_crit * scale / root_n,
        upper=est + t_crit * scale / root_n,
        t_crit=t_crit,
        statistic=s,
        p_value=exceedance_pvalue(stats, s),
        block_pvalues=block_p,
        draws=draws,
        draw_stats=stats,
        skipped=skipped,
        cutoffs=(memb.lower_cut, memb.upper_cut),
        n=n,
    )


# -- confidence sets for the affected subpopulations --------------------------


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / den, np.sign(num) * np.inf)
    return np.where((den > 0) | (num != 0), out, 0.0)


@dataclass(frozen=True, eq=False)
class TailSet:
    """Studentized cutoff distances and bootstrap sup draws for one tail."""

    cutoff: float
    sigma: np.ndarray
    statistic: np.ndarray
    cutoff_cells: np.ndarray
    v_draws: np.ndarray

    def critical_value(self, alpha: float) -> float:
        return float(np.quantile(self.v_draws, 1 - alpha, method=QUANTILE_METHOD))

    def members(self, alpha: float) -> np.ndarray:
        return self.statistic <= self.critical_value(alpha)


@dataclass(frozen=True, eq=False)
class AffectedSets:
    """Outer confidence sets for the least (``minus``) and most (``plus``) affected cells.

    ``lower`` and ``upper`` refer to the tails of the effect distribution; the
    ``least``/``most`` labels follow the group direction.
    """

    lower: TailSet
    upper: TailSet
    alpha: float
    group: GroupSpec
    tolerance: float

    def _tails(self):
        return (self.lower, self.upper) if self.group.direction == "standard" else (self.upper, self.lower)

    def least(self, alpha: float | None = None) -> np.ndarray:
        return self._tails()[0].members(self.alpha if alpha is None else alpha)

    def most(self, alpha: float | None = None) -> np.ndarray:
        return self._tails()[1].members(self.alpha if alpha is None else alpha)

    @property
    def critical_values(self) -> tuple[float, float]:
        a, b = self._tails()
        return a.critical_value(self.alpha), b.critical_value(self.alpha)


def _tail(dhat, dtil, cut_hat, cut_til, root_n, tol, sign):
    # sign=+1: lower tail {d <= cut}; sign=-1: upper tail {d >= cut}
    dist_hat = sign * (dhat - cut_hat)
    D = root_n * (sign * (dtil - cut_til[:, None]) - dist_hat)
    sigma = iqr_scale(D)
    cells = np.flatnonzero(np.abs(dhat - cut_hat) <= tol)
    if cells.size == 0:
        raise ToleranceError(f"no cell within {tol:g} of the cutoff {cut_hat:.6g}; enlarge the tolerance")
    if np.any(~(sigma[cells] > 0)):
        raise DegenerateScaleError("bootstrap scale is zero at a cutoff cell", [int(c) for c in cells[~(sigma[cells] > 0)]])
    v = (D[:, cells] / sigma[cells]).max(axis=1)
    return TailSet(float(cut_hat), sigma, _ratio(root_n * dist_hat, sigma), cells, v)


def affected_sets(
    pipeline,
    effects: EffectVector,
    group: GroupSpec = GroupSpec(),
    B: int = 500,
    alpha: float = 0.1,
    seed: int = 0,
    scheme: str = "exponential",
    tolerance: float | None = None,
    n: int | None = None,
    threads: int = 1,
) -> AffectedSets:
    """Bootstrap outer confidence sets for the least and most affected cells.

    The sup defining the critical value runs over cells within ``tolerance``
    of the sample cutoff; the default 0 keeps exactly the cells attaining it.
    """
    if B < 2:
        raise ConfigError("set inference needs B >= 2")
    n = n if n is not None else getattr(pipeline, "n", None)
    if n is None:
        raise ConfigError("sample size n is required when the pipeline does not expose it")
    tol = 0.0 if tolerance is None else float(tolerance)
    if tol < 0:
        raise ConfigError("tolerance must be nonnegative")
    levels = [group.u, 1 - group.u]
    lo, hi = empirical_spe(effects, levels)

    def draw(omega):
        eff = pipeline(omega)
        if eff.values.shape != effects.values.shape or not np.array_equal(eff.obs, effects.obs):
            raise NumericalError("bootstrap effect cells do not match the estimate")
        return np.concatenate([eff.values, empirical_spe(eff, levels)])

    draws = run_draws(DrawPlan(B, n, scheme, seed), draw, threads=threads)
    draws = draws[~np.isnan(draws).any(axis=1)]
    dtil, cuts = draws[:, :-2], draws[:, -2:]
    root_n = math.sqrt(n)
    return AffectedSets(
        lower=_tail(effects.values, dtil, lo, cuts[:, 0], root_n, tol, 1.0),
        upper=_tail(effects.values, dtil, hi, cuts[:, 1], root_n, tol, -1.0),
        alpha=alpha,
        group=group,
        tolerance=tol,
    )


def projection_table(sample: Sample, effects: EffectVector, sets: AffectedSets, columns, alpha: float | None = None):
    """Flat rows (cell, coordinates, group label, set label) for plotting projections."""
    memb = classify(effects, sets.group)
    cm_least, cm_most = sets.least(alpha), sets.most(alpha)
    coords = {c: sample.column(c)[effects.obs] if c != "tau" else effects.tau for c in columns}
    rows = []
    for k in range(len(effects)):
        group = "least" if memb.least[k] else "most" if memb.most[k] else "none"
        label = "both" if cm_least[k] and cm_most[k] else "least" if cm_least[k] else "most" if cm_most[k] else "none"
        row = {"cell": k, "obs": int(effects.obs[k])}
        row.update({c: float(v[k]) for c, v in coords.items()})
        row.update({"effect": float(effects.values[k]), "group": group, "set": label})
        rows.append(row)
    return rows
