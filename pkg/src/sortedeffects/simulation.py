"""Monte Carlo designs with closed-form sorted-effect oracles.

Designs 1 and 2 hold the covariates fixed on a grid and perturb the true
effect function by a common Gaussian shock scaled by a known function of x,
so the sorting map is the only source of nonlinearity. Design 3 refits an
interactive least squares model on a synthetic, fixed covariate set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DesignSpec, Sample, build_design, complement, constant, interact, polynomial, raw
from .effects import EffectPipeline, EffectSpec, EffectVector
from .errors import DegenerateScaleError
from .resampling import DrawPlan, derive_seed, run_draws, stream
from .sorted_inference import QuantileGrid, bands_from_draws, bias_correct, bootstrap_bands, empirical_spe

Z95 = 1.959963984540054
COVER_SLACK = 1e-9

# -- closed-form oracles ------------------------------------------------------


def design1_spe(u):
    """Sorted effect of x1 + x2 with x uniform on (-1, 1)^2 (triangular law on (-2, 2))."""
    u = np.asarray(u, dtype=float)
    return np.where(u <= 0.5, 2 * (np.sqrt(2 * u) - 1), 2 * (1 - np.sqrt(2 * (1 - u))))


def cubic_roots(delta: float) -> np.ndarray:
    """Sorted real roots of x^3 - 3x - delta = 0 by the trigonometric method."""
    delta = float(delta)
    if abs(delta) < 2:
        phi = math.acos(delta / 2) / 3
        roots = np.array([2 * math.cos(phi - 2 * math.pi * k / 3) for k in range(3)])
    elif abs(delta) == 2:
        s = math.copysign(1.0, delta)
        roots = np.array([-s, -s, 2 * s])
    else:
        roots = np.array([math.copysign(2 * math.cosh(math.acosh(abs(delta) / 2) / 3), delta)])
    roots = np.sort(roots)
    resid = np.abs(roots**3 - 3 * roots - delta)
    if np.any(resid > 1e-9 * max(1.0, abs(delta))):
        raise ArithmeticError(f"cubic root residual {resid.max():.3g} too large at delta={delta}")
    return roots


def design2_scale(delta: float) -> float:
    """Asymptotic scale S(delta) of the cubic design; NaN at the critical values +-2."""
    if abs(abs(delta) - 2) < 1e-12:
        return float("nan")
    r = cubic_roots(delta)
    if r.size == 1:
        return float(r[0] ** 2)
    inv = 1.0 / np.abs(r**2 - 1)
    return float(np.sum(r**2 * inv) / np.sum(inv))


# -- fixed-grid designs -------------------------------------------------------


class ShockPipeline:
    """Bootstrap version of ``delta(x) + h(x) * mean(Z)`` under weights ``omega``."""

    def __init__(self, delta: np.ndarray, h: np.ndarray, z: np.ndarray):
        self.delta, self.h, self.z = delta, h, z
        self.n = z.size
        self._w = np.full(delta.size, 1.0 / delta.size)
        self._idx = np.arange(delta.size)

    def effects(self, shock: float) -> EffectVector:
        return EffectVector(self.delta + self.h * shock, self._w, self._idx, None)

    def __call__(self, omega) -> EffectVector:
        return self.effects(float(np.dot(omega, self.z)) / self.n)


@dataclass(frozen=True)
class GridDesign:
    name: str
    x: np.ndarray
    delta: np.ndarray
    h: np.ndarray
    levels: tuple[float, ...]
    kinks: tuple[float, ...] = ()

    @property
    def n(self) -> int:
        return self.delta.size

    @property
    def truth(self) -> np.ndarray:
        """Sorted effects of the fixed design (the measure is known)."""
        return empirical_spe(EffectVector.uniform(self.delta), self.levels)

    def replicate(self, seed: int) -> tuple[EffectVector, ShockPipeline]:
        z = stream(seed, 0).standard_normal(self.n)
        pipe = ShockPipeline(self.delta, self.h, z)
        return pipe.effects(float(z.mean())), pipe

    def asymptotic_sd(self) -> np.ndarray:
        raise NotImplementedError


class Design1(GridDesign):
    def asymptotic_sd(self) -> np.ndarray:
        return np.exp(self.truth) / math.sqrt(self.n)


class Design2(GridDesign):
    def asymptotic_sd(self) -> np.ndarray:
        out = np.array([design2_scale(d) for d in self.truth]) / (2 * math.sqrt(self.n))
        for k, u in enumerate(self.levels):
            if any(abs(u - q) < 1e-9 for q in self.kinks):
                out[k] = np.nan
        return out


def design1() -> Design1:
    g = np.round(np.linspace(-1, 1, 21), 10)
    x1, x2 = np.meshgrid(g, g, indexing="ij")
    x = np.column_stack([x1.ravel(), x2.ravel()])
    delta = np.round(x.sum(axis=1), 10)
    levels = tuple(round(k / 10, 10) for k in range(1, 10))
    return Design1("design1", x, delta, np.exp(delta), levels)


def design2() -> Design2:
    x = np.round(np.linspace(-3, 3, 601), 10)
    delta = x**3 - 3 * x
    # noise scale x^2 / 2, consistent with the asymptotic variance S(delta)^2 / (4n)
    levels = tuple(k / 12 for k in range(1, 12))
    return Design2("design2", x[:, None], delta, x**2 / 2, levels, kinks=(1 / 6, 5 / 6))


@dataclass
class McReport:
    """Monte Carlo summary, one row per quantile level."""

    design: str
    columns: tuple[str, ...]
    rows: list[dict]
    n_sims: int
    n_boot: int
    seed: int
    extra: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for r in self.rows:
            writer.writerow(["" if isinstance(r[c], float) and math.isnan(r[c]) else _fmt(r[c]) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def run_grid_design(design: GridDesign, n_sims: int, n_boot: int, seed: int, threads: int = 1) -> McReport:
    """Bias, exact and asymptotic sd, and pointwise 95% coverage at each level."""
    truth = design.truth
    asd = design.asymptotic_sd()
    est = np.empty((n_sims, len(design.levels)))
    cover_boot = np.zeros((n_sims, len(design.levels)), dtype=bool)
    for r in range(n_sims):
        eff, pipe = design.replicate(derive_seed(seed, r, 0))
        spe = empirical_spe(eff, design.levels)
        plan = DrawPlan(n_boot, design.n, "multinomial", derive_seed(seed, r, 1))
        draws = run_draws(plan, lambda w: empirical_spe(pipe(w), design.levels), threads=threads)
        res = bands_from_draws(spe, draws, design.n, 0.05, design.levels, pointwise=True)
        est[r] = spe
        cover_boot[r] = (res.raw_lower - COVER_SLACK <= truth) & (truth <= res.raw_upper + COVER_SLACK)
    sd = est.std(axis=0, ddof=1)
    cover_asy = np.abs(est - truth) <= Z95 * asd
    rows = []
    for k, u in enumerate(design.levels):
        rows.append({
            "u": u,
            "truth": float(truth[k]),
            "bias": float(est[:, k].mean() - truth[k]),
            "mc_se": float(sd[k] / math.sqrt(n_sims)),
            "sd_exact": float(sd[k]),
            "sd_asymptotic": float(asd[k]),
            "cover_asymptotic": float("nan") if math.isnan(asd[k]) else float(cover_asy[:, k].mean()),
            "cover_bootstrap": float(cover_boot[:, k].mean()),
        })
    cols = ("u", "truth", "bias", "mc_se", "sd_exact", "sd_asymptotic", "cover_asymptotic", "cover_bootstrap")
    return McReport(design.name, cols, rows, n_sims, n_boot, seed)


def design1_run(n_sims: int = 1000, n_boot: int = 500, seed: int = 0, threads: int = 1) -> McReport:
    return run_grid_design(design1(), n_sims, n_boot, seed, threads)


def design2_run(n_sims: int = 1000, n_boot: int = 500, seed: int = 0, threads: int = 1) -> McReport:
    return run_grid_design(design2(), n_sims, n_boot, seed, threads)


# -- interactive least squares design -----------------------------------------


@dataclass(frozen=True, eq=False)
class InteractiveDesign:
    """Fixed synthetic covariates for an interactive linear model ``P(T, W) = (TW, (1-T)W)``.

    ``W`` holds a constant, an education category (3 dummies), a married
    dummy, a quartic in experience and occupation dummies (4); ``T`` flags
    the treated group over which effects are sorted.
    """

    x: np.ndarray
    columns: tuple[str, ...]
    spec: EffectSpec
    beta: np.ndarray
    sigma: float

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def treated(self) -> np.ndarray:
        return self.x[:, 0] == 1

    def mean(self) -> np.ndarray:
        return build_design(self.x, self.spec.design) @ self.beta

    def true_effects(self) -> EffectVector:
        d = self.spec.design
        rows = np.flatnonzero(self.treated)
        x = self.x[rows]
        delta = (build_design(x, d, 1.0) - build_design(x, d, 0.0)) @ self.beta
        return EffectVector(delta, np.full(rows.size, 1.0 / rows.size), rows, None)

    def sample(self, seed: int) -> Sample:
        eps = stream(seed, 0).standard_normal(self.n)
        return Sample(self.mean() + self.sigma * eps, self.x, None, self.treated, self.columns, "lwage")


def interactive_design(n: int = 1000, sigma: float = 0.5, seed: int = 2015) -> InteractiveDesign:
    rng = stream(seed, 0)
    female = (rng.random(n) < 0.45).astype(float)
    edu = rng.choice(4, size=n, p=[0.3, 0.3, 0.25, 0.15])
    married = (rng.random(n) < 0.55).astype(float)
    exper = np.round(rng.uniform(0, 4, n), 2)  # decades
    occ = rng.choice(5, size=n, p=[0.3, 0.2, 0.2, 0.15, 0.15])
    cols = ["female", "edu1", "edu2", "edu3", "married", "exper", "occ1", "occ2", "occ3", "occ4"]
    x = np.column_stack(
        [female]
        + [(edu == k).astype(float) for k in (1, 2, 3)]
        + [married, exper]
        + [(occ == k).astype(float) for k in (1, 2, 3, 4)]
    )
    w_terms = [constant()] + [raw(j, cols[j]) for j in (1, 2, 3, 4)] + polynomial(5, 4, "exper")
    w_terms += [raw(j, cols[j]) for j in (6, 7, 8, 9)]
    terms = interact([raw(0, "female"), complement(0, "female")], w_terms)
    spec = EffectSpec("mean", DesignSpec(tuple(terms), treatment=0), (0.0, 1.0))
    base = np.array([2.6, 0.15, 0.35, 0.55, 0.08, 0.45, -0.12, 0.015, -0.0008, 0.1, 0.2, -0.05, 0.3])
    gap = np.array([-0.12, 0.02, 0.0, -0.04, -0.1, -0.06, 0.025, -0.004, 0.0002, -0.05, 0.08, 0.03, -0.1])
    beta = np.concatenate([base + gap, base])
    return InteractiveDesign(x, tuple(cols), spec, beta, sigma)


U_DESIGN3 = QuantileGrid.regular(0.02, 0.98, 0.01)


def design3_run(
    n_sims: int = 300,
    n_boot: int = 200,
    seed: int = 0,
    n: int = 1000,
    sigma: float = 0.5,
    alpha: float = 0.1,
    threads: int = 1,
) -> McReport:
    """Uniform-band coverage with and without bootstrap bias correction."""
    design = interactive_design(n, sigma)
    grid = U_DESIGN3
    truth = empirical_spe(design.true_effects(), grid)
    est = np.empty((n_sims, len(grid)))
    est_bc = np.empty_like(est)
    cover = np.zeros(n_sims, dtype=bool)
    cover_bc = np.zeros(n_sims, dtype=bool)
    for r in range(n_sims):
        sample = design.sample(derive_seed(seed, r, 0))
        pipe = EffectPipeline(sample, design.spec)
        eff = pipe()
        try:
            res = bias_correct(bootstrap_bands(pipe, eff, grid, n_boot, alpha, "exponential", derive_seed(seed, r, 1), threads=threads))
            lo, hi, clo, chi = res.band_lower, res.band_upper, res.corrected_lower, res.corrected_upper
            spe, spe_bc = res.spe, res.spe_corrected
        except DegenerateScaleError:
            # noiseless limit: every draw reproduces the estimate
            spe = spe_bc = lo = hi = clo = chi = empirical_spe(eff, grid)
        est[r], est_bc[r] = spe, spe_bc
        cover[r] = np.all((lo - COVER_SLACK <= truth) & (truth <= hi + COVER_SLACK))
        cover_bc[r] = np.all((clo - COVER_SLACK <= truth) & (truth <= chi + COVER_SLACK))
    rows = []
    for k, u in enumerate(grid.u):
        rows.append({
            "u": u,
            "truth": float(truth[k]),
            "bias": float(est[:, k].mean() - truth[k]),
            "bias_corrected": float(est_bc[:, k].mean() - truth[k]),
            "sd": float(est[:, k].std(ddof=1)) if n_sims > 1 else float("nan"),
            "sd_corrected": float(est_bc[:, k].std(ddof=1)) if n_sims > 1 else float("nan"),
            "rmse": float(np.sqrt(np.mean((est[:, k] - truth[k]) ** 2))),
            "rmse_corrected": float(np.sqrt(np.mean((est_bc[:, k] - truth[k]) ** 2))),
        })
    cols = ("u", "truth", "bias", "bias_corrected", "sd", "sd_corrected", "rmse", "rmse_corrected")
    extra = {"coverage_uncorrected": float(cover.mean()), "coverage_corrected": float(cover_bc.mean()), "n": n, "sigma": sigma}
    return McReport("design3", cols, rows, n_sims, n_boot, seed, extra)
