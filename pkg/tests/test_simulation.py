import math

import numpy as np
import pytest

from sortedeffects.simulation import (
    U_DESIGN3,
    cubic_roots,
    design1,
    design1_run,
    design1_spe,
    design2,
    design2_run,
    design2_scale,
    design3_run,
    interactive_design,
)

# published asymptotic sd columns, rounded to three decimals
PUBLISHED_D1_ASD = [0.014, 0.021, 0.029, 0.039, 0.048, 0.058, 0.079, 0.106, 0.158]
PUBLISHED_D2_ASD = [0.127, None, 0.025, 0.028, 0.030, 0.031, 0.030, 0.028, 0.025, None, 0.127]


def order_statistic_oracle(values, u):
    """k-th smallest value with k = ceil(u n), for equally weighted cells."""
    v = np.sort(values)
    return np.array([v[math.ceil(round(q * v.size, 9)) - 1] for q in u])


def test_design1_truth_is_grid_order_statistic():
    d = design1()
    assert d.n == 441
    sums = np.array([a + b for a in np.linspace(-1, 1, 21) for b in np.linspace(-1, 1, 21)])
    assert np.allclose(d.truth, order_statistic_oracle(sums, d.levels), atol=1e-12)
    assert np.allclose(d.truth, [-1.2, -0.8, -0.5, -0.2, 0.0, 0.2, 0.5, 0.8, 1.2], atol=1e-12)


def test_design1_asymptotic_sd_matches_published_column():
    asd = design1().asymptotic_sd()
    assert np.allclose(np.round(asd, 3), PUBLISHED_D1_ASD, atol=1e-12)


def test_design1_continuous_quantile_function():
    # triangular law of the sum of two uniforms on (-1, 1)
    u = np.array([0.02, 0.1, 0.5, 0.9, 0.98])
    q = design1_spe(u)
    cdf = np.where(q <= 0, (q + 2) ** 2 / 8, 1 - (2 - q) ** 2 / 8)
    assert np.allclose(cdf, u)


@pytest.mark.parametrize("delta", [-5.0, -2.0, -1.3, 0.0, 0.7, 1.999, 2.0, 3.5])
def test_cubic_roots(delta):
    r = cubic_roots(delta)
    assert np.allclose(r**3 - 3 * r - delta, 0, atol=1e-9)
    expected = np.sort(np.roots([1, 0, -3, -delta]).real[np.abs(np.roots([1, 0, -3, -delta]).imag) < 1e-6])
    if abs(abs(delta) - 2) > 1e-9:
        assert np.allclose(r, expected, atol=1e-7)


def test_design2_scale_and_kinks():
    assert math.isnan(design2_scale(2.0)) and math.isnan(design2_scale(-2.0))
    # one real root beyond the critical values: S = x^2
    r = cubic_roots(5.0)
    assert design2_scale(5.0) == pytest.approx(r[0] ** 2)
    # symmetric roots at delta = 0 are 0 and +-sqrt(3): S = (3/2 + 3/2) / (1 + 1/2 + 1/2)
    assert design2_scale(0.0) == pytest.approx(1.5)


def test_design2_asymptotic_sd_matches_published_column():
    d = design2()
    assert d.n == 601
    asd = d.asymptotic_sd()
    for got, ref in zip(asd, PUBLISHED_D2_ASD):
        if ref is None:
            assert math.isnan(got)
        else:
            assert round(float(got), 3) == ref


def test_design2_truth_is_grid_order_statistic():
    d = design2()
    x = np.linspace(-3, 3, 601)
    assert np.allclose(d.truth, order_statistic_oracle(x**3 - 3 * x, d.levels), atol=1e-9)
    assert d.truth[1] == pytest.approx(-2.0) and d.truth[9] == pytest.approx(2.0)


def test_replicate_is_seeded_and_bootstrap_is_the_shock_mean():
    d = design1()
    e1, p1 = d.replicate(3)
    e2, _ = d.replicate(3)
    assert np.array_equal(e1.values, e2.values)
    omega = np.ones(d.n)
    assert np.allclose(p1(omega).values, e1.values)


def test_small_grid_runs_report_expected_columns():
    rep = design1_run(n_sims=5, n_boot=50, seed=1)
    assert rep.columns[:3] == ("u", "truth", "bias") and len(rep.rows) == 9
    assert np.all(rep.column("sd_exact") > 0)
    again = design1_run(n_sims=5, n_boot=50, seed=1, threads=4)
    assert rep.to_csv() == again.to_csv()
    rep2 = design2_run(n_sims=3, n_boot=30, seed=2)
    lines = rep2.to_csv().splitlines()
    # kink rows leave the asymptotic columns blank
    assert lines[2].split(",")[5:7] == ["", ""]


def test_interactive_design_shape():
    d = interactive_design(n=400)
    assert d.spec.design.d_p == 26
    eff = d.true_effects()
    assert len(eff) == int(d.treated.sum())
    s1, s2 = d.sample(1), d.sample(1)
    assert np.array_equal(s1.y, s2.y) and np.array_equal(s1.s, d.treated)
    assert len(U_DESIGN3) == 97


def test_design3_small_run():
    rep = design3_run(n_sims=2, n_boot=30, seed=0, n=300)
    assert set(rep.extra) >= {"coverage_uncorrected", "coverage_corrected"}
    assert len(rep.rows) == 97
