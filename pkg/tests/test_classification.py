import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sortedeffects.classification import (
    GroupSpec,
    LambdaTarget,
    affected_sets,
    classify,
    exceedance_pvalue,
    exceedance_quantile,
    group_statistic,
    joint_inference,
    projection_table,
)
from sortedeffects.data import DesignSpec, Sample, parse_term
from sortedeffects.effects import EffectPipeline, EffectSpec, EffectVector
from sortedeffects.errors import ConfigError, EmptyGroupError, InstabilityError, ToleranceError


def enumerate_groups(values, weights, u):
    """Strict tails around the generalized-inverse cutoffs, by exhaustive scan."""
    order = sorted(set(values))
    total = sum(weights)

    def inv(q):
        for v in order:
            if sum(w for x, w in zip(values, weights) if x <= v) / total >= q - 1e-12:
                return v
        return order[-1]

    lo, hi = inv(u), inv(1 - u)
    return [x < lo for x in values], [x > hi for x in values]


def test_classify_ten_uniform_cells():
    eff = EffectVector.uniform(np.arange(10.0))
    # at u = 0.1 the cutoff is the smallest cell, so the strict tail is empty
    with pytest.raises(EmptyGroupError):
        classify(eff, GroupSpec(0.1))
    m = classify(eff, GroupSpec(0.15))
    assert m.least.sum() == 1 and m.most.sum() == 1
    assert m.least[0] and m.most[9]
    f = classify(eff, GroupSpec(0.15, "flipped"))
    assert np.array_equal(f.least, m.most) and np.array_equal(f.most, m.least)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-6, 6), st.integers(1, 50)), min_size=4, max_size=20),
    st.floats(0.05, 0.45),
)
def test_classify_matches_enumeration(cells, u):
    values = [float(v) for v, _ in cells]
    weights = [float(w) for _, w in cells]
    eff = EffectVector(values, np.array(weights) / sum(weights), np.arange(len(values)), None)
    least, most = enumerate_groups(values, weights, u)
    if not any(least) or not any(most):
        with pytest.raises(EmptyGroupError):
            classify(eff, GroupSpec(u))
        return
    m = classify(eff, GroupSpec(u))
    assert m.least.tolist() == least and m.most.tolist() == most


def test_group_spec_validation():
    for u in (0.0, 0.5, 0.7):
        with pytest.raises(ConfigError):
            GroupSpec(u)
    with pytest.raises(ConfigError):
        GroupSpec(0.1, "sideways")


def test_targets():
    s = Sample([1.0, 2.0, 3.0], [[1.0, 2.0], [3.0, -1.0], [0.0, 5.0]], columns=("a", "b"), outcome="y")
    assert np.array_equal(LambdaTarget.mean("a").evaluate(s), [1, 3, 0])
    assert np.array_equal(LambdaTarget("moment", (2, 1), ("a", "b")).evaluate(s), [2, -9, 0])
    assert np.array_equal(LambdaTarget.cdf("y", 2).evaluate(s), [1, 1, 0])
    assert np.array_equal(LambdaTarget("distribution", (1, 2), ("a", "b")).evaluate(s), [1, 0, 0])
    with pytest.raises(ConfigError):
        LambdaTarget("moment", (0.5,), ("a",))
    with pytest.raises(ConfigError):
        LambdaTarget("moment", (1, 1), ("a",))


def test_exceedance_rule_small_example():
    stats = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
    # at most 10% of draws may exceed the critical value
    assert exceedance_quantile(stats, 0.1) == 9.0
    assert exceedance_pvalue(stats, 9.0) == 0.1
    assert exceedance_pvalue(stats, 8.5) == 0.2


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.integers(0, 30), min_size=2, max_size=60),
    st.integers(0, 31),
    st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.5]),
)
def test_pvalue_below_alpha_iff_statistic_reaches_critical_value(stats, obs, alpha):
    stats = [float(s) for s in stats]
    t = exceedance_quantile(stats, alpha)
    assert (exceedance_pvalue(stats, float(obs)) <= alpha) == (obs >= t)


# -- pipeline-based inference ---------------------------------------------------

COLS = ("t", "x", "z")


def _linear_sample(seed, n=300, dependent=True):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 2, n).astype(float)
    x = rng.normal(size=n)
    z = x + 0.5 * rng.normal(size=n) if dependent else rng.normal(size=n)
    y = 1 + t * (0.5 + x) + x + 0.5 * rng.normal(size=n)
    return Sample(y, np.column_stack([t, x, z]), rng.uniform(0.5, 1.5, n), t == 1, COLS)


def _spec():
    terms = ("1", "t", "x", "t*x")
    return EffectSpec("mean", DesignSpec(tuple(parse_term(s, COLS) for s in terms), treatment=0))


def test_joint_inference_report():
    sample = _linear_sample(0)
    pipe = EffectPipeline(sample, _spec())
    eff = pipe()
    targets = [LambdaTarget.mean("x"), LambdaTarget.mean("z"), LambdaTarget.cdf("z", 1.0)]
    rep = joint_inference(pipe, eff, sample, targets, B=200, seed=1, blocks={"x": [0], "xz": [0, 1]})
    memb = classify(eff, GroupSpec(0.1))
    for k, tg in enumerate(targets):
        z = tg.evaluate(sample)[eff.obs]
        for mask, got in ((memb.least, rep.least[k]), (memb.most, rep.most[k])):
            idx = np.flatnonzero(mask)
            direct = math.fsum(eff.weights[i] * z[i] for i in idx) / math.fsum(eff.weights[i] for i in idx)
            assert got == direct == group_statistic(sample, eff, mask, tg)
    # effects increase with x, so the most affected have the larger x
    assert rep.diff[0] > 0 and rep.p_value <= 0.1
    assert (rep.p_value <= 0.1) == (rep.statistic >= rep.t_crit)
    assert np.all(rep.lower[0] <= rep.estimate[0]) and np.all(rep.estimate[0] <= rep.upper[0])
    assert set(rep.block_pvalues) == {"x", "xz"}
    assert all(0 <= p <= 1 for p in rep.block_pvalues.values())
    again = joint_inference(pipe, eff, sample, targets, B=200, seed=1, blocks={"x": [0], "xz": [0, 1]}, threads=4)
    assert np.array_equal(rep.draws, again.draws, equal_nan=True) and rep.p_value == again.p_value


def test_joint_inference_nulls_shift_the_statistic():
    sample = _linear_sample(2)
    pipe = EffectPipeline(sample, _spec())
    eff = pipe()
    tg = [LambdaTarget.mean("x")]
    rep = joint_inference(pipe, eff, sample, tg, B=100, seed=0)
    at_truth = joint_inference(pipe, eff, sample, tg, B=100, seed=0, nulls=rep.estimate)
    assert at_truth.statistic == 0.0 and at_truth.p_value > 0.5


class ToyPipeline:
    """Effects ``base + noise . omega / n``; with tiny noise groups are stable across draws."""

    def __init__(self, base, noise):
        self.base, self.noise, self.n = np.asarray(base, float), np.asarray(noise, float), len(noise[0])

    def __call__(self, omega):
        return EffectVector.uniform(self.base + self.noise @ omega / self.n)


def test_empty_groups_in_estimate_and_draws():
    sample = Sample(np.zeros(12), np.arange(12.0)[:, None], columns=("a",))
    target = [LambdaTarget.mean("a")]
    flat = ToyPipeline(np.zeros(12), np.zeros((12, 12)))
    # all cells tie with the cutoffs: both strict tails are empty
    with pytest.raises(EmptyGroupError):
        joint_inference(flat, EffectVector.uniform(np.zeros(12)), sample, target, B=20)
    spread = np.zeros(12)
    spread[0], spread[-1] = -1, 1
    with pytest.raises(InstabilityError):
        joint_inference(flat, EffectVector.uniform(spread), sample, target, B=20)


def test_affected_sets_contain_sample_groups_and_grow_with_level():
    sample = _linear_sample(3, n=200)
    pipe = EffectPipeline(sample, _spec())
    eff = pipe()
    sets = affected_sets(pipe, eff, GroupSpec(0.1), B=200, seed=4)
    memb = classify(eff, GroupSpec(0.1))
    c_least, c_most = sets.critical_values
    assert c_least >= 0 and c_most >= 0
    assert np.all(sets.least()[memb.least]) and np.all(sets.most()[memb.most])
    prev_l, prev_m = None, None
    for a in (0.2, 0.1, 0.05):
        l, m = sets.least(a), sets.most(a)
        if prev_l is not None:
            assert np.all(l[prev_l]) and np.all(m[prev_m])
        prev_l, prev_m = l, m
    # cutoff cells always belong to their set
    assert np.all(sets.least()[sets.lower.cutoff_cells])
    rows = projection_table(sample, eff, sets, ["x", "z"])
    assert len(rows) == len(eff)
    assert {r["group"] for r in rows} == {"least", "most", "none"}
    assert all(r["set"] in ("least", "most") for r in rows if r["group"] != "none")


def test_affected_sets_tolerance():
    sample = _linear_sample(5, n=150)
    pipe = EffectPipeline(sample, _spec())
    eff = pipe()
    # with a negative-free but tiny tolerance only the exact cutoff cell counts
    sets0 = affected_sets(pipe, eff, B=100, seed=1)
    assert sets0.lower.cutoff_cells.size == 1
    wide = affected_sets(pipe, eff, B=100, seed=1, tolerance=0.5)
    assert wide.lower.cutoff_cells.size > 1
    # widening the sup set can only raise the critical value
    assert wide.lower.critical_value(0.1) >= sets0.lower.critical_value(0.1)
    with pytest.raises(ConfigError):
        affected_sets(pipe, eff, B=100, tolerance=-1.0)


def test_tolerance_error_when_no_cell_near_cutoff():
    from sortedeffects.classification import _tail

    with pytest.raises(ToleranceError):
        _tail(np.array([0.0, 1.0]), np.zeros((5, 2)), 0.5, np.full(5, 0.5), 1.0, 0.0, 1.0)
