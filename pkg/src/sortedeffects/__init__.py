"""Sorted partial effects with bootstrap uniform inference and classification analysis."""

from .classification import (
    AffectedSets,
    ClassificationReport,
    GroupSpec,
    LambdaTarget,
    affected_sets,
    classify,
    group_statistic,
    joint_inference,
)
from .data import DesignSpec, Sample, Schema, build_design, load_csv, weighted_measure
from .effects import EffectPipeline, EffectSpec, EffectVector, conditional_subset, evaluate_effects
from .estimators import FittedModel, fit_binary, fit_ols, fit_quantile
from .resampling import DrawPlan, draw_weights, run_draws
from .sorted_inference import (
    QuantileGrid,
    SortedEffectResult,
    bias_correct,
    bootstrap_bands,
    empirical_spe,
    rearrange_monotone,
    weighted_cdf,
)

__version__ = "0.1.0"
