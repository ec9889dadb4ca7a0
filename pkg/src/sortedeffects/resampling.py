"""Exchangeable bootstrap weights and the shared draw engine.

Every draw owns a Philox counter-based stream keyed by ``(seed, draw index)``,
so a draw matrix does not depend on the number of workers or on ``B``:
raising ``B`` only appends rows.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DrawFailureError, SortedEffectsError

log = logging.getLogger(__name__)

SCHEMES = ("multinomial", "exponential")
MAX_FAILURE_RATE = 0.10
_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: int) -> int:
    """Deterministic 64-bit child seed of ``seed`` along an integer path."""
    # the length prefix keeps (s,) and (s, 0) apart: SeedSequence ignores trailing zeros
    ss = np.random.SeedSequence([int(seed) & _MASK64, len(path), *(int(p) for p in path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for substream ``index`` of ``seed``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, int(index) & _MASK64]))


@dataclass(frozen=True)
class DrawPlan:
    B: int
    n: int
    scheme: str = "exponential"
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("number of bootstrap draws must be at least 1")
        if self.n < 1:
            raise ConfigError("sample size must be at least 1")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown bootstrap weight scheme {self.scheme!r}; use one of {SCHEMES}")


def draw_weights(plan: DrawPlan, index: int) -> np.ndarray:
    """Bootstrap weights of draw ``index``.

    Multinomial weights are counts of ``n`` uniform picks (they sum to ``n``);
    exponential weights are i.i.d. with unit mean.
    """
    if not 0 <= index < plan.B:
        raise IndexError(f"draw index {index} outside 0..{plan.B - 1}")
    rng = stream(plan.seed, index)
    if plan.scheme == "multinomial":
        return np.bincount(rng.integers(0, plan.n, size=plan.n), minlength=plan.n).astype(float)
    return rng.standard_exponential(plan.n)


def run_draws(plan: DrawPlan, pipeline, threads: int = 1, max_failure_rate: float = MAX_FAILURE_RATE) -> np.ndarray:
    """Evaluate ``pipeline(weights)`` for every draw and stack the results.

    Row ``b`` always comes from draw ``b``. A draw whose pipeline raises a
    package error becomes a row of NaN; more than ``max_failure_rate`` such
    rows aborts with :class:`DrawFailureError`.
    """

    def one(b):
        try:
            return np.asarray(pipeline(draw_weights(plan, b)), dtype=float).reshape(-1), None
        except SortedEffectsError as exc:
            return None, exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(plan.B)))
    else:
        results = [one(b) for b in range(plan.B)]

    failures = {b: err for b, (_, err) in enumerate(results) if err is not None}
    if len(failures) > max_failure_rate * plan.B:
        first = next(iter(failures.values()))
        raise DrawFailureError(
            f"{len(failures)} of {plan.B} bootstrap draws failed (first: {type(first).__name__}: {first})",
            failures,
        )
    good = [r for r, _ in results if r is not None]
    if not good:
        raise DrawFailureError("every bootstrap draw failed", failures)
    k = good[0].size
    out = np.full((plan.B, k), np.nan)
    for b, (row, _) in enumerate(results):
        if row is not None:
            if row.size != k:
                raise ValueError(f"pipeline returned {row.size} values on draw {b}, expected {k}")
            out[b] = row
    if failures:
        log.warning("%d of %d bootstrap draws failed and were dropped", len(failures), plan.B)
    return out
