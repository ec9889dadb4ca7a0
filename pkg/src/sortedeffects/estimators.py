"""Weighted least squares, binary-response ML and linear quantile regression.

All fitters take nonnegative frequency weights; rows with zero weight are
ignored. They are pure functions and safe to call from bootstrap workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, sparse, special

from .errors import DegenerateOutcomeError, SeparationError, SingularDesignError, SolverError

RANK_TOL = 1e-10
SCORE_TOL = 1e-8
COEF_BOUND = 1e4
FAMILIES = ("mean", "binary-logit", "binary-probit", "quantile")


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Coefficients as a ``(d_p, k)`` matrix; ``k`` is the number of quantile levels,
    or 1 for the mean and binary families."""

    family: str
    beta: np.ndarray
    grid: tuple[float, ...] | None
    converged: np.ndarray
    objective: np.ndarray

    @property
    def coef(self) -> np.ndarray:
        """First (or only) coefficient column."""
        return self.beta[:, 0]


def _prepare(design, y, weights):
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0] or w.shape[0] != y.shape[0]:
        raise ValueError("design, outcome and weights must have the same number of rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    keep = w > 0
    return X[keep], y[keep], w[keep]


def _weighted_svd(X, w):
    d = X.shape[1]
    if X.shape[0] < d:
        raise SingularDesignError(f"{X.shape[0]} positive-weight rows for {d} columns", range(d))
    sw = np.sqrt(w)
    u, sv, vt = np.linalg.svd(X * sw[:, None], full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        raise SingularDesignError("design is identically zero", range(d))
    null = sv <= RANK_TOL * sv[0]
    if np.any(null):
        load = np.abs(vt[null]).max(axis=0)
        cols = [int(j) for j in np.where(load > 1e-8)[0]]
        raise SingularDesignError(f"design is rank deficient; collinear columns {cols}", cols)
    return sw, u, sv, vt


def check_rank(X: np.ndarray, w: np.ndarray) -> None:
    """Raise :class:`SingularDesignError` if the weighted design is rank deficient.

    Singular values below ``RANK_TOL`` times the largest count as zero; the
    error names the columns loading on the null space.
    """
    _weighted_svd(X, w)


def fit_ols(design, y, weights=None) -> FittedModel:
    """Weighted least squares, ``argmin sum w_i (y_i - x_i'b)^2``."""
    X, y, w = _prepare(design, y, weights)
    sw, u, sv, vt = _weighted_svd(X, w)
    beta = vt.T @ ((u.T @ (y * sw)) / sv)
    resid = y - X @ beta
    return FittedModel(
        family="mean",
        beta=beta[:, None],
        grid=None,
        converged=np.array([True]),
        objective=np.array([float(np.sum(w * resid**2))]),
    )


# -- binary response ---------------------------------------------------------


def _loglik_parts(eta, y, link):
    """Per-row log-likelihood, d/d eta and d^2/d eta^2."""
    if link == "logit":
        p = special.expit(eta)
        ll = y * special.log_expit(eta) + (1 - y) * special.log_expit(-eta)
        return ll, y - p, -p * (1 - p)
    log_phi = -0.5 * eta**2 - 0.5 * np.log(2 * np.pi)
    lam1 = np.exp(log_phi - special.log_ndtr(eta))  # phi / Phi
    lam0 = np.exp(log_phi - special.log_ndtr(-eta))  # phi / (1 - Phi)
    ll = y * special.log_ndtr(eta) + (1 - y) * special.log_ndtr(-eta)
    d1 = y * lam1 - (1 - y) * lam0
    d2 = -y * lam1 * (lam1 + eta) - (1 - y) * lam0 * (lam0 - eta)
    return ll, d1, d2


def binary_loglik(beta, design, y, weights=None, link="logit") -> float:
    X, y, w = _prepare(design, y, weights)
    ll, _, _ = _loglik_parts(X @ np.asarray(beta, dtype=float), y, link)
    return float(np.sum(w * ll))


def binary_score(beta, design, y, weights=None, link="logit") -> np.ndarray:
    """Gradient of the weighted log-likelihood."""
    X, y, w = _prepare(design, y, weights)
    _, d1, _ = _loglik_parts(X @ np.asarray(beta, dtype=float), y, link)
    return X.T @ (w * d1)


def _separable(X, y) -> bool:
    # complete separation: some b with (2y - 1) x'b >= 1 on every row
    sign = 2 * y - 1
    res = optimize.linprog(
        np.zeros(X.shape[1]),
        A_ub=-(sign[:, None] * X),
        b_ub=-np.ones(len(y)),
        bounds=[(None, None)] * X.shape[1],
        method="highs",
    )
    return res.status == 0


def fit_binary(design, y, weights=None, link="logit", max_iter=100) -> FittedModel:
    """Logit or probit maximum likelihood by Newton's method with step halving.

    Starts from zero. Raises :class:`SeparationError` when the classes are
    completely separated or the coefficients run past ``COEF_BOUND``.
    """
    if link not in ("logit", "probit"):
        raise ValueError(f"unknown link {link!r}")
    X, y, w = _prepare(design, y, weights)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary outcome must be 0/1")
    if y.min() == y.max():
        raise DegenerateOutcomeError("outcome takes a single value on the positive-weight rows")
    check_rank(X, w)
    if _separable(X, y):
        raise SeparationError("outcome is completely separated by the design")

    # absolute tolerance for unit weights; scales with the mean weight otherwise.
    # Newton is cheap near the optimum, so iterate well past it.
    tol = SCORE_TOL * max(1.0, float(w.mean()))
    target = 1e-2 * tol
    beta = np.zeros(X.shape[1])
    ll, d1, d2 = _loglik_parts(X @ beta, y, link)
    obj = np.sum(w * ll)
    for _ in range(max_iter):
        score = X.T @ (w * d1)
        if np.max(np.abs(score)) <= target:
            break
        hess = (X * (w * d2)[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, -score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, -score, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c, d1_c, d2_c = _loglik_parts(X @ cand, y, link)
            obj_c = np.sum(w * ll_c)
            if obj_c >= obj - 1e-12 * (1 + abs(obj)) or t < 1e-10:
                break
            t *= 0.5
        if np.max(np.abs(cand)) > COEF_BOUND:
            raise SeparationError(f"coefficients diverged past {COEF_BOUND:g}")
        stalled = np.max(np.abs(cand - beta)) <= 1e-15 * (1 + np.max(np.abs(beta)))
        beta, obj, d1, d2 = cand, obj_c, d1_c, d2_c
        if stalled:
            break
    converged = bool(np.max(np.abs(X.T @ (w * d1))) <= tol)
    return FittedModel(
        family=f"binary-{link}",
        beta=beta[:, None],
        grid=None,
        converged=np.array([converged]),
        objective=np.array([float(-obj)]),
    )


# -- quantile regression -----------------------------------------------------


def check_loss(resid, tau) -> np.ndarray:
    """rho_tau(v) = (tau - 1{v < 0}) v."""
    resid = np.asarray(resid, dtype=float)
    return (tau - (resid < 0)) * resid


def quantile_objective(beta, design, y, weights, tau) -> float:
    X, y, w = _prepare(design, y, weights)
    return float(np.sum(w * check_loss(y - X @ np.asarray(beta, dtype=float), tau)))


def _fit_one_quantile(X, y, w, tau):
    # min sum w (tau u + (1 - tau) v)  s.t.  X b + u - v = y,  u, v >= 0
    n, d = X.shape
    c = np.concatenate([np.zeros(d), tau * w, (1 - tau) * w])
    eye = sparse.identity(n, format="csc")
    A = sparse.hstack([sparse.csc_matrix(X), eye, -eye], format="csc")
    bounds = [(None, None)] * d + [(0, None)] * (2 * n)
    res = optimize.linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverError(f"quantile regression failed at tau={tau:g}: {res.message}", tau=tau)
    beta = res.x[:d]
    return beta, float(np.sum(w * check_loss(y - X @ beta, tau)))


def fit_quantile(design, y, weights=None, grid=(0.5,)) -> FittedModel:
    """Linear quantile regression at each level in ``grid``, solved as a linear program."""
    grid = tuple(float(t) for t in np.atleast_1d(grid))
    if not grid:
        raise ValueError("quantile grid is empty")
    if any(not 0 < t < 1 for t in grid):
        raise ValueError("quantile levels must lie in (0, 1)")
    X, y, w = _prepare(design, y, weights)
    check_rank(X, w)
    betas, objs = [], []
    for tau in grid:
        b, o = _fit_one_quantile(X, y, w, tau)
        betas.append(b)
        objs.append(o)
    return FittedModel(
        family="quantile",
        beta=np.column_stack(betas),
        grid=grid,
        converged=np.ones(len(grid), dtype=bool),
        objective=np.array(objs),
    )
