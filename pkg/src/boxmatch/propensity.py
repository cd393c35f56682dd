"""Propensity scores by logistic regression, and overlap decision rules.

The fit is a plain Newton maximizer with step halving, run on internally
standardized covariates for conditioning and back-transformed afterwards, so
the reported coefficients and probabilities refer to the raw scale. Two
exclusion rules are provided: an interval rule that keeps units whose score
lies in a closed band, and a rank rule that keeps treated units scoring no
higher than the best control and controls scoring no lower than the worst
treated unit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import Dataset

CRUMP_DEFAULT_BOUNDS = (0.1, 0.9)


class FitError(RuntimeError):
    """The logistic fit could not be carried out on the given design."""


class SeparationError(FitError):
    """Coefficients diverged, indicating (near-)separated classes."""


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coefficients: np.ndarray
    covariates_used: tuple[str, ...]
    converged: bool
    iterations: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probability of treatment for row vector(s) on the raw covariate scale."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            if x.shape[0] != len(self.coefficients):
                raise ValueError(
                    f"expected {len(self.coefficients)} covariates, got {x.shape[0]}"
                )
            return float(expit(self.intercept + x @ self.coefficients))
        if x.shape[1] != len(self.coefficients):
            raise ValueError(
                f"expected {len(self.coefficients)} covariates, got {x.shape[1]}"
            )
        return expit(self.intercept + x @ self.coefficients)


@dataclass(frozen=True)
class SupportFlags:
    """Per-unit retention flags (1 = keep) with the scores that produced them."""

    per_unit: np.ndarray
    rule_name: str
    scores: np.ndarray


def _log_likelihood(eta: np.ndarray, y: np.ndarray) -> float:
    # log L = sum y*eta - log(1 + exp(eta)), stable via logaddexp
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def _collinear_columns(design: np.ndarray, names: Sequence[str]) -> list[str]:
    r = np.linalg.qr(design, mode="r")
    diag = np.abs(np.diag(r))
    tol = diag.max() * 1e-10 if diag.max() > 0 else 0.0
    return [names[j] for j in range(len(names)) if diag[j] <= tol]


def fit_logistic_xy(
    x: np.ndarray,
    y: np.ndarray,
    names: Sequence[str] | None = None,
    tolerance: float = 1e-10,
    max_iterations: int = 100,
    separation_bound: float = 30.0,
) -> LogisticModel:
    """Maximum-likelihood logistic regression of binary y on columns of x.

    Newton iterations with step halving on the log-likelihood; convergence is
    declared when the gradient max-norm drops below ``tolerance``. Covariates
    are standardized internally, which does not change the fitted
    probabilities. A standardized coefficient max-norm above
    ``separation_bound`` raises :class:`SeparationError`, since probabilities
    beyond that point saturate to machine 0/1.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    if names is None:
        names = tuple(f"x{j + 1}" for j in range(p))
    if len(y) != n:
        raise ValueError("x and y have different lengths")
    if y.min() == y.max():
        raise FitError("all units are in one arm; no treated/control contrast to fit")

    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1) if n > 1 else np.zeros(p)
    constant = [names[j] for j in range(p) if sd[j] == 0.0]
    if constant:
        raise FitError(
            "collinear design: constant column(s) " + ", ".join(repr(c) for c in constant)
        )
    xs = (x - mean) / sd
    design = np.hstack([np.ones((n, 1)), xs])
    dependent = _collinear_columns(design, ["(intercept)"] + list(names))
    if dependent:
        raise FitError(
            "collinear design: column(s) "
            + ", ".join(repr(c) for c in dependent)
            + " are linearly dependent"
        )

    beta = np.zeros(p + 1)
    ll = _log_likelihood(design @ beta, y)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        eta = design @ beta
        mu = expit(eta)
        grad = design.T @ (y - mu)
        if np.max(np.abs(grad)) < tolerance:
            converged = True
            iterations -= 1
            break
        w = np.clip(mu * (1.0 - mu), 1e-300, None)
        hess = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise FitError("singular Hessian; reduce or decorrelate covariates") from None
        scale = 1.0
        while scale > 2.0 ** -40:
            candidate = beta + scale * step
            cand_ll = _log_likelihood(design @ candidate, y)
            if cand_ll >= ll:
                beta = candidate
                ll = cand_ll
                break
            scale /= 2.0
        else:
            break
        if np.max(np.abs(beta)) > separation_bound:
            raise SeparationError(
                "coefficients diverged (max-norm above "
                f"{separation_bound} on the standardized scale); the arms look "
                "separated, consider dropping covariates"
            )
    else:
        mu = expit(design @ beta)
        converged = bool(np.max(np.abs(design.T @ (y - mu))) < tolerance)
        iterations = max_iterations

    coef = beta[1:] / sd
    intercept = float(beta[0] - np.sum(beta[1:] * mean / sd))
    return LogisticModel(
        intercept=intercept,
        coefficients=coef,
        covariates_used=tuple(names),
        converged=converged,
        iterations=iterations,
    )


def fit_logistic(
    ds: Dataset,
    covariates: Sequence[str] | None = None,
    tolerance: float = 1e-10,
    max_iterations: int = 100,
    separation_bound: float = 30.0,
) -> LogisticModel:
    """Fit treatment on the named covariates of an imputed dataset."""
    names = tuple(covariates) if covariates is not None else ds.schema.covariate_names
    x = ds.covariate_matrix(names)
    return fit_logistic_xy(
        x,
        ds.z.astype(float),
        names=names,
        tolerance=tolerance,
        max_iterations=max_iterations,
        separation_bound=separation_bound,
    )


def crump_flags(scores: np.ndarray, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    """Keep units whose score lies in the closed interval [lo, hi]."""
    scores = np.asarray(scores, dtype=float)
    return ((scores >= lo) & (scores <= hi)).astype(np.int8)


def dehejia_wahba_flags(scores: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Keep treated units up to the max control score and controls down to the min treated score.

    Depends only on score ranks across arms, so any strictly monotone
    transformation of the scores yields the same flags.
    """
    scores = np.asarray(scores, dtype=float)
    z = np.asarray(z)
    treated = z == 1
    if not treated.any() or treated.all():
        raise ValueError("both arms must be present to evaluate the rank rule")
    max_control = scores[~treated].max()
    min_treated = scores[treated].min()
    keep = np.where(treated, scores <= max_control, scores >= min_treated)
    return keep.astype(np.int8)


def mark_support(
    ds: Dataset,
    rule: str,
    score_covariates: Sequence[str],
    crump_bounds: tuple[float, float] = CRUMP_DEFAULT_BOUNDS,
) -> SupportFlags:
    """Flag units inside viable overlap using a freshly fit reduced score model.

    The logistic model is refit on ``score_covariates`` rather than reusing a
    full-model fit, so the overlap judgment reflects the chosen covariates
    alone. ``rule`` is ``"crump"`` (closed-interval band) or
    ``"dehejia-wahba"`` (cross-arm rank rule).
    """
    model = fit_logistic(ds, score_covariates)
    scores = model.predict(ds.covariate_matrix(score_covariates))
    if rule == "crump":
        lo, hi = crump_bounds
        flags = crump_flags(scores, lo, hi)
    elif rule == "dehejia-wahba":
        flags = dehejia_wahba_flags(scores, ds.z)
    else:
        raise ValueError(f"unknown support rule '{rule}' (use 'crump' or 'dehejia-wahba')")
    return SupportFlags(per_unit=flags, rule_name=rule, scores=scores)
