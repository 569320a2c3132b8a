"""Trial-membership propensity scores and the calibration weights built from them.

By Bayes' rule the density ratio f*(x)/f(x) between the current-trial and
historical covariate distributions is proportional to the odds of belonging
to the current trial given x. With the current trial coded 1, the weight for a
historical subject is ``p/(1-p) * n_h/n_c``.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import PooledDataset
from .errors import (
    DegeneratePropensityError,
    DegenerateStratificationError,
    InvalidBoundsError,
    UnsupportedPopulationError,
    ValidationError,
)
from .glm_core import BERNOULLI, DesignMatrix, FitResult, SolverOptions, fit_weighted_mle
from .weights import WeightSet

MANY_COVARIATES = 10
SHARE_TOL = 1e-9


def _key(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return str(v)


def _normalise_shares(shares: Mapping, name: str) -> dict:
    out = {}
    for k, v in shares.items():
        v = float(v)
        if v < 0 or not np.isfinite(v):
            raise ValidationError(f"{name} share for {k!r} must be a nonnegative number")
        out[_key(k)] = out.get(_key(k), 0.0) + v
    total = sum(out.values())
    if abs(total - 1.0) > SHARE_TOL:
        raise ValidationError(f"{name} shares sum to {total:.12g}, not 1")
    return out


def empirical_shares(categories) -> dict:
    values, counts = np.unique(np.asarray(categories), return_counts=True)
    n = counts.sum()
    return {_key(v): c / n for v, c in zip(values.tolist(), counts.tolist())}


def analytic_weights(categories, target_shares: Mapping, source_shares: Mapping | None = None) -> WeightSet:
    """Weight each subject by target share / source share of its category.

    ``source_shares`` defaults to the empirical shares of ``categories``.
    Categories absent from ``target_shares`` get weight 0.
    """
    categories = np.asarray(categories)
    target = _normalise_shares(target_shares, "target")
    source = _normalise_shares(
        source_shares if source_shares is not None else empirical_shares(categories), "source"
    )
    for cat, share in target.items():
        if share > 0 and source.get(cat, 0.0) <= 0:
            raise UnsupportedPopulationError(
                f"category {cat!r} has target share {share:g} but no source representation; "
                "the density ratio is undefined"
            )
    ratio = {cat: (target.get(cat, 0.0) / s if s > 0 else 0.0) for cat, s in source.items()}
    values = np.empty(categories.shape[0])
    for i, c in enumerate(categories.tolist()):
        k = _key(c)
        if k not in ratio:
            raise ValidationError(f"subject {i} has category {c!r} missing from the source shares")
        values[i] = ratio[k]
    return WeightSet(
        values,
        "analytic_ratio",
        meta={"target_shares": {str(k): v for k, v in target.items()},
              "source_shares": {str(k): v for k, v in source.items()}},
    )


@dataclass(frozen=True)
class PropensityModel:
    """Logistic regression of current-trial membership on covariates.

    ``historical_arm`` is set when only one historical arm was pooled with the
    current trial.
    """

    fit: FitResult
    covariate_labels: tuple[str, ...]
    interactions: bool
    n_historical: int
    n_current: int
    historical_arm: int | None = None

    def design(self, pooled: PooledDataset) -> DesignMatrix:
        return _design(pooled, self.covariate_labels, self.interactions)

    def predict(self, pooled: PooledDataset) -> np.ndarray:
        return self.fit.predict(self.design(pooled))

    def ratio(self, pooled: PooledDataset) -> np.ndarray:
        """Odds times n_h/n_c for every row of ``pooled`` (either trial)."""
        p = self.predict(pooled)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise DegeneratePropensityError("predicted trial probability of exactly 0 or 1")
        return p / (1.0 - p) * (self.n_historical / self.n_current)

    def diagnostics(self, pooled: PooledDataset) -> dict:
        p = self.predict(pooled)
        h = pooled.is_historical if self.historical_arm is None else (
            pooled.is_historical & (pooled.arm == self.historical_arm))
        return {
            **self.fit.to_dict(),
            "covariates": list(self.covariate_labels),
            "interactions": self.interactions,
            "historical_arm": self.historical_arm,
            "n_historical": self.n_historical,
            "n_current": self.n_current,
            "mean_predicted_current": float(p[pooled.is_current].mean()) if pooled.n_current else None,
            "mean_predicted_historical": float(p[h].mean()) if np.any(h) else None,
            "min_predicted_historical": float(p[h].min()) if np.any(h) else None,
            "max_predicted_historical": float(p[h].max()) if np.any(h) else None,
        }


def _design(pooled: PooledDataset, covariates: Sequence[str], interactions: bool) -> DesignMatrix:
    cols = {c: pooled.covariate(c) for c in covariates}
    if interactions:
        for a, b in itertools.combinations(covariates, 2):
            cols[f"{a}:{b}"] = cols[a] * cols[b]
    return DesignMatrix.from_columns(cols, intercept=True, n=len(pooled))


def fit_propensity(
    pooled: PooledDataset,
    covariates: Sequence[str],
    interactions: bool = False,
    historical_arm: int | None = None,
    opts: SolverOptions = SolverOptions(),
) -> PropensityModel:
    """Fit the trial-membership model (current trial coded 1, unit weights).

    With ``historical_arm`` set, only that historical arm is pooled with the
    whole current trial, giving arm-specific density ratios.
    """
    pooled.require_pooled()
    covariates = tuple(covariates)
    if len(set(covariates)) != len(covariates):
        raise ValidationError("duplicate covariates requested")
    if historical_arm is not None:
        pooled = pooled.take(pooled.is_current | (pooled.arm == historical_arm))
        pooled.require_pooled()
    for c in covariates:
        col = pooled.covariate(c)
        if np.all(col == col[0]):
            raise ValidationError(f"covariate {c!r} is constant across the pool")
    if len(covariates) > MANY_COVARIATES:
        warnings.warn(
            f"{len(covariates)} covariates in the propensity model; restricting it to "
            "effect modifiers avoids needlessly extreme weights",
            stacklevel=2,
        )
    X = _design(pooled, covariates, interactions)
    y = pooled.is_current.astype(float)
    fit = fit_weighted_mle(BERNOULLI, y, X, None, opts)
    return PropensityModel(fit, covariates, interactions, pooled.n_historical, pooled.n_current, historical_arm)


def propensity_weights(model: PropensityModel, pooled: PooledDataset) -> WeightSet:
    """One weight per historical subject (restricted to the model's arm, if any)."""
    mask = pooled.is_historical
    if model.historical_arm is not None:
        mask = mask & (pooled.arm == model.historical_arm)
    sub = pooled.take(mask)
    values = model.ratio(sub)
    return WeightSet(values, "propensity_odds", meta={"historical_arm": model.historical_arm})


def arm_specific_propensity_weights(
    pooled: PooledDataset, covariates: Sequence[str], interactions: bool = False
) -> tuple[WeightSet, list[PropensityModel]]:
    """Weights for all historical subjects from one model per historical arm.

    Returned values follow the order of historical subjects in ``pooled``.
    """
    hist = pooled.historical()
    values = np.empty(len(hist))
    models = []
    for a in (0, 1):
        if not np.any(hist.arm == a):
            continue
        m = fit_propensity(pooled, covariates, interactions, historical_arm=a)
        values[hist.arm == a] = propensity_weights(m, pooled).values
        models.append(m)
    return WeightSet(values, "propensity_odds", meta={"arm_specific": True}), models


def trim_weights(w: WeightSet, lower: float, upper: float) -> WeightSet:
    """Clamp weights into [lower, upper]; the input is left untouched."""
    if not (np.isfinite(lower) and np.isfinite(upper)) or lower <= 0 or upper <= lower:
        raise InvalidBoundsError(f"trim bounds need 0 < lower < upper, got ({lower}, {upper})")
    return WeightSet(
        np.clip(w.values, lower, upper), "trimmed", (float(lower), float(upper)), dict(w.meta)
    )


@dataclass(frozen=True)
class StrataAssignment:
    """Stratum index (0-based) per pooled subject plus per-trial stratum shares."""

    stratum: np.ndarray
    n_strata: int
    shares_historical: np.ndarray
    shares_current: np.ndarray
    is_current: np.ndarray

    @property
    def historical_stratum(self) -> np.ndarray:
        return self.stratum[~self.is_current]

    def to_dict(self) -> dict:
        return {
            "n_strata": self.n_strata,
            "shares_historical": self.shares_historical.tolist(),
            "shares_current": self.shares_current.tolist(),
        }


def stratify(ratio, pooled: PooledDataset, n_strata: int) -> StrataAssignment:
    """Split the pooled sample into ``n_strata`` equal-count bins of r(x).

    ``ratio`` holds r(x) for every pooled subject. Bins are formed on the rank
    order of r (stable, so ties go by input order); stratum l holds ranks
    ``[l*N/L, (l+1)*N/L)``.
    """
    ratio = np.asarray(ratio, dtype=float).reshape(-1)
    if ratio.shape[0] != len(pooled):
        raise ValidationError(f"{ratio.shape[0]} ratios for {len(pooled)} pooled subjects")
    if n_strata < 1:
        raise ValidationError("need at least one stratum")
    if np.unique(ratio).size < n_strata:
        raise ValidationError(
            f"only {np.unique(ratio).size} distinct weight values for {n_strata} strata"
        )
    is_current = pooled.is_current.copy()
    n = ratio.shape[0]
    order = np.argsort(ratio, kind="stable")
    stratum = np.empty(n, dtype=np.int64)
    stratum[order] = (np.arange(n) * n_strata) // n
    hist = stratum[~is_current]
    cur = stratum[is_current]
    counts_h = np.bincount(hist, minlength=n_strata)
    if np.any(counts_h == 0):
        empty = [int(l) + 1 for l in np.flatnonzero(counts_h == 0)]
        raise DegenerateStratificationError(
            f"stratum/strata {empty} contain no historical subjects; "
            "their historical effects cannot be estimated"
        )
    shares_h = counts_h / counts_h.sum()
    counts_c = np.bincount(cur, minlength=n_strata)
    shares_c = counts_c / counts_c.sum() if counts_c.sum() else np.full(n_strata, np.nan)
    for a in (stratum, shares_h, shares_c, is_current):
        a.setflags(write=False)
    return StrataAssignment(stratum, n_strata, shares_h, shares_c, is_current)


def stratum_constant_weights(assignment: StrataAssignment) -> WeightSet:
    """w_ln / w_lh for each historical subject in stratum l."""
    ratio = assignment.shares_current / assignment.shares_historical
    return WeightSet(ratio[assignment.historical_stratum], "stratum_constant")
