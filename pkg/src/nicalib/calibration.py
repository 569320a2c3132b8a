"""Calibrated arm-level and effect-level estimates.

Arm level: an intercept-only GLM fit under weights r(x) (parametric) or the
weighted mean sum(y r)/sum(r) (nonparametric). Effect level: a difference or
a log odds ratio of arm 0 versus arm 1.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from . import rng
from .data import PooledDataset
from .errors import BoundaryError, MetricError, NicalibError, UnstableBootstrapError, ValidationError
from .glm_core import DesignMatrix, GlmSpec, SolverOptions, fit_weighted_mle
from .propensity import (
    analytic_weights,
    arm_specific_propensity_weights,
    empirical_shares,
    fit_propensity,
    propensity_weights,
    trim_weights,
)
from .weights import WeightSet, as_weights

TRANSFORMS = ("identity", "logit")
CONTRASTS = ("difference", "log_odds_ratio")
METHODS = ("parametric", "nonparametric", "stratified")
VARIANCE_SOURCES = ("sandwich", "bootstrap", "closed_form")
MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class EffectMetric:
    """Arm transform nu and, for effect-level results, the contrast pi."""

    transform: str = "identity"
    contrast: str | None = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise MetricError(f"unknown arm transform {self.transform!r}")
        if self.contrast is not None and self.contrast not in CONTRASTS:
            raise MetricError(f"unknown contrast {self.contrast!r}")

    def to_dict(self) -> dict:
        return {"transform": self.transform, "contrast": self.contrast}


@dataclass(frozen=True)
class CalibrationResult:
    estimate: float
    std_error: float
    method: str
    variance_source: str
    metric: EffectMetric
    n_effective: float
    family: str = "bernoulli"

    def __post_init__(self):
        if not math.isfinite(self.estimate):
            raise BoundaryError(f"non-finite estimate {self.estimate}")
        if not math.isfinite(self.std_error) or self.std_error < 0:
            raise ValidationError(f"invalid standard error {self.std_error}")
        if self.method not in METHODS:
            raise ValidationError(f"unknown method {self.method!r}")
        if self.variance_source not in VARIANCE_SOURCES:
            raise ValidationError(f"unknown variance source {self.variance_source!r}")

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.std_error,
            "method": self.method,
            "variance_source": self.variance_source,
            "metric": self.metric.to_dict(),
            "n_effective": self.n_effective,
            "family": self.family,
        }


def _ess(w: np.ndarray) -> float:
    s2 = float(np.sum(w**2))
    return float(np.sum(w)) ** 2 / s2 if s2 > 0 else 0.0


def _arm_inputs(y, w):
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise ValidationError("arm has no subjects")
    w = as_weights(w, y.shape[0])
    if not np.sum(w) > 0:
        raise ValidationError("all weights are zero")
    return y, w


def _check_transform(transform: str, family: str) -> None:
    if transform not in TRANSFORMS:
        raise MetricError(f"unknown arm transform {transform!r}")
    if transform == "logit" and family != "bernoulli":
        raise MetricError("the logit transform needs bernoulli outcomes")


def calibrate_arm_parametric(
    y,
    w: WeightSet | np.ndarray | None = None,
    transform: str = "identity",
    family: str = "bernoulli",
    opts: SolverOptions = SolverOptions(),
) -> CalibrationResult:
    """Intercept-only weighted MLE with a sandwich standard error.

    The sandwich variance is computed for the intercept (the natural
    parameter) and carried to the proportion scale by the delta method when
    ``transform='identity'`` for bernoulli outcomes.
    """
    y, w = _arm_inputs(y, w)
    _check_transform(transform, family)
    spec = GlmSpec(family)
    fit = fit_weighted_mle(spec, y, DesignMatrix.intercept_only(y.shape[0]), w, opts)
    alpha = float(fit.coefficients[0])
    se_alpha = math.sqrt(fit.model_covariance[0, 0])
    if family == "bernoulli" and transform == "identity":
        p = float(expit(alpha))
        estimate, se = p, p * (1.0 - p) * se_alpha
    else:
        estimate, se = alpha, se_alpha
    return CalibrationResult(estimate, se, "parametric", "sandwich", EffectMetric(transform), _ess(w), family)


def weighted_mean(y, w) -> float:
    """sum(y r) / sum(r)."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    total = float(np.sum(w))
    if not total > 0:
        raise ValidationError("all weights are zero")
    return float(np.sum(w * y) / total)


def _nu(delta: float, transform: str) -> float:
    if transform == "identity":
        return delta
    if not 0.0 < delta < 1.0:
        raise BoundaryError(f"weighted proportion {delta:g} is on the boundary; logit undefined")
    return float(logit(delta))


def calibrate_arm_nonparametric(
    y,
    w: WeightSet | np.ndarray | None = None,
    transform: str = "identity",
    family: str = "bernoulli",
    B: int = 1000,
    seed: int = 0,
    workers: int = 1,
) -> CalibrationResult:
    """nu(sum(y r)/sum(r)) with a bootstrap standard error (weights held fixed)."""
    y, w = _arm_inputs(y, w)
    _check_transform(transform, family)
    estimate = _nu(weighted_mean(y, w), transform)

    def replicate(idx):
        return _nu(weighted_mean(y[idx], w[idx]), transform)

    boot = bootstrap_ci(replicate, np.zeros(y.shape[0], dtype=int), B=B, seed=seed, workers=workers)
    return CalibrationResult(
        estimate, boot.std_error, "nonparametric", "bootstrap", EffectMetric(transform), _ess(w), family
    )


def calibrated_effect(arm0: CalibrationResult, arm1: CalibrationResult, contrast: str) -> CalibrationResult:
    """pi(arm0, arm1): ``difference`` is arm0 - arm1; ``log_odds_ratio`` is
    logit(p0) - logit(p1) with a delta-method variance.
    """
    if contrast not in CONTRASTS:
        raise MetricError(f"unknown contrast {contrast!r}")
    if arm0.method != arm1.method or arm0.variance_source != arm1.variance_source:
        raise MetricError("arms were estimated by different methods")
    if arm0.metric.contrast is not None or arm1.metric.contrast is not None:
        raise MetricError("inputs must be arm-level results")
    if arm0.metric.transform != arm1.metric.transform:
        raise MetricError("arms use different transforms")
    if arm0.family != arm1.family:
        raise MetricError("arms have different outcome families")
    transform = arm0.metric.transform
    if contrast == "difference":
        est = arm0.estimate - arm1.estimate
        var = arm0.std_error**2 + arm1.std_error**2
    else:
        if arm0.family != "bernoulli":
            raise MetricError("a log odds ratio needs bernoulli outcomes")
        if transform == "logit":
            est = arm0.estimate - arm1.estimate
            var = arm0.std_error**2 + arm1.std_error**2
        else:
            l0, v0 = _logit_delta(arm0.estimate, arm0.std_error)
            l1, v1 = _logit_delta(arm1.estimate, arm1.std_error)
            est, var = l0 - l1, v0 + v1
        transform = "logit"
    return CalibrationResult(
        float(est),
        math.sqrt(var),
        arm0.method,
        arm0.variance_source,
        EffectMetric(transform, contrast),
        arm0.n_effective + arm1.n_effective,
        arm0.family,
    )


def _logit_delta(p: float, se: float) -> tuple[float, float]:
    if not 0.0 < p < 1.0:
        raise BoundaryError(f"proportion {p:g} on the boundary; log odds undefined")
    d = 1.0 / (p * (1.0 - p))
    return float(logit(p)), (d * se) ** 2


# --------------------------------------------------------------------------- bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    std_error: float
    interval: tuple[float, float]
    replicates: np.ndarray = field(repr=False)
    n_failed: int
    B: int
    seed: int
    level: float

    def to_dict(self) -> dict:
        return {
            "se": self.std_error,
            "interval": list(self.interval),
            "interval_type": "percentile",
            "n_failed": self.n_failed,
            "B": self.B,
            "seed": self.seed,
            "level": self.level,
            "rng": rng.RNG_ALGORITHM,
        }


def resample_indices(groups: Sequence[np.ndarray], n: int, generator: np.random.Generator) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    pos = 0
    for members in groups:
        k = members.shape[0]
        out[pos:pos + k] = members[generator.integers(0, k, size=k)]
        pos += k
    return out


def bootstrap_ci(
    estimator: Callable[[np.ndarray], float],
    strata,
    B: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap, resampling subjects with replacement within strata.

    ``estimator`` receives the resampled row indices. Replicate ``b`` draws
    from ``rng.stream(seed, b)``, so the output is identical for any
    ``workers``.

    Raises
    ------
    UnstableBootstrapError
        If more than 5% of replicates fail.
    """
    if B < 100:
        raise ValidationError(f"B must be at least 100 (got {B})")
    if not 0.0 < level < 1.0:
        raise ValidationError("level must lie in (0, 1)")
    strata = np.asarray(strata)
    n = strata.shape[0]
    if n == 0:
        raise ValidationError("nothing to resample")
    _, inverse = np.unique(strata, return_inverse=True)
    groups = [np.flatnonzero(inverse == g) for g in range(inverse.max() + 1)]

    def one(b: int) -> float:
        idx = resample_indices(groups, n, rng.stream(seed, b))
        try:
            value = float(estimator(idx))
        except (NicalibError, ArithmeticError, np.linalg.LinAlgError):
            return math.nan
        return value if math.isfinite(value) else math.nan

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = np.fromiter(pool.map(one, range(B)), dtype=float, count=B)
    else:
        values = np.fromiter((one(b) for b in range(B)), dtype=float, count=B)

    ok = values[np.isfinite(values)]
    n_failed = B - ok.shape[0]
    if n_failed > MAX_FAILURE_FRACTION * B:
        raise UnstableBootstrapError(n_failed / B, n_failed, B)
    se = float(np.std(ok, ddof=1))
    if np.all(ok == ok[0]):
        se = 0.0
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(ok, [alpha, 1.0 - alpha])
    values.setflags(write=False)
    return BootstrapResult(se, (float(lo), float(hi)), values, n_failed, B, seed, level)


# --------------------------------------------------------------------------- weight recipes


class FixedWeights:
    """Weights attached to rows; resampled rows keep their original weight."""

    refit = False

    def __init__(self, pooled: PooledDataset, historical_weights: WeightSet | np.ndarray):
        values = as_weights(historical_weights, pooled.n_historical)
        full = np.full(len(pooled), np.nan)
        full[pooled.is_historical] = values
        self._full = full

    def __call__(self, pooled: PooledDataset, index: np.ndarray) -> np.ndarray:
        taken = self._full[index]
        return taken[~np.isnan(taken)]


@dataclass(frozen=True)
class AnalyticRecipe:
    """Category share ratios recomputed from the (resampled) historical data.

    Target shares come from ``target_shares`` or, if omitted, from the current
    trial's empirical shares. ``arm_specific`` uses each historical arm's own
    category shares as the source distribution.
    """

    covariate: str
    target_shares: Mapping | None = None
    arm_specific: bool = True
    trim: tuple[float, float] | None = None
    refit = True

    def __call__(self, pooled: PooledDataset, index: np.ndarray | None = None) -> np.ndarray:
        data = pooled if index is None else pooled.take(index)
        return self.weights(data).values

    def weights(self, pooled: PooledDataset) -> WeightSet:
        ws = self._raw(pooled)
        return trim_weights(ws, *self.trim) if self.trim is not None else ws

    def _raw(self, pooled: PooledDataset) -> WeightSet:
        hist = pooled.historical()
        cats = hist.covariate(self.covariate)
        target = self.target_shares
        if target is None:
            if pooled.n_current == 0:
                raise ValidationError("analytic weights need target shares or current-trial data")
            target = empirical_shares(pooled.current().covariate(self.covariate))
        if not self.arm_specific:
            return analytic_weights(cats, target)
        values = np.empty(len(hist))
        meta = {}
        for a in (0, 1):
            m = hist.arm == a
            if np.any(m):
                ws = analytic_weights(cats[m], target)
                values[m] = ws.values
                meta[f"arm{a}"] = ws.meta
        return WeightSet(values, "analytic_ratio", meta=meta)


@dataclass(frozen=True)
class PropensityRecipe:
    """Propensity-odds weights, refit on every (resampled) pool."""

    covariates: tuple[str, ...]
    interactions: bool = False
    arm_specific: bool = False
    trim: tuple[float, float] | None = None
    refit = True

    def __call__(self, pooled: PooledDataset, index: np.ndarray | None = None) -> np.ndarray:
        data = pooled if index is None else pooled.take(index)
        return self.weights(data)[0].values

    def weights(self, pooled: PooledDataset):
        if self.arm_specific:
            ws, models = arm_specific_propensity_weights(pooled, self.covariates, self.interactions)
        else:
            model = fit_propensity(pooled, self.covariates, self.interactions)
            ws, models = propensity_weights(model, pooled), [model]
        if self.trim is not None:
            ws = trim_weights(ws, *self.trim)
        return ws, models


# --------------------------------------------------------------------------- effect level


def estimate_effect(
    y,
    arm,
    w=None,
    contrast: str = "log_odds_ratio",
    method: str = "parametric",
    family: str = "bernoulli",
    B: int = 1000,
    seed: int = 0,
    workers: int = 1,
) -> tuple[CalibrationResult, CalibrationResult, CalibrationResult]:
    """Arm 0 result, arm 1 result and their contrast from one historical trial."""
    y = np.asarray(y, dtype=float).reshape(-1)
    arm = np.asarray(arm).reshape(-1)
    w = as_weights(w, y.shape[0])
    results = []
    for a in (0, 1):
        m = arm == a
        if method == "parametric":
            results.append(calibrate_arm_parametric(y[m], w[m], "identity", family))
        elif method == "nonparametric":
            results.append(
                calibrate_arm_nonparametric(y[m], w[m], "identity", family, B=B, seed=seed + a, workers=workers)
            )
        else:
            raise ValidationError(f"method must be parametric or nonparametric, not {method!r}")
    return results[0], results[1], calibrated_effect(results[0], results[1], contrast)


def effect_point(y, arm, w, contrast: str = "log_odds_ratio", method: str = "nonparametric", family: str = "bernoulli") -> float:
    """Point estimate only, as used inside bootstrap replicates."""
    y = np.asarray(y, dtype=float)
    arm = np.asarray(arm)
    w = np.asarray(w, dtype=float)
    arms = []
    for a in (0, 1):
        m = arm == a
        if method == "parametric":
            arms.append(calibrate_arm_parametric(y[m], w[m], "identity", family).estimate)
        else:
            arms.append(weighted_mean(y[m], w[m]))
    if contrast == "difference":
        return arms[0] - arms[1]
    return _nu(arms[0], "logit") - _nu(arms[1], "logit")


def bootstrap_effect(
    pooled: PooledDataset,
    recipe,
    contrast: str = "log_odds_ratio",
    method: str = "parametric",
    family: str = "bernoulli",
    B: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    workers: int = 1,
) -> BootstrapResult:
    """Bootstrap the historical arm0-vs-arm1 contrast.

    Subjects are resampled within trial x arm cells; the recipe decides
    whether weights travel with subjects or are recomputed per replicate.
    """
    strata = np.char.add(pooled.trial.astype(str), pooled.arm.astype(str))

    def estimator(idx):
        w = recipe(pooled, idx)
        hist_idx = idx[pooled.is_historical[idx]]
        return effect_point(pooled.outcome[hist_idx], pooled.arm[hist_idx], w, contrast, method, family)

    return bootstrap_ci(estimator, strata, B=B, seed=seed, level=level, workers=workers)


# --------------------------------------------------------------------------- strata


@dataclass(frozen=True)
class StratifiedEstimate:
    effects: np.ndarray
    variances: np.ndarray
    shares: np.ndarray
    estimate: float
    variance: float

    def to_dict(self) -> dict:
        return {
            "effects": self.effects.tolist(),
            "variances": self.variances.tolist(),
            "shares": self.shares.tolist(),
            "estimate": self.estimate,
            "variance": self.variance,
        }


def combine_strata(effects, variances, shares) -> StratifiedEstimate:
    """sum(beta_l w_l) with variance sum(s_l^2 w_l^2)."""
    effects = np.asarray(effects, dtype=float).reshape(-1)
    variances = np.asarray(variances, dtype=float).reshape(-1)
    shares = np.asarray(shares, dtype=float).reshape(-1)
    if not (effects.shape == variances.shape == shares.shape) or effects.size == 0:
        raise ValidationError("effects, variances and shares must be equal-length and nonempty")
    if abs(shares.sum() - 1.0) > 1e-9:
        raise ValidationError(f"stratum shares sum to {shares.sum():.12g}, not 1")
    if np.any(shares < 0):
        raise ValidationError("stratum shares must be nonnegative")
    if np.any(~(variances > 0)):
        raise ValidationError("stratum variances must be positive")
    return StratifiedEstimate(
        effects, variances, shares, float(effects @ shares), float(variances @ shares**2)
    )


def stratum_effects(y, arm, stratum, n_strata: int, contrast: str = "log_odds_ratio", family: str = "bernoulli"):
    """Unweighted arm0-vs-arm1 effect and its variance in every stratum."""
    y = np.asarray(y, dtype=float)
    arm = np.asarray(arm)
    stratum = np.asarray(stratum)
    effects, variances = np.empty(n_strata), np.empty(n_strata)
    for l in range(n_strata):
        m = stratum == l
        arms = []
        for a in (0, 1):
            sel = m & (arm == a)
            if not np.any(sel):
                raise BoundaryError(f"stratum {l + 1} has no subjects in arm {a}")
            arms.append(calibrate_arm_parametric(y[sel], None, "identity", family))
        eff = calibrated_effect(arms[0], arms[1], contrast)
        effects[l], variances[l] = eff.estimate, eff.std_error**2
    return effects, variances


def calibrate_stratified(
    y, arm, stratum, shares_current, contrast: str = "log_odds_ratio", family: str = "bernoulli"
) -> tuple[CalibrationResult, StratifiedEstimate]:
    shares_current = np.asarray(shares_current, dtype=float)
    effects, variances = stratum_effects(y, arm, stratum, shares_current.shape[0], contrast, family)
    combined = combine_strata(effects, variances, shares_current)
    transform = "logit" if contrast == "log_odds_ratio" else "identity"
    result = CalibrationResult(
        combined.estimate,
        math.sqrt(combined.variance),
        "stratified",
        "closed_form",
        EffectMetric(transform, contrast),
        float(len(y)),
        family,
    )
    return result, combined
