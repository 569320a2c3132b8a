"""Noninferiority test statistics.

``mu_tc`` is the log odds ratio (or risk difference) of the active control
versus the experimental treatment in the current trial, ``mu_cp`` that of
placebo versus the active control, historical or calibrated. Both are positive
when the experimental arm and the control are effective, and
noninferiority is declared when the statistic exceeds the upper-alpha normal
quantile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, ndtri

from .errors import ValidationError

METHODS = ("synthesis", "fixed_margin", "stratified")


def normal_sf(z: float) -> float:
    """Upper tail 1 - Phi(z) via erfc, accurate far into both tails."""
    return float(0.5 * erfc(z / math.sqrt(2.0)))


@dataclass(frozen=True)
class NiInputs:
    mu_tc: float
    se_tc: float
    mu_cp: float
    se_cp: float
    alpha: float = 0.025

    def __post_init__(self):
        for name in ("mu_tc", "se_tc", "mu_cp", "se_cp", "alpha"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if not (self.se_tc > 0 and self.se_cp > 0):
            raise ValidationError("standard errors must be strictly positive")
        if not 0.0 < self.alpha < 0.5:
            raise ValidationError("alpha must lie in (0, 0.5)")


@dataclass(frozen=True)
class NiTestResult:
    statistic: float
    p_value: float
    method: str
    reject: bool
    alpha: float
    critical_value: float
    raw_ratio: float | None = None

    def to_dict(self) -> dict:
        out = {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
            "reject": self.reject,
            "alpha": self.alpha,
            "critical_value": self.critical_value,
        }
        if self.raw_ratio is not None:
            out["raw_ratio"] = self.raw_ratio
        return out


def _result(statistic: float, method: str, alpha: float, raw_ratio=None) -> NiTestResult:
    z_alpha = float(ndtri(1.0 - alpha))
    return NiTestResult(
        float(statistic), normal_sf(statistic), method, bool(statistic > z_alpha), alpha, z_alpha, raw_ratio
    )


def synthesis_test(inputs: NiInputs) -> NiTestResult:
    """(mu_tc + mu_cp) / sqrt(se_tc^2 + se_cp^2)."""
    z = (inputs.mu_tc + inputs.mu_cp) / math.hypot(inputs.se_tc, inputs.se_cp)
    return _result(z, "synthesis", inputs.alpha)


def fixed_margin_test(inputs: NiInputs) -> NiTestResult:
    """(mu_tc + mu_cp) / (se_tc + se_cp); never larger than the synthesis statistic."""
    z = (inputs.mu_tc + inputs.mu_cp) / (inputs.se_tc + inputs.se_cp)
    return _result(z, "fixed_margin", inputs.alpha)


def stratified_test(gamma, var_current, beta, var_historical, weights, alpha: float = 0.025) -> NiTestResult:
    """Propensity-stratum combination of (gamma_l - beta_l).

    ``statistic`` is the z form sum(d_l w_l) / sqrt(sum(v_l w_l^2)); the
    ratio with the variance itself in the denominator is kept as
    ``raw_ratio``.
    """
    gamma, var_current, beta, var_historical, weights = (
        np.asarray(a, dtype=float).reshape(-1) for a in (gamma, var_current, beta, var_historical, weights)
    )
    if not (gamma.shape == var_current.shape == beta.shape == var_historical.shape == weights.shape):
        raise ValidationError("per-stratum inputs must have equal length")
    if gamma.size == 0:
        raise ValidationError("need at least one stratum")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValidationError("stratum weights must be nonnegative and sum to 1")
    if np.any(~(var_current > 0)) or np.any(~(var_historical > 0)):
        raise ValidationError("stratum variances must be positive")
    if not 0.0 < alpha < 0.5:
        raise ValidationError("alpha must lie in (0, 0.5)")
    numerator = float(np.sum((gamma - beta) * weights))
    denominator = float(np.sum((var_current + var_historical) * weights**2))
    if denominator <= 0:
        raise ValidationError("zero denominator (all stratum weights vanish)")
    return _result(numerator / math.sqrt(denominator), "stratified", alpha, numerator / denominator)
