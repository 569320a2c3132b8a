"""Per-subject calibration weights r(x)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidBoundsError,
    NegativeWeightError,
    ValidationError,
)

PROVENANCES = ("unit", "analytic_ratio", "propensity_odds", "trimmed", "stratum_constant")


@dataclass(frozen=True)
class WeightSet:
    """Nonnegative finite weights with a record of where they came from.

    ``provenance`` is one of ``PROVENANCES``; ``trim_bounds`` is set only for
    trimmed weights and every value then lies inside it.
    """

    values: np.ndarray
    provenance: str = "unit"
    trim_bounds: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValidationError("weights must be finite")
        if np.any(values < 0):
            raise NegativeWeightError(
                f"weights must be nonnegative (min {values.min():g})"
            )
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown weight provenance {self.provenance!r}")
        if self.provenance == "trimmed":
            if self.trim_bounds is None:
                raise InvalidBoundsError("trimmed weights need trim_bounds")
            lo, hi = self.trim_bounds
            if np.any(values < lo) or np.any(values > hi):
                raise InvalidBoundsError("trimmed weights fall outside their bounds")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def ones(cls, n: int) -> "WeightSet":
        return cls(np.ones(n), "unit")

    def __len__(self) -> int:
        return self.values.shape[0]

    def take(self, index) -> "WeightSet":
        return WeightSet(self.values[index], self.provenance, self.trim_bounds, dict(self.meta))

    @property
    def effective_sample_size(self) -> float:
        s2 = float(np.sum(self.values**2))
        return float(np.sum(self.values)) ** 2 / s2 if s2 > 0 else 0.0

    def summary(self) -> dict:
        v = self.values
        return {
            "n": int(v.size),
            "min": float(v.min()) if v.size else None,
            "max": float(v.max()) if v.size else None,
            "mean": float(v.mean()) if v.size else None,
            "sum": float(v.sum()),
            "effective_sample_size": self.effective_sample_size,
            "n_zero": int(np.sum(v == 0)),
            "provenance": self.provenance,
            "trim_bounds": list(self.trim_bounds) if self.trim_bounds else None,
        }


def as_weights(w, n: int) -> np.ndarray:
    """Coerce ``None``, a :class:`WeightSet` or an array into a length-``n`` vector."""
    if w is None:
        return np.ones(n)
    if isinstance(w, WeightSet):
        values = w.values
    else:
        values = np.asarray(w, dtype=float).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise ValidationError("weights must be finite")
        if np.any(values < 0):
            raise NegativeWeightError(f"weights must be nonnegative (min {values.min():g})")
    if values.shape[0] != n:
        raise DimensionMismatchError(f"{values.shape[0]} weights for {n} observations")
    return values
