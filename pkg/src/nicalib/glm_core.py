"""Canonical-link GLMs fit under nonnegative per-observation weights.

Only the two families needed for trial outcomes are supported: bernoulli with
the logit link and gaussian with the identity link. Fitting is Fisher scoring
(IRLS), which for a canonical link coincides with Newton-Raphson.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, logit

from .errors import (
    ConvergenceError,
    DimensionMismatchError,
    ResponseDomainError,
    SeparationError,
    SingularDesignError,
    SingularInformationError,
    ValidationError,
)
from .weights import WeightSet, as_weights

CANONICAL_LINKS = {"bernoulli": "logit", "gaussian": "identity"}
SEPARATION_LIMIT = 30.0
MEAN_CLAMP = 1e-6


@dataclass(frozen=True)
class GlmSpec:
    """Family plus its canonical link. ``link`` may be omitted."""

    family: str = "bernoulli"
    link: str | None = None

    def __post_init__(self):
        if self.family not in CANONICAL_LINKS:
            raise ValidationError(f"unsupported family {self.family!r}")
        canonical = CANONICAL_LINKS[self.family]
        if self.link is None:
            object.__setattr__(self, "link", canonical)
        elif self.link != canonical:
            raise ValidationError(
                f"non-canonical link {self.link!r} for family {self.family!r} "
                f"(expected {canonical!r})"
            )

    @property
    def is_bernoulli(self) -> bool:
        return self.family == "bernoulli"

    def mean(self, eta):
        """Inverse link, b'(theta)."""
        return expit(eta) if self.is_bernoulli else np.asarray(eta, dtype=float)

    def link_fn(self, mu):
        return logit(mu) if self.is_bernoulli else np.asarray(mu, dtype=float)

    def variance(self, mu):
        """b''(theta) as a function of the mean."""
        return mu * (1.0 - mu) if self.is_bernoulli else np.ones_like(mu)

    def loglik_terms(self, y, eta, dispersion: float = 1.0):
        if self.is_bernoulli:
            return y * eta - np.logaddexp(0.0, eta)
        return -0.5 * (y - eta) ** 2 / dispersion - 0.5 * np.log(2 * np.pi * dispersion)


BERNOULLI = GlmSpec("bernoulli")
GAUSSIAN = GlmSpec("gaussian")


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise DimensionMismatchError("design matrix must be two-dimensional")
        labels = tuple(self.labels)
        if len(labels) != values.shape[1]:
            raise DimensionMismatchError(
                f"{len(labels)} labels for {values.shape[1]} columns"
            )
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate column labels in {labels}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("design matrix has non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_columns(
        cls, columns: Mapping[str, Sequence[float]], intercept: bool = True, n: int | None = None
    ) -> "DesignMatrix":
        cols = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in columns.items()}
        sizes = {c.shape[0] for c in cols.values()}
        if n is not None:
            sizes.add(n)
        if len(sizes) > 1:
            raise DimensionMismatchError(f"columns have differing lengths {sorted(sizes)}")
        if not sizes:
            raise ValidationError("need at least one column or an explicit row count")
        (rows,) = sizes
        labels, data = [], []
        if intercept:
            if "intercept" in cols:
                raise ValidationError("'intercept' is reserved for the intercept column")
            labels.append("intercept")
            data.append(np.ones(rows))
        for k, v in cols.items():
            labels.append(k)
            data.append(v)
        return cls(np.column_stack(data) if data else np.empty((rows, 0)), tuple(labels))

    @classmethod
    def intercept_only(cls, n: int) -> "DesignMatrix":
        return cls(np.ones((n, 1)), ("intercept",))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def intercept_index(self) -> int | None:
        for j in range(self.n_cols):
            if np.all(self.values[:, j] == 1.0):
                return j
        return None

    def take(self, index) -> "DesignMatrix":
        return DesignMatrix(self.values[index], self.labels)


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-10
    max_iterations: int = 100


@dataclass(frozen=True)
class FitResult:
    """Output of :func:`fit_weighted_mle`.

    ``model_covariance`` is the sandwich A^-1 B A^-1; ``naive_covariance`` is
    the inverse weighted information (times the dispersion for gaussian).
    """

    spec: GlmSpec
    labels: tuple[str, ...]
    coefficients: np.ndarray
    model_covariance: np.ndarray
    naive_covariance: np.ndarray
    log_likelihood: float
    converged: bool
    iterations: int
    gradient_norm: float
    dispersion: float = 1.0
    weight_sum: float = field(default=0.0)

    def std_errors(self, kind: str = "sandwich") -> np.ndarray:
        cov = self.model_covariance if kind == "sandwich" else self.naive_covariance
        return np.sqrt(np.diag(cov))

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def se(self, label: str, kind: str = "sandwich") -> float:
        return float(self.std_errors(kind)[self.labels.index(label)])

    def predict(self, X: DesignMatrix | np.ndarray) -> np.ndarray:
        values = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
        return self.spec.mean(values @ self.coefficients)

    def to_dict(self) -> dict:
        return {
            "family": self.spec.family,
            "link": self.spec.link,
            "labels": list(self.labels),
            "coefficients": self.coefficients.tolist(),
            "se_sandwich": self.std_errors("sandwich").tolist(),
            "se_naive": self.std_errors("naive").tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
        }


def _prepare(spec: GlmSpec, y, X, w):
    Xv = X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=float)
    if Xv.ndim == 1:
        Xv = Xv[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != Xv.shape[0]:
        raise DimensionMismatchError(f"{y.shape[0]} responses for {Xv.shape[0]} design rows")
    w = as_weights(w, y.shape[0])
    if not np.all(np.isfinite(y)):
        raise ResponseDomainError("responses must be finite")
    if spec.is_bernoulli and not np.all((y == 0) | (y == 1)):
        bad = int(np.flatnonzero((y != 0) & (y != 1))[0])
        raise ResponseDomainError(
            f"bernoulli responses must be 0 or 1 (observation {bad} is {y[bad]:g})"
        )
    return y, Xv, w


def weighted_log_likelihood(spec: GlmSpec, y, X, coef, w=None, dispersion: float = 1.0) -> float:
    """Sum of r(x_i) * log l(y_i, theta_i).

    For gaussian the dispersion is taken as given (default 1).
    """
    y, Xv, w = _prepare(spec, y, X, w)
    coef = np.asarray(coef, dtype=float).reshape(-1)
    if coef.shape[0] != Xv.shape[1]:
        raise DimensionMismatchError(f"{coef.shape[0]} coefficients for {Xv.shape[1]} columns")
    pos = w > 0
    eta = Xv[pos] @ coef
    return float(np.sum(w[pos] * spec.loglik_terms(y[pos], eta, dispersion)))


def weighted_score(spec: GlmSpec, y, X, coef, w=None) -> np.ndarray:
    """Gradient of :func:`weighted_log_likelihood` (unit dispersion)."""
    y, Xv, w = _prepare(spec, y, X, w)
    mu = spec.mean(Xv @ np.asarray(coef, dtype=float))
    return Xv.T @ (w * (y - mu))


def _information(spec, Xv, w, mu):
    return Xv.T @ (Xv * (w * spec.variance(mu))[:, None])


def _invert(a: np.ndarray, what: str) -> np.ndarray:
    # relative conditioning check; lstsq-based pinv would hide a rank problem
    if a.size and (not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e14):
        raise SingularInformationError(f"{what} is singular or numerically singular")
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(f"{what} is singular") from exc


def sandwich_covariance(spec: GlmSpec, y, X, coef, w=None) -> np.ndarray:
    """A^-1 B A^-1 with A = sum r_i x_i x_i' V(mu_i) and B = sum r_i^2 x_i x_i' (y_i - mu_i)^2.

    Zero-weight rows contribute to neither matrix.
    """
    y, Xv, w = _prepare(spec, y, X, w)
    pos = w > 0
    Xp, yp, wp = Xv[pos], y[pos], w[pos]
    mu = spec.mean(Xp @ np.asarray(coef, dtype=float))
    a_inv = _invert(_information(spec, Xp, wp, mu), "weighted information matrix A")
    u = wp * (yp - mu)
    b = Xp.T @ (Xp * (u**2)[:, None])
    cov = a_inv @ b @ a_inv
    return 0.5 * (cov + cov.T)


def _start(spec: GlmSpec, y, Xv, w) -> np.ndarray:
    beta = np.zeros(Xv.shape[1])
    for j in range(Xv.shape[1]):
        if np.all(Xv[:, j] == 1.0):
            m = float(np.sum(w * y) / np.sum(w))
            if spec.is_bernoulli:
                m = min(max(m, MEAN_CLAMP), 1.0 - MEAN_CLAMP)
            beta[j] = float(spec.link_fn(m))
            break
    return beta


def fit_weighted_mle(
    spec: GlmSpec,
    y,
    X: DesignMatrix | np.ndarray,
    w: WeightSet | np.ndarray | None = None,
    opts: SolverOptions = SolverOptions(),
) -> FitResult:
    """Maximise the weighted log-likelihood by IRLS.

    Raises
    ------
    SingularDesignError
        X restricted to positively weighted rows is rank deficient.
    SeparationError
        A bernoulli coefficient exceeds 30 in absolute value.
    ConvergenceError
        The score max-norm is still above ``opts.tolerance`` after
        ``opts.max_iterations`` steps.
    """
    y, Xv, w = _prepare(spec, y, X, w)
    labels = X.labels if isinstance(X, DesignMatrix) else tuple(f"x{j}" for j in range(Xv.shape[1]))
    pos = w > 0
    if not np.any(pos):
        raise ValidationError("all weights are zero")
    Xp, yp, wp = Xv[pos], y[pos], w[pos]
    if np.linalg.matrix_rank(Xp) < Xp.shape[1]:
        raise SingularDesignError(
            f"design matrix ({', '.join(labels)}) is rank deficient on positively weighted rows"
        )

    beta = _start(spec, yp, Xp, wp)
    iterations = 0
    converged = False
    while True:
        mu = spec.mean(Xp @ beta)
        score = Xp.T @ (wp * (yp - mu))
        grad_norm = float(np.max(np.abs(score))) if score.size else 0.0
        if grad_norm <= opts.tolerance:
            converged = True
            break
        if iterations >= opts.max_iterations:
            break
        info = _information(spec, Xp, wp, mu)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            if spec.is_bernoulli and np.any(np.abs(beta) > SEPARATION_LIMIT / 2):
                raise SeparationError("information matrix collapsed; fitted probabilities at 0/1") from exc
            raise SingularInformationError("weighted information matrix is singular") from exc
        beta = beta + step
        iterations += 1
        if spec.is_bernoulli and np.any(np.abs(beta) > SEPARATION_LIMIT):
            j = int(np.argmax(np.abs(beta)))
            raise SeparationError(
                f"coefficient {labels[j]!r} reached {beta[j]:.3g}: "
                "fitted probabilities pinned at 0/1 (separation)"
            )

    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {opts.max_iterations} iterations "
            f"(score max-norm {grad_norm:.3g} > {opts.tolerance:g})"
        )

    mu = spec.mean(Xp @ beta)
    if spec.is_bernoulli:
        dispersion = 1.0
    else:
        dispersion = float(np.sum(wp * (yp - mu) ** 2) / np.sum(wp))
    naive = _invert(_information(spec, Xp, wp, mu), "weighted information matrix A") * dispersion
    naive = 0.5 * (naive + naive.T)
    sandwich = sandwich_covariance(spec, y, Xv, beta, w)
    ll = float(np.sum(wp * spec.loglik_terms(yp, Xp @ beta, dispersion if not spec.is_bernoulli else 1.0)))
    beta.setflags(write=False)
    return FitResult(
        spec=spec,
        labels=tuple(labels),
        coefficients=beta,
        model_covariance=sandwich,
        naive_covariance=naive,
        log_likelihood=ll,
        converged=converged,
        iterations=iterations,
        gradient_norm=grad_norm,
        dispersion=dispersion,
        weight_sum=float(np.sum(wp)),
    )
