"""Synthetic historical/current trial pools and replication studies.

Each pool carries BPD status and three Bernoulli noise covariates x1..x3
whose success rates differ between the trials. Outcomes are drawn from
per-trial, per-arm, per-BPD event rates (defaults: the IMPACT and MOTA count tables),
so the x's shift the population without modifying the treatment effect and
the target-population truth is available in closed form.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logit

from . import rng
from .calibration import PropensityRecipe, estimate_effect
from .data import PooledDataset
from .datasets import IMPACT_CELLS, MOTA_CELLS
from .errors import NicalibError, ValidationError


def _rates(cells) -> tuple[tuple[float, float], tuple[float, float]]:
    # indexed [arm][bpd]
    return tuple(tuple(cells[(a, x)][1] / cells[(a, x)][0] for x in (0, 1)) for a in (0, 1))


def _share(cells, arm: int | None = None) -> float:
    keys = [k for k in cells if arm is None or k[0] == arm]
    n = sum(cells[k][0] for k in keys)
    return sum(cells[k][0] for k in keys if k[1] == 1) / n


def _arm1_fraction(cells) -> float:
    n1 = sum(v[0] for k, v in cells.items() if k[0] == 1)
    return n1 / sum(v[0] for v in cells.values())


@dataclass(frozen=True)
class SimConfig:
    n_historical: int = 1502
    n_current: int = 6635
    historical_arm1_fraction: float = _arm1_fraction(IMPACT_CELLS)
    current_arm1_fraction: float = _arm1_fraction(MOTA_CELLS)
    x_rates_historical: tuple[float, float, float] = (0.4, 0.6, 0.5)
    x_rates_current: tuple[float, float, float] = (0.6, 0.5, 0.4)
    bpd_historical: float = _share(IMPACT_CELLS)
    bpd_current: float = 0.22
    event_rates_historical: tuple[tuple[float, float], tuple[float, float]] = _rates(IMPACT_CELLS)
    event_rates_current: tuple[tuple[float, float], tuple[float, float]] = _rates(MOTA_CELLS)
    seed: int = 0

    def __post_init__(self):
        if self.n_historical < 1 or self.n_current < 1:
            raise ValidationError("trial sizes must be at least 1")
        probs = [
            self.historical_arm1_fraction,
            self.current_arm1_fraction,
            self.bpd_historical,
            self.bpd_current,
            *self.x_rates_historical,
            *self.x_rates_current,
            *np.ravel(self.event_rates_historical),
            *np.ravel(self.event_rates_current),
        ]
        if any(not (0.0 <= float(p) <= 1.0) for p in probs):
            raise ValidationError("all configured probabilities must lie in [0, 1]")
        if len(self.x_rates_historical) != len(self.x_rates_current):
            raise ValidationError("both trials need the same number of noise covariates")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")

    @property
    def covariate_labels(self) -> tuple[str, ...]:
        return ("bpd",) + tuple(f"x{j + 1}" for j in range(len(self.x_rates_historical)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        conv = {}
        for k, v in d.items():
            if k.startswith("event_rates"):
                v = tuple(tuple(float(x) for x in row) for row in v)
            elif isinstance(v, list):
                v = tuple(v)
            conv[k] = v
        return cls(**conv)


def _trial(
    prefix: str, trial: str, n: int, arm1_fraction: float, bpd: float, x_rates, event_rates, g: np.random.Generator
):
    n1 = int(round(n * arm1_fraction))
    arm = np.r_[np.zeros(n - n1, dtype=np.int64), np.ones(n1, dtype=np.int64)]
    bpd_col = (g.random(n) < bpd).astype(float)
    xs = [(g.random(n) < p).astype(float) for p in x_rates]
    rates = np.asarray(event_rates, dtype=float)[arm, bpd_col.astype(np.int64)]
    y = (g.random(n) < rates).astype(float)
    ids = np.array([f"{prefix}{i + 1:05d}" for i in range(n)], dtype=object)
    return ids, arm, y, np.column_stack([bpd_col, *xs])


def generate_pool(cfg: SimConfig = SimConfig(), replicate: int = 0) -> PooledDataset:
    """Historical rows first, then current rows; reproducible from (cfg.seed, replicate)."""
    g = rng.stream(cfg.seed, replicate)
    h = _trial("H", "H", cfg.n_historical, cfg.historical_arm1_fraction, cfg.bpd_historical,
               cfg.x_rates_historical, cfg.event_rates_historical, g)
    c = _trial("C", "C", cfg.n_current, cfg.current_arm1_fraction, cfg.bpd_current,
               cfg.x_rates_current, cfg.event_rates_current, g)
    trial = np.array(["H"] * cfg.n_historical + ["C"] * cfg.n_current)
    return PooledDataset(
        np.concatenate([h[0], c[0]]),
        trial,
        np.concatenate([h[1], c[1]]),
        np.concatenate([h[2], c[2]]),
        np.vstack([h[3], c[3]]),
        cfg.covariate_labels,
    )


def arm_truth(event_rates, bpd_share: float) -> tuple[float, float]:
    """Marginal event rate of each arm in a population with the given BPD share."""
    r = np.asarray(event_rates, dtype=float)
    return tuple(float(bpd_share * r[a, 1] + (1.0 - bpd_share) * r[a, 0]) for a in (0, 1))


def effect_truth(event_rates, bpd_share: float, contrast: str = "log_odds_ratio") -> float:
    p0, p1 = arm_truth(event_rates, bpd_share)
    if contrast == "difference":
        return p0 - p1
    return float(logit(p0) - logit(p1))


@dataclass(frozen=True)
class AnalysisSpec:
    covariates: tuple[str, ...] = ("bpd", "x1", "x2", "x3")
    contrast: str = "log_odds_ratio"
    interactions: bool = False
    arm_specific: bool = False
    trim: tuple[float, float] | None = None


@dataclass(frozen=True)
class ReplicationSummary:
    replications: int
    n_failed: int
    truth_calibrated: float
    truth_uncalibrated: float
    calibrated: dict
    uncalibrated: dict
    arm_coverage: list
    effect_coverage: float
    failures: list = field(default_factory=list)
    estimates: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "estimates"}
        return d


def _one_replicate(cfg: SimConfig, analysis: AnalysisSpec, r: int):
    pool = generate_pool(cfg, r)
    recipe = PropensityRecipe(tuple(analysis.covariates), analysis.interactions, analysis.arm_specific,
                              analysis.trim)
    w, _ = recipe.weights(pool)
    hist = pool.historical()
    a0, a1, cal = estimate_effect(hist.outcome, hist.arm, w.values, analysis.contrast)
    _, _, unc = estimate_effect(hist.outcome, hist.arm, None, analysis.contrast)
    return (cal.estimate, cal.std_error, unc.estimate, unc.std_error,
            a0.estimate, a0.std_error, a1.estimate, a1.std_error)


def _block(est: np.ndarray, se: np.ndarray, truth: float) -> dict:
    R = est.shape[0]
    sd = float(np.std(est, ddof=1)) if R > 1 else 0.0
    return {
        "mean": float(np.mean(est)),
        "empirical_se": sd,
        "mean_sandwich_se": float(np.mean(se)),
        "truth": truth,
        "bias": float(np.mean(est) - truth),
        "mc_error": sd / math.sqrt(R) if R > 1 else float("nan"),
        "coverage_95": float(np.mean(np.abs(est - truth) <= 1.959963984540054 * se)),
    }


def run_replication_study(
    cfg: SimConfig = SimConfig(), replications: int = 500, analysis: AnalysisSpec = AnalysisSpec(), workers: int = 1
) -> ReplicationSummary:
    """Simulate ``replications`` pools and summarise calibrated vs uncalibrated estimates.

    Replicate r uses the stream (cfg.seed, r); failed replicates are counted
    and excluded from the summaries.
    """
    if replications < 1:
        raise ValidationError("need at least one replication")

    def job(r):
        try:
            return _one_replicate(cfg, analysis, r)
        except NicalibError as exc:
            return f"replicate {r}: {type(exc).__name__}: {exc}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(job, range(replications)))
    else:
        out = [job(r) for r in range(replications)]
    failures = [o for o in out if isinstance(o, str)]
    rows = np.array([o for o in out if not isinstance(o, str)], dtype=float).reshape(-1, 8)
    if rows.shape[0] == 0:
        raise ValidationError(f"all {replications} replicates failed; first: {failures[0]}")

    truth_cal = effect_truth(cfg.event_rates_historical, cfg.bpd_current, analysis.contrast)
    truth_unc = effect_truth(cfg.event_rates_historical, cfg.bpd_historical, analysis.contrast)
    p_star = arm_truth(cfg.event_rates_historical, cfg.bpd_current)
    arm_cov = [
        float(np.mean(np.abs(rows[:, 4 + 2 * a] - p_star[a]) <= 1.959963984540054 * rows[:, 5 + 2 * a]))
        for a in (0, 1)
    ]
    cal = _block(rows[:, 0], rows[:, 1], truth_cal)
    return ReplicationSummary(
        replications=replications,
        n_failed=len(failures),
        truth_calibrated=truth_cal,
        truth_uncalibrated=truth_unc,
        calibrated=cal,
        uncalibrated=_block(rows[:, 2], rows[:, 3], truth_unc),
        arm_coverage=arm_cov,
        effect_coverage=cal["coverage_95"],
        failures=failures[:20],
        estimates=rows,
    )


def identical_populations(cfg: SimConfig = SimConfig()) -> SimConfig:
    """Same config with the current trial's covariate distribution set to the historical one."""
    return replace(cfg, x_rates_current=cfg.x_rates_historical, bpd_current=cfg.bpd_historical)
