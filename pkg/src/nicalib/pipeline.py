"""End-to-end analysis: ingest, weights, calibration, bootstrap, NI tests, report."""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, rng
from .calibration import (
    AnalyticRecipe,
    FixedWeights,
    PropensityRecipe,
    bootstrap_effect,
    calibrate_stratified,
    estimate_effect,
    stratum_effects,
)
from .data import PooledDataset, concat, file_sha256, ingest
from .errors import NicalibError, ValidationError
from .ni_test import NiInputs, fixed_margin_test, stratified_test, synthesis_test
from .propensity import fit_propensity, stratify

SCHEMA_VERSION = "1.0"
METRICS = {"log_odds_ratio": "log_odds_ratio", "risk_difference": "difference"}
WEIGHT_MODES = ("analytic", "propensity", "stratified")


@dataclass
class AnalysisConfig:
    data: list[str] = field(default_factory=list)
    family: str = "bernoulli"
    metric: str = "log_odds_ratio"
    method: str = "parametric"
    weight_mode: str = "analytic"
    analytic_covariate: str | None = None
    target_shares: dict | None = None
    arm_specific: bool | None = None
    covariates: list[str] = field(default_factory=list)
    interactions: bool = False
    trim: list[float] | None = None
    strata: int = 5
    bootstrap_b: int = 2000
    seed: int = 0
    level: float = 0.95
    workers: int = 1
    se_source: str = "sandwich"
    mu_tc: float | None = None
    se_tc: float | None = None
    alpha: float = 0.025

    def __post_init__(self):
        if isinstance(self.data, (str, Path)):
            self.data = [str(self.data)]
        self.data = [str(p) for p in self.data]
        if isinstance(self.covariates, str):
            self.covariates = [c for c in self.covariates.split(",") if c]
        self.validate()

    def validate(self) -> None:
        if not self.data:
            raise ValidationError("no input data given")
        if self.family not in ("bernoulli", "gaussian"):
            raise ValidationError(f"unknown family {self.family!r}")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {', '.join(METRICS)}")
        if self.metric == "log_odds_ratio" and self.family != "bernoulli":
            raise ValidationError("log_odds_ratio needs bernoulli outcomes")
        if self.method not in ("parametric", "nonparametric"):
            raise ValidationError("method must be parametric or nonparametric")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValidationError(f"weight_mode must be exactly one of {', '.join(WEIGHT_MODES)}")
        if self.weight_mode == "analytic" and not self.analytic_covariate:
            raise ValidationError("analytic weights need analytic_covariate")
        if self.weight_mode in ("propensity", "stratified") and not self.covariates:
            raise ValidationError(f"{self.weight_mode} weights need a covariate list")
        if self.trim is not None and len(self.trim) != 2:
            raise ValidationError("trim needs two bounds")
        if self.weight_mode == "stratified" and self.strata < 1:
            raise ValidationError("strata must be at least 1")
        if self.bootstrap_b and self.bootstrap_b < 100:
            raise ValidationError("bootstrap_b must be 0 (off) or at least 100")
        if self.se_source not in ("sandwich", "bootstrap"):
            raise ValidationError("se_source must be sandwich or bootstrap")
        if self.se_source == "bootstrap" and not self.bootstrap_b:
            raise ValidationError("se_source=bootstrap needs bootstrap_b > 0")
        if (self.mu_tc is None) != (self.se_tc is None):
            raise ValidationError("give both mu_tc and se_tc, or neither")

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "AnalysisConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ValidationError("config file must hold a JSON object")
        # relative data paths resolve against the config file's directory
        base = Path(path).parent
        if "data" in d:
            data = [d["data"]] if isinstance(d["data"], str) else list(d["data"])
            d["data"] = [str(p if Path(p).is_absolute() else base / p) for p in data]
        d.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except NicalibError as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise
    except FileNotFoundError as exc:
        err = ValidationError(f"file not found: {exc.filename}")
        err.stage = name
        raise err from exc


def load_data(cfg: AnalysisConfig) -> PooledDataset:
    parts = [ingest(p, family=cfg.family) for p in cfg.data]
    return parts[0] if len(parts) == 1 else concat(parts)


def _recipe(cfg: AnalysisConfig):
    trim = tuple(cfg.trim) if cfg.trim is not None else None
    if cfg.weight_mode == "analytic":
        return AnalyticRecipe(
            cfg.analytic_covariate,
            cfg.target_shares,
            True if cfg.arm_specific is None else cfg.arm_specific,
            trim,
        )
    return PropensityRecipe(tuple(cfg.covariates), cfg.interactions, bool(cfg.arm_specific), trim)


def _arms(a0, a1) -> dict:
    return {"arm0": a0.to_dict(), "arm1": a1.to_dict()}


def _ni_block(mu_tc, se_tc, mu_cp, se_cp, alpha) -> dict:
    inputs = NiInputs(mu_tc, se_tc, mu_cp, se_cp, alpha)
    return {
        "inputs": dataclasses.asdict(inputs),
        "synthesis": synthesis_test(inputs).to_dict(),
        "fixed_margin": fixed_margin_test(inputs).to_dict(),
    }


def run_pipeline(cfg: AnalysisConfig) -> dict:
    """Run every stage and return the JSON-ready report.

    Any failure raises (tagged with ``.stage``); no partial report is built.
    """
    contrast = METRICS[cfg.metric]
    with stage("ingest"):
        pooled = load_data(cfg)
        if pooled.n_historical == 0:
            raise ValidationError("no historical-trial rows (trial = H) in the input")
        hist = pooled.historical()
        for a in (0, 1):
            if not np.any(hist.arm == a):
                raise ValidationError(f"historical trial has no arm {a} subjects")

    report: dict = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "nicalib", "version": __version__},
        "provenance": {
            "config_sha256": cfg.digest(),
            "inputs": [{"path": p, "sha256": file_sha256(p)} for p in cfg.data],
            "seed": cfg.seed,
            "rng": rng.RNG_ALGORITHM,
        },
        "config": cfg.to_dict(),
        "data": pooled.tallies(),
    }

    strat = None
    with stage("weights"):
        if cfg.weight_mode == "stratified":
            model = fit_propensity(pooled, cfg.covariates, cfg.interactions)
            ratio_all = model.ratio(pooled)
            assignment = stratify(ratio_all, pooled, cfg.strata)
            weights_block = {
                "mode": "stratified",
                "propensity": model.diagnostics(pooled),
                "ratio_summary": _summary(ratio_all[pooled.is_historical]),
                "strata": assignment.to_dict(),
            }
            strat = (model, assignment)
            hist_w = None
        else:
            recipe = _recipe(cfg)
            if cfg.weight_mode == "analytic":
                ws = recipe.weights(pooled)
                propensity = None
            else:
                ws, models = recipe.weights(pooled)
                propensity = [m.diagnostics(pooled) for m in models]
            hist_w = ws.values
            weights_block = {"mode": cfg.weight_mode, "summary": ws.summary(), "propensity": propensity}
            if cfg.weight_mode == "analytic":
                weights_block["shares"] = ws.meta
    report["weights"] = weights_block

    with stage("calibration"):
        kw = dict(contrast=contrast, method=cfg.method, family=cfg.family, seed=cfg.seed, workers=cfg.workers)
        u0, u1, unc = estimate_effect(hist.outcome, hist.arm, None, **kw)
        if strat is None:
            c0, c1, cal = estimate_effect(hist.outcome, hist.arm, hist_w, **kw)
            report["arms"] = {"uncalibrated": _arms(u0, u1), "calibrated": _arms(c0, c1)}
            stratified_block = None
        else:
            _, assignment = strat
            cal, combined = calibrate_stratified(
                hist.outcome, hist.arm, assignment.historical_stratum, assignment.shares_current,
                contrast, cfg.family,
            )
            report["arms"] = {"uncalibrated": _arms(u0, u1), "calibrated": None}
            stratified_block = combined.to_dict()
        report["effect"] = {
            "uncalibrated": unc.to_dict(),
            "calibrated": cal.to_dict(),
            "stratified": stratified_block,
            "bootstrap": None,
        }

    boot = None
    if cfg.bootstrap_b and strat is None:
        with stage("bootstrap"):
            recipe = _recipe(cfg)
            if cfg.weight_mode == "analytic":
                recipe = FixedWeights(pooled, hist_w)
            boot = bootstrap_effect(
                pooled, recipe, contrast, cfg.method, cfg.family,
                B=cfg.bootstrap_b, seed=cfg.seed, level=cfg.level, workers=cfg.workers,
            )
            report["effect"]["bootstrap"] = {
                **boot.to_dict(),
                "weights": "refit per replicate" if getattr(recipe, "refit", False) else "fixed",
            }

    with stage("ni_test"):
        ni = _ni_inputs(cfg, pooled, contrast)
        if ni is None:
            report["ni"] = None
        else:
            mu_tc, se_tc, source = ni
            use_boot = cfg.se_source == "bootstrap" and boot is not None
            se_cp = boot.std_error if use_boot else cal.std_error
            report["ni"] = {
                "mu_tc_source": source,
                "se_cp_source": "bootstrap" if use_boot else cal.variance_source,
                "unadjusted": _ni_block(mu_tc, se_tc, unc.estimate, unc.std_error, cfg.alpha),
                "adjusted": _ni_block(mu_tc, se_tc, cal.estimate, se_cp, cfg.alpha),
                "stratified": None,
            }
            if strat is not None and pooled.n_current:
                report["ni"]["stratified"] = _stratified_ni(cfg, pooled, strat[1], contrast)
    return report


def _summary(v: np.ndarray) -> dict:
    s2 = float(np.sum(v**2))
    return {
        "n": int(v.size),
        "min": float(v.min()),
        "max": float(v.max()),
        "mean": float(v.mean()),
        "effective_sample_size": float(v.sum()) ** 2 / s2 if s2 else 0.0,
    }


def _ni_inputs(cfg: AnalysisConfig, pooled: PooledDataset, contrast: str):
    if cfg.mu_tc is not None:
        return float(cfg.mu_tc), float(cfg.se_tc), "config"
    cur = pooled.current()
    if len(cur) == 0:
        return None
    if not (np.any(cur.arm == 0) and np.any(cur.arm == 1)):
        raise ValidationError("current trial needs both arms to estimate mu_tc")
    _, _, eff = estimate_effect(cur.outcome, cur.arm, None, contrast, "parametric", cfg.family)
    return eff.estimate, eff.std_error, "current_trial_data"


def _stratified_ni(cfg, pooled, assignment, contrast) -> dict:
    cur = pooled.is_current
    L = assignment.n_strata
    gamma, v_cur = stratum_effects(
        pooled.outcome[cur], pooled.arm[cur], assignment.stratum[cur], L, contrast, cfg.family
    )
    hist_effects, v_hist = stratum_effects(
        pooled.outcome[~cur], pooled.arm[~cur], assignment.stratum[~cur], L, contrast, cfg.family
    )
    # beta_l is the control-vs-placebo effect, the negative of the placebo-vs-control contrast
    beta = -hist_effects
    res = stratified_test(gamma, v_cur, beta, v_hist, assignment.shares_current, cfg.alpha)
    return {
        **res.to_dict(),
        "gamma": gamma.tolist(),
        "var_current": v_cur.tolist(),
        "beta": beta.tolist(),
        "var_historical": v_hist.tolist(),
        "weights": assignment.shares_current.tolist(),
    }


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"
