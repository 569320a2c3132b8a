"""``nicalib`` command line.

Exit codes: 0 success, 1 validation error (bad input, config or usage),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import ingest
from .datasets import table1_pool
from .errors import NicalibError, NumericalError, ValidationError
from .ni_test import NiInputs, fixed_margin_test, synthesis_test
from .pipeline import AnalysisConfig, dumps, run_pipeline, stage
from .rng import RNG_ALGORITHM
from .propensity import arm_specific_propensity_weights, fit_propensity, propensity_weights, stratify, trim_weights
from .sim import AnalysisSpec, SimConfig, generate_pool, run_replication_study

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _shares(items):
    if not items:
        return None
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--target-share expects CATEGORY=SHARE, got {item!r}")
        try:
            out[key] = float(value)
        except ValueError:
            raise ValidationError(f"share {value!r} is not a number") from None
    return out


def _emit(payload: dict, out: str | None) -> None:
    text = dumps(payload)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_ingest_check(args) -> dict:
    with stage("ingest"):
        family = None if args.family == "any" else args.family
        return {"file": args.data, **ingest(args.data, family=family).tallies()}


def cmd_propensity(args) -> dict:
    with stage("ingest"):
        pooled = ingest(args.data, family=None)
    covariates = [c for c in args.covariates.split(",") if c]
    with stage("propensity"):
        if args.arm_specific:
            ws, models = arm_specific_propensity_weights(pooled, covariates, args.interactions)
        else:
            model = fit_propensity(pooled, covariates, args.interactions)
            ws, models = propensity_weights(model, pooled), [model]
        if args.trim:
            ws = trim_weights(ws, *args.trim)
        out = {
            "models": [m.diagnostics(pooled) for m in models],
            "weights": ws.summary(),
        }
        if args.strata:
            out["strata"] = stratify(models[0].ratio(pooled), pooled, args.strata).to_dict()
    return out


def _config(args) -> AnalysisConfig:
    overrides = {
        "data": args.data,
        "family": args.family,
        "metric": args.metric,
        "method": args.method,
        "weight_mode": args.weight_mode,
        "analytic_covariate": args.analytic_covariate,
        "target_shares": _shares(args.target_share),
        "covariates": args.covariates.split(",") if args.covariates else None,
        "interactions": True if args.interactions else None,
        "arm_specific": args.arm_specific,
        "trim": list(args.trim) if args.trim else None,
        "strata": args.strata,
        "bootstrap_b": args.bootstrap_b,
        "seed": args.seed,
        "level": args.level,
        "workers": args.workers,
        "se_source": args.se_source,
        "mu_tc": args.mu_tc,
        "se_tc": args.se_tc,
        "alpha": args.alpha,
    }
    if args.config:
        return AnalysisConfig.from_file(args.config, overrides)
    return AnalysisConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def cmd_calibrate(args) -> dict:
    with stage("config"):
        cfg = _config(args)
    return run_pipeline(cfg)


def cmd_test(args) -> dict:
    mu_tc, se_tc, mu_cp, se_cp, alpha = args.mu_tc, args.se_tc, args.mu_cp, args.se_cp, args.alpha
    if args.report:
        try:
            report = json.loads(Path(args.report).read_text(encoding="utf-8"))
            effect = report["effect"]["calibrated"]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"cannot read calibration report {args.report}: {exc}") from None
        mu_cp = effect["estimate"] if mu_cp is None else mu_cp
        se_cp = effect["se"] if se_cp is None else se_cp
        ni = report.get("ni") or {}
        prior = (ni.get("adjusted") or {}).get("inputs") or {}
        mu_tc = prior.get("mu_tc") if mu_tc is None else mu_tc
        se_tc = prior.get("se_tc") if se_tc is None else se_tc
    missing = [n for n, v in (("mu-tc", mu_tc), ("se-tc", se_tc), ("mu-cp", mu_cp), ("se-cp", se_cp)) if v is None]
    if missing:
        raise ValidationError(f"missing NI input(s): {', '.join('--' + m for m in missing)}")
    inputs = NiInputs(float(mu_tc), float(se_tc), float(mu_cp), float(se_cp), alpha)
    return {
        "inputs": inputs.__dict__,
        "synthesis": synthesis_test(inputs).to_dict(),
        "fixed_margin": fixed_margin_test(inputs).to_dict(),
    }


def _sim_config(args) -> SimConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read simulation config {args.config}: {exc}") from None
    for key in ("seed", "n_historical", "n_current"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    try:
        return SimConfig.from_dict(base)
    except TypeError as exc:
        raise ValidationError(f"bad simulation config: {exc}") from None


def cmd_simulate(args) -> dict:
    if args.table1:
        pool = table1_pool()
        source = "table1"
    else:
        cfg = _sim_config(args)
        pool = generate_pool(cfg)
        source = {"sim_config": cfg.to_dict()}
    pool.to_csv(args.out)
    return {"wrote": args.out, "source": source, **pool.tallies()}


def cmd_replicate(args) -> dict:
    cfg = _sim_config(args)
    spec = AnalysisSpec(
        covariates=tuple(args.covariates.split(",")) if args.covariates else AnalysisSpec.covariates,
        contrast="difference" if args.metric == "risk_difference" else "log_odds_ratio",
        arm_specific=args.arm_specific,
        trim=tuple(args.trim) if args.trim else None,
    )
    with stage("replicate"):
        summary = run_replication_study(cfg, args.replications, spec, workers=args.workers)
    return {
        "sim_config": cfg.to_dict(),
        "analysis": spec.__dict__,
        "rng": RNG_ALGORITHM,
        **summary.to_dict(),
    }


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nicalib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"nicalib {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest-check", help="validate a trial CSV and echo tallies")
    s.add_argument("--data", required=True)
    s.add_argument("--family", choices=["bernoulli", "gaussian", "any"], default="bernoulli")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest_check)

    s = sub.add_parser("propensity", help="fit the trial-membership model and summarise weights")
    s.add_argument("--data", required=True)
    s.add_argument("--covariates", required=True, help="comma-separated covariate columns")
    s.add_argument("--interactions", action="store_true")
    s.add_argument("--arm-specific", action="store_true")
    s.add_argument("--trim", nargs=2, type=float, metavar=("LOWER", "UPPER"))
    s.add_argument("--strata", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_propensity)

    s = sub.add_parser("calibrate", help="run the full calibration pipeline")
    s.add_argument("--config", help="JSON analysis config; flags override its keys")
    s.add_argument("--data", nargs="+")
    s.add_argument("--family", choices=["bernoulli", "gaussian"])
    s.add_argument("--metric", choices=["log_odds_ratio", "risk_difference"])
    s.add_argument("--method", choices=["parametric", "nonparametric"])
    s.add_argument("--weight-mode", choices=["analytic", "propensity", "stratified"])
    s.add_argument("--analytic-covariate")
    s.add_argument("--target-share", action="append", metavar="CATEGORY=SHARE")
    s.add_argument("--covariates")
    s.add_argument("--interactions", action="store_true")
    s.add_argument("--arm-specific", action=argparse.BooleanOptionalAction, default=None,
                   help="per-arm source shares or propensity models (analytic default: on)")
    s.add_argument("--trim", nargs=2, type=float, metavar=("LOWER", "UPPER"))
    s.add_argument("--strata", type=int)
    s.add_argument("--bootstrap-b", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--level", type=float)
    s.add_argument("--workers", type=int)
    s.add_argument("--se-source", choices=["sandwich", "bootstrap"])
    s.add_argument("--mu-tc", type=float)
    s.add_argument("--se-tc", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("test", help="noninferiority statistics from flags or a calibration report")
    s.add_argument("--report")
    s.add_argument("--mu-tc", type=float)
    s.add_argument("--se-tc", type=float)
    s.add_argument("--mu-cp", type=float)
    s.add_argument("--se-cp", type=float)
    s.add_argument("--alpha", type=float, default=0.025)
    s.add_argument("--out")
    s.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="write a simulated (or IMPACT/MOTA count) pool as CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON simulation config")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-historical", type=int)
    s.add_argument("--n-current", type=int)
    s.add_argument("--table1", action="store_true", help="write the reconstructed IMPACT/MOTA tables instead")
    s.add_argument("--summary-out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("replicate", help="Monte Carlo replication study")
    s.add_argument("--replications", type=int, default=500)
    s.add_argument("--config", help="JSON simulation config")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-historical", type=int)
    s.add_argument("--n-current", type=int)
    s.add_argument("--covariates")
    s.add_argument("--metric", choices=["log_odds_ratio", "risk_difference"], default="log_odds_ratio")
    s.add_argument("--arm-specific", action="store_true")
    s.add_argument("--trim", nargs=2, type=float, metavar=("LOWER", "UPPER"))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_replicate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        payload = args.func(args)
        out = getattr(args, "summary_out", None) if args.command == "simulate" else args.out
        _emit(payload, out)
    except NicalibError as exc:
        where = getattr(exc, "stage", None)
        prefix = f"[{where}] " if where else ""
        print(f"nicalib: {prefix}{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_VALIDATION
    except OSError as exc:
        print(f"nicalib: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
