import json
import math

import numpy as np
import pytest

from nicalib.cli import main
from nicalib.data import ingest, parse_csv
from nicalib.datasets import table1_pool
from nicalib.errors import IngestError
from nicalib.pipeline import AnalysisConfig, run_pipeline

HEADER = "subject_id,trial,arm,outcome,bpd\n"


@pytest.fixture(scope="module")
def table1_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "table1.csv"
    assert main(["simulate", "--table1", "--out", str(path)]) == 0
    return path


def _calibrate(table1_csv, out, *extra):
    return main([
        "calibrate", "--data", str(table1_csv), "--weight-mode", "analytic",
        "--analytic-covariate", "bpd", "--target-share", "1=0.22", "--target-share", "0=0.78",
        "--mu-tc", "0.31", "--se-tc", "0.20", "--bootstrap-b", "200", "--out", str(out), *extra,
    ])


class TestIngest:
    def test_table1_tallies(self, table1_csv):
        hist = ingest(table1_csv).historical()
        t = hist.tallies()
        assert t["n_rows"] == 1502
        bpd = hist.covariate("bpd")
        n = [int(np.sum((hist.arm == a) & (bpd == x))) for a, x in ((0, 1), (0, 0), (1, 1), (1, 0))]
        e = [int(hist.outcome[(hist.arm == a) & (bpd == x)].sum()) for a, x in ((0, 1), (0, 0), (1, 1), (1, 0))]
        assert n == [266, 234, 496, 506]
        assert e == [34, 19, 39, 9]

    def test_cli_echo(self, table1_csv, tmp_path, capsys):
        assert main(["ingest-check", "--data", str(table1_csv)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["n_rows"] == 1502 + 6635
        assert out["cells"]["H0"] == {"n": 500, "outcome_sum": 53.0}

    def test_empty_file(self):
        with pytest.raises(IngestError, match="header"):
            parse_csv("")

    def test_unknown_arm_names_row(self):
        with pytest.raises(IngestError, match="row 3"):
            parse_csv(HEADER + "a,H,0,1,1\nb,H,2,0,1\n")

    @pytest.mark.parametrize("body,pattern", [
        ("a,H,0,1,1\na,H,1,0,1\n", "duplicate subject_id"),
        ("a,X,0,1,1\n", "trial code"),
        ("a,H,0,2,1\n", "not binary"),
        ("a,H,0,1,\n", "missing value"),
        ("a,H,0,1\n", "fields"),
    ])
    def test_row_errors(self, body, pattern):
        with pytest.raises(IngestError, match=pattern) as err:
            parse_csv(HEADER + body)
        assert err.value.row is not None

    def test_missing_column(self):
        with pytest.raises(IngestError, match="outcome"):
            parse_csv("subject_id,trial,arm,bpd\na,H,0,1\n")

    def test_gaussian_outcomes(self):
        pool = parse_csv(HEADER + "a,H,0,2.5,1\nb,C,1,-1,0\n", family="gaussian")
        assert pool.outcome.tolist() == [2.5, -1.0]

    def test_byte_order_mark(self, tmp_path):
        p = tmp_path / "bom.csv"
        p.write_bytes(b"\xef\xbb\xbf" + (HEADER + "a,H,0,1,1\n").encode())
        assert len(ingest(p)) == 1

    def test_round_trip(self, tmp_path):
        pool = table1_pool()
        p = tmp_path / "pool.csv"
        pool.to_csv(p)
        back = ingest(p)
        np.testing.assert_array_equal(back.outcome, pool.outcome)
        np.testing.assert_array_equal(back.covariates, pool.covariates)


class TestExitCodes:
    def test_success(self, table1_csv, tmp_path):
        assert _calibrate(table1_csv, tmp_path / "r.json") == 0

    def test_validation_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text(HEADER + "a,H,7,1,1\n")
        assert main(["ingest-check", "--data", str(bad)]) == 1
        assert "row 2" in capsys.readouterr().err

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["calibrate", "--weight-mode", "bogus"])
        assert err.value.code == 1

    def test_missing_file(self, tmp_path):
        assert main(["ingest-check", "--data", str(tmp_path / "nope.csv")]) == 1

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": "x.csv", "weight_mode": "analytic", "colour": 1}))
        assert main(["calibrate", "--config", str(cfg)]) == 1

    def test_numerical_error(self, tmp_path, capsys):
        # trial membership is a deterministic function of x: propensity separation
        rows = [f"h{i},H,{i % 2},{i % 3 == 0:d},0" for i in range(40)]
        rows += [f"c{i},C,{i % 2},{i % 5 == 0:d},1" for i in range(40)]
        p = tmp_path / "sep.csv"
        p.write_text("subject_id,trial,arm,outcome,x\n" + "\n".join(rows) + "\n")
        code = main(["calibrate", "--data", str(p), "--weight-mode", "propensity", "--covariates", "x",
                     "--bootstrap-b", "0"])
        assert code == 2
        err = capsys.readouterr().err
        assert "[weights]" in err and "SeparationError" in err

    def test_no_partial_report(self, tmp_path):
        out = tmp_path / "r.json"
        p = tmp_path / "sep.csv"
        rows = [f"h{i},H,{i % 2},1,0" for i in range(10)] + [f"c{i},C,{i % 2},0,1" for i in range(10)]
        p.write_text("subject_id,trial,arm,outcome,x\n" + "\n".join(rows) + "\n")
        assert main(["calibrate", "--data", str(p), "--weight-mode", "propensity", "--covariates", "x",
                     "--bootstrap-b", "0", "--out", str(out)]) == 2
        assert not out.exists()


class TestPipeline:
    def test_reproduces_reference_values(self, table1_csv, tmp_path):
        out = tmp_path / "r.json"
        assert _calibrate(table1_csv, out) == 0
        r = json.loads(out.read_text())
        assert r["schema_version"] == "1.0"
        assert round(r["effect"]["calibrated"]["estimate"], 2) == 1.14
        assert round(r["effect"]["uncalibrated"]["estimate"], 2) == 0.86
        adj = r["ni"]["adjusted"]
        assert round(adj["synthesis"]["statistic"], 1) == 4.5
        assert round(adj["fixed_margin"]["statistic"], 1) == 3.2
        assert r["weights"]["summary"]["provenance"] == "analytic_ratio"
        assert {"config_sha256", "seed", "rng"} <= set(r["provenance"])
        assert r["effect"]["calibrated"]["variance_source"] == "sandwich"

    def test_byte_identical(self, table1_csv, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert _calibrate(table1_csv, a, "--workers", "1") == 0
        assert _calibrate(table1_csv, b, "--workers", "3") == 0
        # worker count is part of the echoed config; everything else must match
        assert _strip_workers(a) == _strip_workers(b)
        c = tmp_path / "c.json"
        assert _calibrate(table1_csv, c, "--workers", "1") == 0
        assert a.read_bytes() == c.read_bytes()

    def test_equal_shares_reproduce_uncalibrated(self, table1_csv, tmp_path):
        hist = ingest(table1_csv).historical()
        share = float(hist.covariate("bpd").mean())
        out = tmp_path / "eq.json"
        code = main([
            "calibrate", "--data", str(table1_csv), "--weight-mode", "analytic",
            "--analytic-covariate", "bpd", "--no-arm-specific",
            "--target-share", f"1={share!r}", "--target-share", f"0={1 - share!r}",
            "--bootstrap-b", "0", "--out", str(out),
        ])
        assert code == 0
        r = json.loads(out.read_text())
        for key in ("estimate", "se"):
            assert r["effect"]["calibrated"][key] == pytest.approx(r["effect"]["uncalibrated"][key], rel=1e-9)
        for a in ("arm0", "arm1"):
            assert r["arms"]["calibrated"][a]["estimate"] == pytest.approx(
                r["arms"]["uncalibrated"][a]["estimate"], rel=1e-9)

    def test_config_file_with_overrides(self, table1_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "data": table1_csv.name, "weight_mode": "analytic", "analytic_covariate": "bpd",
            "target_shares": {"1": 0.22, "0": 0.78}, "bootstrap_b": 0,
        }))
        (tmp_path / table1_csv.name).write_bytes(table1_csv.read_bytes())
        out = tmp_path / "r.json"
        assert main(["calibrate", "--config", str(cfg), "--metric", "risk_difference", "--out", str(out)]) == 0
        r = json.loads(out.read_text())
        assert r["config"]["metric"] == "risk_difference"
        p0 = 0.22 * 34 / 266 + 0.78 * 19 / 234
        p1 = 0.22 * 39 / 496 + 0.78 * 9 / 506
        assert r["effect"]["calibrated"]["estimate"] == pytest.approx(p0 - p1, abs=1e-9)

    def test_simulated_pool_smoke(self, tmp_path):
        sim = tmp_path / "sim.csv"
        assert main(["simulate", "--seed", "3", "--out", str(sim)]) == 0
        out = tmp_path / "p.json"
        assert main(["calibrate", "--data", str(sim), "--weight-mode", "propensity",
                     "--covariates", "bpd,x1,x2,x3", "--bootstrap-b", "200", "--out", str(out)]) == 0
        r = json.loads(out.read_text())
        # frozen from the first pinned run
        assert r["effect"]["calibrated"]["estimate"] == pytest.approx(1.324480787591221, rel=1e-9)
        assert r["effect"]["calibrated"]["se"] == pytest.approx(0.26025041867208293, rel=1e-9)
        assert r["effect"]["bootstrap"]["se"] == pytest.approx(0.24891495710048891, rel=1e-9)
        assert r["ni"]["adjusted"]["synthesis"]["statistic"] == pytest.approx(5.387617380329661, rel=1e-9)
        assert "fixed_margin" in r["ni"]["adjusted"]
        assert r["weights"]["propensity"][0]["converged"]

    def test_stratified_mode(self, tmp_path):
        sim = tmp_path / "sim.csv"
        main(["simulate", "--seed", "3", "--out", str(sim)])
        out = tmp_path / "s.json"
        assert main(["calibrate", "--data", str(sim), "--weight-mode", "stratified",
                     "--covariates", "bpd,x1,x2,x3", "--strata", "5", "--out", str(out)]) == 0
        r = json.loads(out.read_text())
        st = r["ni"]["stratified"]
        assert len(st["gamma"]) == 5
        assert st["raw_ratio"] is not None
        assert sum(r["weights"]["strata"]["shares_current"]) == pytest.approx(1.0, abs=1e-12)


class TestOtherCommands:
    def test_test_from_flags(self, capsys):
        assert main(["test", "--mu-tc", "0.31", "--se-tc", "0.20", "--mu-cp", "0.86", "--se-cp", "0.21"]) == 0
        r = json.loads(capsys.readouterr().out)
        assert round(r["synthesis"]["statistic"], 1) == 4.0
        assert round(r["fixed_margin"]["statistic"], 1) == 2.9

    def test_test_from_report(self, table1_csv, tmp_path, capsys):
        rep = tmp_path / "r.json"
        _calibrate(table1_csv, rep)
        assert main(["test", "--report", str(rep)]) == 0
        r = json.loads(capsys.readouterr().out)
        assert round(r["synthesis"]["statistic"], 1) == 4.5

    def test_test_missing_inputs(self):
        assert main(["test", "--mu-tc", "0.31"]) == 1

    def test_propensity_command(self, tmp_path, capsys):
        sim = tmp_path / "sim.csv"
        main(["simulate", "--seed", "1", "--out", str(sim)])
        capsys.readouterr()
        assert main(["propensity", "--data", str(sim), "--covariates", "bpd,x1", "--trim", "0.2", "3"]) == 0
        r = json.loads(capsys.readouterr().out)
        assert r["weights"]["provenance"] == "trimmed"
        assert 0.2 <= r["weights"]["min"] <= r["weights"]["max"] <= 3

    def test_replicate_command(self, tmp_path):
        out = tmp_path / "rep.json"
        assert main(["replicate", "--replications", "5", "--n-historical", "300", "--n-current", "600",
                     "--out", str(out)]) == 0
        r = json.loads(out.read_text())
        assert r["replications"] == 5 and "rng" in r


def _strip_workers(path):
    r = json.loads(path.read_text())
    r["config"].pop("workers")
    r["provenance"].pop("config_sha256")
    return r
