"""Command-line interface tests: schemas, determinism, formats, exit codes."""

import json

import numpy as np
import pytest

from rfcal.cli import PRESETS, main


def run(argv):
    return main(argv)


class TestTheorySweep:
    def theory(self, tmp_path, extra=()):
        out = tmp_path / "theory.csv"
        code = run(["theory-sweep", "--grid", "1.0", "--estimators", "erm,bo",
                    "--out", str(out), *extra])
        return code, out

    def test_schema_and_rows(self, tmp_path):
        code, out = self.theory(tmp_path)
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=rfcal-theory-v1"
        header = lines[1].split(",")
        assert header[:4] == ["p_over_n", "alpha", "gamma", "estimator"]
        assert "gen_error" in header and "status" in header
        rows = [dict(zip(header, ln.split(","))) for ln in lines[2:]]
        assert [r["estimator"] for r in rows] == ["erm", "bo"]
        assert all(r["status"] == "ok" for r in rows)
        # bo is calibrated: every cal_* column vanishes.
        bo = rows[1]
        for k in header:
            if k.startswith("cal_"):
                assert abs(float(bo[k])) < 1e-6

    def test_byte_deterministic(self, tmp_path):
        _, out1 = self.theory(tmp_path)
        first = out1.read_bytes()
        out1.unlink()
        _, out2 = self.theory(tmp_path)
        assert out2.read_bytes() == first

    def test_json_format(self, tmp_path):
        out = tmp_path / "theory.json"
        code = run(["theory-sweep", "--grid", "1.0", "--estimators", "erm",
                    "--format", "json", "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["schema"] == "rfcal-theory-v1"
        assert payload["rows"][0]["estimator"] == "erm"

    def test_stdout_default(self, capsys):
        code = run(["theory-sweep", "--grid", "1.0", "--estimators", "erm"])
        assert code == 0
        captured = capsys.readouterr().out
        assert captured.startswith("# schema=rfcal-theory-v1")

    def test_config_overrides_preset(self, tmp_path):
        cfg = tmp_path / "scenario.toml"
        cfg.write_text('n_over_d = 5.0\ntau0 = 0.0\n')
        out = tmp_path / "theory.csv"
        code = run(["theory-sweep", "--config", str(cfg), "--grid", "1.0",
                    "--estimators", "erm", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        row = dict(zip(lines[1].split(","), lines[2].split(",")))
        assert float(row["gamma"]) == pytest.approx(5.0)  # p/d = (p/n)(n/d)

    def test_empty_estimators_is_usage_error(self):
        assert run(["theory-sweep", "--estimators", ""]) == 2


class TestMcSweep:
    def test_small_sweep(self, tmp_path):
        out = tmp_path / "mc.csv"
        code = run(["mc-sweep", "--grid", "1.0", "--estimators", "erm",
                    "--d", "40", "--trials", "3", "--n-test", "500",
                    "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=rfcal-mc-v1"
        header = lines[1].split(",")
        row = dict(zip(header, lines[2].split(",")))
        assert row["status"] == "ok"
        assert 0.0 < float(row["gen_error_mean"]) < 0.5
        assert float(row["gen_error_se"]) > 0

    def test_seed_determinism(self, tmp_path):
        args = ["mc-sweep", "--grid", "1.0", "--estimators", "erm",
                "--d", "30", "--trials", "2", "--n-test", "200", "--seed", "5"]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(args + ["--out", str(a)])
        run(args + ["--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestHyperopt:
    def test_criterion_error(self, tmp_path):
        out = tmp_path / "hyper.csv"
        code = run(["hyperopt", "--grid", "1.0", "--criterion", "error",
                    "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=rfcal-hyperopt-v1"
        row = dict(zip(lines[1].split(","), lines[2].split(",")))
        assert row["status"] == "ok"
        assert 1e-6 < float(row["lambda_star"]) < 1e3


class TestGampRun:
    def test_trace_file(self, tmp_path):
        out = tmp_path / "trace.csv"
        code = run(["gamp-run", "--d", "40", "--p-over-n", "1.0",
                    "--lam", "0.1", "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# rfcal-gamp-trace-v1"
        assert float(lines[-1].split(",")[1]) < 1e-7  # converged residual


class TestCompare:
    def test_joined_deviations(self, tmp_path):
        theory = tmp_path / "theory.csv"
        points = tmp_path / "mc.csv"
        run(["theory-sweep", "--grid", "1.0", "--estimators", "erm",
             "--out", str(theory)])
        run(["mc-sweep", "--grid", "1.0", "--estimators", "erm",
             "--d", "60", "--trials", "4", "--n-test", "2000",
             "--out", str(points)])
        out = tmp_path / "cmp.csv"
        code = run(["compare", "--theory", str(theory), "--points", str(points),
                    "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# schema=rfcal-compare-v1"
        header = lines[1].split(",")
        rows = [dict(zip(header, ln.split(","))) for ln in lines[2:]]
        assert {r["metric"] for r in rows} >= {"gen_error", "gen_loss"}
        assert all(np.isfinite(float(r["deviation_se"])) for r in rows)


class TestUsageErrors:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_preset(self):
        with pytest.raises(SystemExit) as exc:
            run(["theory-sweep", "--preset", "fig99"])
        assert exc.value.code == 2

    def test_presets_registered(self):
        assert set(PRESETS) == {"fig1", "fig2", "appE1", "appE2"}
