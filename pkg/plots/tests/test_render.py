"""Rendering tests: schema validation, panel mapping, output determinism."""

import subprocess
import sys

import pytest

from rfcal_plots.render import (FigureSpec, SchemaError, main, panel_column,
                                read_csv, render)

THEORY_CSV = """\
# schema=rfcal-theory-v1
p_over_n,alpha,gamma,estimator,lambda_rule,lam,gen_error,cal_0.75,condvar_0.75,status
0.5,2,1,erm,fixed,0.01,0.444,0.219,0.0021,ok
1,1,2,erm,fixed,0.01,0.436,0.217,0.0023,ok
2,0.5,4,erm,fixed,0.01,0.431,0.215,0.0024,ok
0.5,2,1,bo,fixed,,0.443,1e-11,0,ok
1,1,2,bo,fixed,,0.434,1e-11,0,ok
2,0.5,4,bo,fixed,,0.430,1e-11,0,ok
"""

MC_CSV = """\
# schema=rfcal-mc-v1
p_over_n,estimator,lam,d,trials,gen_error_mean,gen_error_se,cal_0.75_mean,cal_0.75_se,status
0.5,erm,0.01,200,30,0.4441,0.0017,0.2119,0.0034,ok
1,erm,0.01,200,30,0.4370,0.0021,0.2155,0.0032,ok
2,erm,0.01,200,30,0.4327,0.0019,0.2183,0.0037,ok
"""


@pytest.fixture
def csvs(tmp_path):
    theory = tmp_path / "theory.csv"
    theory.write_text(THEORY_CSV)
    points = tmp_path / "mc.csv"
    points.write_text(MC_CSV)
    return theory, points


class TestReadCsv:
    def test_reads_schema_and_rows(self, csvs):
        theory, _ = csvs
        schema, header, rows = read_csv(theory)
        assert schema == "rfcal-theory-v1"
        assert rows[0]["estimator"] == "erm"
        assert len(rows) == 6

    def test_rejects_missing_schema(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError, match="schema"):
            read_csv(bad)

    def test_rejects_unknown_schema(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("# schema=rfcal-theory-v99\na,b\n1,2\n")
        with pytest.raises(SchemaError, match="unsupported"):
            read_csv(bad)


class TestPanelMapping:
    def test_columns(self):
        assert panel_column("gen_error") == "gen_error"
        assert panel_column("calibration@0.75") == "cal_0.75"
        assert panel_column("cond_variance@0.9") == "condvar_0.9"
        assert panel_column("hessian_trace") == "hessian_trace"

    def test_missing_column_lists_available(self, csvs):
        theory, _ = csvs
        spec = FigureSpec(theory=str(theory), panels=("hessian_trace",),
                          out_dir=str(theory.parent))
        with pytest.raises(SchemaError, match="available"):
            render(spec)


class TestRender:
    def test_three_panel_figure_with_points(self, csvs, tmp_path):
        theory, points = csvs
        spec = FigureSpec(theory=str(theory), points=str(points),
                          out_dir=str(tmp_path / "out"), stem="fig1")
        written = render(spec)
        assert len(written) == 1
        assert written[0].name == "fig1.png"
        assert written[0].stat().st_size > 10_000

    def test_byte_stable_across_reruns(self, csvs, tmp_path):
        theory, points = csvs
        outputs = []
        for run in ("a", "b"):
            spec = FigureSpec(theory=str(theory), points=str(points),
                              out_dir=str(tmp_path / run), stem="fig1")
            outputs.append(render(spec)[0].read_bytes())
        assert outputs[0] == outputs[1]

    def test_theory_only(self, csvs, tmp_path):
        theory, _ = csvs
        spec = FigureSpec(theory=str(theory), out_dir=str(tmp_path / "out"))
        assert render(spec)[0].exists()

    def test_per_panel_files(self, csvs, tmp_path):
        theory, points = csvs
        spec = FigureSpec(theory=str(theory), points=str(points),
                          out_dir=str(tmp_path / "out"), combined=False)
        written = render(spec)
        assert [p.name for p in written] == [
            "figure_gen_error.png",
            "figure_calibration_0.75.png",
            "figure_cond_variance_0.75.png",
        ]


class TestCli:
    def test_main_success(self, csvs, tmp_path, capsys):
        theory, points = csvs
        code = main(["--theory", str(theory), "--points", str(points),
                     "--out", str(tmp_path / "out"), "--stem", "fig1"])
        assert code == 0
        assert "fig1.png" in capsys.readouterr().out

    def test_main_schema_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("nope\n")
        code = main(["--theory", str(bad), "--out", str(tmp_path)])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_console_entry_point(self, csvs, tmp_path):
        theory, _ = csvs
        proc = subprocess.run(
            [sys.executable, "-m", "rfcal_plots.render", "--theory",
             str(theory), "--out", str(tmp_path / "out")],
            capture_output=True, text=True)
        assert proc.returncode == 0


class TestEndToEnd:
    def test_render_real_sweep_output(self, tmp_path):
        # Full pipeline when the solver package is available: generate a
        # small theory sweep and MC sweep through its CLI, then render a
        # three-panel figure from the CSVs alone, byte-stable across reruns.
        rfcal_cli = pytest.importorskip("rfcal.cli")
        theory = tmp_path / "theory.csv"
        points = tmp_path / "mc.csv"
        assert rfcal_cli.main(["theory-sweep", "--grid", "0.5,1,2",
                               "--estimators", "erm,bo",
                               "--out", str(theory)]) == 0
        assert rfcal_cli.main(["mc-sweep", "--grid", "0.5,1,2",
                               "--estimators", "erm", "--d", "50",
                               "--trials", "3", "--n-test", "500",
                               "--out", str(points)]) == 0
        renders = []
        for run in ("a", "b"):
            spec = FigureSpec(theory=str(theory), points=str(points),
                              out_dir=str(tmp_path / run), stem="fig1")
            renders.append(render(spec)[0].read_bytes())
        assert renders[0] == renders[1]
        assert len(renders[0]) > 10_000
