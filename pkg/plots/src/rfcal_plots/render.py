"""Render sweep figures from rfcal CSV outputs.

Theory rows (schema ``rfcal-theory-v1``) become lines keyed by
(estimator, λ-rule); Monte Carlo rows (schema ``rfcal-mc-v1``) become points
with ±1 SE error bars.  Rendering is deterministic: fixed style, no
timestamps or version strings embedded in the output files, and nothing is
recomputed — the figure shows exactly what the CSV contains.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

SUPPORTED_SCHEMAS = {"rfcal-theory-v1", "rfcal-mc-v1"}

#: Fixed style so identical CSVs render to identical bytes.
STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
    "svg.hashsalt": "rfcal",
}

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#7f7f7f")

PANEL_LABELS = {
    "gen_error": "test error",
    "gen_loss": "test loss",
    "ece": "ECE",
    "hessian_trace": r"$\varphi^\top H^{-1}\varphi$",
}


class SchemaError(ValueError):
    """Input CSV is not one of the supported sweep schemas."""


def read_csv(path) -> tuple[str, list[str], list[dict]]:
    """Read a sweep CSV: (schema, header, rows of {column: string})."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# schema="):
        raise SchemaError(f"{path}: missing '# schema=' header line")
    schema = lines[0].split("=", 1)[1].strip()
    if schema not in SUPPORTED_SCHEMAS:
        raise SchemaError(f"{path}: unsupported schema {schema!r}; "
                          f"supported: {sorted(SUPPORTED_SCHEMAS)}")
    header = lines[1].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[2:]]
    return schema, header, rows


def panel_column(panel: str) -> str:
    """Map a panel name to its CSV column (calibration@0.75 → cal_0.75)."""
    if panel.startswith("calibration@"):
        return "cal_%g" % float(panel.split("@", 1)[1])
    if panel.startswith("cond_variance@"):
        return "condvar_%g" % float(panel.split("@", 1)[1])
    return panel


def panel_label(panel: str) -> str:
    if panel.startswith("calibration@"):
        return f"calibration at level {float(panel.split('@', 1)[1]):g}"
    if panel.startswith("cond_variance@"):
        return f"conditional variance at level {float(panel.split('@', 1)[1]):g}"
    return PANEL_LABELS.get(panel, panel)


@dataclass(frozen=True)
class FigureSpec:
    """One figure request: CSV inputs, panel list, output styling."""

    theory: str
    points: str | None = None
    panels: tuple = ("gen_error", "calibration@0.75", "cond_variance@0.75")
    out_dir: str = "."
    stem: str = "figure"
    fmt: str = "png"
    combined: bool = True     # one file with len(panels) subplots, else one per panel


def _float(value: str) -> float:
    return float(value) if value not in ("", None) else math.nan


def _series_key(row: dict) -> tuple:
    rule = row.get("lambda_rule", "fixed")
    return (row["estimator"], rule)


def _draw_panel(ax, panel: str, theory_rows, mc_rows, colors) -> None:
    column = panel_column(panel)
    available = sorted(theory_rows[0].keys()) if theory_rows else []
    if theory_rows and column not in theory_rows[0]:
        raise SchemaError(f"panel {panel!r} needs column {column!r}; "
                          f"available: {available}")
    series = {}
    for row in theory_rows:
        series.setdefault(_series_key(row), []).append(row)
    for key, rows in sorted(series.items()):
        pts = sorted(((_float(r["p_over_n"]), _float(r[column])) for r in rows
                      if r[column] != ""), key=lambda t: t[0])
        if not pts:
            continue
        x, y = zip(*pts)
        est, rule = key
        label = est if rule == "fixed" else f"{est} (λ_{rule})"
        ax.plot(x, y, label=label, color=colors[key])
    for row in mc_rows:
        mean_col, se_col = f"{column}_mean", f"{column}_se"
        if mean_col not in row or row[mean_col] == "":
            continue
        key = (row["estimator"], row.get("lambda_rule", "fixed"))
        color = colors.get(key, "#333333")
        ax.errorbar([_float(row["p_over_n"])], [_float(row[mean_col])],
                    yerr=[_float(row[se_col])], fmt="o", ms=3.5,
                    capsize=2.5, color=color)
    if panel.startswith("calibration@"):
        level = float(panel.split("@", 1)[1])
        ax.axhline(0.0, color="k", lw=0.8, ls=":")
        ax.axhline(level - 0.5, color="k", lw=0.8, ls="--",
                   label=r"$\ell - 1/2$")
    ax.set_xlabel("p/n")
    ax.set_ylabel(panel_label(panel))
    ax.set_xscale("log")
    ax.legend(fontsize=7)


def render(spec: FigureSpec) -> list[Path]:
    """Render the figure(s); returns the written paths."""
    _, _, theory_rows = read_csv(spec.theory)
    mc_rows = []
    if spec.points:
        schema, _, mc_rows = read_csv(spec.points)
        if schema != "rfcal-mc-v1":
            raise SchemaError(f"{spec.points}: expected rfcal-mc-v1, got {schema}")
    keys = sorted({_series_key(r) for r in theory_rows}
                  | {(_series_key(r)) for r in mc_rows})
    colors = {k: PALETTE[i % len(PALETTE)] for i, k in enumerate(keys)}
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    save_kwargs = {"metadata": _stripped_metadata(spec.fmt)}
    with plt.rc_context(STYLE):
        if spec.combined:
            fig, axes = plt.subplots(1, len(spec.panels),
                                     figsize=(3.6 * len(spec.panels), 3.0))
            axes = np.atleast_1d(axes)
            for ax, panel in zip(axes, spec.panels):
                _draw_panel(ax, panel, theory_rows, mc_rows, colors)
            fig.tight_layout()
            path = out_dir / f"{spec.stem}.{spec.fmt}"
            fig.savefig(path, **save_kwargs)
            plt.close(fig)
            written.append(path)
        else:
            for panel in spec.panels:
                fig, ax = plt.subplots(figsize=(3.8, 3.0))
                _draw_panel(ax, panel, theory_rows, mc_rows, colors)
                fig.tight_layout()
                name = panel.replace("@", "_")
                path = out_dir / f"{spec.stem}_{name}.{spec.fmt}"
                fig.savefig(path, **save_kwargs)
                plt.close(fig)
                written.append(path)
    return written


def _stripped_metadata(fmt: str) -> dict:
    """Suppress writer-version/timestamp chunks for byte-stable output."""
    if fmt == "png":
        return {"Software": None}
    if fmt == "pdf":
        return {"Creator": None, "Producer": None, "CreationDate": None}
    if fmt == "svg":
        return {"Date": None}
    return {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="render",
        description="Render sweep figures from rfcal theory/MC CSVs.")
    parser.add_argument("--theory", required=True, help="rfcal-theory-v1 CSV")
    parser.add_argument("--points", help="rfcal-mc-v1 CSV (optional)")
    parser.add_argument("--panels",
                        default="gen_error,calibration@0.75,cond_variance@0.75",
                        help="comma-separated panel list")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--stem", default="figure", help="output file stem")
    parser.add_argument("--format", choices=("png", "pdf", "svg"), default="png")
    parser.add_argument("--per-panel", action="store_true",
                        help="one file per panel instead of a combined figure")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(theory=args.theory, points=args.points,
                      panels=tuple(p.strip() for p in args.panels.split(",") if p.strip()),
                      out_dir=args.out, stem=args.stem, fmt=args.format,
                      combined=not args.per_panel)
    try:
        written = render(spec)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":          # pragma: no cover
    sys.exit(main())
