"""Render the five experiment figures (ten images) from koport CSV outputs.

Rendering is read-only over the documented CSV schemas; all quantities are
precomputed by the solver pipeline.  Images are deterministic static PNGs.

Figure ids:
    1a  dual state vs the moving boundary, reflection events marked
    1b  singular control staircase
    1c  wealth path with reflections marked
    2   mean wealth, dynamic-factor vs frozen-factor agent
    3a/3b  investment / consumption cross-sections by labor income
    4a/4b  investment / consumption cross-sections by risk aversion
    5a/5b  investment / consumption cross-sections by excess-return level
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

__all__ = ["FigureSpec", "SchemaError", "render", "render_all", "main"]

_SCHEMAS = {
    "fig1_paths.csv": ["t", "beta", "z1", "d_star", "z_ctrl", "x_star",
                       "c_star", "pi_star", "reflect_flag", "z_star_t", "h"],
    "fig2_compare.csv": ["t", "agent", "mean_x", "se_x", "q05", "q50", "q95"],
    "fig3_labor.csv": ["x", "ell", "c_star", "pi_star"],
    "fig4_gamma.csv": ["x", "gamma", "c_star", "pi_star"],
    "fig5_beta.csv": ["x", "beta", "c_star", "pi_star"],
}

FIGURE_IDS = ("1a", "1b", "1c", "2", "3a", "3b", "4a", "4b", "5a", "5b")

_INPUT_FOR = {
    "1a": "fig1_paths.csv", "1b": "fig1_paths.csv", "1c": "fig1_paths.csv",
    "2": "fig2_compare.csv",
    "3a": "fig3_labor.csv", "3b": "fig3_labor.csv",
    "4a": "fig4_gamma.csv", "4b": "fig4_gamma.csv",
    "5a": "fig5_beta.csv", "5b": "fig5_beta.csv",
}


class SchemaError(RuntimeError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    figure_id: str
    csv_path: Path
    out_path: Path

    def __post_init__(self):
        if self.figure_id not in FIGURE_IDS:
            raise ValueError(f"unknown figure id {self.figure_id!r}")


def _load(spec: FigureSpec) -> pd.DataFrame:
    name = _INPUT_FOR[spec.figure_id]
    if not spec.csv_path.exists():
        raise SchemaError(f"missing input CSV: {spec.csv_path}")
    df = pd.read_csv(spec.csv_path)
    missing = [c for c in _SCHEMAS[name] if c not in df.columns]
    if missing:
        raise SchemaError(
            f"{spec.csv_path.name}: missing columns {missing} "
            f"(expected {_SCHEMAS[name]})")
    return df


def _new_axes():
    fig, ax = plt.subplots(figsize=(7.0, 4.2), dpi=130)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _mark_reflections(ax, df, ycol):
    events = df[df["reflect_flag"] > 0]
    if len(events):
        ax.scatter(events["t"], events[ycol], marker="v", s=28, zorder=5,
                   color="crimson", label=f"reflection ({len(events)})")


def render(spec: FigureSpec) -> Path:
    """Render one figure to PNG and return the output path."""
    df = _load(spec)
    fid = spec.figure_id
    fig, ax = _new_axes()

    if fid == "1a":
        ax.plot(df["t"], df["z_ctrl"], color="black", lw=1.0,
                label="controlled dual state")
        ax.plot(df["t"], df["z_star_t"], color="red", lw=1.2,
                label="stopping boundary")
        _mark_reflections(ax, df, "z_ctrl")
        ax.set_ylabel("dual state")
    elif fid == "1b":
        ax.step(df["t"], df["d_star"], where="post", color="tab:blue",
                label="singular control")
        _mark_reflections(ax, df, "d_star")
        ax.set_ylabel("D*")
        ax.set_ylim(0, 1.05)
    elif fid == "1c":
        ax.plot(df["t"], df["x_star"], color="tab:green", lw=1.0,
                label="wealth")
        _mark_reflections(ax, df, "x_star")
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.set_ylabel("wealth")
    elif fid == "2":
        for agent, color in (("stochastic", "tab:blue"), ("constant", "tab:red")):
            sub = df[df["agent"] == agent]
            if sub.empty:
                raise SchemaError(f"fig2 input has no rows for agent {agent!r}")
            ax.plot(sub["t"], sub["mean_x"], color=color, lw=1.4,
                    label=f"{agent} agent")
            ax.fill_between(sub["t"], sub["mean_x"] - 2 * sub["se_x"],
                            sub["mean_x"] + 2 * sub["se_x"], color=color,
                            alpha=0.15)
        ax.set_ylabel("mean wealth")
    else:
        by = {"3": "ell", "4": "gamma", "5": "beta"}[fid[0]]
        ycol = "pi_star" if fid[1] == "a" else "c_star"
        for val, sub in sorted(df.groupby(by)):
            ax.plot(sub["x"], sub[ycol], lw=1.3, label=f"{by}={val:g}")
        ax.set_xlabel("wealth")
        ax.set_ylabel("investment" if ycol == "pi_star" else "consumption")

    if fid in ("1a", "1b", "1c", "2"):
        ax.set_xlabel("time (years)")
    ax.legend(loc="best", fontsize=9)
    fig.tight_layout()
    spec.out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.out_path, metadata={"Software": None})
    plt.close(fig)
    return spec.out_path


def render_all(in_dir: Path, out_dir: Path) -> list[Path]:
    out = []
    for fid in FIGURE_IDS:
        spec = FigureSpec(figure_id=fid,
                          csv_path=Path(in_dir) / _INPUT_FOR[fid],
                          out_path=Path(out_dir) / f"fig{fid}.png")
        out.append(render(spec))
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="plotkit", description=__doc__)
    ap.add_argument("--in-dir", required=True,
                    help="directory with the pipeline CSV outputs")
    ap.add_argument("--out-dir", required=True, help="image output directory")
    ap.add_argument("--only", nargs="*", choices=FIGURE_IDS, default=None,
                    help="render a subset of figure ids")
    ns = ap.parse_args(argv)
    try:
        if ns.only:
            for fid in ns.only:
                spec = FigureSpec(figure_id=fid,
                                  csv_path=Path(ns.in_dir) / _INPUT_FOR[fid],
                                  out_path=Path(ns.out_dir) / f"fig{fid}.png")
                print(render(spec))
        else:
            for path in render_all(Path(ns.in_dir), Path(ns.out_dir)):
                print(path)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
