"""CSV tables and SVG figures for every experiment command"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Sequence

import pandas as pd
import plotly.graph_objects as go

from .errors import ConfigError, ReportError

logger = logging.getLogger(__name__)

FINETUNE_COLUMNS = ["config_hash", "method", "task", "seed", "epoch", "dev_accuracy", "best_dev_accuracy",
                    "fp_total", "bp_total", "xfp_total", "wall_seconds"]
PROBE_COLUMNS = ["config_hash", "method", "stage_index", "stage_task", "probe_task", "cycle", "seed", "accuracy"]
THEORY_COLUMNS = ["trial", "dim", "out_dim", "det_abs", "kl_repr", "kl_output", "relation",
                  "kl_projected", "projected_relation", "passed"]


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


class ReportGenerator:
    """Builds the CSV tables and SVG figures of every experiment command"""

    def __init__(self, width: int = 900, height: int = 500):
        self.width = width
        self.height = height

    # ------------------------------------------------------------------ tables

    def finetune_table(self, config_hash: str, runs: Sequence[Dict[str, Any]],
                       include_wall_time: bool = False) -> pd.DataFrame:
        """Per-epoch rows for every seed, then "max" and "median" summary rows over seeds"""
        rows = []
        for run in runs:
            for record in run["history"]:
                rows.append({
                    "config_hash": config_hash, "method": run["method"], "task": run["task"],
                    "seed": run["seed"], "epoch": record["epoch"], "dev_accuracy": record["dev_accuracy"],
                    "best_dev_accuracy": record["best_dev_accuracy"], "fp_total": record["fp_total"],
                    "bp_total": record["bp_total"], "xfp_total": record["xfp_total"],
                    "wall_seconds": run["wall_seconds"] if include_wall_time else None,
                })
        finals = [run for run in runs if run["status"] == "ok" and run["history"]]
        if finals:
            last = pd.DataFrame([{**run["history"][-1], "wall_seconds": run["wall_seconds"]} for run in finals])
            best = pd.Series([run["best_dev_accuracy"] for run in finals])
            for label, agg in (("max", "max"), ("median", "median")):
                rows.append({
                    "config_hash": config_hash, "method": finals[0]["method"], "task": finals[0]["task"],
                    "seed": label, "epoch": None, "dev_accuracy": None,
                    "best_dev_accuracy": float(best.agg(agg)),
                    "fp_total": int(last["fp_total"].agg(agg)), "bp_total": int(last["bp_total"].agg(agg)),
                    "xfp_total": int(last["xfp_total"].agg(agg)),
                    "wall_seconds": float(last["wall_seconds"].agg(agg)) if include_wall_time else None,
                })
        return pd.DataFrame(rows, columns=FINETUNE_COLUMNS)

    def stability_summary(self, best: pd.DataFrame) -> pd.DataFrame:
        """min / median / max / stdev of best_dev_accuracy per (method, task)"""
        grouped = best.groupby(["method", "task"], sort=True)["best_dev_accuracy"]
        summary = grouped.agg(["count", "min", "median", "max", "std"]).reset_index()
        summary = summary.rename(columns={"count": "seeds", "std": "stdev"})
        summary["stdev"] = summary["stdev"].fillna(0.0)
        return summary

    def probe_table(self, config_hash: str, frame: pd.DataFrame) -> pd.DataFrame:
        table = frame.copy()
        table.insert(0, "config_hash", config_hash)
        return table[PROBE_COLUMNS]

    def comparison_table(self, cells: pd.DataFrame) -> pd.DataFrame:
        """method x task table with max and median blocks side by side.

        ``cells`` holds one row per (method, task, seed) with best_dev_accuracy and
        seconds_to_best.
        """
        if cells.empty:
            raise ConfigError("no completed runs to report")
        grouped = cells.groupby(["method", "task"], sort=True)
        blocks = {
            "max": grouped["best_dev_accuracy"].max(),
            "median": grouped["best_dev_accuracy"].median(),
            "seconds_to_best": grouped["seconds_to_best"].median(),
        }
        parts = []
        for name, series in blocks.items():
            wide = series.unstack("task").sort_index(axis=1)
            wide.columns = [f"{name}:{task}" for task in wide.columns]
            parts.append(wide)
        return pd.concat(parts, axis=1).sort_index().reset_index()

    # ------------------------------------------------------------------ figures

    def _save_figure(self, figure: go.Figure, path: Path) -> Path:
        """Static SVG export (kaleido); raises ReportError when the export fails"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            figure.update_layout(width=self.width, height=self.height, template="simple_white")
            figure.write_image(str(path), format="svg")
        except Exception as e:
            logger.error(f"Error exporting figure {path}: {e}")
            raise ReportError(f"could not export figure {path}: {e}") from e
        return path

    def stability_figure(self, best: pd.DataFrame, task: str, path: Path) -> Path:
        """Violin per method of best dev accuracy across seeds"""
        figure = go.Figure()
        subset = best[best["task"] == task]
        for method in sorted(subset["method"].unique()):
            values = subset.loc[subset["method"] == method, "best_dev_accuracy"]
            figure.add_trace(go.Violin(y=values, name=method, box_visible=True, points="all"))
        figure.update_layout(title=f"Best dev accuracy across seeds: {task}", yaxis_title="dev accuracy",
                             showlegend=True)
        return self._save_figure(figure, path)

    def chain_figure(self, frame: pd.DataFrame, path: Path, x: str = "stage_index",
                     title: str = "Source probe accuracy along the chain") -> Path:
        """Median probe accuracy per stage, one line per method"""
        figure = go.Figure()
        medians = frame.groupby(["method", x])["accuracy"].median().reset_index()
        for method in sorted(medians["method"].unique()):
            line = medians[medians["method"] == method]
            figure.add_trace(go.Scatter(x=line[x], y=line["accuracy"], mode="lines+markers", name=method))
        figure.update_layout(title=title, xaxis_title=x, yaxis_title="probe accuracy", showlegend=True)
        return self._save_figure(figure, path)

    def cycle_figure(self, frame: pd.DataFrame, path: Path) -> Path:
        """Median probe accuracy per (task, cycle), grouped bars per method"""
        figure = go.Figure()
        medians = frame.groupby(["method", "probe_task", "cycle"])["accuracy"].median().reset_index()
        medians["slot"] = medians["probe_task"] + " c" + medians["cycle"].astype(int).astype(str)
        for method in sorted(medians["method"].unique()):
            bars = medians[medians["method"] == method]
            figure.add_trace(go.Bar(x=bars["slot"], y=bars["accuracy"], name=method))
        figure.update_layout(title="Probe accuracy per cycle", barmode="group", yaxis_title="probe accuracy",
                             showlegend=True)
        return self._save_figure(figure, path)

    def matrix_figure(self, medians: pd.DataFrame, path: Path) -> Path:
        """Grouped bars of median probe accuracy per probe task"""
        figure = go.Figure()
        for method in medians.index:
            figure.add_trace(go.Bar(x=list(medians.columns), y=list(medians.loc[method]), name=str(method)))
        figure.update_layout(title="Probe accuracy after fine-tuning on the source task", barmode="group",
                             yaxis_title="median probe accuracy", showlegend=True)
        return self._save_figure(figure, path)

    def comparison_figure(self, cells: pd.DataFrame, path: Path) -> Path:
        figure = go.Figure()
        medians = cells.groupby(["method", "task"])["best_dev_accuracy"].median().reset_index()
        for method in sorted(medians["method"].unique()):
            bars = medians[medians["method"] == method]
            figure.add_trace(go.Bar(x=bars["task"], y=bars["best_dev_accuracy"], name=method))
        figure.update_layout(title="Median best dev accuracy", barmode="group", showlegend=True)
        return self._save_figure(figure, path)


def seed_summary(runs: List[Dict[str, Any]]) -> Dict[str, Any]:
    ok = [run for run in runs if run["status"] == "ok"]
    best = pd.Series([run["best_dev_accuracy"] for run in ok], dtype=float)
    to_best = pd.Series([run["seconds_to_best"] for run in ok], dtype=float)
    return {
        "seeds_ok": len(ok),
        "seeds_failed": len(runs) - len(ok),
        "max_best_dev_accuracy": float(best.max()) if len(ok) else None,
        "median_best_dev_accuracy": float(best.median()) if len(ok) else None,
        "median_seconds_to_best": float(to_best.median()) if len(ok) else None,
    }
