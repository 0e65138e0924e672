"""Render the experiment figure set from exported CSV/JSON/JSONL files.

The renderer is read-only over its inputs and tolerant of partial data: a
file that fails its schema or disagrees on config_hash with the other inputs
of the same figure produces a diagnostic and skips that figure, while the
rest of the report still renders. The adaptation-error heatmap uses a
logarithmic color map to stretch the low-error end of the scale.
"""

from __future__ import annotations

import argparse
import csv
import html
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import LogNorm

FIGURE_NAMES = (
    "training_curves",
    "sensitivity",
    "adaptation_crash",
    "adaptation_distance",
    "adaptation_aerror",
    "transfer",
    "trajectory",
)


@dataclass
class ReportManifest:
    """Input files per figure, plus toggles and the output directory."""

    out_dir: str
    training_logs: list[str] = field(default_factory=list)
    sensitivity_csv: str | None = None
    matrix_crash_csv: str | None = None
    matrix_distance_csv: str | None = None
    matrix_aerror_csv: str | None = None
    transfer_logs: list[str] = field(default_factory=list)
    trajectory_csv: str | None = None
    enabled: list[str] = field(default_factory=lambda: list(FIGURE_NAMES))

    @classmethod
    def from_file(cls, path: str) -> "ReportManifest":
        with open(path) as f:
            data = json.load(f)
        return cls(**data)


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# input readers; every reader returns (payload, set of config hashes)


def read_training_jsonl(path: str):
    rows = []
    hashes = set()
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "episode" not in row or "return_breakdown" not in row:
                raise SchemaError(f"{path}: not a training log row")
            rows.append(row)
            if row.get("config_hash"):
                hashes.add(row["config_hash"])
    return rows, hashes


def _split_comment_hash(line: str) -> str | None:
    if not line.startswith("#"):
        return None
    for token in line[1:].split():
        if token.startswith("config_hash="):
            return token.split("=", 1)[1]
    return None


def read_matrix_csv(path: str):
    hashes = set()
    with open(path) as f:
        lines = f.read().splitlines()
    if lines and lines[0].startswith("#"):
        h = _split_comment_hash(lines[0])
        if h:
            hashes.add(h)
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows or rows[0][0] != "train_setting":
        raise SchemaError(f"{path}: not a labeled matrix CSV")
    col_labels = rows[0][1:]
    row_labels = [r[0] for r in rows[1:]]
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return (row_labels, col_labels, values), hashes


def read_table_csv(path: str, required: tuple[str, ...]):
    hashes = set()
    with open(path) as f:
        lines = [l for l in f.read().splitlines() if l]
    if lines and lines[0].startswith("#"):
        h = _split_comment_hash(lines[0])
        if h:
            hashes.add(h)
        lines = lines[1:]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise SchemaError(f"{path}: empty table")
    missing = set(required) - set(rows[0])
    if missing:
        raise SchemaError(f"{path}: missing columns {sorted(missing)}")
    for row in rows:
        if row.get("config_hash"):
            hashes.add(row["config_hash"])
    return rows, hashes


# ---------------------------------------------------------------------------
# figure builders


def _rolling(values, window=25):
    if len(values) == 0:
        return np.array([])
    kernel = np.ones(min(window, len(values))) / min(window, len(values))
    return np.convolve(values, kernel, mode="valid")


def _fig_training_curves(paths, labels=None):
    series = []
    hashes = set()
    for path in paths:
        rows, h = read_training_jsonl(path)
        if not rows:
            raise SchemaError(f"{path}: training log is empty")
        hashes.add(frozenset(h))
        series.append((path, rows))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i, (path, rows) in enumerate(series):
        label = labels[i] if labels else Path(path).stem
        totals = [r["return_breakdown"]["total"] for r in rows]
        crashes = [r["crashes"] for r in rows]
        ax1.plot(_rolling(totals), label=label)
        ax2.plot(_rolling(crashes), label=label)
    ax1.set_ylabel("episode return (rolling mean)")
    ax2.set_ylabel("crash events (rolling mean)")
    ax2.set_xlabel("episode")
    ax1.legend(fontsize=8)
    fig.suptitle("Training curves")
    all_hashes = set().union(*[set(h) for h in hashes]) if hashes else set()
    return fig, all_hashes, {}


def _fig_sensitivity(path):
    rows, hashes = read_table_csv(
        path, required=("level", "pg_safety", "pg_efficiency")
    )
    levels = [float(r["level"]) for r in rows]
    pg_s = [float(r["pg_safety"]) for r in rows]
    pg_e = [float(r["pg_efficiency"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    width = min(np.diff(sorted(set(levels))).min() if len(set(levels)) > 1 else 0.5, 0.5) * 0.4
    ax.bar([l - width / 2 for l in levels], pg_s, width=width, label="safety gain (pp)")
    ax.bar([l + width / 2 for l in levels], pg_e, width=width, label="efficiency gain (%)")
    ax.set_xlabel("aggressiveness level (0 = conservative, 1 = aggressive)")
    ax.set_ylabel("performance gain of social over egoistic")
    ax.axhline(0.0, color="k", lw=0.5)
    ax.legend(fontsize=8)
    fig.suptitle("Sensitivity to traffic aggressiveness")
    return fig, hashes, {}


def log_color_positions(values, floor=0.1):
    """Positions of values under the report's logarithmic color scale.

    Used both by the heatmap and by tests asserting monotone color ordering;
    zeros clip to the floor before the log transform.
    """
    arr = np.maximum(np.asarray(values, dtype=float), floor)
    norm = LogNorm(vmin=floor, vmax=max(arr.max(), floor * 10))
    return norm(arr)


def _fig_heatmap(path, title, log_scale=False):
    (row_labels, col_labels, values), hashes = read_matrix_csv(path)
    fig, ax = plt.subplots(figsize=(1.2 * len(col_labels) + 3, 0.6 * len(row_labels) + 2))
    if log_scale:
        floor = 0.1
        shown = np.maximum(values, floor)
        norm = LogNorm(vmin=floor, vmax=max(shown.max(), floor * 10))
        im = ax.imshow(shown, norm=norm, cmap="viridis")
    else:
        im = ax.imshow(values, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), col_labels, rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(row_labels)), row_labels, fontsize=7)
    for i in range(len(row_labels)):
        for j in range(len(col_labels)):
            ax.text(j, i, f"{values[i][j]:.1f}", ha="center", va="center", fontsize=6,
                    color="w")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_xlabel("tested on")
    ax.set_ylabel("trained on")
    fig.suptitle(title)
    return fig, hashes, {"log_scale": log_scale, "shape": list(values.shape)}


def _fig_transfer(paths, labels=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    hashes = set()
    for i, path in enumerate(paths):
        rows, h = read_training_jsonl(path)
        if not rows:
            raise SchemaError(f"{path}: transfer log is empty")
        hashes |= h
        label = labels[i] if labels else Path(path).stem
        totals = [r["return_breakdown"]["total"] for r in rows]
        ax.plot(_rolling(totals), label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel("episode return (rolling mean)")
    ax.legend(fontsize=8)
    fig.suptitle("Transfer learning")
    return fig, hashes, {}


def _fig_trajectory(path):
    rows, hashes = read_table_csv(
        path, required=("step", "t", "id", "kind", "lane", "l", "v")
    )
    fig, ax = plt.subplots(figsize=(8, 3.5))
    by_vehicle: dict = {}
    for row in rows:
        by_vehicle.setdefault((row["id"], row["kind"]), []).append(row)
    for (vid, kind), history in sorted(by_vehicle.items()):
        ls = [float(r["l"]) for r in history]
        lanes = [float(r["lane"]) for r in history]
        speeds = [float(r["v"]) for r in history]
        color = "tab:green" if kind == "AV" else "tab:blue"
        ax.plot(ls, lanes, color=color, alpha=0.4, lw=0.8)
        stride = max(1, len(ls) // 25)
        # marker diameter carries the speed
        ax.scatter(
            ls[::stride], lanes[::stride],
            s=[4 + (v / 30.0) * 60 for v in speeds[::stride]],
            color=color, alpha=0.6, edgecolors="none",
        )
    ax.set_xlabel("longitudinal position (m)")
    ax.set_ylabel("lane")
    ax.set_yticks(sorted({float(r["lane"]) for r in rows}))
    fig.suptitle("Trajectory snapshot (marker diameter = speed)")
    return fig, hashes, {}


# ---------------------------------------------------------------------------
# orchestration


def _check_hashes(hashes: set[str], figure: str):
    real = {h for h in hashes if h}
    if len(real) > 1:
        raise SchemaError(
            f"{figure}: inputs disagree on config_hash ({sorted(real)})"
        )


def render(manifest: ReportManifest) -> dict:
    """Render every enabled figure; returns metadata with per-figure status."""
    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    warnings = []

    builders = {
        "training_curves": (
            lambda: _fig_training_curves(manifest.training_logs),
            bool(manifest.training_logs),
        ),
        "sensitivity": (
            lambda: _fig_sensitivity(manifest.sensitivity_csv),
            manifest.sensitivity_csv is not None,
        ),
        "adaptation_crash": (
            lambda: _fig_heatmap(manifest.matrix_crash_csv, "Crash rate (%)"),
            manifest.matrix_crash_csv is not None,
        ),
        "adaptation_distance": (
            lambda: _fig_heatmap(manifest.matrix_distance_csv, "Distance traveled (m)"),
            manifest.matrix_distance_csv is not None,
        ),
        "adaptation_aerror": (
            lambda: _fig_heatmap(
                manifest.matrix_aerror_csv, "Adaptation error (%)", log_scale=True
            ),
            manifest.matrix_aerror_csv is not None,
        ),
        "transfer": (
            lambda: _fig_transfer(manifest.transfer_logs),
            bool(manifest.transfer_logs),
        ),
        "trajectory": (
            lambda: _fig_trajectory(manifest.trajectory_csv),
            manifest.trajectory_csv is not None,
        ),
    }

    for name in FIGURE_NAMES:
        if name not in manifest.enabled:
            continue
        builder, has_inputs = builders[name]
        if not has_inputs:
            warnings.append(f"{name}: no inputs configured; skipped")
            continue
        plt.rcParams["svg.hashsalt"] = name
        try:
            fig, hashes, extra = builder()
            _check_hashes(hashes, name)
        except (SchemaError, FileNotFoundError, ValueError) as exc:
            plt.close("all")
            warnings.append(f"{name}: {exc}")
            results.append({"figure": name, "status": "skipped", "error": str(exc)})
            continue
        path = out_dir / f"{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        results.append(
            {"figure": name, "status": "rendered", "path": str(path), **extra}
        )

    index = out_dir / "index.html"
    _write_index(index, results, warnings)
    return {"figures": results, "warnings": warnings, "index": str(index)}


def _write_index(path: Path, results: list[dict], warnings: list[str]) -> None:
    parts = ["<html><head><title>socialdrive report</title></head><body>"]
    parts.append("<h1>Experiment report</h1>")
    if warnings:
        parts.append("<h2>Warnings</h2><ul>")
        parts.extend(f"<li>{html.escape(w)}</li>" for w in warnings)
        parts.append("</ul>")
    for item in results:
        if item["status"] != "rendered":
            continue
        name = html.escape(item["figure"])
        src = html.escape(Path(item["path"]).name)
        parts.append(f"<h2>{name}</h2><img src='{src}' alt='{name}'/>")
    parts.append("</body></html>")
    path.write_text("\n".join(parts))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="socialdrive-report", description="Render experiment figures"
    )
    parser.add_argument("manifest", help="JSON manifest file")
    args = parser.parse_args(argv)
    try:
        manifest = ReportManifest.from_file(args.manifest)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    meta = render(manifest)
    rendered = sum(1 for r in meta["figures"] if r["status"] == "rendered")
    print(f"rendered {rendered} figures -> {meta['index']}")
    for warning in meta["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
