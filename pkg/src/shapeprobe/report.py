"""Result tables (CSV/JSON/markdown) and deterministic SVG line charts."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MissingColumnError, UnknownTableError  # noqa: E402

MANIFEST = "manifest.json"


# ------------------------------------------------------------------- tables

def write_table(path, header, rows) -> Path:
    """CSV with full float precision (``repr``); NaN and None become empty cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], [[_parse(v) for v in r] for r in rows[1:]]


def load_manifest(run_dir) -> dict:
    p = Path(run_dir) / MANIFEST
    return json.loads(p.read_text()) if p.exists() else {}


def table_ids(run_dir) -> dict:
    return load_manifest(run_dir).get("tables", {})


def export_table(run_dir, table_id: str, fmt: str = "csv", out_path=None) -> Path:
    """Write one registered table as csv, json or markdown (markdown rounds floats to 1 decimal)."""
    run_dir = Path(run_dir)
    tables = table_ids(run_dir)
    if table_id not in tables:
        raise UnknownTableError(table_id, sorted(tables))
    header, rows = read_table(run_dir / tables[table_id])
    if fmt not in ("csv", "json", "markdown"):
        raise ValueError("format must be csv, json or markdown")
    ext = {"csv": "csv", "json": "json", "markdown": "md"}[fmt]
    out = Path(out_path) if out_path else run_dir / "exports" / f"{table_id}.{ext}"
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        write_table(out, header, rows)
    elif fmt == "json":
        out.write_text(json.dumps([dict(zip(header, r)) for r in rows], indent=1))
    else:
        out.write_text(markdown_table(header, rows))
    return out


def format_markdown_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for r in rows:
        lines.append("| " + " | ".join(format_markdown_cell(v) for v in r) + " |")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- plots

def _column(header, rows, name):
    if name not in header:
        raise MissingColumnError(f"missing column {name!r}; have {header}")
    j = header.index(name)
    return [r[j] for r in rows]


def _mean_by(xs, ys):
    """Average ``ys`` over repeated ``xs`` (e.g. several seeds), ignoring missing cells."""
    acc = {}
    for x, y in zip(xs, ys):
        if y is not None:
            acc.setdefault(x, []).append(float(y))
    keys = sorted(acc)
    return keys, [float(np.mean(acc[k])) for k in keys]


def line_chart(path, header, rows, x: str, ys, ylabel: str, title: str = "", baseline: str | None = None) -> Path:
    """Deterministic SVG line chart; one line per column in ``ys``."""
    xs = _column(header, rows, x)
    plt.rcParams["svg.hashsalt"] = "shapeprobe"
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for name in ys:
        kx, ky = _mean_by(xs, _column(header, rows, name))
        ax.plot(kx, ky, marker="o", label=name)
    if baseline is not None:
        _, by = _mean_by(xs, _column(header, rows, baseline))
        if by:
            ax.axhline(float(np.mean(by)), color="0.4", linestyle="--", label=baseline)
    ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_plots(run_dir) -> list:
    """Render every chart the run's CSVs support; returns the written paths."""
    run_dir = Path(run_dir)
    out = []
    series = run_dir / "series.csv"
    if series.exists():
        h, r = read_table(series)
        out.append(line_chart(run_dir / "series.svg", h, r, "epoch", ["shape", "texture"], "neurons",
                              "factor dimensionality over training"))
    for name, x, ylabel in (("keep", "X", "mIoU"), ("removal", "N", "mIoU")):
        p = run_dir / f"{name}.csv"
        if not p.exists():
            continue
        h, r = read_table(p)
        for task in ("semantic", "binary"):
            cols = [c for c in h if c.endswith(f"_{task}") and not c.startswith("baseline")]
            if not cols:
                continue
            base = f"baseline_{task}" if f"baseline_{task}" in h else None
            out.append(line_chart(run_dir / f"{name}_{task}.svg", h, r, x, cols, ylabel,
                                  f"{name} ({task})", baseline=base))
    return out
