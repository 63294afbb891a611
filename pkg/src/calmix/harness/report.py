"""Summary tables and plot-ready CSVs built from saved run records."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .runner import load_records

METRICS = ("accuracy", "ece", "ace", "sce", "tace", "nll", "cA", "cE", "ts_ece")
PLOT_KINDS = ("reliability", "shift_curve", "policy_counts")


class ReportError(ValueError):
    pass


def _metric(record: dict, name: str):
    if record.get("status") != "ok":
        return None
    if name in ("cA", "cE"):
        return record["corrupted"][name] if record.get("corrupted") else None
    if name == "ts_ece":
        return record["temperature"]["test"]["ece"] if record.get("temperature") else None
    return record["clean"][name]


def _group(records):
    groups = {}
    for r in records:
        groups.setdefault(r["name"], []).append(r)
    return groups


def compare(records: list[dict], baseline_name: str, metrics=METRICS) -> list[dict]:
    """Per-strategy mean/std of every metric and its delta against the baseline row.

    Metrics a record lacks (e.g. no corruption evaluation) come out as None.
    """
    if len({r["dataset_hash"] for r in records}) > 1:
        raise ReportError("records were produced on different dataset specs")
    groups = _group(records)
    if baseline_name not in groups:
        raise ReportError(f"baseline {baseline_name!r} not among {sorted(groups)}")
    rows = []
    for name in sorted(groups):
        row = {"name": name, "n_seeds": sum(r["status"] == "ok" for r in groups[name])}
        for m in metrics:
            vals = [v for v in (_metric(r, m) for r in groups[name]) if v is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = float(np.std(vals)) if vals else None
        rows.append(row)
    base = next(r for r in rows if r["name"] == baseline_name)
    for row in rows:
        for m in metrics:
            a, b = row[f"{m}_mean"], base[f"{m}_mean"]
            row[f"{m}_delta"] = None if a is None or b is None else a - b
    return rows


def format_table(rows: list[dict], metrics=METRICS) -> str:
    header = ["name", "seeds"] + [m for m in metrics]
    lines = []
    for row in rows:
        cells = [row["name"], str(row["n_seeds"])]
        for m in metrics:
            mean, std, delta = row[f"{m}_mean"], row[f"{m}_std"], row[f"{m}_delta"]
            cells.append("absent" if mean is None else f"{mean:.4f}±{std:.4f} ({delta:+.4f})")
        lines.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *lines)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(c) for c in lines]) + "\n"


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ReportError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: _csv_value(v) for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def compare_dir(out_dir, baseline_name: str) -> list[dict]:
    out_dir = Path(out_dir)
    rows = compare(load_records(out_dir), baseline_name)
    (out_dir / "compare.txt").write_text(format_table(rows))
    write_rows(out_dir / "compare.csv", rows)
    return rows


def plot_rows(records: list[dict], kind: str) -> list[dict]:
    ok = [r for r in records if r["status"] == "ok"]
    if kind == "reliability":
        return [{"bin_mid": b["bin_mid"], "gap": b["gap"], "count": b["count"],
                 "strategy": r["name"], "seed": r["seed"]}
                for r in ok for b in r["reliability"]]
    if kind == "policy_counts":
        rows = []
        for r in ok:
            for member, counts in sorted(r.get("policy_counts", {}).items()):
                rows += [{"strategy": r["name"], "seed": r["seed"], "member": member, "class": c,
                          "epochs_enabled": n, "total_epochs": r["epochs"]}
                         for c, n in enumerate(counts)]
        return rows
    if kind == "shift_curve":
        rows = []
        for name, group in sorted(_group(ok).items()):
            points = {0: [(r["clean"]["accuracy"], r["clean"]["ece"]) for r in group]}
            for r in group:
                for b in (r.get("corrupted") or {}).get("by_intensity", []):
                    points.setdefault(b["intensity"], []).append((b["accuracy"], b["ece"]))
            for inten in sorted(points):
                acc, ece = np.mean(points[inten], axis=0)
                rows.append({"strategy": name, "intensity": inten, "accuracy": float(acc),
                             "ece": float(ece), "n_seeds": len(points[inten])})
        return rows
    raise ReportError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")


def emit_plot_data(out_dir, kind: str) -> Path:
    out_dir = Path(out_dir)
    if kind not in PLOT_KINDS:
        raise ReportError(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    rows = plot_rows(load_records(out_dir), kind)
    if not rows:
        raise ReportError(f"records in {out_dir} carry no {kind} data")
    path = out_dir / f"plot_{kind}.csv"
    write_rows(path, rows)
    return path


def isclose_or_absent(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return math.isclose(a, b, rel_tol=0, abs_tol=0)
