"""Train and evaluate grid cells; one record and artifact directory per (cell, seed)."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import calibration as cal
from ..augment import make_strategy
from ..data import ClusterSpec, CorruptionSpec, corrupt, make_clusters, ring_centers, split
from ..ensembles import (TrainingDiverged, member_predictions, aggregate, save_checkpoint,
                         train_ensemble)
from .config import ExperimentConfig, dump_yaml

log = logging.getLogger(__name__)

WORKERS_ENV = "CALMIX_WORKERS"
RECORD_VERSION = 1


def build_splits(cfg: ExperimentConfig, seed: int) -> dict:
    ds = cfg.dataset
    spec = ClusterSpec(ds.n_clusters, ring_centers(ds.n_clusters, ds.ring_radius), tuple(ds.radii),
                       ds.samples_per_cluster, seed)
    return split(make_clusters(spec), ds.val_fraction, seed, ds.test_fraction)


def train_cell(cfg: ExperimentConfig, seed: int, train, val):
    a = cfg.augment
    strategy = make_strategy(a.strategy, train.n_classes, len(train), a.a, a.alpha, a.k,
                             a.augmix_intensity, a.conf_mode, a.camixup_scope)
    e = cfg.ensemble
    return train_ensemble(e.mode, train, val, cfg.train.to_train_config(seed), strategy, e.K,
                          tuple(e.hidden), e.dropout_rate, e.factor_std)


def _members(model, x, seed, tag):
    # a fresh generator per evaluation set keeps MC-Dropout results order-independent
    return member_predictions(model, x, np.random.default_rng([seed, 7, tag]))


def _gap(preds, labels) -> float:
    return float(cal.accuracy(preds, labels) - np.mean(cal._probs(preds).max(axis=1)))


def evaluate(cfg: ExperimentConfig, model, splits: dict, seed: int) -> tuple[dict, cal.CalibrationReport]:
    ev = cfg.eval
    test, val = splits["test"], splits["val"]
    members = _members(model, test.x, seed, 0)
    preds = aggregate(members)
    y = test.hard_labels
    report = cal.calibration_report(preds, y, ev.bins, ev.tace_threshold, cfg.augment.conf_mode)
    clean = {"accuracy": report.accuracy, "ece": report.ece, "ace": report.ace, "sce": report.sce,
             "tace": report.tace, "nll": report.nll, "mean_gap": _gap(preds, y)}
    member_ece = [cal.expected_calibration_error(m, y, ev.bins) for m in members]
    member_gap = [_gap(m, y) for m in members]
    record = {
        "clean": clean,
        "members": {"ece": member_ece, "mean_gap": member_gap},
        "per_class": [{"class": c, "acc": a, "conf": f, "gap": g}
                      for c, (a, f, g) in enumerate(report.per_class)],
        "reliability": [{"bin_mid": m, "gap": g, "count": n}
                        for m, g, n in cal.reliability_data(report.bins)],
        "temperature": None,
        "corrupted": None,
    }
    if ev.temperature:
        val_preds = aggregate(_members(model, val.x, seed, 1))
        scores = cal.scores_for_scaling(val_preds)
        t = cal.temperature_fit(val_preds, val.hard_labels)
        scaled = cal.apply_temperature(preds, t)
        report.fitted_temperature = t
        record["temperature"] = {
            "T": t,
            "fit_nll_at_1": cal.scaled_nll(scores, val.hard_labels, 1.0),
            "fit_nll_at_T": cal.scaled_nll(scores, val.hard_labels, t),
            "test": {"accuracy": cal.accuracy(scaled, y),
                     "ece": cal.expected_calibration_error(scaled, y, ev.bins),
                     "nll": cal.nll(scaled, y)},
        }
    if ev.corruption_families and ev.intensities:
        cells = []
        for fam in ev.corruption_families:
            for inten in ev.intensities:
                shifted = corrupt(test, CorruptionSpec(fam, int(inten), seed))
                p = aggregate(_members(model, shifted.x, seed, 100 + 10 * inten))
                cells.append({"family": fam, "intensity": int(inten),
                              "accuracy": cal.accuracy(p, shifted.y),
                              "ece": cal.expected_calibration_error(p, shifted.y, ev.bins)})
        by_int = []
        for inten in sorted({c["intensity"] for c in cells}):
            sel = [c for c in cells if c["intensity"] == inten]
            by_int.append({"intensity": inten,
                           "accuracy": float(np.mean([c["accuracy"] for c in sel])),
                           "ece": float(np.mean([c["ece"] for c in sel]))})
        record["corrupted"] = {"cells": cells, "by_intensity": by_int,
                               "cA": float(np.mean([c["accuracy"] for c in cells])),
                               "cE": float(np.mean([c["ece"] for c in cells]))}
    return record, report


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def run_seed(cfg: ExperimentConfig, seed: int, out_dir) -> dict:
    """Train and evaluate one cell for one seed, writing its artifact directory."""
    cell_dir = Path(out_dir) / cfg.label / f"seed_{seed}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    record = {"version": RECORD_VERSION, "name": cfg.label, "config_hash": cfg.config_hash(),
              "dataset_hash": cfg.dataset_hash(), "seed": seed, "mode": cfg.ensemble.mode,
              "strategy": cfg.augment.strategy, "K": cfg.ensemble.K, "status": "ok",
              "error": None, "epochs": cfg.train.epochs}
    started = time.perf_counter()
    splits = build_splits(cfg, seed)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            model = train_cell(cfg, seed, splits["train"], splits["val"])
    except TrainingDiverged as exc:
        log.warning("%s seed %s aborted: %s", cfg.label, seed, exc)
        record.update(status="aborted", error=str(exc))
        _finish(cell_dir, record, started)
        return record

    body, report = evaluate(cfg, model, splits, seed)
    record.update(body)
    record["final_train_loss"] = model.history.losses[-1]
    state = {}
    if model.history.policy_log:
        rows = [(e, m, c, int(f)) for e, m, c, f in model.history.policy_log]
        _write_csv(cell_dir / "policy_log.csv", ["epoch", "member", "class", "enabled"], rows)
        counts = {}
        for _, m, c, f in model.history.policy_log:
            counts.setdefault(m, [0] * splits["train"].n_classes)[c] += int(f)
        record["policy_counts"] = counts
        shared = model.strategies[0]
        state["policy_flags"] = shared.policy_flags()
    if model.history.forgetting:
        rows = []
        summary = {}
        for member, (counts, coeff) in sorted(model.history.forgetting.items()):
            rows += [(member, i, int(t), _fmt(c)) for i, (t, c) in enumerate(zip(counts, coeff))]
            summary[str(member)] = {"coeff_values": sorted({float(v) for v in coeff}),
                                    "n_enabled": int(np.sum(coeff > 0)),
                                    "max_forget_count": int(counts.max())}
            state[f"forget_count_{member}"] = counts
            state[f"mixup_coeff_{member}"] = coeff
        _write_csv(cell_dir / "forgetting.csv", ["member", "index", "forget_count", "coeff"], rows)
        record["forgetting"] = summary
    save_checkpoint(model, cell_dir / "checkpoint.npz", state)
    (cell_dir / "report.json").write_text(report.to_json())
    cal.write_reliability_csv(report.bins, cell_dir / "reliability.csv")
    _finish(cell_dir, record, started)
    return record


def _finish(cell_dir, record, started):
    (cell_dir / "record.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    # wall-clock lives apart from the record so records stay bitwise reproducible
    (cell_dir / "timing.json").write_text(json.dumps({"wall_clock_s": time.perf_counter() - started}))


def _task(args):
    cfg_dict, seed, out_dir = args
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, out_dir)


def worker_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, default)))
    except ValueError:
        return default


def run(configs, out_dir=None, workers: int | None = None) -> list[dict]:
    """Run every (cell, seed) pair and update ``manifest.json`` in the output directory."""
    if isinstance(configs, ExperimentConfig):
        configs = [configs]
    out_dir = Path(out_dir or configs[0].output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(c.to_dict(), s, str(out_dir)) for c in configs for s in c.seeds]
    workers = workers or worker_count()
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_task, tasks))
    else:
        records = [_task(t) for t in tasks]
    for c in configs:
        (out_dir / c.label).mkdir(exist_ok=True)
        (out_dir / c.label / "config.yaml").write_text(dump_yaml(c))
    _update_manifest(out_dir, records)
    return records


def _update_manifest(out_dir: Path, records: list[dict]) -> None:
    path = out_dir / "manifest.json"
    entries = json.loads(path.read_text())["records"] if path.exists() else []
    fresh = {(r["name"], r["seed"]) for r in records}
    entries = [e for e in entries if (e["name"], e["seed"]) not in fresh]
    entries += [{"name": r["name"], "seed": r["seed"], "config_hash": r["config_hash"],
                 "dataset_hash": r["dataset_hash"], "status": r["status"],
                 "path": f"{r['name']}/seed_{r['seed']}/record.json"} for r in records]
    entries.sort(key=lambda e: (e["name"], e["seed"]))
    path.write_text(json.dumps({"records": entries}, indent=2, sort_keys=True))


def load_records(out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {out_dir}")
    return [json.loads((out_dir / e["path"]).read_text())
            for e in json.loads(path.read_text())["records"]]
