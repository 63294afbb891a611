"""Calibration metrics, reliability statistics and temperature scaling."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .netcore import EPS, PredictionBatch, softmax


class MetricError(ValueError):
    pass


def _probs(preds) -> np.ndarray:
    probs = preds.probs if isinstance(preds, PredictionBatch) else np.asarray(preds, dtype=float)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise MetricError("need a non-empty [N, C] probability array")
    return probs


def uniform_bin_index(values: np.ndarray, M: int) -> np.ndarray:
    """0-based bin of each value under right-closed intervals ((m-1)/M, m/M].

    Zero goes to the first bin.
    """
    upper = np.arange(1, M + 1) / M
    return np.minimum(np.searchsorted(upper, values, side="left"), M - 1)


@dataclass
class BinStats:
    M: int
    counts: np.ndarray
    acc: np.ndarray
    conf: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def lower(self) -> np.ndarray:
        return np.arange(self.M) / self.M

    @property
    def upper(self) -> np.ndarray:
        return np.arange(1, self.M + 1) / self.M


def bin_predictions(preds, labels, M: int = 15) -> BinStats:
    probs = _probs(preds)
    labels = np.asarray(labels)
    if M < 1:
        raise MetricError("M must be at least 1")
    if labels.shape != (probs.shape[0],) or labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise MetricError("labels must be one class index per prediction")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    bins = uniform_bin_index(conf, M)
    counts = np.bincount(bins, minlength=M)
    hits = np.bincount(bins, weights=correct, minlength=M)
    conf_sum = np.bincount(bins, weights=conf, minlength=M)
    nz = np.maximum(counts, 1)
    return BinStats(M, counts, np.where(counts > 0, hits / nz, 0.0),
                    np.where(counts > 0, conf_sum / nz, 0.0))


def ece(bins: BinStats, n: int | None = None) -> float:
    n = bins.n if n is None else n
    if n <= 0:
        raise MetricError("ECE of an empty prediction set")
    total = 0.0
    for m in range(bins.M):
        if bins.counts[m]:
            total += bins.counts[m] / n * abs(bins.acc[m] - bins.conf[m])
    return total


def expected_calibration_error(preds, labels, M: int = 15) -> float:
    return ece(bin_predictions(preds, labels, M))


def _weighted_gap(values, hits, groups) -> float:
    n = len(values)
    return float(sum(len(g) / n * abs(hits[g].mean() - values[g].mean()) for g in groups if len(g)))


def adaptive_bins(values: np.ndarray, M: int) -> list[np.ndarray]:
    """Split indices, sorted by value, into M runs whose sizes differ by at most one."""
    order = np.argsort(values, kind="stable")
    return np.array_split(order, M)


def ace(preds, labels, M: int = 15) -> float:
    probs = _probs(preds)
    labels = np.asarray(labels)
    if probs.shape[0] < M:
        raise MetricError(f"ACE needs at least M={M} predictions, got {probs.shape[0]}")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    return _weighted_gap(conf, correct, adaptive_bins(conf, M))


def _classwise(probs, labels, M, binning, threshold=None) -> float:
    terms = []
    for c in range(probs.shape[1]):
        p = probs[:, c]
        hit = (labels == c).astype(float)
        if threshold is not None:
            keep = p > threshold
            p, hit = p[keep], hit[keep]
        if len(p) == 0:
            continue
        if binning == "uniform":
            idx = uniform_bin_index(p, M)
            groups = [np.flatnonzero(idx == m) for m in range(M)]
        elif binning == "adaptive":
            groups = adaptive_bins(p, min(M, len(p)))
        else:
            raise MetricError(f"unknown binning {binning!r}")
        terms.append(_weighted_gap(p, hit, groups))
    if not terms:
        raise MetricError("no class probability survives the threshold")
    return float(np.mean(terms))


def sce(preds, labels, M: int = 15, binning: str = "uniform") -> float:
    """Static calibration error: ECE computed per class on that class's probability."""
    return _classwise(_probs(preds), np.asarray(labels), M, binning)


def tace(preds, labels, M: int = 15, threshold: float = 0.01) -> float:
    """Thresholded adaptive calibration error.

    Per class, only probabilities above ``threshold`` enter, binned into equal-count
    bins; classes left empty are skipped.
    """
    if not 0 <= threshold < 1:
        raise MetricError("threshold must be in [0, 1)")
    return _classwise(_probs(preds), np.asarray(labels), M, "adaptive", threshold)


def nll(preds, labels) -> float:
    probs = _probs(preds)
    labels = np.asarray(labels)
    return float(-np.mean(np.log(probs[np.arange(len(labels)), labels] + EPS)))


def accuracy(preds, labels) -> float:
    return float(np.mean(_probs(preds).argmax(axis=1) == np.asarray(labels)))


def reliability_data(bins: BinStats) -> list[tuple[float, float, int]]:
    """(bin midpoint, Acc - Conf, count) per bin; positive gap means under-confident."""
    mids = (np.arange(bins.M) + 0.5) / bins.M
    gaps = np.where(bins.counts > 0, bins.acc - bins.conf, 0.0)
    return [(float(m), float(g), int(c)) for m, g, c in zip(mids, gaps, bins.counts)]


def per_class_stats(preds, labels, n_classes: int | None = None, conf_mode: str = "max"):
    """Per true class: (Acc, Conf, Acc - Conf); NaN for classes with no examples.

    ``conf_mode="max"`` averages each example's top probability; ``"class"``
    averages the probability assigned to the true class.
    """
    probs = _probs(preds)
    labels = np.asarray(labels)
    n_classes = n_classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    if conf_mode == "max":
        conf = probs.max(axis=1)
    elif conf_mode == "class":
        conf = probs[np.arange(len(labels)), labels]
    else:
        raise ValueError(f"unknown conf_mode {conf_mode!r}")
    out = []
    for c in range(n_classes):
        mask = labels == c
        if not mask.any():
            out.append((float("nan"), float("nan"), float("nan")))
            continue
        a, f = float(np.mean(pred[mask] == c)), float(np.mean(conf[mask]))
        out.append((a, f, a - f))
    return out


def scores_for_scaling(preds) -> np.ndarray:
    """Pre-softmax scores to temperature-scale.

    Aggregated ensemble predictions carry no logits, so their log-probabilities
    stand in.
    """
    if isinstance(preds, PredictionBatch) and preds.logits is not None:
        return preds.logits
    return np.log(_probs(preds) + EPS)


def scaled_nll(scores: np.ndarray, labels: np.ndarray, temperature: float) -> float:
    z = scores / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def temperature_fit(preds, labels, grid_size: int = 121, xatol: float = 1e-4) -> float:
    """Scalar T minimising NLL of softmax(scores / T), searched over log T in [-3, 3].

    A coarse grid picks the basin, a bounded Brent search refines it, and the
    identity T = 1 is kept whenever nothing beats it.
    """
    scores = scores_for_scaling(preds)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise MetricError("temperature fitting needs at least two classes in the fitting split")

    def f(log_t):
        return scaled_nll(scores, labels, float(np.exp(log_t)))

    grid = np.linspace(-3.0, 3.0, grid_size)
    values = np.array([f(g) for g in grid])
    i = int(np.argmin(values))
    step = grid[1] - grid[0]
    lo, hi = max(-3.0, grid[i] - step), min(3.0, grid[i] + step)
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    best_log_t, best = (float(res.x), float(res.fun)) if res.fun <= values[i] else (grid[i], values[i])
    if best > f(0.0):
        return 1.0
    return float(np.exp(best_log_t))


def apply_temperature(preds, temperature: float) -> PredictionBatch:
    if temperature == 1.0:
        return PredictionBatch(_probs(preds).copy(),
                               preds.logits if isinstance(preds, PredictionBatch) else None)
    scores = scores_for_scaling(preds) / temperature
    return PredictionBatch(softmax(scores), scores)


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    ace: float
    sce: float
    tace: float
    nll: float
    bins: BinStats
    per_class: list
    fitted_temperature: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": {"accuracy": self.accuracy, "ece": self.ece, "ace": self.ace,
                        "sce": self.sce, "tace": self.tace, "nll": self.nll,
                        "fitted_temperature": self.fitted_temperature, **self.extra},
            "bins": [{"lower": float(lo), "upper": float(up), "count": int(c), "acc": float(a),
                      "conf": float(f)}
                     for lo, up, c, a, f in zip(self.bins.lower, self.bins.upper, self.bins.counts,
                                                self.bins.acc, self.bins.conf)],
            "per_class": [{"class": i, "acc": a, "conf": f, "gap": g}
                          for i, (a, f, g) in enumerate(self.per_class)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        m = dict(d["metrics"])
        bins = BinStats(len(d["bins"]), np.array([b["count"] for b in d["bins"]]),
                        np.array([b["acc"] for b in d["bins"]]),
                        np.array([b["conf"] for b in d["bins"]]))
        per_class = [(p["acc"], p["conf"], p["gap"]) for p in d["per_class"]]
        core = {k: m.pop(k) for k in ("accuracy", "ece", "ace", "sce", "tace", "nll",
                                      "fitted_temperature")}
        return cls(bins=bins, per_class=per_class, extra=m, **core)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def calibration_report(preds, labels, M: int = 15, tace_threshold: float = 0.01,
                       conf_mode: str = "max") -> CalibrationReport:
    probs = _probs(preds)
    labels = np.asarray(labels)
    bins = bin_predictions(probs, labels, M)
    return CalibrationReport(
        accuracy=accuracy(probs, labels),
        ece=ece(bins),
        ace=ace(probs, labels, min(M, len(labels))),
        sce=sce(probs, labels, M),
        tace=tace(probs, labels, M, tace_threshold),
        nll=nll(probs, labels),
        bins=bins,
        per_class=per_class_stats(probs, labels, probs.shape[1], conf_mode),
    )


def write_reliability_csv(bins: BinStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_mid", "gap", "count"])
        for mid, gap, count in reliability_data(bins):
            w.writerow([repr(mid), repr(gap), count])

