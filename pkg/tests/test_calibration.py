import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calmix import calibration as cal
from calmix.netcore import PredictionBatch, softmax


def brute_force_ece(probs, labels, M):
    """Walk examples one by one; bin m holds conf in ((m-1)/M, m/M], conf 0 in bin 1."""
    sums = {}
    for p, y in zip(probs, labels):
        conf = max(p)
        pred = list(p).index(conf)
        m = 1
        while m < M and not conf <= m / M:
            m += 1
        n, hits, confs = sums.get(m, (0, 0.0, 0.0))
        sums[m] = (n + 1, hits + (pred == y), confs + conf)
    total = 0.0
    for m in range(1, M + 1):
        if m in sums:
            n, hits, confs = sums[m]
            total += n / len(labels) * abs(hits / n - confs / n)
    return total


def random_predictions(rng, n=None, c=None):
    n = n or int(rng.integers(1, 201))
    c = c or int(rng.integers(2, 11))
    probs = softmax(rng.normal(scale=rng.uniform(0.1, 5), size=(n, c)))
    labels = rng.integers(0, c, size=n)
    return probs, labels


def test_ece_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        probs, labels = random_predictions(rng)
        M = int(rng.integers(1, 21))
        assert cal.expected_calibration_error(probs, labels, M) == pytest.approx(
            brute_force_ece(probs, labels, M), abs=1e-12)


def test_confidence_093_lands_in_bin_14():
    bins = cal.bin_predictions(np.array([[0.93, 0.07]]), [0], 15)
    assert np.flatnonzero(bins.counts).tolist() == [13]
    assert bins.lower[13] == pytest.approx(13 / 15) and bins.upper[13] == pytest.approx(14 / 15)


def test_bin_edges_are_right_closed():
    idx = cal.uniform_bin_index(np.array([0.0, 1 / 3, 0.5, 1.0]), 3)
    assert idx.tolist() == [0, 0, 1, 2]


def test_single_bin_holds_everything(rng):
    probs, labels = random_predictions(rng, 50, 4)
    bins = cal.bin_predictions(probs, labels, 1)
    assert bins.counts.tolist() == [50]
    assert bins.conf[0] == pytest.approx(probs.max(axis=1).mean())
    acc = np.mean(probs.argmax(axis=1) == labels)
    assert cal.ece(bins) == pytest.approx(abs(acc - probs.max(axis=1).mean()))


def test_ece_examples():
    assert cal.expected_calibration_error(np.eye(3), [0, 1, 2]) == 0.0
    probs = np.tile([0.8, 0.2], (10, 1))
    labels = np.array([0] * 6 + [1] * 4)
    assert cal.expected_calibration_error(probs, labels) == pytest.approx(0.2)
    with pytest.raises(cal.MetricError):
        cal.ece(cal.BinStats(15, np.zeros(15, int), np.zeros(15), np.zeros(15)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ece_permutation_invariant_and_counts_sum(seed):
    rng = np.random.default_rng(seed)
    probs, labels = random_predictions(rng)
    perm = rng.permutation(len(labels))
    bins = cal.bin_predictions(probs, labels)
    assert bins.n == len(labels)
    assert np.all((bins.acc >= 0) & (bins.acc <= 1) & (bins.conf >= 0) & (bins.conf <= 1))
    a = cal.expected_calibration_error(probs, labels)
    b = cal.expected_calibration_error(probs[perm], labels[perm])
    assert a == pytest.approx(b, abs=1e-12)
    assert 0 <= a <= 1


def test_ace_hand_example():
    probs = np.array([[0.6, 0.4], [0.7, 0.3], [0.8, 0.2], [0.9, 0.1]])
    labels = np.array([1, 0, 0, 0])
    assert cal.ace(probs, labels, 2) == pytest.approx(0.15)
    assert cal.ace(np.eye(3)[[0, 1, 2]], [0, 1, 2], 3) == 0.0
    with pytest.raises(cal.MetricError):
        cal.ace(probs, labels, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(15, 300), st.integers(1, 15))
def test_adaptive_bin_occupancy(n, M):
    values = np.random.default_rng(n).random(n)
    sizes = [len(b) for b in cal.adaptive_bins(values, M)]
    assert sum(sizes) == n and max(sizes) - min(sizes) <= 1
    if n % M == 0:
        assert set(sizes) == {n // M}


def test_sce_binary_symmetric():
    probs = np.array([[0.7, 0.3], [0.3, 0.7], [0.9, 0.1], [0.1, 0.9]])
    labels = np.array([0, 1, 1, 0])
    # class-0 and class-1 probabilities are mirror images, so both class terms agree
    per_class = [brute_force_ece(np.stack([probs[:, c], 1 - probs[:, c]], 1),
                                 (labels != c).astype(int), 15) for c in range(2)]
    assert cal.sce(probs, labels) == pytest.approx(np.mean(per_class))


def test_sce_constant_prior_predictor_one_bin():
    labels = np.repeat([0, 1, 2], [20, 30, 50])
    probs = np.tile([0.2, 0.3, 0.5], (100, 1))
    assert cal.sce(probs, labels, M=1) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sce_and_tace_nonnegative(seed):
    probs, labels = random_predictions(np.random.default_rng(seed), 60)
    assert cal.sce(probs, labels) >= 0
    assert cal.tace(probs, labels) >= 0


def test_tace_threshold_zero_is_adaptive_sce(rng):
    probs, labels = random_predictions(rng, 120, 4)
    assert cal.tace(probs, labels, threshold=0.0) == pytest.approx(
        cal.sce(probs, labels, binning="adaptive"))


def test_tace_confident_correct_is_near_zero():
    probs = np.array([[0.999, 0.0005, 0.0005]] * 10 + [[0.0005, 0.999, 0.0005]] * 10)
    labels = np.repeat([0, 1], 10)
    assert cal.tace(probs, labels, threshold=0.99) == pytest.approx(0.001, abs=1e-9)
    with pytest.raises(cal.MetricError):
        cal.tace(probs, labels, threshold=0.9995)
    with pytest.raises(cal.MetricError):
        cal.tace(probs, labels, threshold=1.0)


def test_tace_filter_is_monotone(rng):
    probs, _ = random_predictions(rng, 100, 5)
    counts = [int(np.sum(probs > t)) for t in np.linspace(0, 0.99, 30)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_reliability_series():
    bins = cal.BinStats(3, np.array([0, 4, 6]), np.array([0.0, 0.9, 0.5]), np.array([0.0, 0.7, 0.5]))
    mids, gaps, counts = zip(*cal.reliability_data(bins))
    assert mids == pytest.approx((1 / 6, 0.5, 5 / 6))
    assert gaps == pytest.approx((0.0, 0.2, 0.0))
    assert counts == (0, 4, 6)


def test_nll_and_accuracy():
    probs = np.array([[0.5, 0.5], [0.9, 0.1]])
    assert cal.nll(probs, [0, 0]) == pytest.approx(-(np.log(0.5) + np.log(0.9)) / 2)
    assert cal.accuracy(probs, [0, 0]) == 1.0 and cal.accuracy(probs, [1, 0]) == 0.5


def test_per_class_stats_modes():
    probs = np.array([[0.6, 0.4], [0.8, 0.2], [0.3, 0.7]])
    labels = np.array([0, 0, 1])
    (a0, f0, g0), (a1, f1, _) = cal.per_class_stats(probs, labels)
    assert (a0, a1) == (1.0, 1.0)
    assert f0 == pytest.approx(0.7) and g0 == pytest.approx(0.3)
    (_, fc, _), _ = cal.per_class_stats(probs, labels, conf_mode="class")
    assert fc == pytest.approx(0.7)
    stats = cal.per_class_stats(probs, labels, n_classes=3)
    assert all(math.isnan(v) for v in stats[2])


def _calibrated_problem(seed, n=4000, c=4):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=2.0, size=(n, c))
    probs = softmax(logits)
    labels = np.array([rng.choice(c, p=p) for p in probs])
    return logits, labels


def test_temperature_identity_when_already_optimal():
    logits, labels = _calibrated_problem(0)
    t = cal.temperature_fit(PredictionBatch(softmax(logits), logits), labels)
    assert t == pytest.approx(1.0, abs=0.08)


def test_temperature_recovers_shrunk_logits():
    logits, labels = _calibrated_problem(1)
    shrunk = 0.5 * logits
    t = cal.temperature_fit(PredictionBatch(softmax(shrunk), shrunk), labels)
    assert t == pytest.approx(0.5, abs=0.04)
    assert cal.scaled_nll(shrunk, labels, t) <= cal.scaled_nll(shrunk, labels, 1.0) + 1e-9


def test_temperature_errors_on_single_class():
    with pytest.raises(cal.MetricError):
        cal.temperature_fit(np.array([[0.6, 0.4], [0.7, 0.3]]), [0, 0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_temperature_never_worse_and_keeps_argmax(seed, scale):
    rng = np.random.default_rng(seed)
    probs = softmax(scale * rng.normal(size=(40, 3)))
    labels = rng.integers(0, 3, size=40)
    labels[:2] = [0, 1]
    t = cal.temperature_fit(probs, labels)
    scores = cal.scores_for_scaling(probs)
    assert t > 0
    assert cal.scaled_nll(scores, labels, t) <= cal.scaled_nll(scores, labels, 1.0) + 1e-9
    scaled = cal.apply_temperature(probs, t)
    assert np.array_equal(scaled.probs.argmax(axis=1), probs.argmax(axis=1))


def test_temperature_one_is_identity(rng):
    probs, _ = random_predictions(rng, 20, 3)
    assert np.array_equal(cal.apply_temperature(probs, 1.0).probs, probs)


def test_report_round_trip(tmp_path, rng):
    probs, labels = random_predictions(rng, 150, 5)
    report = cal.calibration_report(probs, labels)
    report.fitted_temperature = 0.8
    doc = json.loads(report.to_json())
    assert set(doc) == {"metrics", "bins", "per_class"}
    assert len(doc["bins"]) == 15 and len(doc["per_class"]) == 5
    back = cal.CalibrationReport.from_dict(doc)
    assert back.to_dict() == report.to_dict()
    for key in ("ece", "ace", "sce", "tace", "nll"):
        assert getattr(back, key) >= 0
    assert report.ece <= 1

    path = tmp_path / "rel.csv"
    cal.write_reliability_csv(report.bins, path)
    rows = path.read_text().splitlines()
    assert rows[0] == "bin_mid,gap,count"
    parsed = [tuple(float(v) for v in r.split(",")) for r in rows[1:]]
    assert parsed == [(m, g, float(c)) for m, g, c in cal.reliability_data(report.bins)]
