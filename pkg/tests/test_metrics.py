import json
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fairvit.metrics import (
    MetricError,
    MetricsReport,
    ProbeConfig,
    bias_reduction,
    compute_report,
    mae,
    pearson,
    performance_gap,
    probe_accuracy,
    rmse,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def brute_mae(p, t):
    return sum(abs(a - b) for a, b in zip(p, t)) / len(p)


def brute_rmse(p, t):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(p))


# --- pearson -----------------------------------------------------------------


def test_pearson_examples():
    x = [1.0, 4.0, 2.0, 8.0]
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-15)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9819805060619657, abs=1e-15)


def test_pearson_matches_stdlib_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        a, b = rng.normal(size=n), rng.normal(size=n)
        assert abs(pearson(a, b) - statistics.correlation(a.tolist(), b.tolist())) <= 1e-9


def test_pearson_rejects_constant_and_short_input():
    with pytest.raises(MetricError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(MetricError):
        pearson([1.0], [2.0])
    with pytest.raises(MetricError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite),
       st.floats(0.01, 50), st.floats(-50, 50))
def test_pearson_affine_invariance(x, y, a, b):
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    assert abs(pearson(a * x + b, y) - pearson(x, y)) <= 1e-12
    assert abs(pearson(x, a * y + b) - pearson(x, y)) <= 1e-12


# --- mae / rmse ----------------------------------------------------------------


def test_mae_rmse_examples():
    assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
    assert mae([0, 0], [1, -1]) == 1 and rmse([0, 0], [1, -1]) == 1
    assert mae([0, 0], [0, 2]) == 1 and rmse([0, 0], [0, 2]) == pytest.approx(math.sqrt(2), abs=1e-15)
    with pytest.raises(MetricError):
        mae([1, 2], [1])


def test_mae_rmse_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        p, t = rng.normal(size=n), rng.normal(size=n)
        assert abs(mae(p, t) - brute_mae(p, t)) <= 1e-9
        assert abs(rmse(p, t) - brute_rmse(p, t)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_rmse_at_least_mae(pairs):
    p, t = zip(*pairs)
    assert rmse(p, t) >= mae(p, t) - 1e-12


# --- performance gap / reduction ----------------------------------------------


def test_gap_examples():
    # two groups whose absolute errors average to 0.222 and 0.257
    pred = [0.0, 0.0, 0.0, 0.0]
    target = [0.222, 0.222, 0.257, 0.257]
    group_mae, gap = performance_gap(pred, target, [0, 0, 1, 1])
    assert group_mae == {0: pytest.approx(0.222, abs=1e-15), 1: pytest.approx(0.257, abs=1e-15)}
    assert gap == pytest.approx(0.035, abs=1e-12)
    _, gap = performance_gap([0, 0], [0.211, 0.217], [0, 1])
    assert gap == pytest.approx(0.006, abs=1e-12)


def test_gap_matches_brute_force_and_is_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(4, 30))
        p, t = rng.normal(size=n), rng.normal(size=n)
        z = rng.permutation(np.arange(n) % 2)
        g0 = brute_mae(p[z == 0], t[z == 0])
        g1 = brute_mae(p[z == 1], t[z == 1])
        groups, gap = performance_gap(p, t, z)
        assert abs(groups[0] - g0) <= 1e-9 and abs(gap - abs(g0 - g1)) <= 1e-9
        _, swapped = performance_gap(p, t, 1 - z)
        assert swapped == gap


def test_gap_identical_groups_is_zero_and_empty_group_rejected():
    _, gap = performance_gap([1, 2, 1, 2], [1.5, 2.5, 1.5, 2.5], [0, 0, 1, 1])
    assert gap == 0
    with pytest.raises(MetricError, match="group 1"):
        performance_gap([1, 2], [1, 2], [0, 0])


def test_bias_reduction_examples():
    assert bias_reduction(0.035, 0.006) == pytest.approx(82.857142857142857, abs=1e-9)
    assert f"{bias_reduction(0.035, 0.006):.1f}%" == "82.9%"
    assert bias_reduction(0.2, 0.2) == 0.0
    assert bias_reduction(0.2, 0.0) == 100.0
    with pytest.raises(MetricError):
        bias_reduction(0.0, 0.1)


def test_bias_reduction_matches_brute_force():
    rng = np.random.default_rng(3)
    for gb, gf in rng.uniform(0.001, 1, (30, 2)):
        assert abs(bias_reduction(gb, gf) - (gb - gf) / gb * 100) <= 1e-9


# --- probe ---------------------------------------------------------------------


def test_probe_on_one_hot_features_is_near_perfect():
    z = np.random.default_rng(0).permutation(np.arange(200) % 2)
    assert probe_accuracy(np.eye(2)[z], z) >= 0.98


def test_probe_on_noise_is_chance():
    rng = np.random.default_rng(1)
    z = rng.permutation(np.arange(2000) % 2)
    acc = probe_accuracy(rng.normal(size=(2000, 8)), z)
    assert abs(acc - 0.5) <= 0.05


def test_probe_on_label_shuffled_features_is_chance():
    rng = np.random.default_rng(2)
    z = rng.permutation(np.arange(2000) % 2)
    features = np.eye(2)[z] + rng.normal(0, 0.1, (2000, 2))
    acc = probe_accuracy(features, rng.permutation(z))
    assert abs(acc - 0.5) <= 0.05


def test_probe_is_deterministic_and_validates():
    rng = np.random.default_rng(3)
    z = np.arange(40) % 2
    x = rng.normal(size=(40, 3)) + z[:, None]
    cfg = ProbeConfig(epochs=20)
    assert probe_accuracy(x, z, cfg) == probe_accuracy(x, z, cfg)
    with pytest.raises(MetricError):
        probe_accuracy(x[:3], z[:3])
    with pytest.raises(MetricError):
        probe_accuracy(x, z[:10])


# --- report ----------------------------------------------------------------------


def test_report_schema_and_round_trip():
    rng = np.random.default_rng(4)
    y = rng.uniform(1, 5, 40)
    pred = y + rng.normal(0, 0.3, 40)
    z = np.arange(40) % 2
    rep = compute_report(pred, y, z, features=rng.normal(size=(40, 3)), probe_cfg=ProbeConfig(epochs=5),
                         inline_adversary_accuracy=0.55)
    d = json.loads(rep.to_json())
    assert {"pc", "mae", "rmse", "group_mae", "performance_gap", "probe_accuracy"} <= set(d)
    assert d["group_counts"] == {"0": 20, "1": 20}
    assert -1 <= rep.pc <= 1 and rep.rmse >= rep.mae >= 0
    assert rep.performance_gap == abs(rep.group_mae[0] - rep.group_mae[1])
    assert MetricsReport.from_dict(d) == rep


def test_report_parse_names_missing_key():
    d = compute_report([1, 2, 3, 4], [1, 2, 3, 5], [0, 1, 0, 1]).to_dict()
    del d["performance_gap"]
    with pytest.raises(MetricError, match="performance_gap"):
        MetricsReport.from_dict(d)
