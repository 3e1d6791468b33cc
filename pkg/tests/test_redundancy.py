"""Divergence oracles and the pairwise attention-row redundancy score."""

import math

import numpy as np
import pytest

from mtat.attention import AttentionMaps
from mtat.errors import DimensionError, DomainError, NumericError, UsageError
from mtat.redundancy import (
    Distribution,
    js_divergence,
    kl_divergence,
    redundancy_score,
    trace_over_steps,
)

LN2 = math.log(2.0)

# Hand-derived divergence values, frozen before wiring up the library:
#   KL((.5,.5)||(.25,.75)) = .5 ln 2 + .5 ln(2/3)
#   JS((.5,.5),(1,0)): M=(.75,.25), KL1 = .5 ln(2/3) + .5 ln 2, KL2 = ln(4/3)
KL_HALF_QUARTER = 0.14384103622589042
JS_HALF_POINT = 0.21576155433883565


def random_distribution(rng, k):
    raw = rng.uniform(0.0, 1.0, size=k) + 1e-12
    return Distribution(raw / raw.sum())


# ---------------------------------------------------------------------------
# Distribution


def test_distribution_normalizes_small_drift():
    d = Distribution([0.5, 0.5 + 4e-7])
    assert abs(sum(d.probs) - 1.0) <= 1e-15


def test_distribution_rejects_bad_vectors():
    with pytest.raises(NumericError):
        Distribution([0.5, 0.6])  # off by 0.1, far outside tolerance
    with pytest.raises(NumericError):
        Distribution([0.5, -0.5, 1.0])
    with pytest.raises(DimensionError):
        Distribution([[0.5, 0.5]])


# ---------------------------------------------------------------------------
# KLD


def test_kl_self_is_zero():
    rng = np.random.default_rng(70)
    for _ in range(10):
        p = random_distribution(rng, int(rng.integers(2, 9)))
        assert kl_divergence(p, p) == 0.0


def test_kl_hand_value():
    got = kl_divergence(Distribution([0.5, 0.5]), Distribution([0.25, 0.75]))
    assert abs(got - KL_HALF_QUARTER) <= 1e-9


def test_kl_disjoint_support_is_infinite():
    assert kl_divergence(Distribution([1.0, 0.0]), Distribution([0.0, 1.0])) == math.inf


def test_kl_zero_times_log_zero_is_zero():
    # Zero mass in p where q has mass contributes nothing.
    got = kl_divergence(Distribution([0.0, 1.0]), Distribution([0.5, 0.5]))
    assert abs(got - math.log(2.0)) <= 1e-12


def test_kl_length_mismatch():
    with pytest.raises(DimensionError):
        kl_divergence(Distribution([1.0]), Distribution([0.5, 0.5]))


# ---------------------------------------------------------------------------
# JSD


def test_js_identical_is_zero():
    d = Distribution([0.3, 0.3, 0.4])
    assert js_divergence(d, d) <= 1e-12


def test_js_disjoint_is_ln2():
    got = js_divergence(Distribution([1.0, 0.0]), Distribution([0.0, 1.0]))
    assert abs(got - LN2) <= 1e-9


def test_js_hand_value():
    got = js_divergence(Distribution([0.5, 0.5]), Distribution([1.0, 0.0]))
    assert abs(got - JS_HALF_POINT) <= 1e-9


def test_js_symmetry_and_bounds_on_random_pairs():
    rng = np.random.default_rng(71)
    for _ in range(10_000):
        k = int(rng.integers(2, 7))
        p = random_distribution(rng, k)
        q = random_distribution(rng, k)
        forward = js_divergence(p, q)
        assert forward == js_divergence(q, p)  # bitwise, not approximate
        assert -1e-15 <= forward <= LN2 + 1e-12


def test_js_finite_even_with_zeros():
    got = js_divergence(Distribution([1.0, 0.0, 0.0]), Distribution([0.0, 0.5, 0.5]))
    assert math.isfinite(got)
    assert abs(got - LN2) <= 1e-12


# ---------------------------------------------------------------------------
# redundancy score


def test_score_zero_for_identical_rows():
    row = np.array([0.2, 0.3, 0.5])
    head = np.tile(row, (4, 1))
    assert redundancy_score([head]) <= 1e-15


def test_score_ln2_for_disjoint_pair():
    head = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(redundancy_score([head]) - LN2) <= 1e-12


def test_score_matches_pair_loop_oracle():
    rng = np.random.default_rng(72)
    for heads in (1, 2, 3):
        maps = []
        for _ in range(heads):
            raw = rng.uniform(0.05, 1.0, size=(3, 4))
            maps.append(raw / raw.sum(axis=1, keepdims=True))
        want = 0.0
        for head in maps:
            for i in range(3):
                for j in range(i + 1, 3):
                    want += js_divergence(Distribution(head[i]), Distribution(head[j]))
        want *= 2.0 / (heads * 3 * 2)
        assert abs(redundancy_score(maps) - want) <= 1e-12


def test_score_column_permutation_invariance():
    rng = np.random.default_rng(73)
    raw = rng.uniform(0.05, 1.0, size=(6, 5))
    head = raw / raw.sum(axis=1, keepdims=True)
    perm = rng.permutation(5)
    assert redundancy_score([head]) == redundancy_score([head[:, perm]])


def test_score_accepts_attention_maps_capture():
    head = np.array([[1.0, 0.0], [0.0, 1.0]])
    maps = AttentionMaps.full([head, head.copy()])
    assert abs(redundancy_score(maps) - LN2) <= 1e-12


def test_score_requires_composed_maps():
    a_qt = np.array([[1.0], [1.0]])
    a_tk = np.array([[0.5, 0.5]])
    with pytest.raises(UsageError):
        redundancy_score(AttentionMaps.mediated([a_qt], [a_tk]))


def test_score_single_row_is_domain_error():
    with pytest.raises(DomainError):
        redundancy_score([np.array([[1.0]])])


def test_score_in_bounds_on_random_maps():
    rng = np.random.default_rng(74)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        raw = rng.uniform(0.0, 1.0, size=(n, n)) + 1e-9
        head = raw / raw.sum(axis=1, keepdims=True)
        score = redundancy_score([head])
        assert -1e-15 <= score <= LN2 + 1e-12


# ---------------------------------------------------------------------------
# pair subsampling


def test_subsample_cap_at_total_matches_exact_bitwise():
    rng = np.random.default_rng(75)
    raw = rng.uniform(0.05, 1.0, size=(8, 6))
    head = raw / raw.sum(axis=1, keepdims=True)
    exact = redundancy_score([head])
    assert redundancy_score([head], pair_cap=28) == exact
    assert redundancy_score([head], pair_cap=1000) == exact


def test_subsample_is_deterministic_and_unbiased_on_constant_maps():
    rng = np.random.default_rng(76)
    raw = rng.uniform(0.05, 1.0, size=(12, 5))
    head = raw / raw.sum(axis=1, keepdims=True)
    a = redundancy_score([head], pair_cap=10, seed=5)
    b = redundancy_score([head], pair_cap=10, seed=5)
    assert a == b
    c = redundancy_score([head], pair_cap=10, seed=6)
    assert c != a  # different pair sample, almost surely

    # Every pair of identical rows scores zero, so any sample agrees.
    flat = np.tile(raw[0] / raw[0].sum(), (12, 1))
    assert redundancy_score([flat], pair_cap=3, seed=0) <= 1e-15


def test_subsample_tracks_exact_score():
    rng = np.random.default_rng(77)
    raw = rng.uniform(0.01, 1.0, size=(24, 6))
    head = raw / raw.sum(axis=1, keepdims=True)
    exact = redundancy_score([head])
    approx = redundancy_score([head], pair_cap=150, seed=1)  # of 276 pairs
    assert abs(approx - exact) <= 0.25 * exact + 1e-3


def test_subsample_bad_cap():
    head = np.array([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DomainError):
        redundancy_score([head], pair_cap=0)


# ---------------------------------------------------------------------------
# traces


# Capture layout is [sample][step][layer] -> list of per-head matrices.


def test_trace_single_sample_passthrough():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.5, 0.5], [0.5, 0.5]])
    trace = trace_over_steps([[[[a]], [[b]]]])
    assert trace.scores.shape == (1, 2)
    assert abs(trace.scores[0, 0] - redundancy_score([a])) <= 1e-15
    assert abs(trace.scores[0, 1] - redundancy_score([b])) <= 1e-15
    assert trace.samples == 1 and trace.heads == 1


def test_trace_averages_samples():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.5, 0.5], [0.5, 0.5]])
    trace = trace_over_steps([[[[a]]], [[[b]]]])
    want = 0.5 * (redundancy_score([a]) + redundancy_score([b]))
    assert abs(trace.scores[0, 0] - want) <= 1e-15
    assert trace.samples == 2


def test_trace_monotone_fixture():
    # Rows drift from identical to one-hot-distinct; the score must climb
    # from zero toward ln 2.
    steps = 5
    captured = [[]]
    for step in range(steps):
        alpha = step / (steps - 1)
        base = np.full((2, 2), 0.5)
        hot = np.array([[1.0, 0.0], [0.0, 1.0]])
        captured[0].append([[(1 - alpha) * base + alpha * hot]])
    trace = trace_over_steps(captured)
    values = trace.scores[0]
    assert values[0] <= 1e-15
    assert abs(values[-1] - LN2) <= 1e-12
    assert np.all(np.diff(values) > 0)


def test_trace_shape_validation():
    a = [np.array([[1.0, 0.0], [0.0, 1.0]])]
    with pytest.raises(UsageError):
        trace_over_steps([])
    with pytest.raises(UsageError):
        trace_over_steps([[[a], [a]], [[a]]])  # second sample lost a step
    with pytest.raises(UsageError):
        trace_over_steps([[[a, a]], [[a]]])  # second sample lost a layer


def test_trace_csv_format():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    trace = trace_over_steps([[[[a]], [[a]]]], model_id="demo")
    lines = trace.to_csv().strip().split("\n")
    assert lines[0] == "layer,step,score,samples,heads"
    assert len(lines) == 3
    layer, step, score, samples, heads = lines[1].split(",")
    assert (layer, step, samples, heads) == ("0", "0", "1", "1")
    assert abs(float(score) - LN2) <= 1e-12
