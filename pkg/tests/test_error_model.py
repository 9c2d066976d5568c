import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetapprox.approx_mult import ErrorMap, gen_accurate, gen_mitchell, gen_truncated
from hetapprox.error_model import (
    ErrorStats,
    OperandHistogram,
    SampleSet,
    combine_groups,
    draw_samples,
    estimate_layer_error,
    histogram,
    local_moments,
    mc_oracle,
    mc_oracle_net,
    mean_relative_error,
    relative_error,
    single_dist_mode,
    single_dist_stats,
    summarize,
)
from hetapprox.nn.network import LayerCapture
from hetapprox.nn.quant import QuantParams


def point_mass(v):
    p = np.zeros(256)
    p[v] = 1.0
    return OperandHistogram(p)


def uniform():
    return OperandHistogram(np.full(256, 1 / 256))


def test_single_dist_point_mass():
    emap = gen_truncated(2, 0.5)
    mu, sd = single_dist_stats(emap, point_mass(7), point_mass(9))
    assert mu == -31 and sd == 0


def test_single_dist_two_point_example():
    e = np.zeros((256, 256), dtype=np.int64)
    e[1, 1], e[2, 1] = 4, -2
    px = np.zeros(256)
    px[[1, 2]] = 0.5
    mu, sd = single_dist_stats(ErrorMap("toy", e), OperandHistogram(px), point_mass(1))
    assert mu == 1.0 and sd == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 7))
def test_single_dist_matches_enumeration(seed, t):
    rng = np.random.default_rng(seed)
    px = rng.dirichlet(np.full(256, 0.3))
    pw = rng.dirichlet(np.full(256, 0.3))
    emap = gen_truncated(t, 0.5)
    mu, sd = single_dist_stats(emap, OperandHistogram(px), OperandHistogram(pw))
    p = np.outer(px, pw).ravel()
    e = emap.errors.ravel().astype(float)
    m = math.fsum(p * e)
    v = math.fsum(p * (e - m) ** 2)
    assert abs(mu - m) <= 1e-9 * max(1, abs(m))
    assert abs(sd - math.sqrt(v)) <= 1e-9 * max(1, math.sqrt(v))


def test_combine_groups_example():
    mu, sd = combine_groups([(0.0, 1.0), (2.0, 1.0)])
    assert mu == 1.0 and sd == pytest.approx(math.sqrt(2.0))


def test_combine_groups_single_group_is_identity():
    assert combine_groups([(3.0, 2.0)]) == (3.0, 2.0)


def test_combine_groups_empty():
    with pytest.raises(ValueError):
        combine_groups([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=5, max_size=5), min_size=1, max_size=12))
def test_combine_groups_equals_pooled_population(groups):
    g = np.array(groups)
    stats = [(row.mean(), row.std()) for row in g]
    mu, sd = combine_groups(stats)
    assert mu == pytest.approx(g.mean(), abs=1e-9 * 1e3)
    assert sd == pytest.approx(g.std(), rel=1e-9, abs=1e-6)


def test_error_stats_scaling():
    s = ErrorStats(-0.5, 2.0, 16)
    assert s.mu_e == -8.0 and s.sigma_e == 8.0


def test_histogram_validation():
    with pytest.raises(ValueError):
        histogram([])
    with pytest.raises(ValueError):
        histogram([256])
    with pytest.raises(ValueError):
        OperandHistogram(np.full(256, 1.0))
    h = histogram([1, 1, 3, 5])
    assert h.probs[1] == 0.5 and h.probs.sum() == 1.0


def test_accurate_map_estimate_is_zero():
    samples = draw_samples(np.random.default_rng(0).integers(0, 256, (50, 64)), k=10)
    est = estimate_layer_error(gen_accurate(), 64, samples, uniform())
    assert est.mu_e == 0 and est.sigma_e == 0


def test_sample_length_must_match_fan_in():
    samples = SampleSet(np.zeros((3, 10), dtype=np.uint8))
    with pytest.raises(ValueError):
        estimate_layer_error(gen_mitchell(0.45), 12, samples, uniform())


def test_low_fan_in_warns(caplog):
    samples = SampleSet(np.full((3, 8), 9, dtype=np.uint8))
    estimate_layer_error(gen_mitchell(0.45), 8, samples, uniform())
    assert "fan-in 8" in caplog.text


def test_identical_samples_reduce_to_single_distribution():
    rng = np.random.default_rng(3)
    row = rng.integers(0, 256, 64).astype(np.uint8)
    samples = SampleSet(np.tile(row, (20, 1)))
    pw = histogram(rng.integers(0, 256, 500))
    emap = gen_mitchell(0.45)
    est = estimate_layer_error(emap, 64, samples, pw, within="joint")
    single = single_dist_mode(emap, 64, histogram(row), pw)
    assert est.mu_z == pytest.approx(single.mu_z, rel=1e-12)
    assert est.sigma_z == pytest.approx(single.sigma_z, rel=1e-12)


def test_conditional_matches_exact_variance_for_fixed_field():
    # one fixed receptive field, weights iid from pw: Var[sum_k e(x_k, w_k)] = sum_k Var_w e(x_k, w)
    rng = np.random.default_rng(5)
    row = rng.integers(0, 256, 32).astype(np.uint8)
    wv = rng.integers(0, 256, 300)
    pw = histogram(wv)
    emap = gen_mitchell(0.45)
    est = estimate_layer_error(emap, 32, SampleSet(row[None, :]), pw)
    e = emap.errors[row.astype(np.int64)][:, np.arange(256)].astype(np.float64)
    mean_k = e @ pw.probs
    var_k = ((e - mean_k[:, None]) ** 2) @ pw.probs
    assert est.mu_e == pytest.approx(mean_k.sum(), rel=1e-12)
    assert est.sigma_e == pytest.approx(np.sqrt(var_k.sum()), rel=1e-12)


def test_local_moments_joint_vs_conditional():
    rng = np.random.default_rng(0)
    samples = SampleSet(rng.integers(0, 256, (4, 40)).astype(np.uint8))
    emap = gen_truncated(3, 0.4)
    _, joint = local_moments(emap, samples, uniform(), "joint")
    _, cond = local_moments(emap, samples, uniform(), "conditional")
    assert np.all(joint >= cond)
    with pytest.raises(ValueError):
        local_moments(emap, samples, uniform(), "other")


def _capture(rng, m=300, k=128, c=6, spread=True):
    # activations: sparse-ish ReLU-like rows whose scale varies between rows
    scale = rng.uniform(5, 120, (m, 1)) if spread else np.full((m, 1), 60.0)
    xq = np.clip(rng.exponential(1, (m, k)) * scale, 0, 255).astype(np.uint8)
    wq = np.clip(rng.normal(128, 30, (c, k)), 0, 255).astype(np.uint8)
    return LayerCapture("toy", xq, wq, QuantParams(0.01, 0), QuantParams(0.01, 128), 1)


def test_multi_distribution_tracks_oracle_better_than_single():
    rng = np.random.default_rng(7)
    cap = _capture(rng)
    emap = gen_truncated(3, 0.4)
    pw = histogram(cap.wq)
    _, mc_std = mc_oracle(emap, cap)
    multi = estimate_layer_error(emap, 128, draw_samples(cap.xq, 512, seed=0), pw)
    single = single_dist_mode(emap, 128, histogram(cap.xq), pw)
    assert relative_error(multi.sigma_e, mc_std) < relative_error(single.sigma_e, mc_std)


def test_mc_oracle_accurate_is_zero():
    cap = _capture(np.random.default_rng(0), m=20)
    assert mc_oracle(gen_accurate(), cap) == (0.0, 0.0)


def test_mc_oracle_constant_error_map():
    cap = _capture(np.random.default_rng(0), m=20, k=40)
    emap = ErrorMap("plus1", np.ones((256, 256), dtype=np.int64))
    mean, std = mc_oracle(emap, cap)
    assert mean == 40.0 and std == 0.0


def test_mc_oracle_net_bad_index():
    from hetapprox.nn.network import build_network
    net = build_network([{"kind": "dense", "name": "d", "in_features": 4, "out_features": 2}], (4,))
    x = np.random.default_rng(0).random((5, 4))
    net.calibrate(x)
    with pytest.raises(ValueError):
        mc_oracle_net(gen_mitchell(0.45), net, 1, x)
    mean, std = mc_oracle_net(gen_accurate(), net, 0, x)
    assert mean == 0 and std == 0


def test_draw_samples_deterministic():
    xq = np.arange(1000).reshape(100, 10) % 256
    a = draw_samples(xq, 20, seed=[1, 2]).samples
    np.testing.assert_array_equal(a, draw_samples(xq, 20, seed=[1, 2]).samples)
    with pytest.raises(ValueError):
        draw_samples(xq, 0)


def test_relative_error_edges():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 0.0) == math.inf
    assert relative_error(1.1, 1.0) == pytest.approx(0.1)


def test_mean_relative_error():
    assert mean_relative_error(gen_accurate()) == 0.0
    assert 0 < mean_relative_error(gen_mitchell(0.45)) < mean_relative_error(gen_truncated(5, 0.1))


def test_summarize_requires_rows():
    with pytest.raises(ValueError):
        summarize([])
