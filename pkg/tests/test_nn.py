import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetapprox.approx_mult import gen_accurate, gen_mitchell, gen_truncated
from hetapprox.errors import ConfigError
from hetapprox.nn import quant
from hetapprox.nn.layers import Conv2d, Dense, MaxPool2d, error_sum, int_accumulate
from hetapprox.nn.network import QuantNetwork, build_network
from hetapprox.nn.train import LRSchedule, softmax_cross_entropy

CNN = [
    {"kind": "conv2d", "name": "c1", "in_channels": 1, "out_channels": 3, "kernel": 3, "padding": 1},
    {"kind": "relu"}, {"kind": "maxpool", "size": 2},
    {"kind": "flatten"},
    {"kind": "dense", "name": "d1", "in_features": 3 * 3 * 3, "out_features": 4},
]


def small_cnn(seed=0):
    net = build_network(CNN, (1, 6, 6), seed=seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.random((5, 1, 6, 6))
    net.calibrate(x)
    return net, x


# ------------------------------------------------------------- quantization

def test_activation_calibration_example():
    qp = quant.calibrate(np.array([0.0, 1.0, 2.55]), "activation-unsigned")
    assert qp.scale == pytest.approx(0.01)
    assert qp.zero_point == 0
    assert qp.quantize(1.27) == 127


def test_weight_calibration_contains_zero():
    qp = quant.calibrate(np.array([0.5, 1.5]), "weight-affine")
    assert qp.zero_point == 0
    assert qp.dequantize(qp.quantize(0.0)) == 0.0
    qp = quant.calibrate(np.array([-1.0, 1.0]), "weight-affine")
    assert qp.dequantize(qp.quantize(0.0)) == 0.0


def test_constant_tensor_uses_scale_floor():
    qp = quant.calibrate(np.zeros(10), "activation-unsigned")
    assert qp.scale == quant.SCALE_FLOOR


def test_calibration_rejects_bad_input():
    with pytest.raises(ValueError):
        quant.calibrate(np.array([np.nan]), "weight-affine")
    with pytest.raises(ValueError):
        quant.calibrate(np.ones(3), "per-channel")


@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=50))
def test_round_trip_error_within_half_step(values):
    t = np.array(values)
    q, qp = quant.quantize(t, "weight-affine")
    assert np.all(np.abs(qp.dequantize(q) - t) <= qp.scale / 2 + 1e-9 * max(1.0, np.abs(t).max()))


# --------------------------------------------------------- integer kernels

@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 40), st.integers(1, 5), st.integers(0, 255), st.integers(0, 255),
       st.integers(0, 2**31))
def test_int_accumulate_matches_python(m, k, c, zx, zw, seed):
    rng = np.random.default_rng(seed)
    xq = rng.integers(0, 256, (m, k))
    wq = rng.integers(0, 256, (c, k))
    got = int_accumulate(xq, wq, zx, zw)
    ref = [[sum((int(xq[i, j]) - zx) * (int(wq[o, j]) - zw) for j in range(k)) for o in range(c)] for i in range(m)]
    assert got.tolist() == ref


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 30), st.integers(1, 4), st.integers(1, 7), st.integers(0, 2**31))
def test_error_sum_is_sum_of_lookups(m, k, c, t, seed):
    rng = np.random.default_rng(seed)
    xq = rng.integers(0, 256, (m, k))
    wq = rng.integers(0, 256, (c, k))
    emap = gen_truncated(t, 0.5)
    got = error_sum(xq, wq, emap, chunk=7)
    ref = [[sum(int(emap.errors[xq[i, j], wq[o, j]]) for j in range(k)) for o in range(c)] for i in range(m)]
    assert got.tolist() == ref


def test_error_sum_accurate_is_zero():
    assert not error_sum(np.full((3, 4), 200), np.full((2, 4), 100), gen_accurate()).any()


# ----------------------------------------------------------------- layers

def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    x = rng.standard_normal((2, 3, 5, 4))
    layer = Conv2d("c", w, b, padding=1)
    y = layer.fold(layer.columns(x) @ layer.w2.T + b, 2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_maxpool_backward_routes_to_argmax():
    pool = MaxPool2d(2)
    x = np.array([[[[1.0, 3.0], [2.0, 0.0]]]])
    pool.forward(x)
    g = pool.backward(np.array([[[[5.0]]]]))
    np.testing.assert_array_equal(g, [[[[0, 5.0], [0, 0]]]])


def test_mult_count_brute_force():
    net = build_network(CNN, (1, 6, 6))
    c1, d1 = net.compute_layers
    # every output element of c1 needs in_channels * 3 * 3 products
    assert c1.mult_count == 3 * 6 * 6 * (1 * 3 * 3)
    assert d1.mult_count == 27 * 4
    assert c1.fan_in == 9 and d1.fan_in == 27


def test_dense_fan_in():
    d = Dense("d", np.zeros((3, 7)), np.zeros(3))
    assert d.fan_in == 7


# ------------------------------------------------------------ network paths

def test_accurate_map_matches_int_path_exactly():
    net, x = small_cnn()
    net.assign([gen_accurate(), gen_accurate()])
    np.testing.assert_array_equal(net.forward(x, "approx"), net.forward(x, "int"))


def test_int_path_close_to_fakequant():
    net, x = small_cnn()
    np.testing.assert_allclose(net.forward(x, "int"), net.forward(x, "fakequant"), atol=1e-3)


def test_aggregate_error_identity_on_network_layer():
    net, x = small_cnn(3)
    emap = gen_mitchell(0.45)
    cap = net.capture(x)["c1"]
    diff = cap.accumulate(emap) - cap.accumulate()
    assert np.array_equal(diff, error_sum(cap.xq, cap.wq, emap))


def test_forward_requires_calibration_and_assignment():
    net = build_network(CNN, (1, 6, 6))
    x = np.zeros((1, 1, 6, 6))
    with pytest.raises(ConfigError):
        net.forward(x, "int")
    net.calibrate(np.random.default_rng(0).random((2, 1, 6, 6)))
    with pytest.raises(ConfigError):
        net.forward(x, "approx")
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 5, 5)), "float")


def test_backward_without_forward():
    net, _ = small_cnn()
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 4)))


def test_duplicate_layer_names_rejected():
    specs = [dict(CNN[0]), {"kind": "flatten"}, {**CNN[4], "name": "c1", "in_features": 108}]
    with pytest.raises(ConfigError):
        build_network(specs, (1, 6, 6))


def test_weight_gradients_match_finite_differences():
    mode = "float"
    net, x = small_cnn(5)
    labels = np.array([0, 1, 2, 3, 0])

    def loss():
        return softmax_cross_entropy(net.forward(x, mode), labels)[0]

    _, g = softmax_cross_entropy(net.forward(x, mode, record=True), labels)
    grads = net.backward(g)
    rng = np.random.default_rng(0)
    for layer in net.compute_layers:
        for arr, garr in ((layer.weight, grads.weight[layer.name]), (layer.bias, grads.bias[layer.name])):
            for idx in rng.choice(arr.size, size=min(5, arr.size), replace=False):
                i = np.unravel_index(idx, arr.shape)
                old = arr[i]
                h = 1e-6
                arr[i] = old + h
                lp = loss()
                arr[i] = old - h
                lm = loss()
                arr[i] = old
                fd = (lp - lm) / (2 * h)
                assert garr[i] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_ste_gradient_uses_dequantized_operands():
    net, x = small_cnn(2)
    labels = np.array([0, 1, 2, 3, 0])
    _, g = softmax_cross_entropy(net.forward(x, "fakequant", record=True), labels)
    ste = net.backward(g)
    d1 = net.compute_layers[1]
    h = x
    for layer in net.layers[:-1]:
        h = layer.forward(h) if layer is not net.compute_layers[0] else net._compute(layer, h, "fakequant", len(x))[0]
    xc = net.act_quant["d1"].fake_quant(d1.columns(h))
    np.testing.assert_allclose(ste.weight["d1"], g.T @ xc, rtol=1e-12, atol=1e-15)


def test_forward_is_deterministic():
    net, x = small_cnn()
    net.assign([gen_truncated(2, 0.5), gen_mitchell(0.45)])
    np.testing.assert_array_equal(net.forward(x, "approx"), net.forward(x, "approx"))


def test_checkpoint_round_trip(tmp_path):
    net, x = small_cnn(4)
    net.sigma[:] = [0.2, 0.05]
    net.save(tmp_path / "n.json")
    loaded = QuantNetwork.load(tmp_path / "n.json")
    np.testing.assert_array_equal(loaded.forward(x, "int"), net.forward(x, "int"))
    np.testing.assert_array_equal(loaded.sigma, net.sigma)
    assert (tmp_path / "n.json").read_text() == __import__("json").dumps(loaded.to_dict())


def test_lr_schedule():
    s = LRSchedule(0.1, 0.5, 2)
    assert [s.at(e) for e in range(5)] == pytest.approx([0.1, 0.1, 0.05, 0.05, 0.025])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 4))
    y = np.array([0, 3, 1])
    _, g = softmax_cross_entropy(z, y)
    h = 1e-6
    for i in range(3):
        for j in range(4):
            zp, zm = z.copy(), z.copy()
            zp[i, j] += h
            zm[i, j] -= h
            fd = (softmax_cross_entropy(zp, y)[0] - softmax_cross_entropy(zm, y)[0]) / (2 * h)
            assert g[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-10)
