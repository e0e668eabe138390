import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate

from conftest import fd_error

from speechemo.nn import layers as L
from speechemo.nn import (
    SGD,
    Adam,
    ModelSpec,
    Network,
    SpecError,
    adam_step,
    build_champion_cnn,
    build_cnn1d,
    build_cnn2d,
    build_dnn,
    grad_check,
    load_network,
    save_network,
    sgd_step,
)

TOL = {np.float32: 1e-3, np.float64: 1e-6}


DTYPES = [np.float32, np.float64]


# -- convolution -----------------------------------------------------------


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(L.conv2d_forward(x, k, np.zeros(1), 1, 1), x)


def test_conv2d_sum_kernel():
    y = L.conv2d_forward(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), np.zeros(1))
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4


@settings(max_examples=30)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_conv2d_matches_scipy_correlate(C, O, H, W, kh, kw, s, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, C, H, W))
    k = rng.normal(size=(O, C, kh, kw))
    b = rng.normal(size=O)
    y = L.conv2d_forward(x, k, b, s, p)
    assert y.shape[2:] == ((H + 2 * p - kh) // s + 1, (W + 2 * p - kw) // s + 1)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    for n in range(2):
        for o in range(O):
            full = sum(correlate(xp[n, c], k[o, c], mode="valid") for c in range(C)) + b[o]
            np.testing.assert_allclose(y[n, o], full[::s, ::s], atol=1e-10)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(rng, dtype, stride, pad):
    x = rng.normal(size=(2, 2, 5, 6)).astype(dtype)
    k = (rng.normal(size=(3, 2, 3, 2)) * 0.5).astype(dtype)
    b = rng.normal(size=3).astype(dtype)
    y = L.conv2d_forward(x, k, b, stride, pad)
    r = rng.normal(size=y.shape).astype(dtype)
    dx, dk, db = L.conv2d_backward(r, x, k, stride, pad)
    err = fd_error(lambda: L.conv2d_forward(x, k, b, stride, pad), {"x": x, "k": k, "b": b},
                   {"x": dx, "k": dk, "b": db}, 1e-3, r)
    assert err <= TOL[dtype]


def test_conv2d_shape_errors():
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), np.zeros(1), pad=-1)


def test_conv1d_identity_and_sum(rng):
    x = rng.normal(size=(2, 1, 9))
    k = np.zeros((1, 1, 3))
    k[0, 0, 1] = 1
    np.testing.assert_array_equal(L.conv1d_forward(x, k, np.zeros(1), 1, 1), x)
    assert L.conv1d_forward(np.ones((1, 1, 4)), np.ones((1, 1, 4)), np.zeros(1))[0, 0, 0] == 4


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("stride, pad", [(1, 0), (3, 2)])
def test_conv1d_gradients(rng, dtype, stride, pad):
    x = rng.normal(size=(2, 3, 17)).astype(dtype)
    k = (rng.normal(size=(2, 3, 5)) * 0.5).astype(dtype)
    b = rng.normal(size=2).astype(dtype)
    y = L.conv1d_forward(x, k, b, stride, pad)
    assert y.shape[2] == (17 + 2 * pad - 5) // stride + 1
    r = rng.normal(size=y.shape).astype(dtype)
    dx, dk, db = L.conv1d_backward(r, x, k, stride, pad)
    err = fd_error(lambda: L.conv1d_forward(x, k, b, stride, pad), {"x": x, "k": k, "b": b},
                   {"x": dx, "k": dk, "b": db}, 1e-3, r)
    assert err <= TOL[dtype]


# -- pooling ---------------------------------------------------------------


def test_maxpool_block_example():
    y, _ = L.maxpool2d_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2, 2)
    assert y.item() == 4


def test_maxpool_constant_map_routes_to_first_element():
    x = np.full((1, 1, 4, 4), 3.0)
    y, arg = L.maxpool2d_forward(x, 2, 2, 2)
    np.testing.assert_array_equal(y, 3.0)
    dx = L.maxpool2d_backward(np.ones_like(y), arg, x.shape, 2, 2, 2)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    np.testing.assert_array_equal(dx[0, 0], expected)


def test_maxpool_floor_divides(rng):
    y, _ = L.maxpool2d_forward(rng.normal(size=(1, 2, 7, 9)), 2, 2, 2)
    assert y.shape == (1, 2, 3, 4)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("k, s", [(2, 2), (3, 2), (4, 4)])
def test_maxpool_gradients_away_from_ties(rng, dtype, k, s):
    # distinct values spaced far beyond eps, so no perturbation changes an argmax
    x = (rng.permutation(2 * 2 * 8 * 8).reshape(2, 2, 8, 8) * 0.1).astype(dtype)
    y, arg = L.maxpool2d_forward(x, k, k, s)
    r = rng.normal(size=y.shape).astype(dtype)
    dx = L.maxpool2d_backward(r, arg, x.shape, k, k, s)
    err = fd_error(lambda: L.maxpool2d_forward(x, k, k, s)[0], {"x": x}, {"x": dx}, 1e-3, r)
    assert err <= TOL[dtype]


def test_gap_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[7.0, 7.0], [7.0, 7.0]]]])
    np.testing.assert_array_equal(L.global_avg_pool_forward(x), [[2.5, 7.0]])


@pytest.mark.parametrize("dtype", DTYPES)
def test_gap_gradient(rng, dtype):
    x = rng.normal(size=(2, 3, 4, 5)).astype(dtype)
    r = rng.normal(size=(2, 3)).astype(dtype)
    dx = L.global_avg_pool_backward(r, x.shape)
    np.testing.assert_allclose(dx, np.broadcast_to(r[:, :, None, None] / 20, x.shape), rtol=1e-6)
    err = fd_error(lambda: L.global_avg_pool_forward(x), {"x": x}, {"x": dx}, 1e-3, r)
    assert err <= TOL[dtype]


# -- dense / relu / loss ---------------------------------------------------


def test_dense_zero_weights_gives_bias(rng):
    b = rng.normal(size=4)
    np.testing.assert_array_equal(L.dense_forward(rng.normal(size=(3, 5)), np.zeros((5, 4)), b), np.tile(b, (3, 1)))


@pytest.mark.parametrize("dtype", DTYPES)
def test_dense_gradients(rng, dtype):
    x = rng.normal(size=(4, 6)).astype(dtype)
    W = rng.normal(size=(6, 3)).astype(dtype)
    b = rng.normal(size=3).astype(dtype)
    r = rng.normal(size=(4, 3)).astype(dtype)
    dx, dW, db = L.dense_backward(r, x, W)
    err = fd_error(lambda: L.dense_forward(x, W, b), {"x": x, "W": W, "b": b}, {"x": dx, "W": dW, "b": db}, 1e-3, r)
    assert err <= TOL[dtype]


@pytest.mark.parametrize("dtype", DTYPES)
def test_relu_gradient_away_from_kink(rng, dtype):
    x = rng.normal(size=(3, 7)).astype(dtype)
    x[np.abs(x) < 0.01] = 0.5
    r = rng.normal(size=x.shape).astype(dtype)
    err = fd_error(lambda: L.relu_forward(x), {"x": x}, {"x": L.relu_backward(r, x)}, 1e-3, r)
    assert err <= TOL[dtype]


@pytest.mark.parametrize("C", [2, 7, 14])
def test_uniform_logits_loss_is_log_c(C):
    loss, _ = L.softmax_cross_entropy(np.full((3, C), 0.7), np.array([0, 1, C - 1]))
    assert loss == pytest.approx(np.log(C), abs=1e-12)


@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_cross_entropy_gradient(rng, dtype):
    z = rng.normal(size=(5, 4)).astype(dtype)
    y = rng.integers(0, 4, 5)
    _, dz = L.softmax_cross_entropy(z, y)
    one = np.ones(1)
    err = fd_error(lambda: np.array([L.softmax_cross_entropy(z, y)[0]]), {"z": z}, {"z": dz}, 1e-3, one)
    assert err <= TOL[dtype]


@given(st.lists(st.floats(-500, 500), min_size=1, max_size=20))
def test_softmax_is_on_the_simplex(logits):
    p = L.softmax(np.array(logits))
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-12


# -- optimizers ------------------------------------------------------------


def _params(rng):
    return {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}


def test_zero_gradient_leaves_parameters_unchanged(rng):
    for opt in (SGD(0.1, momentum=0.9), Adam(0.1)):
        p = _params(rng)
        before = {k: v.copy() for k, v in p.items()}
        for _ in range(3):
            opt.step(p, {k: np.zeros_like(v) for k, v in p.items()})
        for k in p:
            np.testing.assert_array_equal(p[k], before[k])


def test_one_adam_step_hand_computed():
    p = {"w": np.zeros(1)}
    adam_step(p, {"w": np.ones(1)}, lr=1e-3)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_sgd_step_is_exact(rng):
    p = _params(rng)
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    expected = {k: p[k] - 0.05 * g[k] for k in p}
    sgd_step(p, g, lr=0.05)
    for k in p:
        np.testing.assert_array_equal(p[k], expected[k])


def test_negative_lr_rejected():
    with pytest.raises(ValueError):
        SGD(-1)
    with pytest.raises(ValueError):
        Adam(-1)


def test_small_sgd_step_decreases_loss_on_dense_model():
    decreased = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        net = Network(build_dnn(3, hidden=(8,), seed=trial), (5,), dtype=np.float64)
        x = rng.normal(size=(16, 5))
        y = rng.integers(0, 3, 16)
        before, d = L.softmax_cross_entropy(net.forward(x), y)
        SGD(1e-4).step(net.params, net.backward(d))
        after, _ = L.softmax_cross_entropy(net.forward(x), y)
        decreased += after < before
    assert decreased >= 95


# -- architectures ---------------------------------------------------------


def test_champion_has_fourteen_outputs_and_the_stated_layers():
    spec = build_champion_cnn(14)
    assert spec.n_classes == 14
    convs = [d for d in spec.layers if d["type"] == "conv2d"]
    assert [c["kernel"] for c in convs] == [[12, 12], [7, 7], [3, 3], [3, 3]]
    pools = [d for d in spec.layers if d["type"] == "maxpool2d"]
    assert [p["kernel"] for p in pools] == [[2, 2]] * 3 + [[4, 4]]
    assert pools[-1]["stride"] == 4
    assert spec.layers[-2]["type"] == "global_avg_pool"


@pytest.mark.parametrize("frames", [854, 400])
def test_champion_shapes_for_log_mel_inputs(frames):
    shapes = build_champion_cnn(14).output_shapes((1, 128, frames))
    assert shapes[-1] == (14,)
    assert shapes[0] == (16, 127, frames - 1)


def test_champion_forward_accepts_other_sizes(rng):
    net = Network(build_champion_cnn(14), (1, 32, 40))
    assert net.forward(rng.normal(size=(2, 1, 32, 40))).shape == (2, 14)
    assert net.forward(rng.normal(size=(2, 1, 24, 64))).shape == (2, 14)


def test_spec_validation():
    with pytest.raises(SpecError, match="final layer"):
        ModelSpec([{"type": "relu"}])
    with pytest.raises(SpecError, match="unknown layer"):
        ModelSpec([{"type": "lstm"}, {"type": "softmax_output", "n_classes": 2}])
    with pytest.raises(SpecError, match="flat input"):
        ModelSpec([{"type": "conv2d", "out_channels": 2, "kernel": 3}, {"type": "softmax_output", "n_classes": 2}]
                  ).output_shapes((1, 8, 8))
    with pytest.raises(SpecError, match="does not fit"):
        build_cnn1d(3).output_shapes((1, 40))


def test_champion_grad_check_on_toy_input(rng):
    spec = build_champion_cnn(14, seed=1)
    x = rng.normal(size=(2, 1, 8, 16))
    assert grad_check(spec, x, [3, 9], dtype=np.float32) <= 5e-3
    assert grad_check(spec, x, [3, 9], dtype=np.float64, eps=1e-6) <= 1e-6


@pytest.mark.parametrize("spec, shape", [
    (build_cnn2d(4, n_layers=2, head="flatten", seed=2), (1, 8, 12)),
    (build_cnn2d(4, n_layers=3, head="gap", seed=2), (1, 8, 12)),
    (build_dnn(4, hidden=(16, 8), seed=2), (10,)),
    (build_cnn1d(4, seed=2), (1, 400)),
])
def test_other_architectures_grad_check(rng, spec, shape):
    x = rng.normal(size=(2,) + shape)
    assert grad_check(spec, x, [0, 3], dtype=np.float64, eps=1e-6) <= 1e-6


def test_model_save_load_round_trip(tmp_path, rng):
    net = Network(build_cnn2d(3, n_layers=2, head="gap", seed=4), (1, 8, 10))
    net.norm_mean = rng.normal(size=(1, 8, 1)).astype(np.float32)
    net.norm_std = rng.uniform(1, 2, (1, 8, 1)).astype(np.float32)
    path = tmp_path / "m.serm"
    save_network(path, net, extra={"scheme": "x"})
    back, extra = load_network(path)
    assert extra == {"scheme": "x"}
    assert back.spec.to_dict() == net.spec.to_dict()
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    np.testing.assert_array_equal(back.norm_std, net.norm_std)
    x = rng.normal(size=(2, 1, 8, 10)).astype(np.float32)
    np.testing.assert_array_equal(back.predict_proba(x), net.predict_proba(x))
    assert path.read_bytes()[:4] == b"SERM"


def test_load_rejects_other_files(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"XXXX")
    with pytest.raises(SpecError, match="not a model"):
        load_network(p)
