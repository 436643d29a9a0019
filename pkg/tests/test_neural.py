import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladder.neural import layers as L
from ladder.neural import (
    AdamConfig,
    CheckpointError,
    ConvBlock,
    NetConfig,
    NonFiniteGradient,
    adam_step,
    get_preset,
    grad_check,
    init_params,
    l2_loss,
    load_checkpoint,
    net_backward,
    net_forward,
    predict,
    save_checkpoint,
)
from ladder.neural import checkpoint
from ladder.neural.net import NetParams

TOL = 1e-4


# --- layer examples


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 6, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out, _ = L.conv2d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_ones_kernel_interior_sums():
    c = 3
    x = np.ones((1, c, 5, 5))
    out, _ = L.conv2d_forward(x, np.ones((1, c, 3, 3)), np.zeros(1))
    assert out[0, 0, 2, 2] == 9 * c
    assert out[0, 0, 0, 0] == 4 * c  # zero padding at the corner


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 3), st.integers(1, 4))
def test_conv_preserves_spatial_dims(h, w, cin, cout):
    x = np.zeros((1, cin, h, w))
    out, _ = L.conv2d_forward(x, np.zeros((cout, cin, 3, 3)), np.zeros(cout))
    assert out.shape == (1, cout, h, w)


def test_conv_shape_errors():
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 2, 3, 3)), np.zeros(1))


def test_batchnorm_normalizes():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(4, 3, 5, 5))
    c = 3
    out, cache = L.batchnorm_forward(x, np.ones(c), np.zeros(c), np.zeros(c), np.ones(c))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    out2, _ = L.batchnorm_forward(x, np.full(c, 2.0), np.full(c, 3.0), np.zeros(c), np.ones(c))
    np.testing.assert_allclose(out2.mean(axis=(0, 2, 3)), 3, atol=1e-12)
    np.testing.assert_allclose(out2.std(axis=(0, 2, 3)), 2, atol=1e-3)
    m = 4 * 25
    np.testing.assert_allclose(cache["new_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(cache["new_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_needs_two_values():
    with pytest.raises(L.ShapeError):
        L.batchnorm_forward(np.zeros((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2))


def test_maxpool_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    out, cache = L.maxpool_forward(x)
    assert out.item() == 4.0
    dx = L.maxpool_backward(np.ones((1, 1, 1, 1)), cache)
    np.testing.assert_array_equal(dx.reshape(2, 2), [[0, 0], [0, 1]])


def test_maxpool_odd_sizes_drop_last():
    out, _ = L.maxpool_forward(np.zeros((1, 1, 5, 7)))
    assert out.shape == (1, 1, 2, 3)


def test_fc_and_relu():
    x = np.array([[1.0, -2.0, 3.0]])
    out, _ = L.fc_forward(x, np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(out, x)
    r, mask = L.relu_forward(x)
    np.testing.assert_array_equal(r, [[1, 0, 3]])
    np.testing.assert_array_equal(L.relu_backward(np.ones_like(x), mask), [[1, 0, 1]])


def test_l2_loss_example():
    loss, d = l2_loss(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert loss == pytest.approx((5 + 25) / 2)
    np.testing.assert_allclose(d, [[1, 2], [-3, -4]])


# --- layer gradient checks


SHAPES = [(2, 1, 4, 4), (3, 2, 5, 3), (2, 3, 6, 6), (4, 1, 3, 7), (2, 2, 2, 2)]


def _weighted(out, r):
    return float(np.sum(out * r))


@pytest.mark.parametrize("shape", SHAPES)
def test_conv_gradients(shape):
    rng = np.random.default_rng(sum(shape))
    n, c, h, w = shape
    x = rng.normal(size=shape)
    wt = rng.normal(size=(3, c, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(n, 3, h, w))
    out, cache = L.conv2d_forward(x, wt, b)
    dx, dw, db = L.conv2d_backward(r, cache)
    f = lambda: _weighted(L.conv2d_forward(x, wt, b)[0], r)  # noqa: E731
    rep = grad_check(f, {"x": x, "w": wt, "b": b}, {"x": dx, "w": dw, "b": db})
    assert rep.worst < TOL, str(rep)


@pytest.mark.parametrize("mode", ["train", "eval"])
@pytest.mark.parametrize("shape", SHAPES)
def test_batchnorm_gradients(shape, mode):
    rng = np.random.default_rng(sum(shape) + 7)
    c = shape[1]
    x = rng.normal(2.0, 3.0, size=shape)
    g, be = rng.normal(size=c), rng.normal(size=c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
    r = rng.normal(size=shape)
    _, cache = L.batchnorm_forward(x, g, be, rm, rv, mode)
    dx, dg, db = L.batchnorm_backward(r, cache)
    f = lambda: _weighted(L.batchnorm_forward(x, g, be, rm, rv, mode)[0], r)  # noqa: E731
    rep = grad_check(f, {"x": x, "g": g, "b": be}, {"x": dx, "g": dg, "b": db})
    assert rep.worst < TOL, str(rep)


@pytest.mark.parametrize("shape", SHAPES)
def test_maxpool_gradients(shape):
    rng = np.random.default_rng(sum(shape) + 3)
    # distinct values away from ties so the max is stable under the probe step
    x = rng.permutation(np.prod(shape)).reshape(shape).astype(float) * 0.1
    out, cache = L.maxpool_forward(x)
    r = rng.normal(size=out.shape)
    dx = L.maxpool_backward(r, cache)
    rep = grad_check(lambda: _weighted(L.maxpool_forward(x)[0], r), {"x": x}, {"x": dx})
    assert rep.worst < TOL, str(rep)


@pytest.mark.parametrize("n, fin, fout", [(1, 1, 1), (2, 3, 4), (5, 7, 2), (3, 16, 16), (4, 2, 9)])
def test_fc_relu_gradients(n, fin, fout):
    rng = np.random.default_rng(n * 100 + fin * 10 + fout)
    x = rng.normal(size=(n, fin))
    w = rng.normal(size=(fout, fin))
    b = rng.normal(size=fout)
    r = rng.normal(size=(n, fout))

    def f():
        h, _ = L.fc_forward(x, w, b)
        return _weighted(L.relu_forward(h)[0], r)

    h, c_fc = L.fc_forward(x, w, b)
    _, mask = L.relu_forward(h)
    dx, dw, db = L.fc_backward(L.relu_backward(r, mask), c_fc)
    rep = grad_check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})
    assert rep.worst < TOL, str(rep)


@pytest.mark.parametrize("seed", range(5))
def test_l2_gradient(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
    _, d = l2_loss(p, t)
    rep = grad_check(lambda: l2_loss(p, t)[0], {"p": p}, {"p": d})
    assert rep.worst < TOL


TOY = NetConfig(16, (ConvBlock(2), ConvBlock(3)), (5, 16), name="toy")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_full_network_gradients(mode):
    rng = np.random.default_rng(11)
    params = init_params(TOY, seed=3, dtype=np.float64)
    for k in params.tensors:
        if k.endswith(".b") or k.endswith(".beta"):
            params.tensors[k] = rng.normal(0, 0.1, params.tensors[k].shape)
    x = rng.random((2, 1, 16, 16))
    y = rng.normal(8, 4, (2, 16))
    out, cache = net_forward(TOY, params, x, mode=mode, update_stats=False)
    _, dout = l2_loss(out, y)
    grads, _ = net_backward(TOY, cache, dout)
    assert set(grads) == set(params.trainable())

    def f():
        o, _ = net_forward(TOY, params, x, mode=mode, update_stats=False)
        return l2_loss(o, y)[0]

    rep = grad_check(f, {k: params.tensors[k] for k in params.trainable()}, grads, max_entries=40)
    assert rep.worst < TOL, str(rep)


# --- network behaviour


def test_presets():
    desk = get_preset("desk")
    assert desk.input_size == 56 and desk.fc_sizes[-1] == 16
    paper = get_preset("paper")
    assert paper.input_size == 224 and paper.fc_sizes == (4096, 16)
    with pytest.raises(KeyError):
        get_preset("nope")
    with pytest.raises(ValueError):
        NetConfig(16, (ConvBlock(2),), (5, 10))


def test_output_shape_and_dtype():
    params = init_params(TOY, seed=0)
    out = predict(TOY, params, np.zeros((3, 16, 16)))
    assert out.shape == (3, 16) and out.dtype == np.float64


def test_eval_mode_batch_independent():
    params = init_params(TOY, seed=1, dtype=np.float64)
    x = np.random.default_rng(2).random((5, 1, 16, 16))
    full = predict(TOY, params, x)
    single = np.concatenate([predict(TOY, params, x[i : i + 1]) for i in range(5)])
    np.testing.assert_allclose(full, single, atol=1e-12)


def test_zero_weights_give_zero_output():
    params = init_params(TOY, seed=1)
    for k in params.tensors:
        if k.endswith(".w"):
            params.tensors[k][:] = 0
    np.testing.assert_array_equal(predict(TOY, params, np.random.default_rng(0).random((2, 16, 16))), 0)


def test_train_mode_updates_running_stats():
    params = init_params(TOY, seed=1)
    before = params.tensors["bn0.running_mean"].copy()
    net_forward(TOY, params, np.random.default_rng(0).random((2, 1, 16, 16)), mode="train")
    assert not np.array_equal(before, params.tensors["bn0.running_mean"])
    frozen = params.copy()
    net_forward(TOY, params, np.random.default_rng(0).random((2, 1, 16, 16)), mode="train", update_stats=False)
    np.testing.assert_array_equal(frozen.tensors["bn0.running_var"], params.tensors["bn0.running_var"])


def test_init_is_deterministic():
    a, b = init_params(TOY, seed=5), init_params(TOY, seed=5)
    for k in a.tensors:
        np.testing.assert_array_equal(a[k], b[k])
    assert a["fc1.b"].sum() == 0 and np.all(a["bn1.gamma"] == 1)


# --- adam


def _one_param(value=0.0, grad=1.0):
    return NetParams({"w": np.array([value])}), {"w": np.array([grad])}


def test_adam_first_and_second_step():
    p, g = _one_param()
    adam_step(p, g, AdamConfig())
    assert p["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-15)
    adam_step(p, g, AdamConfig())
    assert p["w"][0] == pytest.approx(-2e-4 / (1 + 1e-8), abs=1e-15)
    assert p.step == 2


def test_adam_zero_gradient_is_noop():
    p, _ = _one_param(0.5)
    adam_step(p, {"w": np.zeros(1)})
    assert p["w"][0] == 0.5


def test_adam_rejects_non_finite():
    p, _ = _one_param(0.5)
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"w": np.array([np.nan])})
    assert p["w"][0] == 0.5 and p.step == 0


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)


def test_adam_descends_toy_loss():
    params = init_params(TOY, seed=2, dtype=np.float64)
    x = np.random.default_rng(4).random((4, 1, 16, 16))
    y = np.random.default_rng(5).normal(8, 2, (4, 16))
    losses = []
    for _ in range(30):
        out, cache = net_forward(TOY, params, x, mode="train")
        loss, d = l2_loss(out, y)
        losses.append(loss)
        grads, _ = net_backward(TOY, cache, d)
        adam_step(params, grads, AdamConfig(lr=1e-2))
    assert losses[-1] < losses[0]


# --- checkpoints


def _trained_toy():
    params = init_params(TOY, seed=9)
    x = np.random.default_rng(1).random((2, 1, 16, 16)).astype(np.float32)
    out, cache = net_forward(TOY, params, x, mode="train")
    grads, _ = net_backward(TOY, cache, l2_loss(out, np.ones((2, 16), np.float32))[1])
    adam_step(params, grads)
    return params


def test_checkpoint_round_trip(tmp_path):
    params = _trained_toy()
    path = tmp_path / "m.json"
    save_checkpoint(path, TOY, params, AdamConfig(), {"note": 1})
    cfg, back, adam, extra = load_checkpoint(path)
    assert cfg == TOY and adam == AdamConfig() and extra == {"note": 1}
    assert back.step == params.step
    for d1, d2 in ((params.tensors, back.tensors), (params.adam_m, back.adam_m), (params.adam_v, back.adam_v)):
        assert d1.keys() == d2.keys()
        for k in d1:
            assert d1[k].dtype == d2[k].dtype
            np.testing.assert_array_equal(d1[k], d2[k])
    # byte-exact after a second cycle
    assert checkpoint.dumps(cfg, back, adam, extra) == path.read_text()


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        checkpoint.loads("not json")
    with pytest.raises(CheckpointError):
        checkpoint.loads('{"format": "other"}')


def test_grad_check_skips_kink_probes():
    x = np.array([0.0, 1.0])
    f = lambda: float(np.sum(np.maximum(x, 0)))  # noqa: E731
    analytic = {"x": np.array([0.0, 1.0])}
    plain = grad_check(f, {"x": x}, analytic)
    assert not plain.passed  # the probe at 0 straddles the kink
    rep = grad_check(f, {"x": x}, analytic, pattern=lambda: (x > 0).tobytes())
    assert rep.passed and rep.skipped == {"x": 1} and rep.checked == {"x": 1}
