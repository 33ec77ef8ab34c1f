import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformrl.autodiff import (
    Adam,
    Conv2d,
    Linear,
    MLP,
    Parameter,
    SGD,
    Tensor,
    concat,
    conv2d,
    getitem,
    linear,
    load_archive,
    make_optimizer,
    matmul,
    mlp_forward,
    no_grad,
    relu,
    reshape,
    save_archive,
    set_default_dtype,
    softmax,
    swapaxes,
    texp,
    tmean,
    tsum,
)
from gradcheck import check_gradients

RNG = np.random.default_rng(20240817)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    m = RNG.normal(size=(3, 4))
    out = matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_computed():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_is_row_broadcast_of_b():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 5))

    check_gradients(lambda ta, tb: tsum(matmul(ta, tb)), [a, b])

    ta = Tensor(a, requires_grad=True)
    loss = tsum(matmul(ta, Tensor(b)))
    loss.backward()
    expected = np.tile(b.sum(axis=1), (3, 1))
    np.testing.assert_allclose(ta.grad, expected, rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_batched_shared_weight_grad():
    x = RNG.normal(size=(5, 3, 4))
    w = RNG.normal(size=(4, 2))
    check_gradients(lambda tx, tw: tsum(matmul(tx, tw)), [x, w])


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform():
    out = softmax(Tensor(np.full(7, 3.25)), axis=-1)
    np.testing.assert_allclose(out.data, np.full(7, 1.0 / 7.0), atol=1e-12)


def test_softmax_no_overflow():
    out = softmax(Tensor([1000.0, 0.0]), axis=-1)
    assert out.data[0] == pytest.approx(1.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_gradient():
    x = RNG.normal(size=(4, 6))
    w = RNG.normal(size=(4, 6))
    check_gradients(lambda t: tsum(mulw(t, w)), [x])


def mulw(t, w):
    return softmax(t, axis=-1) * Tensor(w)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e4, max_value=1e4,
                          allow_nan=False, allow_infinity=False),
                min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    arr = np.asarray(values)
    out = softmax(Tensor(arr), axis=-1)
    assert abs(out.data.sum() - 1.0) < 1e-9
    assert (out.data >= 0).all()
    if arr.max() - arr.min() < 700:  # beyond that exp underflows to exact 0
        assert (out.data > 0).all()


# -- relu / mlp -------------------------------------------------------------

def test_mlp_zero_weights_gives_bias():
    rng = np.random.default_rng(0)
    layer = Linear(3, 2, rng)
    layer.weight.data[:] = 0.0
    layer.bias.data[:] = [0.5, -1.5]
    out = mlp_forward([layer], Tensor(RNG.normal(size=(4, 3))))
    np.testing.assert_allclose(out.data, np.tile([0.5, -1.5], (4, 1)))


def test_mlp_identity_passthrough():
    rng = np.random.default_rng(0)
    layer = Linear(3, 3, rng)
    layer.weight.data[:] = np.eye(3)
    layer.bias.data[:] = 0.0
    x = RNG.normal(size=(5, 3))
    out = mlp_forward([layer], Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_mlp_gradient_all_layers():
    rng = np.random.default_rng(1)
    mlp = MLP((3, 5, 2), rng)
    x = RNG.normal(size=(4, 3)) + 0.3  # keep relu inputs off the kink

    def loss(tx, w0, b0, w1, b1):
        return tsum(mlp_forward([(w0, b0), (w1, b1)], tx))

    arrays = [x] + [p.data.copy() for p in mlp.parameters()]
    check_gradients(loss, arrays)


# -- conv2d ------------------------------------------------------------------

def test_conv2d_one_by_one_identity():
    img = RNG.uniform(size=(1, 6, 6))
    kern = np.ones((1, 1, 1, 1))
    out = conv2d(Tensor(img), Tensor(kern), stride=1, padding="same")
    np.testing.assert_allclose(out.data, img)


def test_conv2d_averaging_constant_interior():
    img = np.full((1, 8, 8), 0.7)
    kern = np.full((1, 1, 3, 3), 1.0 / 9.0)
    out = conv2d(Tensor(img), Tensor(kern), stride=1, padding="same")
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 0.7, atol=1e-12)


def test_conv2d_kernel_gradient():
    img = RNG.uniform(size=(2, 5, 5))
    kern = RNG.normal(size=(3, 2, 3, 3)) * 0.2
    check_gradients(
        lambda ti, tk: tsum(conv2d(ti, tk, stride=2, padding="same")),
        [img, kern])


def test_conv2d_valid_padding_gradient():
    img = RNG.uniform(size=(1, 7, 7))
    kern = RNG.normal(size=(2, 1, 3, 3)) * 0.2
    check_gradients(
        lambda ti, tk: tsum(conv2d(ti, tk, stride=2, padding="valid")),
        [img, kern])


def test_conv2d_batched_matches_single():
    imgs = RNG.uniform(size=(3, 2, 6, 6))
    kern = RNG.normal(size=(4, 2, 3, 3))
    batched = conv2d(Tensor(imgs), Tensor(kern), stride=2, padding="same")
    for i in range(3):
        single = conv2d(Tensor(imgs[i]), Tensor(kern), stride=2, padding="same")
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ValueError, match="larger than input"):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- backward ----------------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_sum_of_softmax_is_constant():
    x = Tensor(RNG.normal(size=6), requires_grad=True)
    tsum(softmax(x, axis=-1)).backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_visits_each_node_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = x * 2.0          # node 2
    b = x + 1.0          # node 3
    c = a * b            # node 4
    loss = tsum(c)       # node 5
    assert loss.backward() == 5
    # diamond: dc/dx = 2*(x+1) + 2x = 4x + 2
    np.testing.assert_allclose(x.grad, 4.0 * x.data + 2.0)


def test_backward_accumulates_across_calls():
    x = Tensor(2.0, requires_grad=True)
    y = x * 3.0
    y.backward()
    y.backward()
    assert x.grad == pytest.approx(6.0)
    x.zero_grad()
    (x * 3.0).backward()
    assert x.grad == pytest.approx(3.0)


def test_no_grad_blocks_recording():
    x = Tensor(1.0, requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.backward()


def test_nan_guard_raises():
    with pytest.raises(FloatingPointError):
        texp(Tensor(1000.0))
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan])


# -- remaining op gradients on randomized small shapes -----------------------

ELEMENTWISE_CASES = [
    ("add", lambda a, b: tsum(a + b), 2, (3, 4)),
    ("add_broadcast_bias", lambda a, b: tsum(a + reshape(b, (1, 4))), None, None),
    ("mul", lambda a, b: tsum(a * b), 2, (3, 4)),
    ("sub", lambda a, b: tsum(a - b), 2, (3, 4)),
    ("power", lambda a: tsum(a ** 3), 1, (3, 4)),
    ("exp", lambda a: tsum(texp(a)), 1, (3, 4)),
    ("relu", lambda a: tsum(relu(a)), 1, (3, 4)),
    ("mean", lambda a: tmean(a), 1, (3, 4)),
    ("mean_axis", lambda a: tsum(tmean(a, axis=0)), 1, (3, 4)),
    ("sum_axis_keepdims", lambda a: tsum(tsum(a, axis=1, keepdims=True) ** 2), 1, (3, 4)),
    ("reshape", lambda a: tsum(reshape(a, (4, 3)) ** 2), 1, (3, 4)),
    ("swapaxes", lambda a: tsum(swapaxes(a, 0, 1) ** 2), 1, (3, 4)),
    ("scalar_div", lambda a: tsum(a / 3.0), 1, (3, 4)),
]


@pytest.mark.parametrize("name,fn,n_args,shape",
                         [c for c in ELEMENTWISE_CASES if c[2] is not None],
                         ids=[c[0] for c in ELEMENTWISE_CASES if c[2] is not None])
def test_op_gradients(name, fn, n_args, shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    arrays = [rng.normal(size=shape) + 0.5 for _ in range(n_args)]
    if name == "relu":
        arrays = [np.where(np.abs(a) < 0.1, 0.3, a) for a in arrays]
    check_gradients(fn, arrays)


def test_add_broadcast_bias_gradient():
    rng = np.random.default_rng(7)
    check_gradients(lambda a, b: tsum((a + b) ** 2),
                    [rng.normal(size=(3, 4)), rng.normal(size=(4,))])


def test_concat_gradient():
    rng = np.random.default_rng(8)
    check_gradients(lambda a, b: tsum(concat([a, b], axis=1) ** 2),
                    [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))])


def test_getitem_gradient():
    rng = np.random.default_rng(9)
    rows = np.array([0, 2, 2])
    cols = np.array([1, 0, 3])
    check_gradients(lambda a: tsum(getitem(a, (rows, cols)) ** 2),
                    [rng.normal(size=(3, 4))])


def test_linear_gradient():
    rng = np.random.default_rng(10)
    check_gradients(
        lambda x, w, b: tsum(linear(x, w, b) ** 2),
        [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))])


# -- optimizers ---------------------------------------------------------------

def test_sgd_single_step():
    p = Parameter(np.array(1.0), name="x")
    (p * p).backward()
    SGD([p], lr=0.1).step()
    assert p.data == pytest.approx(0.8)
    assert p.grad is None  # zeroed after the step


def test_zero_gradient_no_change():
    for method in ("sgd", "adam"):
        p = Parameter(np.array([1.0, -2.0]), name="x")
        p._accumulate(np.zeros(2))
        make_optimizer(method, [p], lr=0.1).step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_missing_gradient_errors():
    p = Parameter(np.array(1.0), name="x")
    with pytest.raises(ValueError, match="no gradient"):
        SGD([p], lr=0.1).step()


def test_sgd_reaches_quadratic_minimum():
    scale = np.array([1.0, 2.0, 3.0])
    target = np.array([1.0, -2.0, 3.0])
    p = Parameter(np.zeros(3), name="x")
    opt = SGD([p], lr=0.1)
    for _ in range(200):
        tsum(Tensor(scale) * (p - Tensor(target)) ** 2).backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-6)


def test_adam_reaches_quadratic_minimum():
    target = np.array([0.5, -0.25])
    p = Parameter(np.zeros(2), name="x")
    opt = Adam([p], lr=0.05)
    for _ in range(600):
        tsum((p - Tensor(target)) ** 2).backward()
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-6)


# -- serialization -------------------------------------------------------------

def test_archive_round_trip_bit_exact(tmp_path):
    entries = {
        "net/weight": RNG.normal(size=(4, 3)),
        "net/bias": RNG.normal(size=(3,)),
        "scalar": np.array(3.141592653589793),
        "single32": RNG.normal(size=(2, 2)).astype(np.float32),
    }
    path = tmp_path / "params.drlc"
    save_archive(path, entries)
    loaded = load_archive(path)
    assert list(loaded) == list(entries)
    for name, arr in entries.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].tobytes() == arr.tobytes()


def test_archive_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.drlc"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="bad magic"):
        load_archive(path)


# -- dtype flag -----------------------------------------------------------------

def test_float32_flag():
    set_default_dtype(np.float32)
    try:
        t = Tensor([1.0, 2.0])
        assert t.data.dtype == np.float32
        out = matmul(Tensor(np.eye(2)), Tensor(RNG.normal(size=(2, 2))))
        assert out.data.dtype == np.float32
    finally:
        set_default_dtype(np.float64)
    assert Tensor(1.0).data.dtype == np.float64


def test_conv2d_output_shape_same_vs_valid():
    img = RNG.uniform(size=(1, 16, 16))
    kern = RNG.normal(size=(4, 1, 3, 3))
    assert conv2d(Tensor(img), Tensor(kern), stride=2, padding="same").shape == (4, 8, 8)
    assert conv2d(Tensor(img), Tensor(kern), stride=2, padding="valid").shape == (4, 7, 7)


def test_conv2d_layer_bias_broadcast():
    rng = np.random.default_rng(11)
    layer = Conv2d(1, 3, 3, rng, stride=2)
    layer.bias.data[:] = np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1)
    layer.kernels.data[:] = 0.0
    out = layer(Tensor(np.zeros((1, 8, 8))))
    np.testing.assert_allclose(out.data[0], 1.0)
    np.testing.assert_allclose(out.data[2], 3.0)
