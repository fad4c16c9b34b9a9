import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmlrain import autodiff as ad
from cmlrain.autodiff import Tensor, grad_check
from cmlrain.errors import InvalidAxis, NonScalarLoss, ShapeMismatch
from cmlrain.model import layers

RNG = np.random.default_rng(1234)


def leaf(*shape, scale=1.0, rng=RNG):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def fd_grad(f, x, h=1e-5):
    """Independent central-difference gradient of a numpy function."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# -- forward values ----------------------------------------------------------


def test_softmax_uniform_logits():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_matmul_identity():
    a = RNG.normal(size=(4, 3))
    np.testing.assert_array_equal((Tensor(np.eye(4)) @ Tensor(a)).data, a)


def test_sigmoid_derivative_at_zero():
    x = Tensor(np.array(0.0), requires_grad=True)
    ad.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    fd = (1 / (1 + math.exp(-1e-5)) - 1 / (1 + math.exp(1e-5))) / 2e-5
    assert abs(fd - 0.25) < 1e-10


def test_softplus_is_stable_for_large_inputs():
    out = ad.softplus(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(out, [0.0, math.log(2.0), 800.0])


def test_batched_matmul_broadcasts_weights():
    a, w = RNG.normal(size=(2, 5, 3)), RNG.normal(size=(3, 4))
    np.testing.assert_allclose((Tensor(a) @ Tensor(w)).data, a @ w)


# -- backward contract -----------------------------------------------------


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_mean_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).mean().backward()
    np.testing.assert_allclose(x.grad, [1.0, 2.0])


def test_disconnected_leaf_has_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    x.sum().backward()
    assert y.grad is None or not np.any(y.grad)


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarLoss):
        (x * 2).backward()


def test_repeated_backward_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))
    with pytest.raises(InvalidAxis):
        ad.softmax(Tensor(np.ones((2, 3))), axis=2)
    with pytest.raises(InvalidAxis):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))], axis=5)


def test_debug_mode_trips_on_nan():
    ad.set_debug(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
            ad.log(Tensor([-1.0]))
    finally:
        ad.set_debug(False)
    assert not ad.is_debug()


# -- gradient checks -------------------------------------------------------

ELEMENTWISE = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "neg": lambda a, b: ad.neg(a) * b,
    "power": lambda a, b: ad.power(a * a + 1.0, 1.5) + b,
    "exp": lambda a, b: ad.exp(a * 0.5) * b,
    "log": lambda a, b: ad.log(a * a + 0.5) + b,
    "sigmoid": lambda a, b: ad.sigmoid(a) * b,
    "tanh": lambda a, b: ad.tanh(a) * b,
    "relu": lambda a, b: ad.relu(a) * b,
    "softplus": lambda a, b: ad.softplus(a) * b,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_grad_check(name):
    op = ELEMENTWISE[name]
    for point in range(5):
        rng = np.random.default_rng(point)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        if name == "relu":
            a.data[np.abs(a.data) < 1e-3] += 0.01  # keep away from the kink
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        report = grad_check(lambda: (op(a, b) * w).sum(), [a, b], h=1e-5, tol=1e-6)
        assert report.passed, (name, point, report.max_rel_err)


STRUCTURAL = {
    "matmul": ([(3, 4), (4, 2)], lambda a, b: a @ b),
    "batched_matmul": ([(2, 3, 4), (2, 4, 5)], lambda a, b: a @ b),
    "broadcast_add": ([(2, 3, 4), (1, 3, 4)], lambda a, b: a + b),
    "transpose": ([(2, 3, 4), (3, 2)], lambda a, b: a.transpose(0, 2, 1) @ b),
    "reshape": ([(2, 6), (3, 4)], lambda a, b: a.reshape(4, 3) @ b),
    "slice": ([(4, 5), (2, 3)], lambda a, b: a[1:3, ::2] * b),
    "fancy_index": ([(4, 3), (5, 3)], lambda a, b: a[np.array([0, 2, 2, 3, 0])] * b),
    "concat": ([(2, 3), (2, 4)], lambda a, b: ad.concat([a, b], axis=1)),
    "stack": ([(2, 3), (2, 3)], lambda a, b: ad.stack([a, b], axis=1)),
    "sum_axis": ([(3, 4), (4,)], lambda a, b: a.sum(axis=0) * b),
    "mean_axis": ([(3, 4), (3, 1)], lambda a, b: a.mean(axis=1, keepdims=True) * b),
    "softmax": ([(3, 5), (3, 5)], lambda a, b: ad.softmax(a, axis=-1) * b),
    "softmax_axis1": ([(2, 5, 1), (2, 5, 1)], lambda a, b: ad.softmax(a, axis=1) * b),
    "layer_norm": ([(3, 6), (6,)], lambda a, g: ad.layer_norm(a, g, g * 0.5)),
}


@pytest.mark.parametrize("name", sorted(STRUCTURAL))
def test_structural_grad_check(name):
    shapes, op = STRUCTURAL[name]
    for point in range(5):
        rng = np.random.default_rng(100 + point)
        ts = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        w = rng.normal(size=op(*ts).shape)
        report = grad_check(lambda: (op(*ts) * w).sum(), ts, h=1e-5, tol=1e-5)
        assert report.passed, (name, point, report.max_rel_err)


@pytest.mark.parametrize("cell", ["gru", "rnn"])
@pytest.mark.parametrize("reverse", [False, True])
def test_recurrent_scan_grad_check(cell, reverse):
    g = 3 if cell == "gru" else 1
    for point in range(5):
        rng = np.random.default_rng(200 + point)
        xg = Tensor(rng.normal(size=(2, 6, g * 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, g * 4)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=(g * 4,)) * 0.5, requires_grad=True)
        proj = rng.normal(size=(2, 6, 4))
        report = grad_check(lambda: (ad.recurrent_scan(xg, w, b, cell, reverse) * proj).sum(), [xg, w, b])
        assert report.max_rel_err < 1e-6, report.max_rel_err


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_scan_matches_unrolled_cell(reverse):
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 7, 2)), requires_grad=True)
    w_ih, w_hh = leaf(2, 12, scale=0.5, rng=rng), leaf(4, 12, scale=0.5, rng=rng)
    b_ih, b_hh = leaf(12, scale=0.5, rng=rng), leaf(12, scale=0.5, rng=rng)
    ps = [x, w_ih, w_hh, b_ih, b_hh]
    grads = []
    for fused in (True, False):
        for p in ps:
            p.zero_grad()
        out = layers.gru_direction(x, w_ih, w_hh, b_ih, b_hh, reverse=reverse, fused=fused)
        (out * out).sum().backward()
        grads.append((out.data.copy(), [p.grad.copy() for p in ps]))
    np.testing.assert_allclose(grads[0][0], grads[1][0], atol=1e-14)
    for a, b in zip(grads[0][1], grads[1][1]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_grad_check_square_at_three():
    x = Tensor(np.array([3.0]), requires_grad=True)
    report = grad_check(lambda: (x * x).sum(), [x])
    assert report.max_rel_err < 1e-7
    x.zero_grad()
    (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_grad_check_linear_is_exact():
    x = Tensor(RNG.normal(size=5), requires_grad=True)
    w = RNG.normal(size=5)
    report = grad_check(lambda: (x * w).sum(), [x])
    assert report.max_rel_err < 1e-9


def test_grad_check_detects_a_wrong_gradient():
    x = Tensor(RNG.normal(size=4), requires_grad=True)

    def bad():
        out = ad.tanh(x)
        out._backward = lambda g: (2.0 * g,)  # deliberately wrong
        return out.sum()

    assert not grad_check(bad, [x]).passed


def test_fd_oracle_agrees_with_layer_norm_backward():
    x0 = RNG.normal(size=(2, 5))
    w = RNG.normal(size=(2, 5))
    g, b = np.ones(5), np.zeros(5)

    def f(v):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return float((((v - mu) / np.sqrt(var + 1e-5)) * w).sum())

    x = Tensor(x0, requires_grad=True)
    (ad.layer_norm(x, Tensor(g), Tensor(b)) * w).sum().backward()
    np.testing.assert_allclose(x.grad, fd_grad(f, x0), atol=1e-8)


# -- invariants ------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_and_shift_invariance(x, c):
    s = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, s, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_row_moments(x):
    x = x + np.linspace(0, 1, 8)  # avoid constant rows where variance is eps-dominated
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-10
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


def test_dropout_identities():
    x = Tensor(RNG.normal(size=(5, 5)))
    rng = np.random.default_rng(0)
    assert ad.dropout(x, 0.3, train=False, rng=rng) is x
    assert ad.dropout(x, 0.0, train=True, rng=rng) is x


def test_dropout_is_inverted_and_reproducible():
    x = Tensor(np.ones((200, 200)))
    a = ad.dropout(x, 0.3, True, ad.make_rng(9)).data
    b = ad.dropout(x, 0.3, True, ad.make_rng(9)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.7}
    assert abs(a.mean() - 1.0) < 0.02


def test_derived_streams_are_independent_and_stable():
    a = ad.derive(7, 1, 3).random(4)
    np.testing.assert_array_equal(a, ad.derive(7, 1, 3).random(4))
    assert not np.array_equal(a, ad.derive(7, 1, 4).random(4))
    assert not np.array_equal(a, ad.derive(8, 1, 3).random(4))
    r1, r2 = ad.split(7, 2)
    assert not np.array_equal(r1.random(3), r2.random(3))


# -- serialization ---------------------------------------------------------


def test_tensor_bundle_round_trip(tmp_path):
    arrays_in = {"w": RNG.normal(size=(3, 4)), "idx": np.arange(5, dtype=np.int64), "s": np.array(2.5)}
    ad.save_tensors(tmp_path / "b.bin", arrays_in, {"note": "x"})
    out, meta = ad.load_tensors(tmp_path / "b.bin")
    assert meta == {"note": "x"}
    for k, v in arrays_in.items():
        assert out[k].dtype == v.dtype
        np.testing.assert_array_equal(out[k], v)
    t = Tensor(RNG.normal(size=(2, 2)))
    ad.save_tensor(tmp_path / "t.bin", t)
    np.testing.assert_array_equal(ad.load_tensor(tmp_path / "t.bin").data, t.data)


def test_tensor_bundle_is_little_endian_with_json_header(tmp_path):
    ad.save_tensors(tmp_path / "b.bin", {"x": np.array([1.0, 2.0])})
    raw = (tmp_path / "b.bin").read_bytes()
    assert raw[:4] == b"CMLT"
    assert raw[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_tensor_bundle_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(Exception):
        ad.load_tensors(p)
