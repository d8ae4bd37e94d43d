import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ktnas import numcore as nc
from gradcheck import check, scalarize


def param(rng, *shape, scale=0.7):
    return nc.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


UNARY = [nc.sigmoid, nc.tanh, nc.identity, nc.softmax, nc.tsum, nc.tmean, nc.transpose]


@pytest.mark.parametrize("op", UNARY, ids=lambda f: f.__name__)
def test_unary_grads(op):
    rng = np.random.default_rng(0)
    x = param(rng, 3, 4)
    assert check(lambda: scalarize(op(x), np.random.default_rng(1)), [x]) < 1e-6


def test_relu_grad_away_from_kink():
    rng = np.random.default_rng(0)
    x = nc.Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, size=(3, 4)), requires_grad=True)
    assert check(lambda: scalarize(nc.relu(x), np.random.default_rng(2)), [x]) < 1e-6


@pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 4), (4,)), ((3, 1), (1, 4)), ((2, 3, 4), (3, 4))])
def test_broadcast_arithmetic_grads(shapes):
    rng = np.random.default_rng(3)
    a, b = param(rng, *shapes[0]), param(rng, *shapes[1])
    for op in (nc.add, nc.sub, nc.mul):
        assert check(lambda: scalarize(op(a, b), np.random.default_rng(4)), [a, b]) < 1e-6


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((2, 3, 4), (4, 5)),
                                    ((2, 3, 4), (2, 4, 5))])
def test_matmul_grads(shapes):
    rng = np.random.default_rng(5)
    a, b = param(rng, *shapes[0]), param(rng, *shapes[1])
    assert check(lambda: scalarize(nc.matmul(a, b), np.random.default_rng(6)), [a, b]) < 1e-6


def test_indexing_and_layout_grads():
    rng = np.random.default_rng(7)
    W = param(rng, 6, 3)
    x = param(rng, 4, 5)
    bank = param(rng, 6, 5, 3)
    bias = param(rng, 6, 3)
    idx = np.array([1, 4, 1, 0])

    def f():
        g = nc.gather_rows(W, idx)
        b = nc.bank_affine(x, bank, idx, bias)
        joined = nc.concat([g, b, nc.slice_cols(x, 1, 3)])
        return nc.tsum(nc.pick(joined, np.array([0, 3, 7, 2]))) + nc.tsum(nc.column(joined, 5))
    assert check(f, [W, x, bank, bias]) < 1e-6


def test_memory_op_grads():
    rng = np.random.default_rng(8)
    w = param(rng, 2, 4)
    M = param(rng, 2, 4, 3)
    e = param(rng, 2, 3)
    x0 = param(rng, 4, 3)

    def f():
        sw = nc.softmax(w)
        out = nc.weighted_rows(sw, M) + nc.tsum(nc.outer(sw, nc.sigmoid(e)) * M)
        return scalarize(out, np.random.default_rng(9)) + scalarize(nc.expand_rows(x0, 2), np.random.default_rng(10))
    assert check(f, [w, M, e, x0]) < 1e-6


def test_loss_grads():
    rng = np.random.default_rng(11)
    z = param(rng, 7)
    y = rng.integers(0, 2, 7)
    m = np.array([1, 1, 0, 1, 1, 0, 1.0])
    assert check(lambda: nc.sigmoid_bce_with_logits(z, y, m), [z]) < 1e-6
    assert check(lambda: nc.bce(nc.sigmoid(z), y, m), [z]) < 1e-6
    assert check(lambda: nc.mse(nc.sigmoid(z), np.linspace(0, 1, 7)), [z]) < 1e-6


def test_bce_with_logits_matches_plain_bce():
    z = nc.Tensor(np.array([-3.0, -0.2, 0.0, 1.5, 4.0]))
    y = np.array([0, 1, 1, 0, 1])
    assert nc.sigmoid_bce_with_logits(z, y).item() == pytest.approx(nc.bce(nc.sigmoid(z), y).item(), rel=1e-10)


def test_bce_with_logits_stable_for_large_logits():
    z = nc.Tensor(np.array([800.0, -800.0]))
    loss = nc.sigmoid_bce_with_logits(z, np.array([1, 0])).item()
    assert loss == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_gradient_is_linear_in_the_loss(a, b, seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 3, 2)
    W = param(rng, 2, 2)
    r1, r2 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

    def grad(loss_fn):
        x.grad = W.grad = None
        nc.backward(loss_fn(), [x, W])
        return x.grad.copy(), W.grad.copy()

    def out():
        return nc.tanh(nc.affine(x, W))
    g1 = grad(lambda: nc.tsum(out() * nc.Tensor(r1)))
    g2 = grad(lambda: nc.tsum(out() * nc.Tensor(r2)))
    g = grad(lambda: nc.tsum(out() * nc.Tensor(a * r1 + b * r2)))
    for gi, g1i, g2i in zip(g, g1, g2):
        np.testing.assert_allclose(gi, a * g1i + b * g2i, atol=1e-10)


def test_shared_subexpression_accumulates():
    x = nc.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    nc.backward(nc.tsum(y + y * 3.0))
    assert x.grad[0] == pytest.approx(16.0)


def test_second_backward_raises():
    x = nc.Tensor(np.ones(2), requires_grad=True)
    loss = nc.tsum(x * x)
    nc.backward(loss)
    with pytest.raises(nc.GraphStateError):
        nc.backward(loss)


def test_backward_needs_scalar():
    x = nc.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(nc.DimensionError):
        nc.backward(x * 2.0)


def test_unreached_params_get_zero_grad():
    x = nc.Tensor(np.ones(2), requires_grad=True)
    unused = nc.Tensor(np.ones((2, 2)), requires_grad=True)
    nc.backward(nc.tsum(x), [x, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_no_grad_builds_no_graph():
    x = nc.Tensor(np.ones(2), requires_grad=True)
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_affine_shape_error_names_shapes():
    with pytest.raises(nc.DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        nc.affine(nc.Tensor(np.ones((3, 4))), nc.Tensor(np.ones((5, 2))))


@pytest.mark.filterwarnings("ignore:overflow")
def test_nonfinite_forward_raises():
    with pytest.raises(nc.NonFiniteError):
        nc.mul(nc.Tensor(np.array([1e308])), 1e10)


def test_activate_rejects_unknown():
    with pytest.raises(nc.ConfigurationError):
        nc.activate("gelu", nc.Tensor(np.zeros(2)))


def test_softmax_rows_sum_to_one():
    x = nc.Tensor(np.random.default_rng(0).normal(scale=30, size=(50, 7)))
    np.testing.assert_allclose(nc.softmax(x).data.sum(axis=1), 1.0, atol=1e-12)


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = nc.glorot_uniform((30, 70), rng)
    assert np.abs(w).max() <= np.sqrt(6 / 100)
    assert np.abs(w).max() > 0.9 * np.sqrt(6 / 100)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # with bias correction the first update is lr * g / (|g| + eps)
        p = nc.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 1e-3])
        nc.Adam(lr=0.1, eps=0.0).step([p])
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-12)

    def test_two_steps_by_hand(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = nc.Tensor(np.array([0.3]), requires_grad=True)
        opt = nc.Adam(lr=lr, beta1=b1, beta2=b2, eps=eps)
        x, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate((2.0, -1.0), start=1):
            p.grad = np.array([g])
            opt.step([p])
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            assert p.data[0] == pytest.approx(x, abs=1e-14)
        assert opt.step_count == 2

    def test_decoupled_weight_decay(self):
        p = nc.Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.array([0.0])
        nc.Adam(lr=0.1, weight_decay=0.5).step([p])
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_lazy_moments_and_skips(self):
        a = nc.Tensor(np.zeros(2), requires_grad=True)
        b = nc.Tensor(np.zeros(2), requires_grad=True)
        opt = nc.Adam()
        a.grad = np.ones(2)
        opt.step([a, b])
        assert opt.moments(b) is None and opt.moments(a)[2] == 1
        np.testing.assert_array_equal(b.data, 0.0)

    def test_nonfinite_gradient_names_tensor(self):
        p = nc.Tensor(np.zeros(2), requires_grad=True, name="head/W")
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(nc.NonFiniteError, match="head/W"):
            nc.Adam().step([p])
        np.testing.assert_array_equal(p.data, 0.0)

    def test_minimises_quadratic(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 3))
        target = rng.normal(size=5)
        w = nc.Tensor(np.zeros(3), requires_grad=True)
        opt = nc.Adam(lr=0.05)
        for _ in range(2000):
            w.grad = None
            nc.backward(nc.mse(nc.matmul(nc.Tensor(A), w), target))
            opt.step([w])
        ls = np.linalg.lstsq(A, target, rcond=None)[0]
        np.testing.assert_allclose(w.data, ls, atol=1e-3)


def test_no_grad_is_per_thread():
    import threading
    barrier = threading.Barrier(2)

    def worker():
        with nc.no_grad():
            barrier.wait()
            barrier.wait()

    t = threading.Thread(target=worker)
    t.start()
    barrier.wait()
    assert nc.grad_enabled()
    x = nc.Tensor(np.ones(2), requires_grad=True)
    assert nc.tsum(x * x).requires_grad
    barrier.wait()
    t.join()
    assert nc.grad_enabled()
