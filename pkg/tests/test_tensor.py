import math

import numpy as np
import pytest
from helpers import away_from_kinks, check_grads, fd_grad

from stme import tensor as T
from stme.tensor import (NonFiniteError, ShapeError, Tensor, conv2d,
                         cross_entropy, layer_norm, matmul, no_grad,
                         softmax_rows, trace_graph)


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[2.0, 3.0], [4.0, 5.0]]))
    assert np.array_equal(matmul(a, b).data, b.data)


def test_matmul_hand_case():
    out = matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]])))
    assert out.data.tolist() == [[11.0]]


def test_matmul_vs_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = matmul(Tensor(a), Tensor(b)).data
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            acc = 0.0
            for k in range(7):
                acc += a[i, k] * b[k, j]
            want[i, j] = acc
    assert np.abs(got - want).max() < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 4, 5)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    assert np.allclose(conv2d(x, k).data, x.data)


def test_conv2d_all_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = conv2d(x, k)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 9.0


def _conv_oracle(x, w, b, stride, pad):
    B, Cin, H, W = x.shape
    Cout, _, kH, kW = w.shape
    sH, sW = stride
    pH, pW = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pH, pH), (pW, pW)))
    Ho = (H + 2 * pH - kH) // sH + 1
    Wo = (W + 2 * pW - kW) // sW + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * sH : i * sH + kH, j * sW : j * sW + kW]
                    out[n, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


def test_conv2d_vs_direct_summation_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 1), pad=(1, 0)).data
    want = _conv_oracle(x, w, b, (1, 1), (1, 0))
    assert np.abs(got - want).max() < 1e-6


def test_conv2d_non_integral_extent_errors():
    x = Tensor(np.zeros((1, 1, 5, 5)))
    w = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ShapeError, match="non-integral"):
        conv2d(x, w, stride=(2, 2), pad=(0, 0))


def test_conv2d_3d_input_round_trips_shape():
    x = Tensor(np.ones((2, 4, 3)))
    w = Tensor(np.ones((5, 2, 3, 1)))
    out = conv2d(x, w, pad=(1, 0))
    assert out.shape == (5, 4, 3)


def test_softmax_rows_symmetry():
    out = softmax_rows(Tensor(np.array([[0.0, 0.0]])))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_rows_stability():
    out = softmax_rows(Tensor(np.array([[1000.0, 0.0]])))
    assert np.all(np.isfinite(out.data))
    assert abs(out.data[0, 0] - 1.0) < 1e-6
    assert abs(out.data[0, 1]) < 1e-6


def test_softmax_rows_vs_exp_sum_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((4, 9))
    got = softmax_rows(Tensor(x)).data
    want = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    assert np.abs(got - want).max() < 1e-12
    assert np.abs(got.sum(axis=1) - 1.0).max() < 1e-6


def test_softmax_rows_shift_invariance():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((3, 5))
    a = softmax_rows(Tensor(x)).data
    b = softmax_rows(Tensor(x + 13.25)).data
    assert np.abs(a - b).max() < 1e-12


def test_cross_entropy_hand_cases():
    out = cross_entropy(Tensor(np.array([[0.0, 0.0]])), np.array([0]))
    assert abs(out.item() - math.log(2.0)) < 1e-9
    out = cross_entropy(Tensor(np.array([[20.0, -20.0]])), np.array([0]))
    assert out.item() < 1e-6


def test_cross_entropy_vs_logsumexp_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 10))
    t = rng.integers(0, 10, size=6)
    got = cross_entropy(Tensor(x), t).item()
    lse = np.log(np.exp(x - x.max(1, keepdims=True)).sum(1)) + x.max(1)
    want = (lse - x[np.arange(6), t]).mean()
    assert abs(got - want) < 1e-9


def test_cross_entropy_errors():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((0, 3))), np.array([], dtype=int))
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_square():
    x = Tensor(np.array([3.0]), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_constant_is_none():
    x = Tensor(np.array([3.0]))
    y = (x * x).sum()
    y.backward()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * first)
    x.zero_grad()
    (x * x).sum().backward()
    assert np.allclose(x.grad, first)


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    z = (y + y).sum()  # y consumed twice
    assert len(trace_graph(z)) == len(set(id(n) for n in trace_graph(z)))
    z.backward()
    assert np.allclose(x.grad, [6.0])  # d(2x^2)/dx = 4x ... at 1.5 -> 6


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    assert y._parents == ()


def test_non_finite_error_surfaces():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0], dtype=np.float32)))
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0])))


def test_serial_determinism_bitwise():
    def run():
        rng = np.random.default_rng(99)
        a = Tensor(rng.standard_normal((16, 16)).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal((16, 16)).astype(np.float32), requires_grad=True)
        loss = T.tmean(T.relu(matmul(a, b)))
        loss.backward()
        return loss.data.copy(), a.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# finite-difference suite: every differentiable op, randomized shapes


def _shapes(rng, n, lo=1, hi=5, dims=2):
    return [tuple(int(rng.integers(lo, hi + 1)) for _ in range(dims)) for _ in range(n)]


N_SHAPES = 20


def test_fd_elementwise_binary():
    rng = np.random.default_rng(42)
    for op in (T.add, T.sub, T.mul, T.div):
        for shape in _shapes(rng, N_SHAPES):
            a = rng.standard_normal(shape)
            b = rng.standard_normal(shape)
            if op is T.div:
                b = away_from_kinks(b, 0.3)
            check_grads(lambda x, y, op=op: op(x, y), [a, b], rng)


def test_fd_broadcast_bias_add():
    rng = np.random.default_rng(43)
    for _ in range(N_SHAPES):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = rng.standard_normal((m, n))
        b = rng.standard_normal((n,))
        check_grads(T.add, [a, b], rng)
        check_grads(T.mul, [a, b], rng)


def test_fd_elementwise_unary():
    rng = np.random.default_rng(44)
    cases = [
        (T.neg, lambda r, s: r.standard_normal(s)),
        (T.exp, lambda r, s: r.standard_normal(s)),
        (T.tanh, lambda r, s: r.standard_normal(s)),
        (T.sqrt, lambda r, s: np.abs(r.standard_normal(s)) + 0.3),
        (T.log, lambda r, s: np.abs(r.standard_normal(s)) + 0.3),
        (T.relu, lambda r, s: away_from_kinks(r.standard_normal(s))),
        (T.absolute, lambda r, s: away_from_kinks(r.standard_normal(s))),
        (lambda x: T.power(x, 3.0), lambda r, s: r.standard_normal(s)),
        (lambda x: T.power(x, -0.5), lambda r, s: np.abs(r.standard_normal(s)) + 0.5),
    ]
    for op, draw in cases:
        for shape in _shapes(rng, N_SHAPES):
            check_grads(op, [draw(rng, shape)], rng)


def test_fd_matmul():
    rng = np.random.default_rng(45)
    for _ in range(N_SHAPES):
        m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
        check_grads(matmul, [rng.standard_normal((m, k)), rng.standard_normal((k, n))], rng)
    for _ in range(N_SHAPES):
        b, m, k, n = (int(rng.integers(1, 4)) for _ in range(4))
        check_grads(matmul, [rng.standard_normal((b, m, k)), rng.standard_normal((b, k, n))], rng)


def test_fd_linear():
    rng = np.random.default_rng(46)
    for _ in range(N_SHAPES):
        b, n, din, dout = (int(rng.integers(1, 4)) for _ in range(4))
        check_grads(T.linear,
                    [rng.standard_normal((b, n, din)), rng.standard_normal((din, dout)),
                     rng.standard_normal(dout)], rng)


def test_fd_conv2d():
    rng = np.random.default_rng(47)
    configs = []
    while len(configs) < N_SHAPES:
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 3))
        sh = int(rng.integers(1, 3))
        ph, pw = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        H = int(rng.integers(kh, 7))
        W = int(rng.integers(kw, 5))
        if (H + 2 * ph - kh) % sh:
            continue
        if (W + 2 * pw - kw) % 1:
            continue
        configs.append((cin, cout, kh, kw, sh, ph, pw, H, W))
    for cin, cout, kh, kw, sh, ph, pw, H, W in configs:
        x = rng.standard_normal((2, cin, H, W))
        w = rng.standard_normal((cout, cin, kh, kw))
        b = rng.standard_normal(cout)
        check_grads(lambda x_, w_, b_: conv2d(x_, w_, b_, stride=(sh, 1), pad=(ph, pw)),
                    [x, w, b], rng)


def test_fd_shape_ops():
    rng = np.random.default_rng(48)
    for _ in range(N_SHAPES):
        a, b, c = (int(rng.integers(1, 4)) for _ in range(3))
        x = rng.standard_normal((a, b, c))
        check_grads(lambda t: T.reshape(t, (a * b, c)), [x], rng)
        check_grads(lambda t: T.transpose(t, (2, 0, 1)), [x], rng)
        check_grads(lambda t: T.repeat_axis(t, 3, axis=1), [x], rng)
        y = rng.standard_normal((a, b, c))
        check_grads(lambda u, v: T.concat([u, v], axis=1), [x, y], rng)
        check_grads(lambda t: T.split(t, 2, [1, c - 1])[0] if c > 1 else T.split(t, 2, [c])[0],
                    [x], rng)


def test_fd_reductions():
    rng = np.random.default_rng(49)
    for shape in _shapes(rng, N_SHAPES, dims=3):
        x = rng.standard_normal(shape)
        check_grads(lambda t: T.tsum(t), [x], rng)
        check_grads(lambda t: T.tmean(t, axis=1), [x], rng)
        check_grads(lambda t: T.tsum(t, axis=2, keepdims=True), [x], rng)


def test_fd_softmax_and_layer_norm():
    rng = np.random.default_rng(50)
    for shape in _shapes(rng, N_SHAPES):
        x = rng.standard_normal(shape)
        check_grads(lambda t: T.softmax(t, axis=-1), [x], rng)
        gain = rng.standard_normal(shape[-1])
        bias = rng.standard_normal(shape[-1])
        check_grads(layer_norm, [x, gain, bias], rng)


def test_fd_embedding():
    rng = np.random.default_rng(51)
    for _ in range(N_SHAPES):
        v, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        idx = rng.integers(0, v, size=(3, 2))
        table = rng.standard_normal((v, d))
        check_grads(lambda t, idx=idx: T.embedding(t, idx), [table], rng)


def test_fd_cross_entropy():
    rng = np.random.default_rng(52)
    for _ in range(N_SHAPES):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        x = rng.standard_normal((n, c))
        t = rng.integers(0, c, size=n)
        check_grads(lambda l: cross_entropy(l, t), [x], rng)
        select = rng.random(n) < 0.6
        if select.any():
            check_grads(lambda l: cross_entropy(l, t, select=select), [x], rng)


def test_fd_dropout_mask_consistency():
    rng = np.random.default_rng(53)
    x = rng.standard_normal((4, 5))
    t = Tensor(x, requires_grad=True)
    out = T.dropout(t, 0.5, np.random.default_rng(7))
    keep = (out.data != 0)
    out.sum().backward()
    assert np.array_equal(t.grad != 0, keep)
    assert np.allclose(out.data[keep], x[keep] * 2.0)
