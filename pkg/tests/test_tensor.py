import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vfa import tensor as tk
from vfa.tensor import DimensionError, NumericError, Tensor

import gradcheck


def P(a):
    return tk.parameter(np.asarray(a, dtype=np.float64))


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_patch_conv(x, w, b, kernel):
    B, T, H, W, C = x.shape
    kt, kh, kw = kernel
    out = np.zeros((B, T // kt, H // kh, W // kw, w.shape[1]))
    for n in range(B):
        for t in range(T // kt):
            for h in range(H // kh):
                for q in range(W // kw):
                    patch = x[n, t * kt:(t + 1) * kt, h * kh:(h + 1) * kh, q * kw:(q + 1) * kw, :]
                    out[n, t, h, q] = patch.reshape(-1) @ w + b
    return out


# ---------------------------------------------------------------- forward values


def test_matmul_identity_and_scalar():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(tk.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    assert tk.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.abs(tk.matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    assert np.allclose(tk.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = tk.softmax_lastdim(Tensor([math.log(1), math.log(9)])).data
    assert np.abs(out - [0.1, 0.9]).max() < 1e-15
    big = tk.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all() and big[0] == pytest.approx(1.0) and big[1] < 1e-300


def test_softmax_empty_lastdim():
    with pytest.raises(DimensionError):
        tk.softmax_lastdim(Tensor(np.ones((3, 0))))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_softmax_rows_sum_to_one(seed, n):
    x = np.random.default_rng(seed).standard_normal((4, n)) * 20
    y = tk.softmax_lastdim(Tensor(x)).data
    assert np.abs(y.sum(-1) - 1).max() < 1e-12
    assert (y > 0).all() and (y <= 1).all()


def test_permute_examples():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(tk.permute(Tensor(x), (0, 1)).data, x)
    t = tk.permute(Tensor(x), (1, 0)).data
    assert t.shape == (3, 2) and all(t[j, i] == x[i, j] for i in range(2) for j in range(3))
    with pytest.raises(ValueError):
        tk.permute(Tensor(x), (0, 0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permute_round_trip_rank5(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(tuple(rng.integers(1, 4, size=5)))
    axes = tuple(rng.permutation(5))
    y = tk.permute(tk.permute(Tensor(x), axes), tk.inverse_permutation(axes))
    assert np.array_equal(y.data, x)
    assert np.array_equal(np.sort(tk.permute(Tensor(x), axes).data, axis=None), np.sort(x, axis=None))


def test_conv_patches_examples():
    rng = np.random.default_rng(2)
    w, b = rng.standard_normal((2 * 2 * 2 * 3, 5)), rng.standard_normal(5)
    zero = tk.conv3d_as_patches(Tensor(np.zeros((1, 4, 4, 4, 3))), Tensor(w), Tensor(b), (2, 2, 2))
    assert np.array_equal(zero.data, np.broadcast_to(b, zero.shape))
    x = rng.standard_normal((2, 3, 2, 2, 3))
    w1 = rng.standard_normal((3, 4))
    one = tk.conv3d_as_patches(Tensor(x), Tensor(w1), None, (1, 1, 1))
    assert np.abs(one.data - x @ w1).max() < 1e-14


def test_conv_patches_vs_sliding_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 8, 4, 3))
    w, b = rng.standard_normal((2 * 4 * 2 * 3, 6)), rng.standard_normal(6)
    out = tk.conv3d_as_patches(Tensor(x), Tensor(w), Tensor(b), (2, 4, 2)).data
    assert np.abs(out - naive_patch_conv(x, w, b, (2, 4, 2))).max() < 1e-12


def test_conv_patches_zero_pads_trailing_edge():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 5, 6, 3))
    w = rng.standard_normal((2 * 4 * 4 * 3, 2))
    out = tk.conv3d_as_patches(Tensor(x), Tensor(w), None, (2, 4, 4)).data
    padded = np.zeros((1, 4, 8, 8, 3))
    padded[:, :3, :5, :6] = x
    assert out.shape == (1, 2, 2, 2, 2)
    assert np.abs(out - naive_patch_conv(padded, w, np.zeros(2), (2, 4, 4))).max() < 1e-12


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        tk.mul(Tensor([1e200]), Tensor([1e200]))
    with pytest.raises(NumericError):
        tk.add(Tensor([np.nan]), Tensor([1.0]))


def test_ops_are_bit_repeatable():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((3, 7, 8)), rng.standard_normal((8, 5))
    a = tk.softmax_lastdim(tk.linear(Tensor(x), Tensor(w))).data
    b = tk.softmax_lastdim(tk.linear(Tensor(x), Tensor(w))).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- backward


def test_backward_trivial_cases():
    x = P(np.arange(6.0).reshape(2, 3))
    (g,) = tk.backward(tk.tensor_sum(x), [x])
    assert np.array_equal(g, np.ones((2, 3)))
    x = P(np.random.default_rng(0).standard_normal(5))
    (g,) = tk.backward(tk.tensor_sum(x * x) * 0.5, [x])
    assert np.allclose(g, x.data, rtol=0, atol=1e-15)


def test_backward_needs_scalar():
    x = P(np.ones(3))
    with pytest.raises(ValueError):
        tk.backward(x * 2.0, [x])


def test_backward_unused_parameter_gets_zeros():
    x, y = P(np.ones(3)), P(np.ones(2))
    gx, gy = tk.backward(tk.tensor_sum(x), [x, y])
    assert np.array_equal(gy, np.zeros(2))


def test_no_grad_records_nothing():
    x = P(np.ones(3))
    with tk.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shared_node_gradients_accumulate():
    x = P([1.5, -2.0])
    y = x * x
    (g,) = tk.backward(tk.tensor_sum(y + y * 3.0), [x])
    assert np.allclose(g, 8 * x.data, atol=1e-14)


def test_relu_adjoint_is_zero_at_kink():
    x = P([0.0, 1.0, -1.0])
    (g,) = tk.backward(tk.tensor_sum(tk.relu(x)), [x])
    assert g.tolist() == [0.0, 1.0, 0.0]


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


# One case per op: (name, builder(rng) -> (loss_fn, tensors)).
def _cases():
    def binary(op, sa, sb):
        def build(rng):
            a, b = P(rng.standard_normal(sa)), P(rng.standard_normal(sb))
            r = rng.standard_normal(np.broadcast_shapes(sa, sb))
            return (lambda: tk.tensor_sum(op(a, b) * r)), [a, b]
        return build

    def unary(op, shape, gap=0.0):
        def build(rng):
            x = P(_away_from_zero(rng, shape, gap) if gap else rng.standard_normal(shape))
            r = rng.standard_normal(shape)
            return (lambda: tk.tensor_sum(op(x) * r)), [x]
        return build

    def mm(sa, sb):
        def build(rng):
            a, b = P(rng.standard_normal(sa)), P(rng.standard_normal(sb))
            out = np.matmul(a.data, b.data)
            r = rng.standard_normal(out.shape)
            return (lambda: tk.tensor_sum(tk.matmul(a, b) * r)), [a, b]
        return build

    def lin(rng):
        x, w, b = P(rng.standard_normal((2, 3, 4))), P(rng.standard_normal((4, 5))), P(rng.standard_normal(5))
        r = rng.standard_normal((2, 3, 5))
        return (lambda: tk.tensor_sum(tk.linear(x, w, b) * r)), [x, w, b]

    def ln(rng):
        x = P(rng.standard_normal((3, 6)) * 2 + 1)
        w, b = P(rng.standard_normal(6)), P(rng.standard_normal(6))
        r = rng.standard_normal((3, 6))
        return (lambda: tk.tensor_sum(tk.layer_norm(x, w, b) * r)), [x, w, b]

    def conv(rng):
        x = P(rng.standard_normal((1, 3, 4, 5, 2)))
        w, b = P(rng.standard_normal((2 * 2 * 2 * 2, 3))), P(rng.standard_normal(3))
        r = rng.standard_normal((1, 2, 2, 3, 3))
        return (lambda: tk.tensor_sum(tk.conv3d_as_patches(x, w, b, (2, 2, 2)) * r)), [x, w, b]

    def shape_ops(rng):
        x = P(rng.standard_normal((2, 3, 4)))
        r = rng.standard_normal((5, 2, 3))

        def f():
            y = tk.permute(x, (2, 0, 1))
            y = tk.pad_trailing(y, (1, 0, 0))
            y = tk.roll(y, (2, -1), (0, 2))
            return tk.tensor_sum(y * r)
        return f, [x]

    def crop_concat(rng):
        x, y = P(rng.standard_normal((3, 4))), P(rng.standard_normal((3, 2)))
        r = rng.standard_normal((2, 6))
        return (lambda: tk.tensor_sum(tk.crop_leading(tk.concat([x, y], axis=1), (2, 6)) * r)), [x, y]

    def take(rng):
        table = P(rng.standard_normal((5, 3)))
        idx = rng.integers(0, 5, size=(4, 4))
        r = rng.standard_normal((4, 4, 3))
        return (lambda: tk.tensor_sum(tk.take_rows(table, idx) * r)), [table]

    def reductions(rng):
        x = P(rng.standard_normal((3, 4, 2)))
        r = rng.standard_normal((3, 2))
        return (lambda: tk.tensor_sum(tk.mean(x, axis=1) * r) + tk.tensor_sum(x, axis=None) * 0.3), [x]

    def reshape(rng):
        x = P(rng.standard_normal((2, 6)))
        r = rng.standard_normal((3, 4))
        return (lambda: tk.tensor_sum(tk.reshape(x, (3, 4)) * r)), [x]

    return {
        "add_broadcast": binary(tk.add, (3, 1, 4), (2, 4)),
        "sub_broadcast": binary(tk.sub, (3, 4), (4,)),
        "mul_broadcast": binary(tk.mul, (2, 3, 1), (1, 3, 5)),
        "relu": unary(tk.relu, (4, 5), gap=0.05),
        "absolute": unary(tk.absolute, (4, 5), gap=0.05),
        "gelu": unary(tk.gelu, (4, 5)),
        "softmax": unary(tk.softmax_lastdim, (3, 6)),
        "matmul_2d": mm((3, 4), (4, 2)),
        "matmul_batched": mm((2, 3, 3, 4), (2, 3, 4, 5)),
        "matmul_batched_by_2d": mm((2, 3, 4), (4, 2)),
        "linear": lin,
        "layer_norm": ln,
        "conv3d_as_patches": conv,
        "permute_pad_roll": shape_ops,
        "crop_concat": crop_concat,
        "take_rows": take,
        "sum_mean": reductions,
        "reshape": reshape,
    }


@pytest.mark.parametrize("name", sorted(_cases()))
def test_op_adjoint_matches_finite_differences(name):
    build = _cases()[name]
    for seed in range(50):
        rng = np.random.default_rng(seed)
        loss_fn, tensors = build(rng)
        worst, n = gradcheck.check(loss_fn, tensors, coords_per_tensor=12, rng=rng)
        assert n > 0 and worst < gradcheck.REL_TOL, (name, seed, worst)
