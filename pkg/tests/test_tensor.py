import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vspe import tensor as T
from vspe.oracles import trilinear_direct
from vspe.tensor import Tensor
from vspe.verify import gradcheck


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_componentwise():
    assert np.array_equal((T.tensor([1.0, 2.0]) + T.tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_mul_by_zeros_has_zero_grad():
    x = leaf(np.arange(4.0))
    y = x * T.zeros((4,), dtype=np.float64)
    y.sum().backward()
    assert np.array_equal(y.data, np.zeros(4))
    assert np.array_equal(x.grad, np.zeros(4))


def test_relu_subgradient_mask():
    x = leaf([-1.0, 2.0])
    x.relu().sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0])


def test_relu_at_zero_is_zero():
    x = leaf([0.0])
    x.relu().sum().backward()
    assert x.grad[0] == 0.0


def test_matmul_identity_and_hand_sum():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal((T.tensor(a) @ T.tensor(np.eye(4))).data, a)
    out = T.tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.tensor([[1.0], [1.0]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert gradcheck(lambda x, y: (x @ y).sum(), [a, b]) < 1e-6


def test_matmul_identity_association_bitwise():
    rng = np.random.default_rng(2)
    a, b = T.tensor(rng.normal(size=(5, 5))), T.tensor(rng.normal(size=(5, 3)))
    eye = T.tensor(np.eye(5))
    assert np.array_equal(((a @ eye) @ b).data, (a @ b).data)


def test_softmax_constant_and_stability():
    assert np.allclose(T.softmax(T.tensor(np.full(4, 3.0))).data, 0.25, atol=0, rtol=1e-15)
    out = T.softmax(T.tensor([1e4, 1e4 - 1000.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 1.0 and out[1] < 1e-300


def test_softmax_jacobian():
    x = np.random.default_rng(3).normal(size=(2, 5))
    w = np.random.default_rng(4).normal(size=(2, 5))
    assert gradcheck(lambda t: (T.softmax(t, axis=-1) * Tensor(w)).sum(), [x]) < 1e-6


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_sums_to_one(x):
    s = T.softmax(T.tensor(x), axis=-1).data.sum(-1)
    assert np.all(np.abs(s - 1.0) < 1e-9)


def test_layer_norm_constant_row_and_identity_affine():
    out = T.layer_norm(T.tensor(np.full((2, 6), 7.0))).data
    assert np.array_equal(out, np.zeros((2, 6)))
    x = np.random.default_rng(5).normal(size=(3, 6))
    plain = T.layer_norm(T.tensor(x)).data
    aff = T.layer_norm(T.tensor(x), T.tensor(np.ones(6)), T.tensor(np.zeros(6))).data
    assert np.array_equal(plain, aff)


def test_layer_norm_grad():
    rng = np.random.default_rng(6)
    x, g, b, w = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6), rng.normal(size=(3, 6))
    assert gradcheck(lambda t, gg, bb: (T.layer_norm(t, gg, bb) * Tensor(w)).sum(), [x, g, b]) < 1e-6


def test_conv_identity_kernel():
    x = np.random.default_rng(7).normal(size=(1, 2, 4, 5, 3))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    assert np.array_equal(T.conv3d(T.tensor(x), T.tensor(w)).data, x)


def test_conv_output_extent():
    x = T.tensor(np.zeros((1, 1, 8, 8, 8)))
    out = T.conv3d(x, T.tensor(np.zeros((1, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 4, 4, 4)


def test_conv_grad_2x4x4x4():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(3, 2, 2, 2))
    err = gradcheck(lambda a, k, c: (T.conv3d(a, k, c, stride=2, padding=1) * Tensor(proj)).sum(), [x, w, b])
    assert err < 1e-5


def test_conv_matches_direct_correlation():
    # direct 7-loop sum
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 5, 4, 3))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    out = T.conv3d(T.tensor(x), T.tensor(w), padding=1, stride=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(2):
        for d in range(5):
            for h in range(4):
                for k in range(3):
                    ref[0, o, d, h, k] = np.sum(xp[0, :, d:d + 3, h:h + 3, k:k + 3] * w[o])
    assert np.max(np.abs(out - ref)) < 1e-12


def test_backward_sum_and_zero_scale():
    x = leaf(np.arange(5.0))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(5))
    y = leaf(np.arange(5.0))
    ((y * y).sin().sum() * 0.0).backward()
    assert np.array_equal(y.grad, np.zeros(5))


def test_composite_conv_attention_graph():
    from vspe.nn import attention

    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 1, 4, 4, 4))
    w = rng.normal(size=(4, 1, 3, 3, 3)) * 0.3
    wq = rng.normal(size=(4, 4)) * 0.5
    target = rng.normal(size=(1, 1, 8, 4))

    def f(x, w, wq):
        feat = T.conv3d(x, w, stride=2, padding=1).relu()  # [1, 4, 2, 2, 2]
        tok = feat.reshape(1, 4, 8).transpose(0, 2, 1).unsqueeze(1)  # [1, 1, 8, 4]
        out, _ = attention(tok @ wq, tok, tok)
        return ((out - Tensor(target)) ** 2).sum()

    assert gradcheck(f, [x, w, wq]) < 1e-4


def test_grid_sample_matches_direct_interpolation():
    rng = np.random.default_rng(11)
    values = rng.normal(size=(3, 4, 5, 2))
    loc = rng.uniform(-0.1, 1.1, size=(40, 3))
    out = T.grid_sample3d(T.tensor(values[None]), T.tensor(loc[None])).data[0]
    assert np.max(np.abs(out - trilinear_direct(values, loc))) < 1e-12


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(12)
        x = leaf(rng.normal(size=(4, 4)))
        loss = T.softmax(x @ x, axis=-1).log().sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_broadcast_grad_unbroadcasts():
    a = leaf(np.ones((3, 1)))
    b = leaf(np.ones((1, 4)))
    (a * b).sum().backward()
    assert a.grad.shape == (3, 1) and np.array_equal(a.grad, np.full((3, 1), 4.0))
    assert np.array_equal(b.grad, np.full((1, 4), 3.0))


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_primitive_suite_subset_passes():
    from vspe.verify import primitive_suite

    results = primitive_suite(seeds=3)
    assert results and all(r.passed for r in results), [r for r in results if not r.passed]
