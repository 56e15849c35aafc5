import math

import numpy as np
import pytest

from cstformer import functional as F
from cstformer import tensor as T
from cstformer.errors import ConfigError, ShapeError
from cstformer.gradcheck import check_gradients
from cstformer.tensor import Tensor

from conftest import leaf


def naive_conv2d(x, w, b, stride, pad):
    """Six nested loops, straight from the cross-correlation definition."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(Cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


# ------------------------------------------------------------------- conv2d
def test_conv2d_all_ones_sums_to_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = F.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_naive_loops(rng, stride, pad):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    ref = naive_conv2d(x, w, b, stride, pad)
    np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-12)


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(ShapeError, match="input channels"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(ShapeError, match="height"):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 4))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_rejects_zero_stride():
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# -------------------------------------------------------------- depthwise
def test_depthwise_single_channel_equals_conv2d(rng):
    x = rng.standard_normal((2, 1, 6, 7))
    w = rng.standard_normal((1, 1, 3, 3))
    a = F.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_depthwise_identity_kernels(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(F.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_depthwise_matches_per_channel_conv2d(rng):
    x = rng.standard_normal((2, 5, 7, 6))
    w = rng.standard_normal((5, 1, 3, 3))
    b = rng.standard_normal(5)
    out = F.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    for c in range(5):
        ref = F.conv2d(Tensor(x[:, c:c + 1]), Tensor(w[c:c + 1]), Tensor(b[c:c + 1]), padding=1).data
        np.testing.assert_allclose(out[:, c:c + 1], ref, rtol=1e-6, atol=1e-12)


# ----------------------------------------------------------------- linear
def test_linear_identity():
    x = np.arange(6.0).reshape(2, 3)
    out = F.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_ones_weight_sums():
    out = F.linear(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(out.data, [6.0, 6.0])


def test_linear_matches_matrix_product(rng):
    x = rng.standard_normal((2, 5, 7))
    w = rng.standard_normal((4, 7))
    b = rng.standard_normal(4)
    out = F.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, np.einsum("bsi,oi->bso", x, w) + b, rtol=1e-6)


# ---------------------------------------------------------------- softmax
def test_softmax_uniform():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros(5))).data, np.full(5, 0.2))


def test_softmax_analytic_pair():
    np.testing.assert_allclose(F.softmax(Tensor(np.array([0.0, math.log(3)]))).data, [0.25, 0.75])


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((4, 6))
    a = F.softmax(Tensor(x)).data
    b = F.softmax(Tensor(x + 1e4)).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)
    assert (a >= 0).all()


# ---------------------------------------------------------------- pooling
def test_max_pool_matches_window_max(rng):
    x = rng.standard_normal((2, 3, 10, 8))
    out = F.max_pool2d(Tensor(x), (5, 2)).data
    ref = x.reshape(2, 3, 2, 5, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, ref)


def test_max_pool_unit_kernel_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 4)))
    assert F.max_pool2d(x, (1, 1)) is x


def test_avg_pool_matches_window_mean(rng):
    x = rng.standard_normal((2, 3, 10, 8))
    out = F.avg_pool2d(Tensor(x), (5, 2)).data
    np.testing.assert_allclose(out, x.reshape(2, 3, 2, 5, 4, 2).mean(axis=(3, 5)))


def test_pool_mode_validation():
    with pytest.raises(ConfigError):
        F.pool2d(Tensor(np.zeros((1, 1, 2, 2))), (2, 2), "min")


# ----------------------------------------------------------------- norms
def test_batch_norm_train_normalizes_and_updates_buffers(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    rm, rv = np.array([1.0, 2.0, 3.0]), np.array([4.0, 1.0, 0.25])
    out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, False, eps=0.0).data
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv)[None, :, None, None])


def test_layer_norm_last_axis(rng):
    x = rng.standard_normal((3, 4, 10)) * 5 + 1
    out = F.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10))).data
    np.testing.assert_allclose(out.mean(-1), 0, atol=1e-10)
    np.testing.assert_allclose(out.std(-1), 1, atol=1e-3)


def test_dropout_seeded_and_scaled():
    x = Tensor(np.ones((1000,)))
    a = F.dropout(x, 0.25, True, np.random.Generator(np.random.Philox(key=3))).data
    b = F.dropout(x, 0.25, True, np.random.Generator(np.random.Philox(key=3))).data
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1 / 0.75}
    assert F.dropout(x, 0.25, False, None) is x


# ------------------------------------------------------------------- mhsa
def mhsa_params(rng, E):
    return {k: (leaf(rng.standard_normal((E, E)) / math.sqrt(E)), leaf(rng.standard_normal(E) * 0.1))
            for k in ("q", "k", "v", "out")}


def test_mhsa_single_token_is_value_path(rng):
    E = 8
    p = mhsa_params(rng, E)
    x = Tensor(rng.standard_normal((3, 1, E)))
    out, w = F.mhsa(x, p, 2, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones_like(w.data))
    ref = F.linear(F.linear(x, *p["v"]), *p["out"]).data
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_mhsa_permutation_equivariance(rng):
    E = 16
    p = mhsa_params(rng, E)
    x = rng.standard_normal((2, 7, E))
    perm = rng.permutation(7)
    a = F.mhsa(Tensor(x[:, perm]), p, 4).data
    b = F.mhsa(Tensor(x), p, 4).data[:, perm]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_mhsa_two_tokens_hand_computed():
    # One head, E = 2, identity q/k/v/out projections, zero biases.
    eye = Tensor(np.eye(2))
    zero = Tensor(np.zeros(2))
    p = {k: (eye, zero) for k in ("q", "k", "v", "out")}
    x = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    out = F.mhsa(Tensor(x), p, 1).data
    s = 1 / math.sqrt(2)
    # token 0: scores (1*s, 0); token 1: scores (0, 4*s)
    w0 = np.exp([s, 0.0]) / np.exp([s, 0.0]).sum()
    w1 = np.exp([0.0, 4 * s]) / np.exp([0.0, 4 * s]).sum()
    ref = np.array([[w0[0] * x[0, 0] + w0[1] * x[0, 1], w1[0] * x[0, 0] + w1[1] * x[0, 1]]])
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_mhsa_heads_must_divide_embed(rng):
    with pytest.raises(ConfigError):
        F.mhsa(Tensor(np.zeros((1, 2, 6))), mhsa_params(rng, 6), 4)


# -------------------------------------------------------- gradient checks
GRAD_CASES = {
    "conv2d": lambda r: (
        (lambda x, w, b: F.conv2d(x, w, b, 1, 1)), [(2, 3, 5, 6), (4, 3, 3, 3), (4,)]),
    "conv2d_strided": lambda r: (
        (lambda x, w, b: F.conv2d(x, w, b, 2, 1)), [(1, 2, 6, 7), (3, 2, 3, 3), (3,)]),
    "conv2d_pointwise": lambda r: (
        (lambda x, w, b: F.conv2d(x, w, b)), [(2, 3, 4, 5), (6, 3, 1, 1), (6,)]),
    "depthwise_conv2d": lambda r: (
        (lambda x, w, b: F.depthwise_conv2d(x, w, b, 1, 1)), [(2, 3, 5, 6), (3, 1, 3, 3), (3,)]),
    "linear": lambda r: ((lambda x, w, b: F.linear(x, w, b)), [(2, 3, 5), (4, 5), (4,)]),
    "softmax": lambda r: ((lambda x: F.softmax(x, axis=-1)), [(3, 6)]),
    "max_pool2d": lambda r: ((lambda x: F.max_pool2d(x, (5, 2))), [(2, 2, 10, 6)]),
    "avg_pool2d": lambda r: ((lambda x: F.avg_pool2d(x, (5, 2))), [(2, 2, 10, 6)]),
    "batch_norm_train": lambda r: (
        (lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True)),
        [(4, 3, 3, 3), (3,), (3,)]),
    "batch_norm_eval": lambda r: (
        (lambda x, g, b: F.batch_norm(x, g, b, np.full(3, 0.5), np.full(3, 2.0), False)),
        [(4, 3, 3, 3), (3,), (3,)]),
    "layer_norm": lambda r: ((lambda x, g, b: F.layer_norm(x, g, b)), [(3, 4, 8), (8,), (8,)]),
    "mhsa": lambda r: (
        (lambda x, *w: F.mhsa(x, {"q": (w[0], w[1]), "k": (w[2], w[3]),
                                  "v": (w[4], w[5]), "out": (w[6], w[7])}, 2)),
        [(2, 5, 8)] + [(8, 8), (8,)] * 4),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_layer_gradients_match_finite_differences(name):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        fn, shapes = GRAD_CASES[name](rng)
        inputs = [leaf(rng.standard_normal(s) * (0.5 if len(s) == 2 else 1.0)) for s in shapes]
        proj = np.random.default_rng(99 + seed)
        out_shape = fn(*inputs).shape
        r = Tensor(proj.standard_normal(out_shape))
        checked = {f"in{i}": t for i, t in enumerate(inputs)}
        if name == "mhsa":
            # softmax ignores a constant shift, so the key bias has zero gradient
            # and finite differences there measure only rounding noise
            kb = checked.pop("in4")
        errs = check_gradients(lambda: T.tsum(T.mul(fn(*inputs), r)), checked)
        assert max(errs.values()) <= 1e-4, (name, seed, errs)
        if name == "mhsa":
            assert np.abs(kb.grad).max() < 1e-12
