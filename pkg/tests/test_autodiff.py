"""Tensor-core tests: every primitive against independent oracles and
central finite differences at 64-bit precision."""

import numpy as np
import pytest

from mrharm import autodiff as ad
from mrharm.autodiff import Tensor
from mrharm.optim import Adam


def conv2d_loop_oracle(x, k, b, stride=1, pad=0):
    """Direct quadruple-loop convolution, independent of the vectorized path."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] \
                                    * k[fi, ci, a, bb]
                    out[ni, fi, i, j] = acc
    return out


def matmul_loop_oracle(x, w, b):
    n, d = x.shape
    _, e = w.shape
    out = np.zeros((n, e))
    for i in range(n):
        for j in range(e):
            acc = b[j]
            for kk in range(d):
                acc += x[i, kk] * w[kk, j]
            out[i, j] = acc
    return out


def numeric_grad(f, tensors, eps=1e-5):
    """Central finite differences of a scalar-valued callable."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f()
            flat[i] = orig - eps
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_gradients(build, tensors, tol=1e-4):
    """Analytic gradients of build() vs central finite differences."""
    for t in tensors:
        t.zero_grad()
    build().backward()
    numeric = numeric_grad(lambda: build().item(), tensors)
    for t, num in zip(tensors, numeric):
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert rel_err(got, num) < tol


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_1x1_kernel_scales():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.array([[[[2.0]]]]))
    b = Tensor(np.zeros(1))
    out = ad.conv2d(x, k, b)
    assert np.allclose(out.data, 2.0)
    assert out.data.shape == (1, 1, 3, 3)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 1, 5, 5)))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = ad.conv2d(x, Tensor(k), Tensor(np.zeros(1)), pad=1)
    assert np.allclose(out.data, x.data)


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    for ksize, stride, pad in [(3, 1, 0), (3, 1, 1), (4, 2, 1)]:
        k = rng.standard_normal((4, 3, ksize, ksize))
        b = rng.standard_normal(4)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
        want = conv2d_loop_oracle(x, k, b, stride, pad)
        assert np.abs(out.data - want).max() < 1e-12


def test_conv2d_shape_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    k = Tensor(np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError, match="channels"):
        ad.conv2d(x, k, Tensor(np.zeros(1)))
    k2 = Tensor(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ValueError, match="stride"):
        ad.conv2d(x, k2, Tensor(np.zeros(1)), stride=2, pad=0)
    with pytest.raises(ValueError, match="larger"):
        ad.conv2d(Tensor(np.zeros((1, 2, 2, 2))), k2, Tensor(np.zeros(1)))


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 2, 6, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    check_gradients(
        lambda: ad.sum_all(ad.mul(ad.conv2d(x, k, b, 2, 1),
                                  ad.conv2d(x, k, b, 2, 1))),
        [x, k, b])


# ---------------------------------------------------------------------------
# dense

def test_dense_identity_weight():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    out = ad.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, x.data)


def test_dense_zero_weight_gives_bias():
    x = Tensor(np.ones((4, 3)))
    b = np.array([1.0, -2.0])
    out = ad.dense(x, Tensor(np.zeros((3, 2))), Tensor(b))
    assert np.allclose(out.data, np.tile(b, (4, 1)))


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    out = ad.dense(Tensor(x), Tensor(w), Tensor(b))
    assert np.abs(out.data - matmul_loop_oracle(x, w, b)).max() < 1e-12


def test_dense_dimension_error():
    with pytest.raises(ValueError, match="inner dimensions"):
        ad.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))),
                 Tensor(np.zeros(2)))


def test_dense_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    check_gradients(lambda: ad.mean_all(ad.abs_(ad.dense(x, w, b))), [x, w, b])


# ---------------------------------------------------------------------------
# upsample + concat

def test_upsample_concat_values():
    low = Tensor(np.array([[[[5.0]]]]))
    skip = Tensor(np.zeros((1, 1, 2, 2)))
    out = ad.upsample2x_concat(low, skip)
    assert out.data.shape == (1, 2, 2, 2)
    assert np.allclose(out.data[0, 0], 5.0)
    assert np.allclose(out.data[0, 1], 0.0)


def test_upsample_grad_counts_replication():
    low = Tensor(np.array([[[[2.0]]]]), requires_grad=True)
    skip = Tensor(np.zeros((1, 1, 2, 2)))
    ad.sum_all(ad.upsample2x_concat(low, skip)).backward()
    assert np.allclose(low.grad, 4.0)


def test_upsample_concat_index_map_oracle():
    rng = np.random.default_rng(5)
    low = rng.standard_normal((2, 3, 4, 5))
    skip = rng.standard_normal((2, 2, 8, 10))
    out = ad.upsample2x_concat(Tensor(low), Tensor(skip))
    for n in range(2):
        for i in range(8):
            for j in range(10):
                for c in range(3):
                    assert out.data[n, c, i, j] == low[n, c, i // 2, j // 2]
                for c in range(2):
                    assert out.data[n, 3 + c, i, j] == skip[n, c, i, j]


def test_upsample_concat_shape_error():
    with pytest.raises(ValueError, match="2x"):
        ad.upsample2x_concat(Tensor(np.zeros((1, 1, 2, 2))),
                             Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------------------
# gumbel softmax

def test_gumbel_channel_sums_one():
    rng = np.random.default_rng(6)
    logits = Tensor(rng.standard_normal((3, 5, 4, 4)))
    out = ad.gumbel_softmax(logits, 0.7, np.random.default_rng(0))
    sums = out.data.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-9
    assert out.data.min() >= 0.0


def test_gumbel_low_temperature_saturates():
    logits = Tensor(np.array([5.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1, 1))
    out = ad.gumbel_softmax(logits, 0.01, np.random.default_rng(1))
    assert out.data.max() > 0.99


def test_gumbel_argmax_frequency_matches_analytic():
    # Gumbel-max: P(argmax = 0) for logits (1, 0) is e/(1+e) ~ 0.731
    logits = Tensor(np.zeros((10000, 2, 1, 1)))
    logits.data[:, 0] = 1.0
    out = ad.gumbel_softmax(logits, 1.0, np.random.default_rng(7))
    freq = (out.data.argmax(axis=1) == 0).mean()
    want = np.e / (1.0 + np.e)
    assert abs(freq - want) < 0.02


def test_gumbel_temperature_error():
    with pytest.raises(ValueError, match="temperature"):
        ad.gumbel_softmax(Tensor(np.zeros((1, 2))), 0.0,
                          np.random.default_rng(0))


def test_gumbel_deterministic_given_seed():
    logits = Tensor(np.random.default_rng(8).standard_normal((2, 4, 3, 3)))
    a = ad.gumbel_softmax(logits, 0.5, np.random.default_rng(42))
    b = ad.gumbel_softmax(logits, 0.5, np.random.default_rng(42))
    assert np.array_equal(a.data, b.data)


def test_gumbel_gradient_noise_held_constant():
    rng = np.random.default_rng(9)
    logits = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    # same rng seed on every evaluation so finite differences see fixed noise
    def build():
        return ad.mean_all(ad.mul(
            ad.gumbel_softmax(logits, 0.8, np.random.default_rng(11)),
            Tensor(np.arange(24.0).reshape(2, 3, 2, 2))))
    check_gradients(build, [logits])


# ---------------------------------------------------------------------------
# backward semantics

def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.sum_all(ad.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_unreachable_leaf_stays_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    ad.sum_all(ad.mul(x, x)).backward()
    assert y.grad is None


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.sum_all(ad.mul(x, x))
    loss.backward()
    loss.backward()
    assert np.allclose(x.grad, [4.0, 8.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.mul(x, x).backward()


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = ad.mul(x, x)           # x^2
    z = ad.sum_all(ad.mul(y, y))  # x^4 -> dz/dx = 4 x^3 = 32
    z.backward()
    assert np.allclose(x.grad, [32.0])


# ---------------------------------------------------------------------------
# elementwise primitives: finite differences

def test_elementwise_gradients():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((3, 4)) + 0.1, requires_grad=True)
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    cases = [
        lambda: ad.sum_all(ad.abs_(ad.sub(x, y))),
        lambda: ad.mean_all(ad.exp_(ad.mul_const(x, 0.3))),
        lambda: ad.sum_all(ad.leaky_relu(ad.mul(x, y), 0.2)),
        lambda: ad.mean_all(ad.sigmoid(ad.add(x, y))),
        lambda: ad.sum_all(ad.mul(ad.narrow(x, 1, 1, 2), ad.narrow(y, 1, 0, 2))),
        lambda: ad.sum_all(ad.mul(ad.reshape(x, (4, 3)), ad.reshape(y, (4, 3)))),
    ]
    for build in cases:
        x.zero_grad()
        y.zero_grad()
        check_gradients(build, [x, y])


def test_broadcast_spatial_gradient():
    v = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    out = ad.broadcast_spatial(v, 3, 5)
    assert out.data.shape == (1, 2, 3, 5)
    ad.sum_all(out).backward()
    assert np.allclose(v.grad, [[15.0, 15.0]])


def test_where_mask_gradient():
    rng = np.random.default_rng(12)
    a = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    mask = np.array([1.0, 0.0, 1.0, 0.0]).reshape(4, 1) * np.ones((4, 2))
    check_gradients(lambda: ad.sum_all(ad.mul(ad.where_mask(mask, a, b),
                                              ad.where_mask(mask, a, b))),
                    [a, b])


def test_bce_with_logits_matches_reference():
    rng = np.random.default_rng(13)
    z = rng.standard_normal(8)
    t = (rng.random(8) > 0.5).astype(float)
    loss = ad.bce_with_logits(Tensor(z), t)
    p = 1 / (1 + np.exp(-z))
    want = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert abs(loss.item() - want) < 1e-12


def test_bce_with_logits_gradient_and_weights():
    rng = np.random.default_rng(14)
    z = Tensor(rng.standard_normal((6, 1)), requires_grad=True)
    t = (rng.random((6, 1)) > 0.5).astype(float)
    w = np.array([1, 1, 0, 1, 0, 1.0]).reshape(6, 1)
    check_gradients(lambda: ad.bce_with_logits(z, t, w), [z])
    empty = ad.bce_with_logits(z, t, np.zeros((6, 1)))
    assert empty.item() == 0.0


# ---------------------------------------------------------------------------
# composition: 3-layer composite against finite differences of the composite

def test_three_layer_composite_gradient():
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((1, 1, 8, 8)))
    k1 = Tensor(rng.standard_normal((2, 1, 3, 3)) * 0.5, requires_grad=True)
    b1 = Tensor(np.zeros(2), requires_grad=True)
    k2 = Tensor(rng.standard_normal((3, 2, 4, 4)) * 0.5, requires_grad=True)
    b2 = Tensor(np.zeros(3), requires_grad=True)
    w = Tensor(rng.standard_normal((3 * 4 * 4, 2)) * 0.5, requires_grad=True)
    bd = Tensor(np.zeros(2), requires_grad=True)

    def build():
        h = ad.leaky_relu(ad.conv2d(x, k1, b1, 1, 1), 0.2)
        h = ad.leaky_relu(ad.conv2d(h, k2, b2, 2, 1), 0.2)
        h = ad.dense(ad.reshape(h, (1, 3 * 4 * 4)), w, bd)
        return ad.mean_all(ad.abs_(h))
    check_gradients(build, [k1, b1, k2, b2, w, bd])


def test_no_grad_suppresses_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_grad_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = np.ones(1)
    opt.step()
    # bias-corrected first step: -lr * 1/(1 + eps)
    assert abs(p.data[0] + 1e-3) < 1e-9


def test_adam_deterministic_runs():
    def run():
        rng = np.random.default_rng(100)
        p = Tensor(rng.standard_normal(5), requires_grad=True)
        opt = Adam([p], lr=1e-2)
        for _ in range(10):
            opt.zero_grad()
            ad.sum_all(ad.mul(p, p)).backward()
            opt.step()
        return p.data.copy()
    assert np.array_equal(run(), run())


def test_adam_rejects_nan_gradient():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        opt.step()
    assert p.data[0] == 1.0
