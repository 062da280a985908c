"""Tape-engine tests.

Every derivative is checked against central finite differences computed in
float64, and the structured ops (conv, pooling) are additionally checked
against brute-force nested-loop oracles that share no code with the engine's
im2col / reshape implementations.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from s2slab import autodiff as ad
from s2slab.autodiff import (
    Parameter,
    Tape,
    TapeError,
    Tensor,
    add,
    clip,
    conv2d,
    dense,
    forward,
    grad_check,
    make_rng,
    margin_loss,
    maxpool2d,
    maxunpool2d,
    mse,
    mul,
    relu,
    reshape,
    scale,
    sign,
    softmax_cross_entropy,
    sub,
    tanh,
    tsum,
)

# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def conv2d_oracle(x, w, b, stride=1, padding=0):
    """Nested-loop convolution, the reference for conv2d's forward."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    assert ic == c
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for i in range(n):
        for o in range(oc):
            for r in range(oh):
                for s in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, cc, r * stride + u, s * stride + v] * w[o, cc, u, v]
                    out[i, o, r, s] = acc + b[o]
    return out


def maxpool2d_oracle(x, k):
    """Per-window scan; ties resolved by the first element in row-major order."""
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    idx = np.zeros((n, c, oh, ow), dtype=np.int64)
    for i in range(n):
        for cc in range(c):
            for r in range(oh):
                for s in range(ow):
                    best = -np.inf
                    best_flat = -1
                    for u in range(k):
                        for v in range(k):
                            rr, ss = r * k + u, s * k + v
                            val = x[i, cc, rr, ss]
                            if val > best:
                                best = val
                                best_flat = rr * w + ss
                    out[i, cc, r, s] = best
                    idx[i, cc, r, s] = best_flat
    return out, idx


def central_diff(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f w.r.t. each array, in float64."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f())
            flat[i] = keep - h
            dn = float(f())
            flat[i] = keep
            gf[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def t64(x, requires_grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tensors and tape bookkeeping
# ---------------------------------------------------------------------------


def test_tensor_is_float32_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float32
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (2, 2)
    assert t.size == 4
    assert t.grad is None


def test_parameter_carries_name_and_frozen_flag():
    p = Parameter("layer.weight", np.zeros((2, 2)))
    assert p.name == "layer.weight"
    assert not p.frozen
    assert p.requires_grad


def test_backward_twice_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_rejects_foreign_loss():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        tsum(x)
    with Tape() as other:
        loss = tsum(x)
    with pytest.raises(TapeError):
        tape.backward(loss)
    other.backward(loss)


def test_backward_rejects_nonscalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_unreached_tensor_gets_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        tsum(y)  # dead branch, never feeds the loss
        loss = tsum(mul(x, x))
    tape.backward(loss)
    assert np.array_equal(y.grad, np.zeros(2, dtype=np.float32))
    assert np.allclose(x.grad, 2.0 * x.data)


def test_multi_use_accumulates():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(add(x, x))
    tape.backward(loss)
    assert np.array_equal(x.grad, np.full(2, 2.0, dtype=np.float32))


def test_spec_example_scale_then_sum():
    # loss = sum(scale(x, 3)) -> every gradient entry is exactly 3
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(scale(x, 3.0))
    tape.backward(loss)
    assert np.array_equal(x.grad, np.full((2, 3), 3.0, dtype=np.float32))


def test_spec_example_mse_self_is_zero_grad():
    x = Tensor([[0.5, -1.0], [2.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        loss = mse(x, x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.zeros((2, 2), dtype=np.float32))
    assert float(loss.data) == 0.0


def test_backward_is_linear_in_loss_scale():
    rng = make_rng(7)
    xv = rng.normal(size=(3, 4)).astype(np.float32)
    g = {}
    for lam in (1.0, 2.0):
        x = Tensor(xv, requires_grad=True)
        with Tape() as tape:
            loss = scale(tsum(mul(x, x)), lam)
        tape.backward(loss)
        g[lam] = x.grad.copy()
    assert np.array_equal(g[2.0], 2.0 * g[1.0])


def test_grad_shapes_match_data_shapes():
    x = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True)
    w = Parameter("w", np.full((2, 3, 3, 3), 0.1))
    b = Parameter("b", np.zeros(2))
    with Tape() as tape:
        loss = tsum(conv2d(x, w, b, stride=1, padding=1))
    tape.backward(loss)
    for t in (x, w, b):
        assert t.grad.shape == t.data.shape
        assert t.grad.dtype == t.data.dtype


def test_dispatcher_routes_by_kind():
    x = Tensor([[1.0, -2.0]])
    out = forward("relu", [x], {})
    assert np.array_equal(out.data, [[1.0, 0.0]])
    with pytest.raises(ValueError):
        forward("no-such-op", [x], {})


def test_no_nan_after_ops_on_sane_inputs():
    rng = make_rng(3)
    x = Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32) * 100.0, requires_grad=True)
    w = Parameter("w", rng.normal(size=(5, 3, 3, 3)).astype(np.float32))
    b = Parameter("b", np.zeros(5))
    with Tape() as tape:
        h = relu(conv2d(x, w, b, padding=1))
        h, _ = maxpool2d(h, 2)
        h = reshape(h, (4, -1))
        loss = tsum(tanh(scale(h, 0.01)))
    tape.backward(loss)
    for t in (x, w, b):
        assert np.isfinite(t.grad).all()


# ---------------------------------------------------------------------------
# conv2d against the nested-loop oracle
# ---------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    oc=st.integers(1, 3),
    h=st.integers(3, 9),
    w=st.integers(3, 9),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    padding=st.integers(0, 2),
    seed=st.integers(0, 2**31),
)
def test_conv2d_forward_matches_bruteforce(n, c, oc, h, w, k, stride, padding, seed):
    if h + 2 * padding < k or w + 2 * padding < k:
        return
    rng = make_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(oc, c, k, k))
    b = rng.normal(size=oc)
    want = conv2d_oracle(x, wt, b, stride, padding)
    got = conv2d(t64(x), t64(wt), t64(b), stride=stride, padding=padding)
    assert got.shape == want.shape
    np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-10)


def test_conv2d_validates_arguments():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    b = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        conv2d(x, w, b, stride=0)
    with pytest.raises(ValueError):
        conv2d(x, w, b, padding=-1)
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((3, 4, 3, 3))), b)  # channel mismatch
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 2, 2, 2))), w, b)  # kernel larger than input


@settings(max_examples=15, deadline=None)
@given(
    stride=st.integers(1, 2),
    padding=st.integers(0, 1),
    seed=st.integers(0, 2**31),
)
def test_conv2d_backward_matches_central_differences(stride, padding, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(2, 2, 5, 5))
    wt = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3))  # projection keeps the loss scalar but generic

    def run():
        out = conv2d(t64(x), t64(wt), t64(b), stride=stride, padding=padding)
        return np.sum(out.data * proj(out.shape))

    def proj(shape):
        # deterministic projection tensor shaped like the conv output
        rp = make_rng(seed, 99)
        return rp.normal(size=shape)

    xt, wtt, bt = t64(x, True), t64(wt, True), t64(b, True)
    with Tape() as tape:
        out = conv2d(xt, wtt, bt, stride=stride, padding=padding)
        loss = tsum(mul(out, t64(proj(out.shape))))
    tape.backward(loss)
    nx, nw, nb = central_diff(run, [x, wt, b], h=1e-5)
    assert max_rel_err(xt.grad, nx) < 1e-3
    assert max_rel_err(wtt.grad, nw) < 1e-3
    assert max_rel_err(bt.grad, nb) < 1e-3
    del r


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    oh=st.integers(1, 4),
    ow=st.integers(1, 4),
    k=st.integers(2, 3),
    seed=st.integers(0, 2**31),
)
def test_maxpool_matches_bruteforce(n, c, oh, ow, k, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(n, c, oh * k, ow * k))
    want, want_idx = maxpool2d_oracle(x, k)
    got, idx = maxpool2d(t64(x), k)
    np.testing.assert_array_equal(got.data, want)
    np.testing.assert_array_equal(idx, want_idx)


def test_maxpool_tie_takes_first_in_row_major_scan():
    x = Tensor(np.ones((1, 1, 4, 4)))
    out, idx = maxpool2d(x, 2)
    # all-equal windows: winner is the top-left corner of each window
    assert np.array_equal(idx[0, 0], [[0, 2], [8, 10]])
    assert np.array_equal(out.data, np.ones((1, 1, 2, 2), dtype=np.float32))


def test_maxpool_crops_odd_edges():
    x = Tensor(np.arange(49, dtype=np.float32).reshape(1, 1, 7, 7))
    out, idx = maxpool2d(x, 2)
    assert out.shape == (1, 1, 3, 3)
    # values come from the original (uncropped) coordinate system
    assert idx[0, 0, 0, 0] == 8  # max of rows 0-1, cols 0-1 sits at (1,1)


def test_spec_example_pool_then_unpool():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, idx = maxpool2d(x, 2)
    assert np.array_equal(out.data, [[[[4.0]]]])
    restored = maxunpool2d(out, idx, (2, 2))
    assert np.array_equal(restored.data, [[[[0.0, 0.0], [0.0, 4.0]]]])


@settings(max_examples=20, deadline=None)
@given(
    oh=st.integers(1, 4),
    ow=st.integers(1, 4),
    k=st.integers(2, 3),
    seed=st.integers(0, 2**31),
)
def test_unpool_scatters_exactly_the_max_positions(oh, ow, k, seed):
    rng = make_rng(seed)
    # distinct values guarantee a unique argmax per window
    x = rng.permutation(oh * k * ow * k).astype(np.float64).reshape(1, 1, oh * k, ow * k)
    pooled, idx = maxpool2d(t64(x), k)
    up = maxunpool2d(pooled, idx, (oh * k, ow * k))
    # pooling the scattered map again returns the same values and indices
    re_pooled, re_idx = maxpool2d(up, k)
    np.testing.assert_array_equal(re_pooled.data, pooled.data)
    np.testing.assert_array_equal(re_idx, idx)
    # everything except the winners is zero
    assert np.count_nonzero(up.data) == oh * ow


def test_maxpool_backward_routes_gradient_to_argmax():
    rng = make_rng(11)
    x = rng.permutation(16).astype(np.float64).reshape(1, 1, 4, 4)

    def run():
        out, _ = maxpool2d(t64(x), 2)
        return float(np.sum(out.data * pr))

    pr = make_rng(11, 1).normal(size=(1, 1, 2, 2))
    xt = t64(x, True)
    with Tape() as tape:
        out, _ = maxpool2d(xt, 2)
        loss = tsum(mul(out, t64(pr)))
    tape.backward(loss)
    (nx,) = central_diff(run, [x], h=1e-4)
    assert max_rel_err(xt.grad, nx) < 1e-3


def test_maxunpool_backward_gathers():
    rng = make_rng(13)
    x = rng.permutation(16).astype(np.float64).reshape(1, 1, 4, 4)
    pooled, idx = maxpool2d(t64(x), 2)
    base = pooled.data.copy()

    def run():
        up = maxunpool2d(t64(y), idx, (4, 4))
        return float(np.sum(up.data * pr))

    y = base.copy()
    pr = make_rng(13, 1).normal(size=(1, 1, 4, 4))
    yt = t64(y, True)
    with Tape() as tape:
        up = maxunpool2d(yt, idx, (4, 4))
        loss = tsum(mul(up, t64(pr)))
    tape.backward(loss)
    (ny,) = central_diff(run, [y], h=1e-4)
    assert max_rel_err(yt.grad, ny) < 1e-3


# ---------------------------------------------------------------------------
# pointwise and dense ops
# ---------------------------------------------------------------------------


def _check_op_gradient(build, arrays, seed, h=1e-5, tol=1e-3):
    """build(tensors) -> output Tensor; compares tape grads with central diffs."""
    pr_holder = {}

    def run():
        out = build([t64(a) for a in arrays])
        if "pr" not in pr_holder:
            pr_holder["pr"] = make_rng(seed, 1234).normal(size=out.shape)
        return float(np.sum(out.data * pr_holder["pr"]))

    run()  # materialize the projection
    tensors = [t64(a, True) for a in arrays]
    with Tape() as tape:
        out = build(tensors)
        loss = tsum(mul(out, t64(pr_holder["pr"])))
    tape.backward(loss)
    numeric = central_diff(run, arrays, h=h)
    for t, n in zip(tensors, numeric):
        assert max_rel_err(t.grad, n) < tol


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_dense_gradient(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    _check_op_gradient(lambda ts: dense(*ts), [x, w, b], seed)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_relu_gradient_away_from_kink(seed):
    rng = make_rng(seed)
    x = rng.uniform(0.05, 1.0, size=(4, 6)) * rng.choice([-1.0, 1.0], size=(4, 6))
    _check_op_gradient(lambda ts: relu(ts[0]), [x], seed)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_add_sub_mul_scale_gradients(seed):
    rng = make_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    _check_op_gradient(lambda ts: add(ts[0], ts[1]), [a, b], seed)
    _check_op_gradient(lambda ts: sub(ts[0], ts[1]), [a, b], seed)
    _check_op_gradient(lambda ts: mul(ts[0], ts[1]), [a, b], seed)
    _check_op_gradient(lambda ts: scale(ts[0], -1.7), [a], seed)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_tanh_gradient(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(3, 4)) * 2.0
    _check_op_gradient(lambda ts: tanh(ts[0]), [x], seed)


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_sign_zero_gradient_and_sign_of_zero():
    x = Tensor([[-3.0, 0.0, 5.0]], requires_grad=True)
    with Tape() as tape:
        s = sign(x)
        loss = tsum(mul(s, Tensor([[1.0, 1.0, 1.0]])))
    tape.backward(loss)
    assert np.array_equal(s.data, [[-1.0, 0.0, 1.0]])
    assert np.array_equal(x.grad, np.zeros((1, 3), dtype=np.float32))


def test_clip_passes_gradient_inside_bounds_only():
    x = Tensor([-1.0, 0.5, 2.0, 300.0], requires_grad=True)
    with Tape() as tape:
        y = clip(x, 0.0, 255.0)
        loss = tsum(y)
    tape.backward(loss)
    assert np.array_equal(y.data, [0.0, 0.5, 2.0, 255.0])
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_softmax_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 3)))
    loss = softmax_cross_entropy(logits, np.array([0, 1]))
    assert float(loss.data) == pytest.approx(np.log(3.0), rel=1e-6)


def test_softmax_cross_entropy_is_stable_for_huge_logits():
    logits = Tensor(np.array([[1e4, -1e4, 0.0]]), requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, np.array([0]))
    tape.backward(loss)
    assert np.isfinite(float(loss.data))
    assert np.isfinite(logits.grad).all()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_softmax_cross_entropy_gradient(seed):
    rng = make_rng(seed)
    z = rng.normal(size=(4, 6)) * 2.0
    labels = rng.integers(0, 6, size=4)

    def run():
        return float(softmax_cross_entropy(t64(z), labels).data)

    zt = t64(z, True)
    with Tape() as tape:
        loss = softmax_cross_entropy(zt, labels)
    tape.backward(loss)
    (nz,) = central_diff(run, [z], h=1e-5)
    assert max_rel_err(zt.grad, nz) < 1e-3


def test_mse_value_and_gradient():
    p = np.array([[1.0, 2.0]])
    t = np.array([[0.0, 0.0]])
    loss = mse(Tensor(p), Tensor(t))
    assert float(loss.data) == pytest.approx(2.5)

    rng = make_rng(5)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 3))

    def run():
        return float(mse(t64(a), t64(b)).data)

    at, bt = t64(a, True), t64(b, True)
    with Tape() as tape:
        loss = mse(at, bt)
    tape.backward(loss)
    na, nb = central_diff(run, [a, b], h=1e-5)
    assert max_rel_err(at.grad, na) < 1e-3
    assert max_rel_err(bt.grad, nb) < 1e-3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), kappa=st.sampled_from([0.0, 0.5]))
def test_margin_loss_gradient(seed, kappa):
    rng = make_rng(seed)
    # spread logits out so the active max and the kink at -kappa are stable
    z = rng.normal(size=(4, 5)) * 3.0
    labels = rng.integers(0, 5, size=4)

    def run():
        return float(margin_loss(t64(z), labels, kappa).data)

    zt = t64(z, True)
    with Tape() as tape:
        loss = margin_loss(zt, labels, kappa)
    tape.backward(loss)
    base = run()
    want = sum(
        max(z[i, labels[i]] - np.max(np.delete(z[i], labels[i])), -kappa) for i in range(4)
    )
    assert base == pytest.approx(want, rel=1e-9)
    (nz,) = central_diff(run, [z], h=1e-6)
    assert max_rel_err(zt.grad, nz, floor=1e-4) < 1e-3


# ---------------------------------------------------------------------------
# grad_check entry point
# ---------------------------------------------------------------------------


class _TinyDense:
    """One dense layer; the smallest model grad_check accepts."""

    def __init__(self, seed=0, dtype=np.float64):
        rng = make_rng(seed)
        self.w = Parameter("w", rng.normal(size=(6, 3)).astype(dtype))
        self.b = Parameter("b", np.zeros(3, dtype=dtype))

    def parameters(self):
        return [self.w, self.b]

    def forward(self, x):
        return dense(x, self.w, self.b)


def test_grad_check_single_dense_mse():
    model = _TinyDense()
    x = Tensor(make_rng(1).normal(size=(4, 6)), requires_grad=True)
    err = grad_check(model, x, "mse")
    assert err < 1e-4


def test_grad_check_cross_entropy():
    model = _TinyDense(seed=2)
    x = Tensor(make_rng(3).normal(size=(4, 6)), requires_grad=True)
    err = grad_check(model, x, "cross-entropy", labels=np.array([0, 1, 2, 0]))
    assert err < 1e-4


def test_grad_check_rejects_large_models():
    class Big:
        def __init__(self):
            self.w = Parameter("w", np.zeros((101, 101)))

        def parameters(self):
            return [self.w]

        def forward(self, x):
            return dense(x, self.w, Parameter("b", np.zeros(101)))

    with pytest.raises(ValueError):
        grad_check(Big(), Tensor(np.zeros((1, 101))), "mse")


def test_grad_check_rejects_unknown_loss():
    with pytest.raises(ValueError):
        grad_check(_TinyDense(), Tensor(np.zeros((1, 6))), "hinge")


# ---------------------------------------------------------------------------
# deterministic rng helper
# ---------------------------------------------------------------------------


def test_make_rng_is_reproducible_and_key_sensitive():
    a = make_rng(42, 7).normal(size=4)
    b = make_rng(42, 7).normal(size=4)
    c = make_rng(42, 8).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_he_uniform_bound():
    vals = ad.he_uniform(make_rng(0), (64, 32), fan_in=32)
    bound = np.sqrt(6.0 / 32)
    assert vals.shape == (64, 32)
    assert vals.dtype == np.float32
    assert np.max(np.abs(vals)) <= bound
    assert np.max(np.abs(vals)) > 0.8 * bound  # actually fills the range
