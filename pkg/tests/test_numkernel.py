"""Numeric engine: ops, gradients, AdamW, finite-difference checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from retrohop import numkernel as nk


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(nk.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_analytic_two_class(self):
        p = nk.softmax(np.array([1.0, 0.0]))
        e = np.e
        assert abs(p[0] - e / (e + 1)) < 1e-9
        assert abs(p[0] - 0.73106) < 1e-5

    def test_one_hot_limit(self):
        p = nk.softmax(np.array([1.0, 0.0]), beta=100.0)
        assert p[0] > 1 - 1e-40 or p[0] == pytest.approx(1.0)
        assert p[1] < 1e-40

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)))
    def test_sums_to_one_and_positive(self, scores):
        p = nk.softmax(scores, beta=0.5)
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all(p > 0)


class TestLayernorm:
    def test_two_values(self):
        out = nk.layernorm(np.array([1.0, 3.0]))
        assert np.allclose(out, [-1.0, 1.0], atol=1e-2)

    def test_constant_vector_guard(self):
        out = nk.layernorm(np.array([5.0, 5.0, 5.0]), bias=2.0)
        assert np.allclose(out, 2.0)

    def test_zero_gain(self):
        out = nk.layernorm(np.array([1.0, 2.0, 9.0]), gain=0.0, bias=3.0)
        assert np.allclose(out, 3.0)


class TestAdamW:
    def test_zero_grad_weight_decay_only(self):
        p = nk.param(np.array([[1.0]]))
        nk.adamw_step([p], lr=1e-3, weight_decay=1e-2)
        assert p.value.data[0, 0] == pytest.approx(0.99999, abs=1e-7)

    def test_zero_grad_zero_decay(self):
        p = nk.param(np.array([[1.0]]))
        nk.adamw_step([p], lr=1e-3, weight_decay=0.0)
        assert p.value.data[0, 0] == 1.0

    def test_constant_gradient_limit_step(self):
        # with a constant gradient the bias-corrected step tends to lr
        p = nk.param(np.array([[0.0]]))
        lr = 1e-3
        prev = 0.0
        for _ in range(300):
            p.grad[:] = 1.0
            nk.adamw_step([p], lr=lr, weight_decay=0.0)
        last_step = prev - p.value.data[0, 0]
        p.grad[:] = 1.0
        before = float(p.value.data[0, 0])
        nk.adamw_step([p], lr=lr, weight_decay=0.0)
        step = before - float(p.value.data[0, 0])
        assert step == pytest.approx(lr, rel=1e-3)


def _quadratic_closure(p):
    def closure():
        p.zero_grad()
        v = nk.Var(p.value.data.astype(np.float64))

        def bw(g):
            p.grad += (g * v.data).astype(np.float32)

        loss = nk.Var(0.5 * (v.data**2).sum(), parents=(v,))
        loss.backward_fn = lambda g: None
        # analytic gradient of 0.5 p^2 is p
        p.grad += p.value.data
        return float(loss.data)

    return closure


class TestGradCheck:
    def test_pure_quadratic(self):
        p = nk.param(np.array([[3.0]]))
        err = nk.grad_check(_quadratic_closure(p), {"p": p}, h=1e-3)
        assert err < 1e-6

    def test_nondeterministic_detected(self):
        p = nk.param(np.array([[1.0]]))
        state = {"n": 0}

        def closure():
            state["n"] += 1
            p.grad[:] = 1.0
            return float(state["n"])

        with pytest.raises(nk.NonDeterministic):
            nk.grad_check(closure, {"p": p})


def _composed_network_closure(params, x, target, act, use_ln, drop_key):
    w1, b1, w2, b2, gain, bias = params

    def closure():
        for p in (w1, b1, w2, b2, gain, bias):
            p.zero_grad()
        xv = nk.Var(x)
        h = nk.add(nk.matmul(nk.Var(w1.value.data), xv), nk.Var(b1.value.data))
        vw1 = nk.Var(w1.value.data)
        vb1 = nk.Var(b1.value.data)
        vw2 = nk.Var(w2.value.data)
        vb2 = nk.Var(b2.value.data)
        vg = nk.Var(gain.value.data)
        vbi = nk.Var(bias.value.data)
        h = nk.add(nk.matmul(vw1, xv), vb1)
        h = nk.activation(h, act)
        if use_ln:
            h = nk.layernorm_rows(h, vg, vbi)
        h = nk.dropout(h, 0.2, drop_key)
        out = nk.add(nk.matmul(vw2, h), vb2)
        p = nk.softmax_cols(out)
        loss = nk.scale(nk.log(nk.slice_rows(p, target, target + 1)), -1.0)
        loss = nk.vsum(loss)
        loss.backward()
        w1.grad += vw1.grad.astype(np.float32)
        b1.grad += vb1.grad.astype(np.float32)
        w2.grad += vw2.grad.astype(np.float32)
        b2.grad += vb2.grad.astype(np.float32)
        if vg.grad is not None:
            gain.grad += vg.grad.astype(np.float32)
            bias.grad += vbi.grad.astype(np.float32)
        return float(loss.data)

    return closure


class TestComposedGradients:
    @pytest.mark.parametrize("act", ["none", "relu", "selu", "tanh", "gelu"])
    @pytest.mark.parametrize("use_ln", [False, True])
    def test_end_to_end_gradient(self, act, use_ln):
        rng = np.random.default_rng(42)
        d_in, d_h, d_out = 5, 7, 4
        w1 = nk.param(rng.normal(size=(d_h, d_in)) * 0.5)
        b1 = nk.param(rng.normal(size=(d_h, 1)) * 0.1)
        w2 = nk.param(rng.normal(size=(d_out, d_h)) * 0.5)
        b2 = nk.param(rng.normal(size=(d_out, 1)) * 0.1)
        gain = nk.param(np.ones((d_h, 1)))
        bias = nk.param(np.zeros((d_h, 1)))
        x = rng.normal(size=(d_in, 3))
        closure = _composed_network_closure(
            (w1, b1, w2, b2, gain, bias), x, 1, act, use_ln, drop_key=(1, 2, 3)
        )
        checked = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
        if use_ln:
            checked |= {"gain": gain, "bias": bias}
        err = nk.grad_check(closure, checked, h=1e-3)
        assert err < 1e-4

    def test_bce_with_logits_gradient(self):
        rng = np.random.default_rng(3)
        w = nk.param(rng.normal(size=(4, 5)))
        x = rng.normal(size=(5, 2))
        y = (rng.random((4, 2)) > 0.5).astype(float)

        def closure():
            w.zero_grad()
            vw = nk.Var(w.value.data)
            logits = nk.matmul(vw, nk.Var(x))
            loss = nk.bce_with_logits(logits, y)
            loss.backward()
            w.grad += vw.grad.astype(np.float32)
            return float(loss.data)

        assert nk.grad_check(closure, {"w": w}, h=1e-3) < 1e-4

    def test_dropout_masks_reproducible(self):
        m1 = nk.dropout_mask(0.5, (10, 10), key=(7, 1, 2, 3))
        m2 = nk.dropout_mask(0.5, (10, 10), key=(7, 1, 2, 3))
        m3 = nk.dropout_mask(0.5, (10, 10), key=(7, 1, 2, 4))
        assert np.array_equal(m1, m2)
        assert not np.array_equal(m1, m3)


class TestTensor2:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            nk.Tensor2(np.zeros(3))
        with pytest.raises(ValueError):
            nk.Tensor2(np.zeros((0, 3)))

    def test_nan_check(self):
        t = nk.Tensor2(np.array([[1.0, np.nan]]))
        with pytest.raises(FloatingPointError):
            t.check_finite()
