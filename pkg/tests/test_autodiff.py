import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unemo import autodiff as ad
from unemo.autodiff import (ParamStore, Rng, Tensor, adam_step, cross_attention, finite_diff_grad_check,
                            kl_to_standard_normal, matmul, mlp, reparameterize, softmax_rows, tsum)
from unemo.errors import ConfigError, DimensionError, DomainError, NonFiniteError, TrainingError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# matmul ----------------------------------------------------------------------
def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    ref = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(matmul(Tensor(a), Tensor(b)).data - ref).max() <= 1e-12


def test_matmul_shape_error_names_both():
    with pytest.raises(DimensionError) as e:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_matmul_gradients_flow_to_both():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    tsum(matmul(a, b)).backward()
    assert np.allclose(a.grad, np.tile(b.data.sum(1), (2, 1)))
    assert np.allclose(b.grad, np.tile(a.data.sum(0)[:, None], (1, 2)))


# softmax ---------------------------------------------------------------------
def test_softmax_uniform():
    assert np.allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, 1 / 3, atol=1e-15)


def test_softmax_shift_invariant():
    a = softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data
    b = softmax_rows(Tensor([[101.0, 102.0, 103.0]])).data
    assert np.abs(a - b).max() <= 1e-12


def test_softmax_mpmath_reference():
    mpmath.mp.dps = 50
    ex = [mpmath.e ** k for k in (1, 2, 3)]
    ref = [float(x / sum(ex)) for x in ex]
    got = softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    assert np.abs(got - ref).max() <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    s = softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    assert np.abs(s.sum(1) - 1).max() <= 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), finite)
def test_argmax_invariant_under_shift(x, c):
    assert (softmax_rows(Tensor(x)).data.argmax(1) == softmax_rows(Tensor(x + c)).data.argmax(1)).all()


# cross attention -------------------------------------------------------------
def _attn_params(d_in=3, d=4, seed=0):
    p = ParamStore(seed)
    p.add_attention("a", d_in, d_in, d)
    return p


def test_attention_single_key():
    p = _attn_params()
    keys = Tensor(np.array([[0.5, -1.0, 2.0]]))
    out = cross_attention(Tensor(np.random.default_rng(1).normal(size=(5, 3))), keys, p, "a").data
    expect = keys.data @ p["a.W_v"].data
    assert np.abs(out - expect).max() <= 1e-12


def test_attention_duplicate_keys():
    p = _attn_params()
    keys = np.array([[0.5, -1.0, 2.0]])
    q = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    one = cross_attention(q, Tensor(keys), p, "a").data
    many = cross_attention(q, Tensor(np.repeat(keys, 4, 0)), p, "a").data
    assert np.abs(one - many).max() <= 1e-12


def test_attention_formula_oracle():
    p = _attn_params()
    rng = np.random.default_rng(2)
    q, k = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    Q, K, V = q @ p["a.W_q"].data, k @ p["a.W_k"].data, k @ p["a.W_v"].data
    s = Q @ K.T / math.sqrt(4)
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    assert np.abs(cross_attention(Tensor(q), Tensor(k), p, "a").data - w @ V).max() <= 1e-10


def test_attention_missing_param():
    with pytest.raises(ConfigError):
        cross_attention(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), ParamStore(), "nope")


# mlp -------------------------------------------------------------------------
def test_mlp_zero_weights():
    p = ParamStore()
    p.add_mlp("m", [3, 4, 2])
    for n in p:
        p[n].data[:] = 0
    assert not mlp(Tensor(np.ones((2, 3))), p, "m").data.any()


def test_mlp_identity_single_layer():
    p = ParamStore()
    p.add("m.W0", (3, 3), value=np.eye(3))
    p.add("m.b0", (1, 3), init="zeros")
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(mlp(Tensor(x), p, "m").data, x)


def test_mlp_composed_oracle():
    p = ParamStore(3)
    p.add_mlp("m", [3, 5, 2])
    x = np.random.default_rng(0).normal(size=(4, 3))
    h = np.tanh(x @ p["m.W0"].data + p["m.b0"].data)
    ref = h @ p["m.W1"].data + p["m.b1"].data
    assert np.abs(mlp(Tensor(x), p, "m").data - ref).max() <= 1e-12


def test_mlp_width_mismatch():
    p = ParamStore()
    p.add_mlp("m", [3, 2])
    with pytest.raises(DimensionError):
        mlp(Tensor(np.ones((1, 4))), p, "m")


# reparameterize / KL ---------------------------------------------------------
def test_reparameterize_cases():
    assert reparameterize(Tensor([[2.0]]), Tensor([[3.0]]), [[0.0]]).data[0, 0] == 2.0
    assert reparameterize(Tensor([[0.0]]), Tensor([[1.0]]), [[1.5]]).data[0, 0] == 1.5


def test_reparameterize_negative_sigma():
    with pytest.raises(DomainError):
        reparameterize(Tensor([[0.0]]), Tensor([[-1.0]]), [[0.0]])


def test_reparameterize_gradient_skips_eps():
    mu = Tensor([[1.0, 2.0]], requires_grad=True)
    sig = Tensor([[0.5, 2.0]], requires_grad=True)
    eps = Tensor([[0.3, -1.0]], requires_grad=True)
    tsum(reparameterize(mu, sig, eps)).backward()
    assert np.allclose(mu.grad, 1) and np.allclose(sig.grad, eps.data) and eps.grad is None


def test_reparameterize_monte_carlo():
    n = 100_000
    eps = Rng(7).normal((n, 1))
    z = reparameterize(Tensor(np.ones((n, 1))), Tensor(np.full((n, 1), 2.0)), eps).data
    assert abs(z.mean() - 1.0) <= 3 * 2 / math.sqrt(n)


def test_kl_cases():
    assert kl_to_standard_normal(Tensor([[0.0, 0.0]]), Tensor([[1.0, 1.0]])).data == 0
    assert kl_to_standard_normal(Tensor([[1.0]]), Tensor([[1.0]])).data == pytest.approx(0.5, abs=1e-15)


def test_kl_mpmath_reference():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(4)
    mu, sig = rng.normal(size=(1, 6)), rng.uniform(0.2, 3, size=(1, 6))
    ref = sum(mpmath.mpf(0.5) * (mpmath.mpf(m) ** 2 + mpmath.mpf(s) ** 2 - 1 - mpmath.log(mpmath.mpf(s) ** 2))
              for m, s in zip(mu[0], sig[0]))
    assert abs(float(kl_to_standard_normal(Tensor(mu), Tensor(sig)).data) - float(ref)) <= 1e-12


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(DomainError):
        kl_to_standard_normal(Tensor([[0.0]]), Tensor([[0.0]]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 4), elements=finite), arrays(np.float64, (1, 4), elements=st.floats(0.01, 10)))
def test_kl_nonnegative(mu, sig):
    assert kl_to_standard_normal(Tensor(mu), Tensor(sig)).data >= 0


# adam ------------------------------------------------------------------------
def test_adam_zero_gradient_identity():
    p = ParamStore()
    p.add("w", (3, 2))
    before = p["w"].data.copy()
    p.zero_grad()
    adam_step(p, t=1)
    assert np.array_equal(before, p["w"].data)


def test_adam_sign_and_recurrence():
    p = ParamStore()
    p.add("x", (1,), value=[1.5])
    p["x"].grad = np.array([0.7])
    adam_step(p, lr=0.1, betas=(0.9, 0.999), eps=1e-8, t=1)
    m = 0.1 * 0.7
    v = 0.001 * 0.49
    mh, vh = m / (1 - 0.9), v / (1 - 0.999)
    expect = 1.5 - 0.1 * mh / (math.sqrt(vh) + 1e-8)
    assert p["x"].data[0] < 1.5
    assert abs(p["x"].data[0] - expect) <= 1e-12


def test_adam_missing_gradient_names_parameter():
    p = ParamStore()
    p.add("weights.A", (2,))
    with pytest.raises(TrainingError, match="weights.A"):
        adam_step(p)


# grad check ------------------------------------------------------------------
def test_gradcheck_quadratic():
    p = ParamStore()
    p.add("theta", (1,), value=[3.0])
    rep = finite_diff_grad_check(lambda q: tsum(q["theta"] * q["theta"]) * 0.5, p, tol=1e-8)
    assert rep.passed and rep.max_rel_error <= 1e-8
    assert np.allclose(p["theta"].grad, 3.0)


def test_gradcheck_corrupted_gradient(monkeypatch):
    p = ParamStore(1)
    p.add_mlp("m", [3, 4, 1])
    x = np.random.default_rng(0).normal(size=(5, 3))
    monkeypatch.setattr(ad, "tanh_grad", lambda y: (1.0 - y * y) * 1.1)
    rep = finite_diff_grad_check(lambda q: tsum(mlp(Tensor(x), q, "m")), p)
    assert not rep.passed
    assert rep.worst[0] in ("m.W0", "m.b0")
    assert any(f[0] == rep.worst[0] for f in rep.failures)


def test_gradcheck_subsample_at_least_200():
    p = ParamStore()
    p.add("w", (30, 30))
    rep = finite_diff_grad_check(lambda q: tsum(q["w"] * q["w"]), p, max_coords=50)
    assert rep.checked == 200 and rep.passed


def test_gradcheck_nonfinite_base():
    p = ParamStore()
    p.add("w", (1,), value=[1.0])
    old = ad.set_checked(False)
    try:
        with pytest.raises(TrainingError):
            finite_diff_grad_check(lambda q: q["w"] * np.inf, p)
    finally:
        ad.set_checked(old)


# tensor invariants / rng / params --------------------------------------------
def test_checked_mode_rejects_nan():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_rng_determinism():
    a = Rng(5).child("x", 3).normal((4, 4))
    b = Rng(5).child("x", 3).normal((4, 4))
    c = Rng(5).child("x", 4).normal((4, 4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_paramstore_order_and_duplicates():
    p = ParamStore()
    for n in ("b", "a", "c"):
        p.add(n, (1, 2))
    assert list(p) == ["b", "a", "c"]
    with pytest.raises(ConfigError):
        p.add("a", (1, 2))


def test_glorot_bounds_and_seeding():
    p, q = ParamStore(9), ParamStore(9)
    p.add("w", (10, 6))
    q.add("w", (10, 6))
    assert np.array_equal(p["w"].data, q["w"].data)
    assert np.abs(p["w"].data).max() <= math.sqrt(6 / 16)


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        y = matmul(w, w)
    assert not y.requires_grad
