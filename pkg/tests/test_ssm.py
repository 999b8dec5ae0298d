"""Resettable SSM core: discretization, scan operator, layer forward."""
import math

import numpy as np
import pytest
from scipy import linalg as sla
from scipy import special as sp

from ssmrl import autodiff as ad
from ssmrl import nn, ssm
from ssmrl.autodiff import Tensor

from helpers import gradcheck


def make_params(p_half, width, rng, dtype=None):
    return ssm.init_s5(2 * p_half, width, rng)


def random_element(rng, shape, reset=None):
    c = np.full(shape[:-1] + (1,), float(rng.random() < 0.3) if reset is None else reset,
                dtype=ad.default_dtype())
    return ssm.ScanElement(
        Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape)),
        Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape)), c)


def elem_data(e):
    return e.a_re.data, e.a_im.data, e.b_re.data, e.b_im.data, e.c


# ---------------------------------------------------------------------------
# discretize
# ---------------------------------------------------------------------------

def test_discretize_real_closed_form():
    # lambda = -1, delta = ln 2, b = 1  ->  a_bar = 0.5, b_bar = 0.5
    with ad.use_dtype(np.float64):
        params = ssm.SsmParams(
            lambda_re=Tensor(np.array([-1.0])), lambda_im=Tensor(np.array([0.0])),
            b_re=Tensor(np.array([[1.0]])), b_im=Tensor(np.array([[0.0]])),
            c_re=Tensor(np.array([[1.0]])), c_im=Tensor(np.array([[0.0]])),
            d_vector=Tensor(np.array([0.0])), log_delta=Tensor(np.array([math.log(math.log(2.0))])),
        )
        d = ssm.discretize(params)
        assert np.allclose(d.a_re.data, 0.5, atol=1e-12)
        assert np.allclose(d.a_im.data, 0.0, atol=1e-12)
        assert np.allclose(d.b_re.data, 0.5, atol=1e-12)


def test_discretize_small_delta_first_order_limit():
    with ad.use_dtype(np.float64):
        delta = 1e-9
        params = ssm.SsmParams(
            lambda_re=Tensor(np.array([-1.0])), lambda_im=Tensor(np.array([0.0])),
            b_re=Tensor(np.array([[1.0]])), b_im=Tensor(np.array([[0.0]])),
            c_re=Tensor(np.array([[1.0]])), c_im=Tensor(np.array([[0.0]])),
            d_vector=Tensor(np.array([0.0])), log_delta=Tensor(np.array([math.log(delta)])),
        )
        d = ssm.discretize(params)
        assert abs(d.a_re.data[0] - 1.0) < 2e-9
        assert abs(d.b_re.data[0, 0] - delta) / delta < 1e-6


def test_discretize_tiny_lambda_uses_removable_limit():
    with ad.use_dtype(np.float64):
        params = ssm.SsmParams(
            lambda_re=Tensor(np.array([0.0])), lambda_im=Tensor(np.array([0.0])),
            b_re=Tensor(np.array([[2.0]])), b_im=Tensor(np.array([[0.0]])),
            c_re=Tensor(np.array([[1.0]])), c_im=Tensor(np.array([[0.0]])),
            d_vector=Tensor(np.array([0.0])), log_delta=Tensor(np.array([math.log(0.25)])),
        )
        d = ssm.discretize(params)
        assert np.isfinite(d.b_re.data).all()
        assert np.allclose(d.b_re.data, 0.25 * 2.0, atol=1e-12)


def test_discretize_matches_matrix_exponential_oracle():
    # oracle: expm of the augmented matrix [[lam, b], [0, 0]] gives
    # [[a_bar, b_bar], [0, 1]]
    rng = np.random.default_rng(10)
    with ad.use_dtype(np.float64):
        for _ in range(20):
            lam = complex(-rng.uniform(0.05, 3.0), rng.normal() * 3.0)
            b = complex(rng.normal(), rng.normal())
            delta = rng.uniform(1e-3, 1.0)
            params = ssm.SsmParams(
                lambda_re=Tensor(np.array([lam.real])), lambda_im=Tensor(np.array([lam.imag])),
                b_re=Tensor(np.array([[b.real]])), b_im=Tensor(np.array([[b.imag]])),
                c_re=Tensor(np.array([[1.0]])), c_im=Tensor(np.array([[0.0]])),
                d_vector=Tensor(np.array([0.0])), log_delta=Tensor(np.array([math.log(delta)])),
            )
            d = ssm.discretize(params)
            aug = np.array([[lam, b], [0.0, 0.0]], dtype=complex)
            m = sla.expm(aug * delta)
            a_ref, b_ref = m[0, 0], m[0, 1]
            assert abs(complex(d.a_re.data[0], d.a_im.data[0]) - a_ref) / abs(a_ref) < 1e-10
            assert abs(complex(d.b_re.data[0, 0], d.b_im.data[0, 0]) - b_ref) / max(abs(b_ref), 1e-12) < 1e-10


def test_discrete_stability_inside_unit_disk():
    rng = np.random.default_rng(11)
    ssm.DEBUG_CHECKS = True
    try:
        for seed in range(5):
            params = ssm.init_s5(32, 8, np.random.default_rng(seed))
            d = ssm.discretize(params)
            mag = np.hypot(d.a_re.data, d.a_im.data)
            assert np.all(mag < 1.0)
    finally:
        ssm.DEBUG_CHECKS = False
    del rng


# ---------------------------------------------------------------------------
# combine operator
# ---------------------------------------------------------------------------

def test_combine_no_reset_matches_closed_form():
    # (A, Bu1, 0) . (A, Bu2, 0) = (A^2, A Bu1 + Bu2, 0)
    rng = np.random.default_rng(12)
    p = 6
    a = rng.normal(size=p) + 1j * rng.normal(size=p)
    u1 = rng.normal(size=p) + 1j * rng.normal(size=p)
    u2 = rng.normal(size=p) + 1j * rng.normal(size=p)

    def elem(av, bv, c):
        return ssm.ScanElement(Tensor(av.real), Tensor(av.imag),
                               Tensor(bv.real), Tensor(bv.imag),
                               np.full((1,), c, dtype=np.float32))

    out = ssm.combine(elem(a, u1, 0.0), elem(a, u2, 0.0))
    a2 = a * a
    b2 = a * u1 + u2
    assert np.allclose(out.a_re.data + 1j * out.a_im.data, a2, atol=1e-5)
    assert np.allclose(out.b_re.data + 1j * out.b_im.data, b2, atol=1e-5)
    assert np.all(out.c == 0.0)


def test_combine_reset_right_discards_history():
    rng = np.random.default_rng(13)
    e_i = random_element(rng, (5,))
    e_j = random_element(rng, (5,), reset=1.0)
    out = ssm.combine(e_i, e_j)
    for got, want in zip(elem_data(out), elem_data(e_j)):
        assert np.array_equal(got, want)


def test_combine_identity_on_unit_transition_reduces_to_prefix_sum():
    # a = 1 everywhere, no resets: scan accumulates the plain prefix sum
    rng = np.random.default_rng(14)
    L, p = 16, 3
    b = rng.normal(size=(1, L, p))
    e = ssm.ScanElement(
        Tensor(np.ones((1, L, p))), Tensor(np.zeros((1, L, p))),
        Tensor(b), Tensor(np.zeros((1, L, p))),
        np.zeros((1, L, 1), dtype=np.float32))
    xr, _ = ssm.parallel_scan(e)
    assert np.allclose(xr.data, np.cumsum(b, axis=1), atol=1e-5)


def test_combine_with_identity_element_is_neutral():
    rng = np.random.default_rng(15)
    e = random_element(rng, (4,))
    ident = ssm.identity_element((4,))
    right = ssm.combine(e, ident)
    for got, want in zip(elem_data(right), elem_data(e)):
        assert np.allclose(got, want, atol=1e-7)
    left = ssm.combine(ident, e)
    for got, want in zip(elem_data(left), elem_data(e)):
        assert np.allclose(got, want, atol=1e-7)


def test_combine_dimension_mismatch_raises():
    rng = np.random.default_rng(16)
    with pytest.raises(ValueError):
        ssm.combine(random_element(rng, (4,)), random_element(rng, (5,)))


def test_combine_associativity_all_reset_patterns():
    rng = np.random.default_rng(17)
    worst = 0.0
    for trial in range(200):
        flags = [(trial >> k) & 1 if trial < 8 else rng.random() < 0.4
                 for k in range(3)]
        e1, e2, e3 = (random_element(rng, (6,), reset=float(f)) for f in flags)
        lhs = ssm.combine(ssm.combine(e1, e2), e3)
        rhs = ssm.combine(e1, ssm.combine(e2, e3))
        for a, b in zip(elem_data(lhs), elem_data(rhs)):
            denom = np.maximum(np.abs(a), 1.0)
            worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# make_elements
# ---------------------------------------------------------------------------

def test_make_elements_reset_flag_is_one_minus_continue():
    rng = np.random.default_rng(18)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(2, 5, 3)))
    continues = np.ones((2, 5), dtype=np.float32)  # episode continues
    e = ssm.make_elements(u, 1.0 - continues, d)
    assert np.all(e.c == 0.0)


def test_make_elements_zero_x0_reduces_to_bu():
    rng = np.random.default_rng(19)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(1, 4, 3)))
    resets = np.zeros((1, 4), dtype=np.float32)
    zero_state = (Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
    e0 = ssm.make_elements(u, resets, d, x0=zero_state)
    e1 = ssm.make_elements(u, resets, d, x0=None)
    assert np.allclose(e0.b_re.data, e1.b_re.data, atol=1e-7)
    assert np.allclose(e0.b_im.data, e1.b_im.data, atol=1e-7)


def test_make_elements_x0_discarded_by_reset_at_first_step():
    rng = np.random.default_rng(20)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(1, 6, 3)))
    resets = np.zeros((1, 6), dtype=np.float32)
    resets[0, 0] = 1.0
    x0 = (Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))))
    e = ssm.make_elements(u, resets, d, x0=x0)
    xr, xi = ssm.parallel_scan(e)
    sr, si = ssm.sequential_scan(d, u, resets, x0=x0)
    assert np.allclose(xr.data, sr.data, atol=1e-5)
    # and x_1 must equal plain b_bar u_1 (history zeroed)
    bu_re = u.data @ d.b_re.data.T
    assert np.allclose(xr.data[:, 0], bu_re[:, 0], atol=1e-5)
    del xi, si


def test_make_elements_rejects_fractional_resets():
    rng = np.random.default_rng(21)
    params = make_params(2, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(1, 3, 3)))
    with pytest.raises(ValueError):
        ssm.make_elements(u, np.full((1, 3), 0.5), d)


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------

def test_parallel_scan_single_element():
    rng = np.random.default_rng(22)
    e = random_element(rng, (1, 1, 4), reset=0.0)
    out = ssm.parallel_scan_elements(e)
    for got, want in zip(elem_data(out), elem_data(e)):
        assert np.allclose(got, want, atol=1e-7)


def test_parallel_scan_three_steps_closed_form():
    # x1 = Bu1, x2 = A x1 + Bu2, x3 = A x2 + Bu3
    rng = np.random.default_rng(23)
    p = 5
    a = rng.normal(size=p) + 1j * rng.normal(size=p)
    us = rng.normal(size=(3, p)) + 1j * rng.normal(size=(3, p))
    e = ssm.ScanElement(
        Tensor(np.broadcast_to(a.real, (1, 3, p)).copy()),
        Tensor(np.broadcast_to(a.imag, (1, 3, p)).copy()),
        Tensor(us.real[None]), Tensor(us.imag[None]),
        np.zeros((1, 3, 1), dtype=np.float32))
    xr, xi = ssm.parallel_scan(e)
    x1 = us[0]
    x2 = a * x1 + us[1]
    x3 = a * x2 + us[2]
    got = xr.data[0] + 1j * xi.data[0]
    assert np.allclose(got, np.stack([x1, x2, x3]), atol=1e-5)


@pytest.mark.parametrize("L", [1, 2, 7, 64, 128, 1024])
def test_parallel_equals_sequential(L):
    rng = np.random.default_rng(100 + L)
    params = make_params(8, 4, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(2, L, 4)).astype(np.float32))
    resets = (rng.random((2, L)) < 0.1).astype(np.float32)
    x0 = (Tensor(rng.normal(size=(2, 8)).astype(np.float32)),
          Tensor(rng.normal(size=(2, 8)).astype(np.float32)))
    pr, pi = ssm.parallel_scan(ssm.make_elements(u, resets, d, x0=x0))
    sr, si = ssm.sequential_scan(d, u, resets, x0=x0)
    assert np.abs(pr.data - sr.data).max() < 1e-5
    assert np.abs(pi.data - si.data).max() < 1e-5


def test_parallel_scan_worker_pool_deterministic():
    rng = np.random.default_rng(24)
    params = make_params(8, 4, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(8, 33, 4)).astype(np.float32))
    resets = (rng.random((8, 33)) < 0.1).astype(np.float32)
    base = ssm.parallel_scan(ssm.make_elements(u, resets, d), workers=0)
    for workers in (2, 4):
        got = ssm.parallel_scan(ssm.make_elements(u, resets, d), workers=workers)
        assert np.array_equal(base[0].data, got[0].data)
        assert np.array_equal(base[1].data, got[1].data)


def test_scan_depth_bound():
    rng = np.random.default_rng(25)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    for L in (1, 2, 5, 16, 100, 256):
        u = Tensor(rng.normal(size=(1, L, 3)))
        ssm.scan_stats.reset()
        ssm.parallel_scan(ssm.make_elements(u, np.zeros((1, L)), d))
        bound = 2 * math.ceil(math.log2(L)) if L > 1 else 1
        assert ssm.scan_stats.depth <= max(bound, 1)


def test_sequential_scan_zero_input_zero_state():
    rng = np.random.default_rng(26)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(np.zeros((2, 10, 3)))
    xr, xi = ssm.sequential_scan(d, u, np.zeros((2, 10)))
    assert np.all(xr.data == 0) and np.all(xi.data == 0)


def test_sequential_scan_single_step_recurrence():
    rng = np.random.default_rng(27)
    params = make_params(4, 3, rng)
    d = ssm.discretize(params)
    u = Tensor(rng.normal(size=(1, 1, 3)))
    x0 = (Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))))
    xr, xi = ssm.sequential_scan(d, u, np.zeros((1, 1)), x0=x0)
    a = d.a_re.data + 1j * d.a_im.data
    x0c = x0[0].data + 1j * x0[1].data
    bu = u.data[:, 0] @ (d.b_re.data + 1j * d.b_im.data).T
    want = a * x0c + bu
    assert np.allclose(xr.data[:, 0] + 1j * xi.data[:, 0], want, atol=1e-6)


def test_reset_isolation_exact():
    # outputs at/after a reset are bit-identical under any prefix perturbation
    rng = np.random.default_rng(28)
    params = make_params(8, 4, rng)
    d = ssm.discretize(params)
    L = 40
    for _ in range(5):
        u = rng.normal(size=(1, L, 4)).astype(np.float32)
        resets = np.zeros((1, L), dtype=np.float32)
        k = int(rng.integers(1, L))
        resets[0, k] = 1.0
        x0 = (Tensor(rng.normal(size=(1, 8)).astype(np.float32)),
              Tensor(rng.normal(size=(1, 8)).astype(np.float32)))
        ref_r, ref_i = ssm.parallel_scan(ssm.make_elements(Tensor(u), resets, d, x0=x0))
        u2 = u.copy()
        u2[:, :k] += rng.normal(size=(1, k, 4)).astype(np.float32) * 100.0
        x0b = (Tensor(rng.normal(size=(1, 8)).astype(np.float32) * 50.0),
               Tensor(rng.normal(size=(1, 8)).astype(np.float32) * 50.0))
        got_r, got_i = ssm.parallel_scan(ssm.make_elements(Tensor(u2), resets, d, x0=x0b))
        assert np.array_equal(ref_r.data[:, k:], got_r.data[:, k:])
        assert np.array_equal(ref_i.data[:, k:], got_i.data[:, k:])


# ---------------------------------------------------------------------------
# half GLU
# ---------------------------------------------------------------------------

def test_half_glu_zero_input_gives_zero():
    rng = np.random.default_rng(29)
    gate = nn.Linear(5, 5, rng)
    out = ssm.half_glu(Tensor(np.zeros((2, 5))), gate)
    assert np.allclose(out.data, 0.0)


def test_half_glu_zero_weights_halves_input():
    rng = np.random.default_rng(30)
    gate = nn.Linear(5, 5, rng)
    gate.w.data[:] = 0.0
    gate.b.data[:] = 0.0
    u = rng.normal(size=(3, 5))
    out = ssm.half_glu(Tensor(u), gate)
    assert np.allclose(out.data, 0.5 * u, atol=1e-7)


def test_half_glu_matches_scalar_reference():
    rng = np.random.default_rng(31)
    with ad.use_dtype(np.float64):
        gate = nn.Linear(4, 4, rng)
        u = rng.normal(size=(2, 4))
        out = ssm.half_glu(Tensor(u), gate)
        # independent scalar composition
        gelu = u * 0.5 * (1.0 + sp.erf(u / math.sqrt(2.0)))
        z = gelu @ gate.w.data + gate.b.data
        ref = u / (1.0 + np.exp(-z)) * 1.0
        assert np.abs(out.data - ref).max() < 1e-6


# ---------------------------------------------------------------------------
# layer forward
# ---------------------------------------------------------------------------

def test_layer_zero_input_zero_d_outputs_residual():
    rng = np.random.default_rng(32)
    layer = ssm.S5Layer(6, 8, rng)
    layer.params.d_vector.data[:] = 0.0
    u = Tensor(np.zeros((2, 7, 6)))
    y, _ = layer(u, np.zeros((2, 7)))
    assert np.allclose(y.data, 0.0)


def test_layer_identity_gating_equals_c_scan_plus_du():
    rng = np.random.default_rng(33)
    with ad.use_dtype(np.float64):
        layer = ssm.S5Layer(6, 8, rng, norm="none", residual=False, gating="identity")
        u = Tensor(rng.normal(size=(2, 9, 6)))
        resets = (rng.random((2, 9)) < 0.2).astype(np.float64)
        y, _ = layer(u, resets)
        d = layer.discrete()
        xr, xi = ssm.sequential_scan(d, u, resets)
        p = layer.params.p
        want = 2.0 * (xr.data @ p.c_re.data - xi.data @ p.c_im.data) + p.d_vector.data * u.data
        assert np.abs(y.data - want).max() < 1e-9


def test_layer_batched_call_matches_stepwise_calls():
    # the core parallel-equals-sequential property at the layer level
    rng = np.random.default_rng(34)
    layer = ssm.S5Layer(6, 8, rng)
    L = 128
    u = Tensor(rng.normal(size=(3, L, 6)).astype(np.float32))
    resets = (rng.random((3, L)) < 0.05).astype(np.float32)
    y_par, state_par = layer(u, resets)
    state = layer.zero_state(3)
    d = layer.discrete()
    outs = []
    for t in range(L):
        y_t, state = layer.step(u[:, t, :], resets[:, t], state, dssm=d)
        outs.append(y_t.data)
    y_seq = np.stack(outs, axis=1)
    assert np.abs(y_par.data - y_seq).max() < 1e-5
    assert np.abs(state_par[0].data - state[0].data).max() < 1e-5


def test_layer_nonfinite_raises_with_layer_index():
    rng = np.random.default_rng(35)
    stack = ssm.S5Stack(4, 4, 2, rng)
    u = Tensor(np.full((1, 3, 4), np.nan))
    with pytest.raises(FloatingPointError, match="layer 0"):
        stack(u, np.zeros((1, 3)))


def test_layer_gradients_match_finite_differences():
    rng = np.random.default_rng(36)
    with ad.use_dtype(np.float64):
        layer = ssm.S5Layer(5, 6, rng)
        u = ad.parameter(rng.normal(size=(2, 8, 5)))
        resets = (rng.random((2, 8)) < 0.2).astype(np.float64)

        def loss():
            y, _ = layer(u, resets)
            return ad.tmean(ad.square(y))

        params = [p for _, p in layer.named_parameters()] + [u]
        gradcheck(loss, params, rng, samples_per_param=3)


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_s5_stable_and_deterministic():
    for seed in range(4):
        p1 = ssm.init_s5(64, 16, np.random.default_rng(seed))
        p2 = ssm.init_s5(64, 16, np.random.default_rng(seed))
        assert np.all(p1.lambda_re.data < 0)
        for a, b in zip(p1.tensors(), p2.tensors()):
            assert np.array_equal(a.data, b.data)


def test_init_s5_variance_preserving_at_init():
    rng = np.random.default_rng(37)
    layer = ssm.S5Layer(32, 64, np.random.default_rng(0))
    u = Tensor(rng.normal(size=(8, 256, 32)).astype(np.float32))
    with ad.no_grad():
        y, _ = layer(u, np.zeros((8, 256)))
    ratio = y.data.var() / u.data.var()
    assert 0.25 < ratio < 4.0
