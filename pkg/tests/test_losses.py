import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackrecon import autodiff as ad
from stackrecon.losses import (DIST_FLOOR, loss_bias, loss_regularization,
                               loss_slice, loss_total, pair_distances)


def test_perfect_fit_unit_variance_is_zero():
    n = 16
    i = np.linspace(0.2, 1.4, n)
    out = loss_slice(i.copy(), np.ones(n), i, lam=20.0)
    assert float(out.data) == pytest.approx(0.0, abs=1e-12)


def test_single_pixel_residual_with_unit_variance():
    for lam, d in ((20.0, 0.3), (1.0, 2.0), (7.5, -0.25)):
        out = loss_slice(np.array([1.0 + d]), np.array([1.0]),
                         np.array([1.0]), lam=lam)
        assert float(out.data) == pytest.approx(lam * d * d / 2, rel=1e-12)


def test_variance_minimizer_is_lambda_d_squared():
    lam, d = 20.0, 0.13

    def f(s2):
        return float(loss_slice(np.array([d]), np.array([s2]),
                                np.array([0.0]), lam=lam).data)

    from scipy.optimize import minimize_scalar
    res = minimize_scalar(f, bounds=(1e-6, 10.0), method="bounded",
                          options={"xatol": 1e-12})
    assert res.x == pytest.approx(lam * d * d, rel=1e-4)


def test_nonpositive_variance_rejected():
    with pytest.raises(ValueError):
        loss_slice(np.array([1.0]), np.array([0.0]), np.array([1.0]), 20.0)
    with pytest.raises(ValueError):
        loss_slice(np.array([1.0]), np.array([-1e-9]), np.array([1.0]), 20.0)


def test_slice_loss_gradient_pulls_mean_toward_observation():
    ibar = ad.Var(np.array([0.5], dtype=np.float64))
    out = loss_slice(ibar, np.array([1.0]), np.array([1.0]), lam=20.0)
    ad.backward(out)
    # d/dIbar of lam (I - Ibar)^2 / 2 = -lam (I - Ibar)
    assert ibar.grad[0] == pytest.approx(-20.0 * 0.5, rel=1e-9)


def test_constant_field_regularizer_is_zero():
    v = np.full((3, 8), 0.77, dtype=np.float32)
    offsets = np.random.default_rng(0).normal(0, 1, (3, 8, 3))
    out = loss_regularization(v, offsets)
    assert float(out.data) == pytest.approx(0.0, abs=1e-9)


def test_unit_ramp_single_pair_evaluates_to_2_5():
    # V = x1, one pixel, K=2: s = 1 exactly, loss = 1 + 1 + 0.5
    offsets = np.zeros((1, 2, 3))
    offsets[0, 0, 0] = 0.3
    offsets[0, 1, 0] = -0.4
    v = np.array([[0.3, -0.4]], dtype=np.float64)
    out = loss_regularization(v, offsets, delta=1.0)
    assert float(out.data) == pytest.approx(2.5, rel=1e-7)


def test_ramp_slope_is_exact_for_any_pair_geometry():
    # slope of a linear ramp along its direction equals |a| whenever the
    # pair separation is parallel to the gradient
    a = 0.6
    offsets = np.zeros((1, 4, 3))
    offsets[0, :, 0] = [1.0, -0.5, 0.2, 0.9]
    v = (a * offsets[:, :, 0]).astype(np.float64)
    dist = pair_distances(offsets)
    s = np.abs(v[:, :2] - v[:, 2:]) / dist
    assert np.allclose(s, a, atol=1e-12)


@given(st.floats(0.0, 50.0), st.floats(0.1, 10.0))
@settings(max_examples=80, deadline=None)
def test_huber_no_larger_than_square(s, delta):
    h = float(ad.huber(ad.Var(np.array([s])), delta).data[0])
    assert h <= s * s + 1e-12


def test_coincident_pairs_skipped_and_counted():
    offsets = np.zeros((1, 4, 3))
    offsets[0, 0] = [1.0, 0, 0]
    offsets[0, 2] = [1.0, 0, 0]          # pair 0 coincident
    offsets[0, 1] = [0, 1.0, 0]
    offsets[0, 3] = [0, -1.0, 0]         # pair 1 separation 2
    v = np.array([[5.0, 1.0, 3.0, 0.0]])
    counters = {}
    out = loss_regularization(v, offsets, delta=1.0, counters=counters)
    assert counters["skipped_pairs"] == 1
    # only pair 1 contributes: s = 1/2 -> (0.5 + 0.25 + 0.125) * 2/4
    assert float(out.data) == pytest.approx((0.5 + 0.25 + 0.125) / 2,
                                            rel=1e-6)


def test_pair_distance_layout_matches_k_over_2_offset():
    offsets = np.random.default_rng(3).normal(0, 1, (2, 6, 3))
    d = pair_distances(offsets)
    assert d.shape == (2, 3)
    want = np.linalg.norm(offsets[1, 1] - offsets[1, 4])
    assert d[1, 1] == pytest.approx(want, rel=1e-12)


def test_odd_sample_count_rejected():
    with pytest.raises(ValueError):
        pair_distances(np.zeros((1, 3, 3)))
    with pytest.raises(ValueError):
        pair_distances(np.zeros((1, 0, 3)))


def test_regularizer_nonnegative():
    gen = np.random.default_rng(7)
    for _ in range(20):
        v = gen.normal(0, 1, (4, 8))
        offsets = gen.normal(0, 1, (4, 8, 3))
        assert float(loss_regularization(v, offsets).data) >= 0


def test_bias_penalty_zero_mean_cases():
    assert float(loss_bias(np.zeros((3, 4))).data) == 0.0
    c = 0.37
    assert float(loss_bias(np.full((2, 5), c)).data) == pytest.approx(
        c * c, rel=1e-12)
    half = np.concatenate([np.ones(8), -np.ones(8)]).reshape(4, 4)
    assert float(loss_bias(half).data) == pytest.approx(0.0, abs=1e-14)


def test_total_is_weighted_sum():
    one = ad.Var(np.array(1.0))
    out = loss_total(one, ad.Var(np.array(1.0)), ad.Var(np.array(1.0)),
                     lambda_v=2.0, lambda_b=100.0)
    assert float(out.data) == pytest.approx(103.0, rel=1e-12)
    alone = loss_total(ad.Var(np.array(0.7)), one, one, 0.0, 0.0)
    assert float(alone.data) == pytest.approx(0.7, rel=1e-12)


def test_total_names_non_finite_term():
    one = ad.Var(np.array(1.0))
    bad = ad.Var(np.array(np.inf))
    with pytest.raises(ValueError, match="regularization"):
        loss_total(one, bad, one, 2.0, 100.0)
    with pytest.raises(ValueError, match="bias"):
        loss_total(one, one, ad.Var(np.array(np.nan)), 2.0, 100.0)
    with pytest.raises(ValueError, match="slice"):
        loss_total(bad, one, one, 2.0, 100.0)


def test_losses_deterministic():
    gen = np.random.default_rng(11)
    v = gen.normal(0, 1, (3, 6))
    offsets = gen.normal(0, 1, (3, 6, 3))
    a = float(loss_regularization(v, offsets).data)
    b = float(loss_regularization(v, offsets).data)
    assert a == b


def test_full_objective_gradient_matches_finite_differences():
    # tiny synthetic batch: Ibar, var, v, logb all derived from one
    # parameter vector through smooth ops, so the chain is kink-free
    gen = np.random.default_rng(5)
    theta0 = gen.normal(0.1, 0.3, 8)
    intensity = gen.normal(1.0, 0.2, 2)
    offsets = gen.normal(0, 1, (2, 4, 3))

    def build(theta):
        th = ad.Var(theta) if isinstance(theta, np.ndarray) else theta
        v = ad.reshape(ad.exp(ad.mul(th, 0.3)), (2, 4))
        ibar = ad.vmean(v, axis=1)
        var = ad.add(ad.vmean(ad.square(v), axis=1), 0.05)
        logb = ad.mul(v, 0.1)
        l_i = loss_slice(ibar, var, intensity, lam=20.0)
        r_v = loss_regularization(v, offsets, delta=1.0)
        r_b = loss_bias(logb)
        return loss_total(l_i, r_v, r_b, 2.0, 100.0), th

    total, th = build(theta0)
    ad.backward(total)
    num = ad.finite_diff_grad(lambda t: float(build(t)[0].data), theta0,
                              h=1e-5)
    assert np.allclose(th.grad, num, rtol=1e-4, atol=1e-8)
