import json
import math

import mpmath
import numpy as np
import pytest

from progap.privacy import (
    ALPHAS,
    EDGE_ALPHAS,
    CalibrationError,
    PrivacySpec,
    RdpCurve,
    account,
    calibrate,
    default_delta,
    edge_epsilon_closed_form,
    rdp_curve,
    rdp_gaussian,
    rdp_nap_total,
    rdp_subsampled_gaussian,
    rdp_to_dp,
    total_rdp_node,
)


def _node_spec(**kw):
    base = dict(level="node", delta=1e-5, depth=2, max_degree=4, clip=1.0, batch_size=10,
                num_nodes=100, iterations=50, sigma_ap=4.0, sigma_gp=2.0)
    base.update(kw)
    return PrivacySpec(**base)


def _mp_subsampled(alpha, q, c, s):
    mpmath.mp.dps = 60
    q, c, s = mpmath.mpf(q), mpmath.mpf(c), mpmath.mpf(s)
    total = (1 - q) ** (alpha - 1) * (alpha * q - q + 1)
    total += mpmath.binomial(alpha, 2) * q**2 * (1 - q) ** (alpha - 2) * mpmath.e ** (c**2 / s**2)
    for l in range(3, alpha + 1):
        total += (mpmath.binomial(alpha, l) * (1 - q) ** (alpha - l) * q**l
                  * mpmath.e ** ((l - 1) * l * c**2 / (2 * s**2)))
    return mpmath.log(total) / (alpha - 1)


# --- Gaussian and NAP composition ------------------------------------------

def test_rdp_gaussian_examples():
    assert rdp_gaussian(2, 1.0, 1.0) == 1.0
    assert rdp_gaussian(2, math.sqrt(2), 1.0) == pytest.approx(2.0, rel=1e-15)
    assert rdp_gaussian(2, 1.0, 0.0) == math.inf


def test_rdp_gaussian_decreases_in_sigma():
    vals = [rdp_gaussian(5, 1.0, s) for s in (0.5, 1, 2, 10, 1e3, 1e6)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-11


def test_rdp_nap_total_examples():
    assert rdp_nap_total(2, 2.0, 0) == 0
    assert rdp_nap_total(2, 2.0, 5, "edge") == pytest.approx(1.25)
    assert rdp_nap_total(3, 2.0, 2, "node", max_degree=4) == pytest.approx(3.0)


# --- subsampled Gaussian ----------------------------------------------------

def test_subsampled_limits():
    for a in range(2, 65):
        assert rdp_subsampled_gaussian(a, 0.0, 1.0, 1.0) == 0.0
        assert abs(rdp_subsampled_gaussian(a, 1.0, 1.0, 1.0) - rdp_gaussian(a, 1.0, 1.0)) < 1e-10


def test_subsampled_half_rate_value():
    oracle = float(mpmath.log(mpmath.mpf("0.75") + mpmath.mpf("0.25") * mpmath.e))
    assert abs(rdp_subsampled_gaussian(2, 0.5, 1.0, 1.0) - oracle) < 1e-9
    assert oracle == pytest.approx(0.35738, abs=1e-5)


def test_subsampled_rejects_fractional_order():
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2.5, 0.1, 1.0, 1.0)


@pytest.mark.parametrize("alpha,q,c,s", [(2, 0.01, 1, 1), (7, 0.1, 1.0, 1.3), (32, 0.05, 2.0, 3.0),
                                        (128, 0.02, 1.0, 2.5), (64, 0.3, 0.5, 0.7)])
def test_subsampled_matches_high_precision(alpha, q, c, s):
    got = rdp_subsampled_gaussian(alpha, q, c, s)
    want = float(_mp_subsampled(alpha, q, c, s))
    assert got == pytest.approx(want, rel=1e-10)


def test_subsampled_no_overflow_at_small_sigma():
    v = rdp_subsampled_gaussian(128, 0.5, 1.0, 0.1)
    assert math.isfinite(v) and v > 0


def test_subsampling_amplifies():
    for q in (0.001, 0.01, 0.1, 0.5, 0.9, 1.0):
        for s in (0.5, 1.0, 3.0):
            for a in (2, 3, 8, 32, 128):
                assert rdp_subsampled_gaussian(a, q, 1.0, s) <= rdp_gaussian(a, 1.0, s) + 1e-12


# --- node-level total -------------------------------------------------------

def test_node_total_trivial():
    spec = _node_spec(depth=0, iterations=0)
    assert total_rdp_node(5, spec) == 0.0
    assert account(spec).epsilon == 0.0


def test_node_total_doubling_iterations():
    a, b = _node_spec(iterations=20), _node_spec(iterations=40)
    nap = rdp_nap_total(6, 4.0, 2, "node", 4)
    assert total_rdp_node(6, b) - nap == pytest.approx(2 * (total_rdp_node(6, a) - nap), rel=1e-13)


def test_node_total_matches_high_precision():
    rng = np.random.default_rng(2024)
    for _ in range(3):
        k, t, d = int(rng.integers(1, 5)), int(rng.integers(1, 200)), int(rng.integers(1, 10))
        n = int(rng.integers(100, 5000))
        b = int(rng.integers(1, n // 10))
        c, s_gp, s_ap = rng.uniform(0.5, 2), rng.uniform(0.8, 5), rng.uniform(0.8, 5)
        a = int(rng.integers(2, 129))
        spec = PrivacySpec("node", 1e-6, k, d, c, b, t, n, s_ap, s_gp)
        mpmath.mp.dps = 60
        want = ((k + 1) * t * _mp_subsampled(a, mpmath.mpf(b) / n, c, s_gp)
                + mpmath.mpf(k) * d * a / (2 * mpmath.mpf(s_ap) ** 2))
        assert abs(total_rdp_node(a, spec) - float(want)) <= 1e-10 * max(1.0, abs(float(want)))


# --- conversion and closed form --------------------------------------------

def test_rdp_to_dp_single_point():
    rep = rdp_to_dp(RdpCurve([2], [1.0]), math.exp(-1))
    assert rep.epsilon == pytest.approx(2.0)
    assert rep.alpha_star == 2


def test_rdp_to_dp_rejects_empty():
    with pytest.raises(ValueError):
        rdp_to_dp(RdpCurve([], []), 1e-5)


def test_rdp_curve_validation():
    with pytest.raises(ValueError):
        RdpCurve([3, 2], [0.1, 0.1])
    with pytest.raises(ValueError):
        RdpCurve([2], [-1.0])


def test_closed_form_examples():
    assert edge_epsilon_closed_form(0, 1.0, 1e-5) == 0.0
    assert edge_epsilon_closed_form(1, 1.0, 1e-5) == pytest.approx(0.5 + math.sqrt(2 * math.log(1e5)), abs=1e-12)
    assert edge_epsilon_closed_form(1, 1.0, 1e-5) == pytest.approx(5.2985, abs=1e-4)


def test_closed_form_scaling():
    k, d = 3, 1e-6
    first = lambda s: k / (2 * s * s)
    second = lambda s: edge_epsilon_closed_form(k, s, d) - first(s)
    assert first(2) == pytest.approx(first(1) / 4)
    assert second(2) == pytest.approx(second(1) / 2)


def _grid_eps(k, s, d):
    return account(PrivacySpec("edge", d, k, sigma_ap=s), method="grid").epsilon


@pytest.mark.parametrize("k", range(1, 6))
@pytest.mark.parametrize("sigma", [1, 2, 4])
def test_grid_close_to_closed_form(k, sigma):
    closed = edge_epsilon_closed_form(k, sigma, 1e-5)
    grid = _grid_eps(k, sigma, 1e-5)
    assert closed <= grid <= closed * 1.005


def test_grid_never_below_closed_form():
    for k in (1, 4, 10, 30):
        for s in (0.3, 0.5, 1, 3, 10, 30):
            for d in (1e-3, 1e-8, 1e-10):
                assert _grid_eps(k, s, d) >= edge_epsilon_closed_form(k, s, d) * (1 - 1e-12)


def test_grid_within_half_percent_of_closed_form():
    for k in range(1, 11):
        for s in (0.5, 0.75, 1, 2, 4, 8, 16):
            for d in (1e-1, 1e-3, 1e-5, 1e-8):
                closed = edge_epsilon_closed_form(k, s, d)
                assert _grid_eps(k, s, d) <= closed * 1.005


def test_integer_orders_alone_miss_the_optimum():
    # why the edge grid is finer than the integers: alpha* ~ 3.4 here
    k, s, d = 4, 1.0, 1e-5
    spec = PrivacySpec("edge", d, k, sigma_ap=s)
    coarse = rdp_to_dp(rdp_curve(spec, ALPHAS), d).epsilon
    assert coarse > 1.01 * edge_epsilon_closed_form(k, s, d)


def test_edge_account_reports_closed_form():
    rep = account(PrivacySpec("edge", 1e-5, 1, sigma_ap=1.0))
    assert rep.epsilon == pytest.approx(5.298525912, abs=1e-9)
    assert rep.alpha_star == pytest.approx(1 + math.sqrt(2 * math.log(1e5)))
    assert rep.method == "closed_form"


def test_edge_zero_depth_is_free():
    assert account(PrivacySpec("edge", 1e-5, 0, sigma_ap=0.0)).epsilon == 0.0


# --- monotonicity -----------------------------------------------------------

def _eps(**kw):
    return account(_node_spec(**kw)).epsilon


def test_node_epsilon_monotone():
    assert _eps(sigma_gp=1.0) >= _eps(sigma_gp=2.0) >= _eps(sigma_gp=4.0)
    assert _eps(sigma_ap=1.0) >= _eps(sigma_ap=2.0) >= _eps(sigma_ap=8.0)
    assert _eps(depth=1) <= _eps(depth=2) <= _eps(depth=4)
    assert _eps(max_degree=1) <= _eps(max_degree=4) <= _eps(max_degree=16)
    assert _eps(iterations=10) <= _eps(iterations=50) <= _eps(iterations=200)
    assert _eps(batch_size=5) <= _eps(batch_size=10) <= _eps(batch_size=50)
    assert _eps(clip=0.5) <= _eps(clip=1.0) <= _eps(clip=2.0)


def test_edge_epsilon_monotone():
    sigmas = [0.5, 1, 2, 4, 8]
    eps = [edge_epsilon_closed_form(3, s, 1e-5) for s in sigmas]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    eps = [edge_epsilon_closed_form(k, 2.0, 1e-5) for k in range(6)]
    assert all(a < b for a, b in zip(eps, eps[1:]))


def test_node_calibration_multiplier_monotone():
    spec = _node_spec()
    eps = [account(PrivacySpec(**{**spec.__dict__, "sigma_gp": lam, "sigma_ap": 2 * lam})).epsilon
           for lam in (0.5, 1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(eps, eps[1:]))


# --- calibration ------------------------------------------------------------

@pytest.mark.parametrize("target", [0.25, 1.0, 4.0])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_edge_calibration_roundtrip(target, k):
    spec = calibrate(PrivacySpec("edge", 1e-5, k, epsilon=target))
    eps = account(spec).epsilon
    assert target * (1 - 1e-4) <= eps <= target


@pytest.mark.parametrize("target", [2.0, 8.0, 32.0])
def test_node_calibration_roundtrip(target):
    spec = calibrate(_node_spec(sigma_ap=None, sigma_gp=None, epsilon=target))
    eps = account(spec).epsilon
    assert target * (1 - 1e-4) <= eps <= target
    assert spec.sigma_ap == pytest.approx(2 * spec.sigma_gp)


def test_calibrate_infinite_target_means_no_noise():
    assert calibrate(PrivacySpec("edge", 1e-5, 2, epsilon=math.inf)).sigma_ap == 0.0


def test_calibration_failure_reports_achievable():
    spec = _node_spec(sigma_ap=None, sigma_gp=None, epsilon=1e-3, iterations=10**6, batch_size=50)
    with pytest.raises(CalibrationError) as info:
        calibrate(spec)
    assert info.value.achievable > 1e-3


# --- misc -------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        PrivacySpec("edge", delta=0.0)
    with pytest.raises(ValueError):
        PrivacySpec("node", max_degree=0)
    with pytest.raises(ValueError):
        PrivacySpec("node", batch_size=10, num_nodes=10)
    with pytest.raises(ValueError):
        PrivacySpec("banana")


def test_default_delta():
    assert default_delta(1000) == pytest.approx(1e-4)


def test_report_json_roundtrip():
    rep = account(_node_spec())
    data = json.loads(rep.to_json())
    assert set(data) >= {"epsilon", "alpha_star", "delta", "terms", "params"}
    assert data["epsilon"] == pytest.approx(rep.epsilon)
    assert data["terms"]["dpsgd"] + data["terms"]["nap"] + math.log(1e5) / (data["alpha_star"] - 1) == \
        pytest.approx(rep.epsilon)


def test_accountant_is_pure():
    spec = _node_spec()
    a, b = rdp_curve(spec), rdp_curve(spec)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(a.alphas, ALPHAS)
    assert np.array_equal(rdp_curve(PrivacySpec("edge", 1e-5, 2, sigma_ap=1.0)).alphas, EDGE_ALPHAS)
