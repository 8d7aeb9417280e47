import math

import numpy as np
import pytest

from conftest import flat_channels
from dc_solver import Allocation
from phy_rates import (
    LN2,
    DegenerateSnr,
    IndexMismatch,
    LinkGeometry,
    LinkRateInputs,
    NonPositiveNoise,
    QApproxParams,
    access_interference,
    aggregate_rates,
    dispersion,
    error_prob,
    fbl_rate,
    fbl_rate_from_sinr,
    power_budget_check,
    q_approx,
    q_function,
    q_inverse,
    required_sinr,
    sinr_access,
)
from scenario import DL, UL


def test_q_function_and_inverse():
    assert q_function(0.0) == pytest.approx(0.5)
    assert q_inverse(0.5) == 0.0
    assert q_inverse(1e-7) == pytest.approx(5.199337582, rel=1e-8)
    for x in (-2.0, 0.3, 1.7, 4.5):
        assert q_inverse(float(q_function(x))) == pytest.approx(x, abs=1e-9)
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            q_inverse(eps)


def test_reference_rate():
    rate = fbl_rate_from_sinr(1.0, 2e6, 1e-3, 1e-7)
    assert rate == pytest.approx(1.7095e6, rel=1e-3)


def test_rate_at_half_error_probability_is_shannon():
    assert fbl_rate_from_sinr(1.0, 2e6, 1e-3, 0.5) == pytest.approx(2e6)


def test_rate_is_clamped_at_zero():
    assert fbl_rate_from_sinr(1e-6, 2e6, 1e-3, 1e-7) == 0.0
    assert fbl_rate_from_sinr(0.0, 2e6, 1e-3, 1e-7) == 0.0


def test_error_probability_inverts_the_rate(rng):
    for _ in range(1000):
        gamma = rng.uniform(0.5, 10.0)
        w = rng.uniform(1e5, 2e6)
        phi = rng.uniform(1e-3, 1e-2)
        eps = 10.0 ** rng.uniform(-6.0, -1.0)
        rate = fbl_rate_from_sinr(gamma, w, phi, eps)
        assert rate > 0
        assert error_prob(gamma, w, phi, rate * phi) == pytest.approx(eps, rel=1e-6)


def test_error_probability_at_zero_sinr_warns():
    with pytest.warns(DegenerateSnr):
        assert error_prob(0.0, 2e6, 1e-3, 160.0) == 1.0


def test_link_rate_inputs():
    inputs = LinkRateInputs(power=1.0, gain=1e-12, noise=1e-12, interference=0.0,
                            bandwidth=2e6, time_unit=1e-3, packet_bits=160, error_prob=1e-7)
    assert inputs.sinr == pytest.approx(1.0)
    assert fbl_rate(inputs) == pytest.approx(1.7095e6, rel=1e-3)
    with pytest.raises(NonPositiveNoise):
        LinkRateInputs(power=1.0, gain=1.0, noise=0.0, interference=0.0,
                       bandwidth=2e6, time_unit=1e-3, packet_bits=160, error_prob=1e-7)
    with pytest.raises(NonPositiveNoise):
        sinr_access(1.0, 1.0, -1.0)


def test_dispersion():
    assert dispersion(0.0) == 0.0
    assert dispersion(1.0) == pytest.approx(0.75)


def test_approximation_constants():
    params = QApproxParams.from_blocklength(160, 2000)
    assert params.A == pytest.approx(0.46474, rel=1e-4)
    assert params.B == pytest.approx(0.057018, rel=1e-4)
    assert params.halfwidth == pytest.approx(0.024057, rel=1e-4)
    assert required_sinr(1e-7, params, 2000) == pytest.approx(0.08108, rel=1e-3)


def test_approximation_branches_and_continuity():
    params = QApproxParams.from_blocklength(160, 2000)
    lo, hi = params.B - params.halfwidth, params.B + params.halfwidth
    assert q_approx(params.B, params, 2000) == pytest.approx(0.5, abs=1e-12)
    assert q_approx(lo, params, 2000) == pytest.approx(1.0, abs=1e-12)
    assert q_approx(hi, params, 2000) == pytest.approx(0.0, abs=1e-12)
    assert q_approx(lo - 1e-9, params, 2000) == 1.0
    assert q_approx(hi + 1e-9, params, 2000) == 0.0
    assert abs(q_approx(lo + 1e-13, params, 2000) - 1.0) < 1e-10
    grid = np.linspace(0.0, 0.2, 2001)
    values = q_approx(grid, params, 2000)
    assert np.all((values >= 0) & (values <= 1))
    assert np.all(np.diff(values) <= 1e-15)


def test_required_sinr_meets_the_target():
    params = QApproxParams.from_blocklength(160, 2000)
    for xi in (1e-7, 1e-5, 1e-3, 1e-2):
        gamma = required_sinr(xi, params, 2000)
        assert q_approx(gamma, params, 2000) == pytest.approx(xi, abs=1e-12)


def test_coupling_gains(two_rrh, two_rrh_channels):
    s, h = two_rrh, two_rrh_channels.h_access
    geo = LinkGeometry.build(s, two_rrh_channels)
    assert np.array_equal(s.serving_rrh, [0, 1, 0, 1])
    assert geo.direct.shape == (4, 2, 2)
    assert geo.coupling.shape == (2, 2, 4, 4)
    for u in range(4):
        assert np.array_equal(geo.direct[u], h[u, s.serving_rrh[u]])
        for v in range(4):
            if s.serving_rrh[u] == s.serving_rrh[v]:
                assert np.all(geo.coupling[:, :, u, v] == 0)
                continue
            for k in range(2):
                assert geo.coupling[k, UL, u, v] == h[v, s.serving_rrh[u], k, UL]
                assert geo.coupling[k, DL, u, v] == h[u, s.serving_rrh[v], k, DL]


def test_interference_matches_explicit_sum(two_rrh, two_rrh_channels, rng):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    tau = rng.uniform(size=(4, 2, 2))
    p = rng.uniform(size=(4, 2, 2))
    expected = np.zeros((4, 2, 2))
    for u in range(4):
        for k in range(2):
            for q in range(2):
                expected[u, k, q] = sum(geo.coupling[k, q, u, v] * tau[v, k, q] * p[v, k, q]
                                        for v in range(4))
    assert np.allclose(access_interference(tau, p, geo), expected, rtol=1e-12, atol=0)


def test_aggregate_rates(single_rrh):
    chan = flat_channels(single_rrh)
    alloc = Allocation.initial(single_rrh)
    tau = np.zeros_like(alloc.tau)
    tau[0, 0, UL] = 1.0
    tau[1, 1, DL] = 0.5
    p = np.full_like(alloc.p_access, 1e-4)
    x = np.zeros_like(alloc.x)
    x[0, 0, UL] = 1.0
    pf = np.full_like(alloc.p_fronthaul, 1e-3)
    alloc = alloc.replace(tau=tau, p_access=p, x=x, p_fronthaul=pf)
    rates = aggregate_rates(alloc, chan, single_rrh)

    gamma = 1e-4 * 1e-9 / single_rrh.access_noise
    link = fbl_rate_from_sinr(gamma, 2e6, 1e-3, 1e-7)
    assert np.allclose(rates.access_sinr, gamma)
    assert rates.user[0, UL] == pytest.approx(link)
    assert rates.user[1, DL] == pytest.approx(0.5 * link)
    assert rates.user[0, DL] == 0.0
    assert rates.rrh[0, UL] == pytest.approx(link)
    assert np.allclose(rates.slice, rates.user.sum(axis=0))
    assert rates.bbu[DL] == 0.0
    assert rates.bbu[UL] == pytest.approx(rates.fronthaul_link[0, 0, UL])
    assert np.allclose(rates.access_total, [link, 0.5 * link])


def test_shape_mismatch_raises(single_rrh):
    alloc = Allocation.initial(single_rrh)
    with pytest.raises(IndexMismatch):
        aggregate_rates(alloc.replace(tau=np.zeros((3, 2, 2))), flat_channels(single_rrh), single_rrh)


def test_power_budget_check(single_rrh):
    alloc = Allocation.initial(single_rrh)
    tau = np.zeros_like(alloc.tau)
    tau[1, 0, DL] = 1.0
    tau[0, 1, UL] = 0.5
    p = np.zeros_like(alloc.p_access)
    p[1, 0, DL] = 1.0
    p[0, 1, UL] = 0.1
    residuals = power_budget_check(alloc.replace(tau=tau, p_access=p), single_rrh)
    b = single_rrh.budgets
    assert residuals.rrh_dl[0] == pytest.approx(b.rrh_dl - 1.0)
    assert residuals.user_ul[0] == pytest.approx(b.user_ul - 0.05)
    assert residuals.user_ul[1] == pytest.approx(b.user_ul)
    assert residuals.total_power_w == pytest.approx(1.0 + 0.05)
    assert residuals.feasible()
    p[0, 1, UL] = 1.0
    assert not power_budget_check(alloc.replace(tau=tau, p_access=p), single_rrh).feasible()


def test_ln2_constant():
    assert LN2 == pytest.approx(math.log(2.0))
