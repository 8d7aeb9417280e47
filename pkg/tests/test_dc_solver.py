import itertools

import cvxpy as cp
import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import brentq

import dc_solver
from conftest import flat_channels, single_rrh_scenario, small_config
from dc_solver import (
    Allocation,
    ConvexSubproblem,
    DegeneratePoint,
    Infeasible,
    NamedConstraint,
    SolveResult,
    SolverContext,
    SolverFailure,
    SolverStatus,
    assemble_power_subproblem,
    assemble_subcarrier_subproblem,
    dc_decompose_access,
    dc_decompose_fronthaul,
    fronthaul_diagonal,
    linearize_concave,
    prune,
    round_timesharing,
    row_scale,
    solve_alpha_lp,
    solve_convex,
    solve_delay_lp,
)
from phy_rates import LN2, LinkGeometry, aggregate_rates, dispersion, fbl_rate_from_sinr, q_inverse
from qos_delay import DelaySplit, check_delay_chain, queue_thresholds
from scenario import DL, UL, QoSParams


def unclamped_rate(gamma, scenario, bandwidth):
    penalty = np.sqrt(dispersion(gamma) / (scenario.time_unit * bandwidth)) * q_inverse(scenario.qos.error_threshold)
    return bandwidth / LN2 * (np.log1p(gamma) - penalty)


def random_point(scenario, rng, p_range=(1e-3, 1e-1)):
    alloc = Allocation.initial(scenario)
    return alloc.replace(
        tau=rng.uniform(0.1, 1.0, size=alloc.tau.shape),
        p_access=rng.uniform(*p_range, size=alloc.p_access.shape),
        x=rng.uniform(0.1, 1.0, size=alloc.x.shape),
        p_fronthaul=rng.uniform(*p_range, size=alloc.p_fronthaul.shape),
    )


def moderate_point(scenario, geo, rng):
    """Powers that put every link at an SINR of order one"""
    alloc = Allocation.initial(scenario)
    unit = geo.access_noise / np.median(geo.direct)
    fronthaul_unit = geo.fronthaul_noise / np.median(geo.fronthaul)
    return alloc.replace(
        tau=rng.uniform(0.1, 1.0, size=alloc.tau.shape),
        p_access=unit * rng.uniform(0.5, 5.0, size=alloc.p_access.shape),
        x=rng.uniform(0.1, 1.0, size=alloc.x.shape),
        p_fronthaul=fronthaul_unit * rng.uniform(0.5, 5.0, size=alloc.p_fronthaul.shape),
    )


def served_point(scenario):
    """Each user holds subcarrier k=user in both directions; fronthaul uplink on every subcarrier"""
    alloc = Allocation.initial(scenario)
    tau = np.zeros_like(alloc.tau)
    for u in range(scenario.num_users):
        tau[u, u % scenario.access_subcarriers, :] = 1.0
    x = np.zeros_like(alloc.x)
    x[:, :, UL] = 1.0
    return alloc.replace(tau=tau, p_access=np.where(tau > 0, 1e-4, 0.0), x=x,
                         p_fronthaul=np.where(x > 0, 1.0, 0.0))


def test_access_pieces_reproduce_the_rate(two_rrh, two_rrh_channels, rng):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    w = two_rrh.access_bandwidth
    for _ in range(100):
        point = random_point(two_rrh, rng)
        pieces = dc_decompose_access(point, two_rrh_channels, two_rrh, "power", geo)
        gamma = aggregate_rates(point, two_rrh_channels, two_rrh, geo).access_sinr
        expected = point.tau * unclamped_rate(gamma, two_rrh, w)
        assert np.allclose(pieces.rate, expected, rtol=1e-9, atol=1e-6)


def test_fronthaul_pieces_reproduce_the_rate(two_rrh, two_rrh_channels, rng):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    point = random_point(two_rrh, rng)
    pieces = dc_decompose_fronthaul(point, two_rrh, "power", geo)
    gamma = point.p_fronthaul * geo.fronthaul / geo.fronthaul_noise
    expected = point.x * unclamped_rate(gamma, two_rrh, two_rrh.fronthaul_bandwidth)
    assert np.allclose(pieces.rate, expected, rtol=1e-9)
    assert np.all(pieces.y == 0)

    idle = dc_decompose_fronthaul(point.replace(x=np.zeros_like(point.x)), two_rrh, "power", geo)
    assert np.all(idle.f == 0) and np.all(idle.g == 0)


def test_no_interference_leaves_g_constant(single_rrh, rng):
    chan = flat_channels(single_rrh)
    point = random_point(single_rrh, rng)
    pieces = dc_decompose_access(point, chan, single_rrh, "power")
    a = single_rrh.access_bandwidth / LN2
    assert np.allclose(pieces.g, point.tau * a * np.log(single_rrh.access_noise))
    assert np.all(pieces.jac_g == 0)


def _finite_difference(fn, values, index, step):
    up, down = values.copy(), values.copy()
    up[index] += step
    down[index] -= step
    return (fn(up) - fn(down)) / (2.0 * step)


@pytest.mark.parametrize("block,field", [("power", "p_access"), ("subcarrier", "tau")])
def test_access_gradients_match_finite_differences(two_rrh, two_rrh_channels, rng, block, field):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    for _ in range(50):
        point = moderate_point(two_rrh, geo, rng)
        pieces = dc_decompose_access(point, two_rrh_channels, two_rrh, block, geo)
        v, k, q = rng.integers(4), rng.integers(2), rng.integers(2)
        base = getattr(point, field)
        step = 1e-6 * base[v, k, q]
        for name, jac in (("f", pieces.jac_f), ("g", pieces.jac_g), ("y", pieces.jac_y)):
            def piece(values):
                moved = point.replace(**{field: values})
                return getattr(dc_decompose_access(moved, two_rrh_channels, two_rrh, block, geo), name)[:, k, q]
            numeric = _finite_difference(piece, base, (v, k, q), step)
            analytic = jac[k, q, :, v]
            scale = np.abs(analytic).max()
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-4 * scale)


@pytest.mark.parametrize("block,field", [("power", "p_fronthaul"), ("subcarrier", "x")])
def test_fronthaul_gradients_match_finite_differences(two_rrh, two_rrh_channels, rng, block, field):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    for _ in range(50):
        point = moderate_point(two_rrh, geo, rng)
        pieces = dc_decompose_fronthaul(point, two_rrh, block, geo)
        j, k, q = rng.integers(2), rng.integers(2), rng.integers(2)
        base = getattr(point, field)
        step = 1e-6 * base[j, k, q]
        for name, jac in (("f", pieces.jac_f), ("g", pieces.jac_g)):
            def piece(values):
                return getattr(dc_decompose_fronthaul(point.replace(**{field: values}), two_rrh, block, geo),
                               name)[j, k, q]
            numeric = _finite_difference(piece, base, (j, k, q), step)
            assert fronthaul_diagonal(jac)[j, k, q] == pytest.approx(numeric, rel=1e-4)


def test_fronthaul_jacobian_is_diagonal(two_rrh, two_rrh_channels, rng):
    geo = LinkGeometry.build(two_rrh, two_rrh_channels)
    pieces = dc_decompose_fronthaul(random_point(two_rrh, rng), two_rrh, "power", geo)
    off = pieces.jac_f * (1 - np.eye(2))
    assert np.all(off == 0)


def test_unknown_block_raises(single_rrh):
    with pytest.raises(ValueError):
        dc_decompose_access(Allocation.initial(single_rrh), flat_channels(single_rrh), single_rrh, "delay")


def test_negative_power_is_degenerate(single_rrh):
    point = Allocation.initial(single_rrh)
    point = point.replace(p_access=point.p_access - 1.0)
    with pytest.raises(DegeneratePoint):
        dc_decompose_access(point, flat_channels(single_rrh), single_rrh, "power")


def test_linearization_is_exact_at_the_point_and_overestimates(rng):
    x0 = rng.uniform(0.5, 2.0, size=3)
    g0, grad = np.log(x0).sum(), 1.0 / x0
    assert linearize_concave(g0, grad, x0, x0) == g0
    for _ in range(1000):
        x = rng.uniform(1e-3, 10.0, size=3)
        assert linearize_concave(g0, grad, x0, x) >= np.log(x).sum() - 1e-12
    assert linearize_concave(4.0, np.zeros(3), x0, x0 + 7.0) == 4.0


def _expected_user_residual(point, chan, scenario):
    rates = aggregate_rates(point, chan, scenario)
    _, _, thr_user = queue_thresholds(point.delay, scenario)
    alpha_user = point.alpha.sum(axis=1)
    return (rates.user[:, DL] + alpha_user - thr_user) / scenario.access_bandwidth


def _expected_uplink_flow(point, chan, scenario):
    rates = aggregate_rates(point, chan, scenario)
    return (rates.bbu[UL] - rates.access_total[UL] + point.alpha.sum()) / scenario.access_bandwidth


@pytest.mark.parametrize("assemble", [assemble_subcarrier_subproblem, assemble_power_subproblem])
def test_surrogates_are_exact_at_the_expansion_point(single_rrh, assemble):
    chan = flat_channels(single_rrh)
    point = served_point(single_rrh)
    point = point.replace(alpha=np.full_like(point.alpha, 3.0))
    sub = assemble(point, chan, single_rrh)
    sub.set_values(sub.expansion_values)
    residuals = sub.residuals()
    expansion = sub.expansion_point
    assert np.allclose(residuals["user_queue_rate"], _expected_user_residual(expansion, chan, single_rrh),
                       rtol=1e-7, atol=1e-9)
    assert residuals["uplink_flow"][0] == pytest.approx(_expected_uplink_flow(expansion, chan, single_rrh),
                                                        rel=1e-7)


def test_subcarrier_relaxation_is_no_worse_than_binary_assignments(single_rrh):
    chan = flat_channels(single_rrh)
    point = served_point(single_rrh)
    result = solve_convex(assemble_subcarrier_subproblem(point, chan, single_rrh))
    assert result.status == SolverStatus.OPTIMAL
    shares = result.values["tau"]
    assert np.all(shares >= -1e-7) and np.all(shares <= 1 + 1e-7)
    # every way of handing each (k, q) to one of the two users
    links = list(itertools.product(range(single_rrh.access_subcarriers), (UL, DL)))
    for owners in itertools.product(range(single_rrh.num_users), repeat=len(links)):
        tau = np.zeros_like(point.tau)
        for (k, q), u in zip(links, owners):
            tau[u, k, q] = 1.0
        sub = assemble_subcarrier_subproblem(point, chan, single_rrh)
        sub.constraints.append(NamedConstraint("pinned", sub.variables["tau"] - tau.ravel(), "=="))
        pinned = solve_convex(sub)
        assert pinned.status == SolverStatus.OPTIMAL, owners
        assert result.objective <= pinned.objective + 1e-6 * max(1.0, abs(pinned.objective))


def test_single_link_power_matches_bisection():
    config = small_config(reservation_rate_bps_hz=4.0)
    config.qos.packet_floor = False
    scenario = single_rrh_scenario(config)
    chan = flat_channels(scenario)
    point = served_point(scenario)
    x = np.zeros_like(point.x)
    x[0, 0, UL] = 1.0
    point = point.replace(p_access=np.zeros_like(point.p_access), x=x,
                          p_fronthaul=np.zeros_like(point.p_fronthaul))
    ctx = SolverContext.build(scenario, chan)
    for _ in range(40):
        sub = assemble_power_subproblem(point, chan, scenario, ctx)
        result = solve_convex(sub)
        assert result.status == SolverStatus.OPTIMAL
        point = sub.decode(result.values)

    # Two equal links share the slice reservation, so each carries half of it
    target = 0.5 * 4.0 * scenario.access_bandwidth
    gain = 1e-9 / scenario.access_noise

    def shortfall(p):
        return fbl_rate_from_sinr(p * gain, scenario.access_bandwidth, scenario.time_unit, 1e-7) - target

    oracle = brentq(shortfall, 1e-15, 1.0, xtol=1e-18, rtol=1e-12)
    assert point.p_access[0, 0, UL] == pytest.approx(oracle, rel=1e-4)
    assert point.p_access[1, 1, DL] == pytest.approx(oracle, rel=1e-4)
    assert np.all(point.alpha / scenario.access_bandwidth < 1e-6)


def test_power_subproblem_reports_infeasible_budgets():
    config = small_config(rrh_ul_power_dbm=-150.0)
    scenario = single_rrh_scenario(config)
    chan = flat_channels(scenario)
    # fronthaul link in use needs power above its reliability floor, which the budget forbids
    sub = assemble_power_subproblem(served_point(scenario), chan, scenario)
    assert solve_convex(sub).status == SolverStatus.INFEASIBLE


def test_solve_convex_box_lp():
    v = cp.Variable(2)
    sub = ConvexSubproblem("box", {"v": v}, np.array([1.0, -2.0]) @ v,
                           [NamedConstraint("lower", v), NamedConstraint("upper", 1 - v)])
    result = solve_convex(sub)
    assert result.status == SolverStatus.OPTIMAL
    assert np.allclose(result.values["v"], [0.0, 1.0], atol=1e-6)
    assert result.objective == pytest.approx(-2.0, abs=1e-6)


def test_solve_convex_equality_constrained_quadratic():
    v = cp.Variable(2)
    sub = ConvexSubproblem("quad", {"v": v}, cp.sum_squares(v - np.array([1.0, 2.0])),
                           [NamedConstraint("line", cp.sum(v) - 1.0, "==")])
    result = solve_convex(sub)
    assert np.allclose(result.values["v"], [0.0, 1.0], atol=1e-6)
    assert result.objective == pytest.approx(2.0, abs=1e-6)


def test_solve_convex_infeasible():
    v = cp.Variable()
    sub = ConvexSubproblem("empty", {"v": v}, v,
                           [NamedConstraint("lower", v - 1.0), NamedConstraint("upper", -v)])
    assert solve_convex(sub).status == SolverStatus.INFEASIBLE


def test_delay_split_meets_budget_at_high_rates(single_rrh):
    chan = flat_channels(single_rrh)
    point = served_point(single_rrh)
    split = solve_delay_lp(point, single_rrh, chan)
    assert np.all(split.end_to_end(single_rrh) <= single_rrh.user_delay_budget * (1 + 1e-6))
    rates = aggregate_rates(point, chan, single_rrh)
    assert check_delay_chain(split, rates, single_rrh).min_residual() >= -1e-6


def test_delay_split_maximizes_the_smallest_slack(single_rrh):
    chan = flat_channels(single_rrh)
    point = served_point(single_rrh)
    rates = aggregate_rates(point, chan, single_rrh)
    best = solve_delay_lp(point, single_rrh, chan)
    thirds = DelaySplit.thirds(single_rrh)
    # the solved split keeps every queue at least as far from its threshold as the thirds split
    slack = check_delay_chain(best, rates, single_rrh)
    reference = check_delay_chain(thirds, rates, single_rrh)
    assert slack.budget.min() >= 0.0 - 1e-12
    assert best.end_to_end(single_rrh).max() < thirds.end_to_end(single_rrh).max()
    assert reference.budget.min() == pytest.approx(0.0, abs=1e-12)


def test_delay_split_without_rates_is_infeasible(single_rrh):
    with pytest.raises(Infeasible):
        solve_delay_lp(Allocation.initial(single_rrh), single_rrh, flat_channels(single_rrh))


def test_alpha_is_zero_when_everything_holds(single_rrh):
    chan = flat_channels(single_rrh)
    alpha = solve_alpha_lp(served_point(single_rrh), chan, single_rrh)
    assert alpha.shape == (2, 2)
    assert np.all(alpha / single_rrh.access_bandwidth < 1e-6)


def test_alpha_of_an_empty_allocation():
    qos = QoSParams(theta_rrh=0.01, theta_bbu=0.01, theta_user=0.01, packet_floor=False)
    scenario = single_rrh_scenario(small_config(reservation_rate_bps_hz=0.0, qos=qos))
    point = Allocation.initial(scenario)
    alpha = solve_alpha_lp(point, flat_channels(scenario), scenario)
    thr_rrh, _, thr_user = queue_thresholds(point.delay, scenario)
    expected = max(thr_rrh[0], thr_user.sum())
    assert alpha.sum() == pytest.approx(expected, rel=1e-5)
    assert np.all(alpha >= 0)


def test_alpha_of_one_short_user_queue():
    qos = QoSParams(theta_rrh=0.01, theta_bbu=0.01, theta_user=0.01, packet_floor=False)
    scenario = single_rrh_scenario(small_config(reservation_rate_bps_hz=0.0, qos=qos))
    chan = flat_channels(scenario)
    point = served_point(scenario)
    _, _, thr_user = queue_thresholds(point.delay, scenario)
    rate_dl = aggregate_rates(point, chan, scenario).user[1, DL]
    # shrink user 1's downlink share until it carries 60% of its threshold
    tau = point.tau.copy()
    tau[1, :, DL] *= 0.6 * thr_user[1] / rate_dl
    point = point.replace(tau=tau)
    alpha = solve_alpha_lp(point, chan, scenario)
    shortfall = thr_user[1] - aggregate_rates(point, chan, scenario).user[1, DL]
    assert alpha.sum() == pytest.approx(shortfall, rel=1e-4)
    assert alpha[1].sum() == pytest.approx(shortfall, rel=1e-4)


def test_rounding_picks_the_largest_share(single_rrh):
    alloc = Allocation.initial(single_rrh)
    tau = np.zeros_like(alloc.tau)
    tau[0, 0, UL], tau[1, 0, UL] = 0.7, 0.3
    tau[0, 1, DL], tau[1, 1, DL] = 0.5, 0.5
    tau[1, 0, DL] = 5e-4
    p = np.ones_like(alloc.p_access)
    x = np.zeros_like(alloc.x)
    x[0, 1, UL] = 0.4
    rounded = round_timesharing(alloc.replace(tau=tau, p_access=p, x=x,
                                              p_fronthaul=np.ones_like(alloc.p_fronthaul)), single_rrh)
    assert rounded.tau[0, 0, UL] == 1.0 and rounded.tau[1, 0, UL] == 0.0
    assert rounded.tau[0, 1, DL] == 1.0 and rounded.tau[1, 1, DL] == 0.0
    assert rounded.tau[:, 0, DL].sum() == 0.0
    assert rounded.x[0, 1, UL] == 1.0 and rounded.x.sum() == 1.0
    assert np.array_equal(rounded.p_access, rounded.tau)
    assert np.array_equal(rounded.p_fronthaul, rounded.x)


def test_rounding_is_idempotent_on_binary_input(single_rrh):
    point = served_point(single_rrh)
    rounded = round_timesharing(point, single_rrh)
    assert np.array_equal(rounded.tau, point.tau)
    assert np.array_equal(rounded.x, point.x)
    assert np.array_equal(rounded.p_access, point.p_access)


def test_rounding_respects_exclusivity(two_rrh, rng):
    alloc = Allocation.initial(two_rrh)
    relaxed = alloc.replace(tau=rng.uniform(size=alloc.tau.shape), x=rng.uniform(size=alloc.x.shape))
    rounded = round_timesharing(relaxed, two_rrh)
    for j in range(2):
        assert np.all(rounded.tau[two_rrh.users_of_rrh(j)].sum(axis=0) <= 1.0)
    assert np.all(rounded.x.sum(axis=0) <= 1.0)
    shared = round_timesharing(relaxed, two_rrh, exclusive_fronthaul=False)
    assert np.array_equal(shared.x, (relaxed.x > 1e-3).astype(float))


def test_prune_drops_entries_far_below_their_row():
    matrix = sp.csr_matrix(np.array([[1.0, 1e-14, -2.0], [3e-20, 0.0, 1e-19]]))
    pruned = prune(matrix)
    assert np.array_equal(pruned.toarray(), [[1.0, 0.0, -2.0], [3e-20, 0.0, 1e-19]])
    assert pruned.nnz == 4
    assert matrix.nnz == 5
    assert prune(sp.csr_matrix((2, 2))).nnz == 0


def test_row_scale_brings_each_row_to_unit_magnitude():
    matrix = sp.csr_matrix(np.array([[1e-9, -4e-9], [0.0, 0.0], [2.0, 1.0]]))
    scale = row_scale(matrix, np.array([0.0, 0.0, 5.0]))
    assert np.allclose(scale, [2.5e8, 1.0, 0.2])
    scaled = sp.diags(scale) @ matrix
    assert abs(scaled).max() == pytest.approx(1.0)


@pytest.fixture
def clarabel_broken(monkeypatch):
    solve = cp.Problem.solve

    def broken(self, *args, **kwargs):
        if kwargs.get("solver") == cp.CLARABEL:
            raise cp.error.SolverError("forced failure")
        return solve(self, *args, **kwargs)

    monkeypatch.setattr(cp.Problem, "solve", broken)


def test_linear_block_falls_back_to_highs(clarabel_broken):
    v = cp.Variable(2)
    sub = ConvexSubproblem("box", {"v": v}, np.array([1.0, -2.0]) @ v,
                           [NamedConstraint("lower", v), NamedConstraint("upper", 1 - v)])
    result = solve_convex(sub)
    assert result.status == SolverStatus.OPTIMAL
    assert np.allclose(result.values["v"], [0.0, 1.0], atol=1e-6)


def test_conic_block_falls_back_to_scs(clarabel_broken):
    v = cp.Variable(2)
    sub = ConvexSubproblem("quad", {"v": v}, cp.sum_squares(v - np.array([1.0, 2.0])),
                           [NamedConstraint("line", cp.sum(v) - 1.0, "==")])
    result = solve_convex(sub)
    assert result.status in (SolverStatus.OPTIMAL, SolverStatus.ITER_LIMIT)
    if result.status == SolverStatus.OPTIMAL:
        assert np.allclose(result.values["v"], [0.0, 1.0], atol=1e-3)


def test_no_backend_finishing_is_a_failure(monkeypatch):
    def broken(self, *args, **kwargs):
        raise cp.error.SolverError("forced failure")

    monkeypatch.setattr(cp.Problem, "solve", broken)
    v = cp.Variable()
    sub = ConvexSubproblem("line", {"v": v}, v, [NamedConstraint("lower", v - 1.0)])
    assert solve_convex(sub).status == SolverStatus.FAILED


def test_alpha_lp_failure_names_the_block(monkeypatch, single_rrh):
    monkeypatch.setattr(dc_solver, "solve_convex",
                        lambda sub, **kwargs: SolveResult(SolverStatus.FAILED, {}, float("nan")))
    with pytest.raises(SolverFailure) as info:
        solve_alpha_lp(served_point(single_rrh), flat_channels(single_rrh), single_rrh)
    assert info.value.block == "alpha"
    assert info.value.status == SolverStatus.FAILED
