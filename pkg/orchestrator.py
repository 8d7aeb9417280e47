"""
Block-coordinate loop with admission control.

Each outer iteration solves the time-sharing, power, delay-split and
elastic-slack blocks in turn. When the loop settles, time shares are
rounded, powers are repaired and the user with the largest remaining
elastic slack is rejected; the loop then restarts from scratch on the
remaining users.
"""

import json
import logging
from dataclasses import dataclass, field, fields, replace, asdict
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from dc_solver import (
    ACTIVE_SHARE,
    Allocation,
    Infeasible,
    SolverContext,
    SolverFailure,
    SolverStatus,
    assemble_power_subproblem,
    assemble_subcarrier_subproblem,
    round_timesharing,
    solve_alpha_lp,
    solve_convex,
    solve_delay_lp,
)
from phy_rates import (
    LinkGeometry,
    QApproxParams,
    aggregate_rates,
    power_budget_check,
    required_sinr,
)
from qos_delay import DelaySplit, check_delay_chain, flow_conservation_check, queue_thresholds
from scenario import UL, DL, ChannelRealization, InvalidConfig, Scenario

logger = logging.getLogger(__name__)

DELAY_MODES = ("dynamic", "fixed_thirds")
# Power limits and fronthaul sharing dropped by the no-admission-control baseline
NOAC_RELAXED = ("user_uplink_power", "fronthaul_exclusivity", "rrh_fronthaul_power", "bbu_downlink_power")
HARD_FAMILIES = ("rrh_downlink_power", "user_uplink_power", "rrh_fronthaul_power",
                 "bbu_downlink_power", "bbu_queue_rate", "fronthaul_reliability")


class NoUsersLeft(RuntimeError):
    """Raised when admission control rejects every user"""

    def __init__(self, rejected: List[int]):
        super().__init__(f"admission control rejected all {len(rejected)} users")
        self.rejected = rejected


class RunStatus(str, Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    # no block lowers the objective any more but the power change is still above eps_th
    STALLED = "Stalled"
    REJECTED_ALL = "RejectedAll"
    FAILED = "Failed"


@dataclass
class RunConfig:
    """Represents the stopping rules and solver knobs of one run"""
    eps_th: float = 1e-4
    z_th: int = 100
    ac_enabled: bool = True
    delay_mode: str = "dynamic"
    solver_tol: float = 1e-7
    solver_max_iters: int = 200
    elastic_penalty: float = 1e5
    # Elastic slack below this (bit/s/Hz) counts as zero
    alpha_tol: float = 1e-6
    rounding_threshold: float = ACTIVE_SHARE
    repair_iterations: int = 5
    constraint_tol: float = 1e-6
    relaxed_constraints: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.delay_mode == "fixed":
            self.delay_mode = "fixed_thirds"
        problems = []
        if self.eps_th <= 0:
            problems.append("eps_th must be positive")
        if self.z_th < 1:
            problems.append("z_th must be at least 1")
        if self.delay_mode not in DELAY_MODES:
            problems.append(f"delay_mode must be one of {DELAY_MODES}")
        if self.solver_tol <= 0 or self.solver_max_iters < 1:
            problems.append("solver tolerances must be positive")
        if problems:
            raise InvalidConfig("; ".join(problems))
        self.relaxed_constraints = tuple(self.relaxed_constraints)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"Unknown run config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> 'RunConfig':
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)


@dataclass
class TraceRecord:
    """Represents one outer iteration of one admission pass"""
    admission_pass: int
    iteration: int
    objective: float
    total_power_w: float
    power_change: float
    alpha_sum: float


@dataclass
class RunResult:
    """Represents the outcome of one run: final allocation, admitted and rejected users, trace"""
    allocation: Optional[Allocation]
    admitted: List[int]
    rejected: List[int]
    objective_trace: List[float]
    status: RunStatus
    trace: List[TraceRecord] = field(default_factory=list)

    @property
    def total_power_w(self) -> float:
        return self.allocation.total_power if self.allocation is not None else float("nan")

    @property
    def iterations(self) -> int:
        return max(len(self.objective_trace) - 1, 0)

    def to_dict(self):
        return {
            "status": self.status.value,
            "total_power_w": self.total_power_w,
            "admitted": [int(u) for u in self.admitted],
            "rejected": [int(u) for u in self.rejected],
            "objective_trace": list(self.objective_trace),
            "trace": [asdict(t) for t in self.trace],
            "allocation": self.allocation.to_dict() if self.allocation is not None else None,
        }

    @classmethod
    def failed(cls) -> 'RunResult':
        """A run that stopped on an error and has no allocation"""
        return cls(None, [], [], [], RunStatus.FAILED)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=4, default=str)


def admission_reject(alpha: np.ndarray, tol: float = 0.0) -> Optional[int]:
    """
    The user whose largest elastic slack is biggest, or None when every
    slack is within tol. Ties go to the lowest user index.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size == 0:
        return None
    worst = alpha.reshape(alpha.shape[0], -1).max(axis=1)
    if worst.max() <= tol:
        return None
    return int(np.argmax(worst))


def _initial_point(ctx: SolverContext) -> Allocation:
    """Zero powers and shares, thirds split, elastic slack well above every threshold"""
    scenario = ctx.scenario
    split = DelaySplit.thirds(scenario)
    levels = [np.max(np.atleast_1d(v)) for v in ctx.thresholds(split).values() if v is not None]
    alpha0 = 10.0 * max(levels) * scenario.access_bandwidth
    point = Allocation.initial(scenario, alpha0)
    return point.replace(alpha=point.alpha * ctx.active[:, None])


def _solve_block(sub, config: RunConfig, point: Allocation) -> Allocation:
    """
    Decoded solution of a block. An infeasible block keeps the previous
    values so the elastic slack left over shows up in admission control.

    Raises:
        SolverFailure: No backend gave an optimal or infeasible verdict.
    """
    result = solve_convex(sub, tol=config.solver_tol, max_iters=config.solver_max_iters)
    if result.status == SolverStatus.INFEASIBLE:
        logger.debug("%s block is infeasible, previous values kept", sub.block)
        return point
    if result.status != SolverStatus.OPTIMAL:
        raise SolverFailure(sub.block, result.status)
    return sub.decode(result.values)


def _update_delay(ctx: SolverContext, chan: ChannelRealization, point: Allocation,
                  config: RunConfig) -> Allocation:
    if config.delay_mode != "dynamic":
        return point
    try:
        split = solve_delay_lp(point, ctx.scenario, chan, ctx.active, ctx.geometry,
                               tol=config.solver_tol, max_iters=config.solver_max_iters)
    except Infeasible as e:
        logger.debug("delay split kept: %s", e)
        return point
    return point.replace(delay=split)


def _update_alpha(ctx: SolverContext, chan: ChannelRealization, point: Allocation,
                  config: RunConfig) -> Allocation:
    alpha = solve_alpha_lp(point, chan, ctx.scenario, ctx=ctx,
                           tol=config.solver_tol, max_iters=config.solver_max_iters)
    return point.replace(alpha=alpha)


def _outer_step(ctx: SolverContext, chan: ChannelRealization, point: Allocation,
                config: RunConfig, assignment: bool = True) -> Allocation:
    scenario = ctx.scenario
    if assignment:
        point = _solve_block(assemble_subcarrier_subproblem(point, chan, scenario, ctx), config, point)
    point = _solve_block(assemble_power_subproblem(point, chan, scenario, ctx), config, point)
    point = _update_delay(ctx, chan, point, config)
    return _update_alpha(ctx, chan, point, config)


def _iterate(ctx: SolverContext, chan: ChannelRealization, config: RunConfig,
             admission_pass: int, trace: List[TraceRecord]) -> Tuple[Allocation, List[float], RunStatus]:
    """
    Outer loop on a fixed admitted set.

    Once a full step raises the objective, the time shares are frozen and the
    loop goes on with power-only steps. A step that still raises it is
    discarded: the pass is Converged when that step moved the powers by at
    most eps_th and Stalled otherwise.
    """
    point = _initial_point(ctx)
    objectives = [ctx.elastic_objective(point)]
    status = RunStatus.ITER_LIMIT
    assignment = True
    for z in range(1, config.z_th + 1):
        candidate = _outer_step(ctx, chan, point, config, assignment)
        objective = ctx.elastic_objective(candidate)
        if assignment and _raised(objective, objectives[-1], config):
            logger.debug("pass %d iteration %d: time-share step raised the objective, freezing shares",
                         admission_pass, z)
            assignment = False
            candidate = _outer_step(ctx, chan, point, config, assignment)
            objective = ctx.elastic_objective(candidate)
        change = float(np.linalg.norm(ctx.power_vector(candidate) - ctx.power_vector(point)))
        if _raised(objective, objectives[-1], config):
            status = RunStatus.CONVERGED if change <= config.eps_th else RunStatus.STALLED
            logger.debug("pass %d iteration %d raised the objective, stopping (%s)",
                         admission_pass, z, status.value)
            break
        point = candidate
        objectives.append(objective)
        trace.append(TraceRecord(admission_pass, z, objective, point.total_power, change,
                                 float(point.alpha.sum())))
        logger.debug("pass %d iteration %d: objective %.6g, power change %.3g",
                     admission_pass, z, objective, change)
        if change <= config.eps_th:
            status = RunStatus.CONVERGED
            break
    return point, objectives, status


def _raised(objective: float, previous: float, config: RunConfig) -> bool:
    return objective > previous + config.solver_tol * max(1.0, abs(previous))


def _round_and_repair(ctx: SolverContext, chan: ChannelRealization, point: Allocation,
                      config: RunConfig) -> Allocation:
    """Binary assignment from the relaxed shares, then a short power-only loop"""
    scenario = ctx.scenario
    point = round_timesharing(point, scenario, config.rounding_threshold,
                              exclusive_fronthaul="fronthaul_exclusivity" not in ctx.relaxed)
    for _ in range(config.repair_iterations):
        candidate = _solve_block(assemble_power_subproblem(point, chan, scenario, ctx), config, point)
        if candidate is point:
            break
        change = float(np.linalg.norm(ctx.power_vector(candidate) - ctx.power_vector(point)))
        point = candidate
        if change <= config.eps_th:
            break
    point = _update_delay(ctx, chan, point, config)
    return _update_alpha(ctx, chan, point, config)


def constraint_report(allocation: Allocation, chan: ChannelRealization, scenario: Scenario,
                      admitted=None, geometry: Optional[LinkGeometry] = None) -> Dict[str, float]:
    """
    Smallest relative residual of every constraint family at a point.

    Residuals are (value - limit) / max(|limit|, 1) in the family's own
    unit, so a family holds when its entry is >= -tol. Families with no
    entries (for instance no admitted user on an RRH) report +inf.
    """
    if geometry is None:
        geometry = LinkGeometry.build(scenario, chan)
    active = np.ones(scenario.num_users, dtype=bool)
    if admitted is not None:
        active = np.zeros(scenario.num_users, dtype=bool)
        active[list(admitted)] = True

    def worst(values, scale=1.0):
        values = np.atleast_1d(np.asarray(values, dtype=float)) / np.maximum(np.abs(scale), 1.0)
        return float(values.min(initial=np.inf))

    rates = aggregate_rates(allocation, chan, scenario, geometry)
    report = {}

    shares = np.zeros((scenario.num_rrh, scenario.access_subcarriers, 2))
    np.add.at(shares, scenario.serving_rrh, allocation.tau)
    report["access_exclusivity"] = worst(1.0 - shares)
    report["fronthaul_exclusivity"] = worst(1.0 - allocation.x.sum(axis=0))

    xi = scenario.qos.error_threshold
    params = QApproxParams.from_blocklength(scenario.packet_bits, scenario.access_blocklength)
    live = (allocation.tau > ACTIVE_SHARE) & active[:, None, None]
    gamma_req = required_sinr(xi, params, scenario.access_blocklength)
    report["access_reliability"] = worst((rates.access_sinr[live] - gamma_req) / gamma_req)
    params_fh = QApproxParams.from_blocklength(scenario.packet_bits, scenario.fronthaul_blocklength)
    gamma_req_fh = required_sinr(xi, params_fh, scenario.fronthaul_blocklength)
    live_fh = allocation.x > ACTIVE_SHARE
    report["fronthaul_reliability"] = worst((rates.fronthaul_sinr[live_fh] - gamma_req_fh) / gamma_req_fh)

    power = power_budget_check(allocation, scenario)
    b = scenario.budgets
    report["rrh_downlink_power"] = worst(power.rrh_dl / b.rrh_dl)
    report["user_uplink_power"] = worst(power.user_ul[active] / b.user_ul)
    report["rrh_fronthaul_power"] = worst(power.rrh_ul / b.rrh_ul)
    report["bbu_downlink_power"] = worst(power.bbu_dl / b.bbu_dl)

    delay = check_delay_chain(allocation.delay, rates, scenario, active)
    thr_rrh, thr_bbu, thr_user = queue_thresholds(allocation.delay, scenario)
    report["delay_budget"] = worst(delay.budget / scenario.user_delay_budget)
    report["rrh_queue_rate"] = worst(delay.rrh / thr_rrh)
    report["bbu_queue_rate"] = worst(delay.bbu / thr_bbu)
    report["user_queue_rate"] = worst(delay.user / thr_user)

    if active.any():
        flows = flow_conservation_check(rates)
        report["uplink_flow"] = worst(flows.uplink, rates.access_total[UL])
        report["downlink_flow"] = worst(flows.downlink, rates.bbu[DL])
    else:
        report["uplink_flow"] = report["downlink_flow"] = np.inf

    slices = np.unique(scenario.user_slice[active])
    for q, label in ((UL, "ul"), (DL, "dl")):
        rsv = scenario.reservation_rate[slices, q]
        report[f"slice_reservation_{label}"] = worst(rates.slice[slices, q] - rsv, rsv)
        if scenario.qos.packet_floor:
            report[f"packet_floor_{label}"] = worst(rates.user[active, q] - scenario.packet_rate,
                                                    scenario.packet_rate)
    return report


def _hard_offender(ctx: SolverContext, chan: ChannelRealization, point: Allocation,
                   config: RunConfig) -> Optional[int]:
    """
    Admitted user drawing the most access power when a limit that carries no
    elastic slack is broken after rounding, else None.
    """
    admitted = np.flatnonzero(ctx.active)
    report = constraint_report(point, chan, ctx.scenario, admitted, ctx.geometry)
    broken = [name for name in HARD_FAMILIES
              if name not in ctx.relaxed and report[name] < -config.constraint_tol]
    if not broken:
        return None
    draw = (point.tau * point.p_access).sum(axis=(1, 2))
    draw[~ctx.active] = -np.inf
    logger.info("hard limits broken after rounding: %s", ", ".join(broken))
    return int(np.argmax(draw))


def run_algorithm1(scenario: Scenario, chan: ChannelRealization,
                   config: Optional[RunConfig] = None) -> RunResult:
    """
    Joint power, assignment and delay allocation with admission control.

    Parameters:
        scenario (Scenario): The instance.
        chan (ChannelRealization): Gains for this realization.
        config (RunConfig): Stopping rules and solver knobs; defaults when None.

    Returns:
        RunResult: Final rounded allocation of the admitted users.

    Raises:
        NoUsersLeft: Admission control rejected every user.
        SolverFailure: A block could not be solved by any backend.
    """
    config = config if config is not None else RunConfig()
    if scenario.num_users == 0:
        return RunResult(Allocation.initial(scenario), [], [], [0.0], RunStatus.CONVERGED)

    geometry = LinkGeometry.build(scenario, chan)
    active = np.ones(scenario.num_users, dtype=bool)
    rejected: List[int] = []
    trace: List[TraceRecord] = []
    w = scenario.access_bandwidth
    admission_pass = 0
    while True:
        if not active.any():
            raise NoUsersLeft(rejected)
        ctx = SolverContext.build(scenario, chan, active, config.elastic_penalty,
                                  config.relaxed_constraints, geometry)
        point, objectives, status = _iterate(ctx, chan, config, admission_pass, trace)
        point = _round_and_repair(ctx, chan, point, config)
        if not config.ac_enabled:
            break
        user = admission_reject(point.alpha / w, config.alpha_tol)
        if user is None:
            user = _hard_offender(ctx, chan, point, config)
        if user is None:
            break
        logger.info("rejecting user %d (pass %d)", user, admission_pass)
        rejected.append(user)
        active[user] = False
        admission_pass += 1

    logger.info("finished with %d admitted, %d rejected, status %s",
                int(active.sum()), len(rejected), status.value)
    return RunResult(
        allocation=point,
        admitted=[int(u) for u in np.flatnonzero(active)],
        rejected=rejected,
        objective_trace=objectives,
        status=status,
        trace=trace,
    )


def run_baseline_fixed(scenario: Scenario, chan: ChannelRealization,
                       config: Optional[RunConfig] = None) -> RunResult:
    """Same loop with the delay split frozen at thirds of the budget"""
    config = (config if config is not None else RunConfig()).replace(delay_mode="fixed_thirds")
    return run_algorithm1(scenario, chan, config)


def run_baseline_noac(scenario: Scenario, chan: ChannelRealization,
                      config: Optional[RunConfig] = None) -> RunResult:
    """Every user kept, user/fronthaul/BBU power limits and fronthaul sharing dropped"""
    config = (config if config is not None else RunConfig()).replace(
        ac_enabled=False, relaxed_constraints=NOAC_RELAXED)
    return run_algorithm1(scenario, chan, config)
