"""
Effective-bandwidth delay model for the RRH uplink -> BBU -> user downlink queue chain.
"""

from dataclasses import dataclass, asdict
from typing import Optional, Tuple

import numpy as np

from scenario import UL, DL, Scenario


class NonPositiveTheta(ValueError):
    """Raised when a QoS exponent is not strictly positive"""


def effective_bandwidth(rate, theta: float):
    """E_B = lambda*(e^theta - 1)/theta for Poisson arrivals; tends to lambda as theta -> 0"""
    if theta <= 0:
        raise NonPositiveTheta(f"theta must be positive, got {theta}")
    return np.asarray(rate, dtype=float) * np.expm1(theta) / theta


def delay_violation_prob(rate, theta: float, delay, eta: float = 1.0):
    """eps = eta * exp(-lambda*(e^theta - 1)*D)"""
    return eta * np.exp(-np.asarray(rate, dtype=float) * np.expm1(theta) * delay)


def min_rate_threshold(delta: float, theta: float, delay):
    """lambda_min = ln(1/delta) / ((e^theta - 1)*D)"""
    return np.log(1.0 / delta) / (np.expm1(theta) * np.asarray(delay, dtype=float))


@dataclass(frozen=True, eq=False)
class DelaySplit:
    """Represents how each user's E2E budget is split over the three queues (seconds)"""
    d_ul_rrh: np.ndarray  # (J,)
    d_bbu: float
    d_dl_user: np.ndarray  # (U,)

    @classmethod
    def thirds(cls, scenario: Scenario) -> 'DelaySplit':
        """Fixed split: a third of the tightest budget per RRH, at the BBU and per user"""
        budget = scenario.user_delay_budget
        d_rrh = np.full(scenario.num_rrh, scenario.delay_budget.min() / 3.0)
        # An RRH queue is shared by every user whose partner it serves
        for j in range(scenario.num_rrh):
            users = scenario.partner[scenario.users_of_rrh(j)]
            if users.size:
                d_rrh[j] = budget[users].min() / 3.0
        return cls(d_ul_rrh=d_rrh, d_bbu=float(scenario.delay_budget.min() / 3.0),
                   d_dl_user=budget / 3.0)

    def end_to_end(self, scenario: Scenario) -> np.ndarray:
        """Total delay seen by each destination user: its partner's RRH queue, the BBU and its own queue"""
        return (self.d_ul_rrh[scenario.serving_rrh[scenario.partner]]
                + self.d_bbu + self.d_dl_user)

    def to_dict(self):
        return {key: np.asarray(value).tolist() for key, value in asdict(self).items()}


@dataclass(frozen=True, eq=False)
class ArrivalRates:
    """Represents the bit arrivals feeding each queue (bit/s)"""
    lambda_rrh: np.ndarray  # (J,) UL access rate into each RRH
    lambda_bbu: float  # UL fronthaul rate into the BBU
    lambda_user: np.ndarray  # (U,) DL rate towards each user

    @classmethod
    def from_rates(cls, rates) -> 'ArrivalRates':
        return cls(lambda_rrh=rates.rrh[:, UL], lambda_bbu=float(rates.bbu[UL]),
                   lambda_user=rates.user[:, DL])


def queue_thresholds(split: DelaySplit, scenario: Scenario) -> Tuple[np.ndarray, float, np.ndarray]:
    """Minimum service rates (bit/s) of the RRH, BBU and per-user queues under a split"""
    qos = scenario.qos
    d1, d2, d3 = qos.delay_violation
    return (
        min_rate_threshold(d1, qos.theta_rrh, split.d_ul_rrh),
        float(min_rate_threshold(d2, qos.theta_bbu, split.d_bbu)),
        min_rate_threshold(d3, qos.theta_user, split.d_dl_user),
    )


def queue_coefficients(scenario: Scenario) -> Tuple[float, float, float]:
    """ln(1/delta)/(e^theta - 1) per queue class, so that threshold = coefficient / D"""
    qos = scenario.qos
    d1, d2, d3 = qos.delay_violation
    return (
        float(np.log(1.0 / d1) / np.expm1(qos.theta_rrh)),
        float(np.log(1.0 / d2) / np.expm1(qos.theta_bbu)),
        float(np.log(1.0 / d3) / np.expm1(qos.theta_user)),
    )


@dataclass(frozen=True, eq=False)
class DelayResiduals:
    """Represents slack of the budget split and of each queue's rate threshold"""
    budget: np.ndarray  # (U,) per destination user
    rrh: np.ndarray  # (J,)
    bbu: float
    user: np.ndarray  # (U,)

    def min_residual(self) -> float:
        return float(min(self.budget.min(initial=np.inf), self.rrh.min(initial=np.inf),
                         self.bbu, self.user.min(initial=np.inf)))


def check_delay_chain(split: DelaySplit, rates, scenario: Scenario,
                      active: Optional[np.ndarray] = None) -> DelayResiduals:
    """
    Residuals of the delay budget split and the three queue rate thresholds.

    Parameters:
        split (DelaySplit): Per-queue delay targets.
        rates (RateSummary): Output of aggregate_rates.
        scenario (Scenario): The instance.
        active (np.ndarray): Boolean mask of admitted users; all users when None.

    Returns:
        DelayResiduals: budget minus used delay, rate minus threshold. RRHs
        without admitted users and rejected users report +inf.
    """
    if active is None:
        active = np.ones(scenario.num_users, dtype=bool)
    arrivals = ArrivalRates.from_rates(rates)
    thr_rrh, thr_bbu, thr_user = queue_thresholds(split, scenario)
    served = np.zeros(scenario.num_rrh, dtype=bool)
    served[scenario.serving_rrh[active]] = True
    return DelayResiduals(
        budget=np.where(active, scenario.user_delay_budget - split.end_to_end(scenario), np.inf),
        rrh=np.where(served, arrivals.lambda_rrh - thr_rrh, np.inf),
        bbu=arrivals.lambda_bbu - thr_bbu if active.any() else np.inf,
        user=np.where(active, arrivals.lambda_user - thr_user, np.inf),
    )


@dataclass(frozen=True)
class FlowResiduals:
    """Represents queue stability slack: fronthaul UL over access UL, access DL over fronthaul DL"""
    uplink: float
    downlink: float


def flow_conservation_check(rates) -> FlowResiduals:
    access = rates.access_total
    return FlowResiduals(uplink=float(rates.bbu[UL] - access[UL]),
                         downlink=float(access[DL] - rates.bbu[DL]))
