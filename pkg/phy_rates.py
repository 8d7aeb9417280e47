"""
Finite-blocklength link arithmetic for the access and fronthaul segments.

Provides:
  - Gaussian Q-function and its inverse
  - SINR with co-channel interference from other RRHs
  - Normal-approximation rate and error probability
  - Piecewise-linear reliability approximation used inside the solver
  - Rate aggregation and power-budget residuals for an allocation
"""

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

from scenario import UL, DL, ChannelRealization, Scenario

LN2 = math.log(2.0)


class NonPositiveNoise(ValueError):
    """Raised when a noise power is not strictly positive"""


class IndexMismatch(ValueError):
    """Raised when allocation tensors do not fit the scenario"""


class DegenerateSnr(UserWarning):
    """Emitted when an error probability is asked for at zero SINR"""


def q_function(x):
    """Gaussian Q-function: Q(x) = 0.5 * erfc(x / sqrt(2))."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def q_inverse(eps: float) -> float:
    """Inverse Q-function by bracketed root finding (abs. tol 1e-12)."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"q_inverse needs eps in (0,1), got {eps}")
    if eps == 0.5:
        return 0.0
    return brentq(lambda x: float(q_function(x)) - eps, -40.0, 40.0, xtol=1e-12)


def dispersion(gamma):
    """Channel dispersion V = 1 - 1/(1+gamma)^2; exactly 0 at gamma = 0."""
    gamma = np.asarray(gamma, dtype=float)
    return 1.0 - 1.0 / np.square(1.0 + gamma)


def sinr_access(p, h, noise, interference=0.0):
    """gamma = p*h / (noise + interference)"""
    if np.any(np.asarray(noise) <= 0):
        raise NonPositiveNoise(f"noise must be positive, got {noise}")
    return np.asarray(p, dtype=float) * h / (noise + np.asarray(interference, dtype=float))


def fbl_rate_from_sinr(gamma, bandwidth: float, time_unit: float, eps: float):
    """
    Normal-approximation rate in bit/s, clamped below at 0.

    rate = (w/ln2) * [ln(1+gamma) - sqrt(V/(phi*w)) * Qinv(eps)]
    """
    gamma = np.asarray(gamma, dtype=float)
    penalty = np.sqrt(dispersion(gamma) / (time_unit * bandwidth)) * q_inverse(eps)
    rate = bandwidth / LN2 * (np.log1p(gamma) - penalty)
    return np.maximum(rate, 0.0)


@dataclass(frozen=True)
class LinkRateInputs:
    """Represents everything one link's rate depends on"""
    power: float
    gain: float
    noise: float
    interference: float
    bandwidth: float
    time_unit: float
    packet_bits: float
    error_prob: float

    def __post_init__(self):
        if self.noise <= 0:
            raise NonPositiveNoise(f"noise must be positive, got {self.noise}")
        if self.power < 0 or self.gain <= 0 or self.interference < 0:
            raise ValueError("power and interference must be non-negative, gain positive")
        if self.bandwidth <= 0 or self.time_unit <= 0 or self.packet_bits <= 0:
            raise ValueError("bandwidth, time_unit and packet_bits must be positive")
        if not 0 < self.error_prob < 1:
            raise ValueError("error_prob must lie in (0,1)")

    @property
    def sinr(self) -> float:
        return float(sinr_access(self.power, self.gain, self.noise, self.interference))


def fbl_rate(inputs: LinkRateInputs) -> float:
    return float(fbl_rate_from_sinr(inputs.sinr, inputs.bandwidth, inputs.time_unit, inputs.error_prob))


@dataclass(frozen=True)
class QApproxParams:
    """Represents the piecewise-linear reliability approximation of one link class"""
    A: float
    B: float
    halfwidth: float

    @classmethod
    def from_blocklength(cls, packet_bits: float, blocklength: float) -> 'QApproxParams':
        """Build A, B and the linear-segment halfwidth for Omega bits over w*phi channel uses"""
        ratio = packet_bits / blocklength
        a = 1.0 / (2.0 * math.pi * math.sqrt(2.0 ** (2.0 * ratio) - 1.0))
        b = 2.0 ** ratio - 1.0
        return cls(A=a, B=b, halfwidth=1.0 / (2.0 * a * math.sqrt(blocklength)))

    def slope(self, blocklength: float) -> float:
        return self.A * math.sqrt(blocklength)


def q_approx_linear(gamma, params: QApproxParams, blocklength: float):
    """The middle branch 1/2 - A*sqrt(w*phi)*(gamma - B), unclipped"""
    return 0.5 - params.slope(blocklength) * (np.asarray(gamma, dtype=float) - params.B)


def q_approx(gamma, params: QApproxParams, blocklength: float):
    """Piecewise error approximation: 1 below B - halfwidth, 0 above B + halfwidth, linear between."""
    gamma = np.asarray(gamma, dtype=float)
    out = np.where(gamma <= params.B - params.halfwidth, 1.0,
                   np.where(gamma >= params.B + params.halfwidth, 0.0,
                            q_approx_linear(gamma, params, blocklength)))
    return float(out) if out.ndim == 0 else out


def required_sinr(xi: float, params: QApproxParams, blocklength: float) -> float:
    """Smallest gamma whose approximate error probability is at most xi"""
    return params.B + (0.5 - xi) / params.slope(blocklength)


def error_prob(gamma: float, bandwidth: float, time_unit: float, packet_bits: float) -> float:
    """
    Error probability of sending packet_bits in one time unit at SINR gamma.

    eps = Q( sqrt(w*phi/V) * [ln(1+gamma) - Omega*ln2/(w*phi)] )
    """
    if gamma <= 0:
        warnings.warn("error probability at zero SINR is taken as 1", DegenerateSnr)
        return 1.0
    blocklength = bandwidth * time_unit
    arg = math.sqrt(blocklength / float(dispersion(gamma))) * (
        math.log1p(gamma) - packet_bits * LN2 / blocklength
    )
    return float(q_function(arg))


@dataclass(frozen=True, eq=False)
class LinkGeometry:
    """
    Gains seen by every access and fronthaul link under closest-RRH association.

    direct[u, k, q] is the gain between user u and its serving RRH.
    coupling[k, q, u, v] is the gain from the transmitter of link v into the
    receiver of link u; it is zero when u and v share an RRH.
    """
    direct: np.ndarray
    coupling: np.ndarray
    fronthaul: np.ndarray
    access_noise: float
    fronthaul_noise: float

    @classmethod
    def build(cls, scenario: Scenario, chan: ChannelRealization) -> 'LinkGeometry':
        h = chan.h_access
        serve = scenario.serving_rrh
        users = np.arange(scenario.num_users)
        direct = h[users, serve]
        # UL: user v transmits, serving RRH of u listens
        ul = h[:, :, :, UL][:, serve, :].transpose(2, 1, 0)
        # DL: serving RRH of v transmits, user u listens
        dl = h[:, :, :, DL][:, serve, :].transpose(2, 0, 1)
        other_cell = serve[:, None] != serve[None, :]
        coupling = np.stack([ul, dl], axis=1) * other_cell[None, None]
        return cls(
            direct=direct,
            coupling=coupling,
            fronthaul=chan.h_fronthaul,
            access_noise=scenario.access_noise,
            fronthaul_noise=scenario.fronthaul_noise,
        )


def access_interference(tau: np.ndarray, p: np.ndarray, geometry: LinkGeometry) -> np.ndarray:
    """I[u,k,q] = sum over users v of other RRHs of tau*p*cross gain on the same (k,q)"""
    return np.einsum("kquv,vkq->ukq", geometry.coupling, tau * p)


def access_sinr(tau: np.ndarray, p: np.ndarray, geometry: LinkGeometry) -> np.ndarray:
    return sinr_access(p, geometry.direct, geometry.access_noise,
                       access_interference(tau, p, geometry))


def fronthaul_sinr(p: np.ndarray, geometry: LinkGeometry) -> np.ndarray:
    return sinr_access(p, geometry.fronthaul, geometry.fronthaul_noise)


@dataclass(frozen=True, eq=False)
class RateSummary:
    """Represents per-link and aggregated rates (bit/s) of one allocation"""
    access_sinr: np.ndarray  # (U, K1, 2)
    access_link: np.ndarray  # (U, K1, 2) rate if the link is used
    fronthaul_sinr: np.ndarray  # (J, K2, 2)
    fronthaul_link: np.ndarray  # (J, K2, 2)
    user: np.ndarray  # (U, 2) sum_k tau*r
    rrh: np.ndarray  # (J, 2)
    bbu: np.ndarray  # (2,) sum_{j,k} x*r
    slice: np.ndarray  # (S, 2)

    @property
    def access_total(self) -> np.ndarray:
        return self.user.sum(axis=0)


def _check_shapes(alloc, scenario: Scenario):
    access = (scenario.num_users, scenario.access_subcarriers, 2)
    fronthaul = (scenario.num_rrh, scenario.fronthaul_subcarriers, 2)
    for name, expected in (("tau", access), ("p_access", access),
                           ("x", fronthaul), ("p_fronthaul", fronthaul)):
        shape = np.shape(getattr(alloc, name))
        if shape != expected:
            raise IndexMismatch(f"{name} has shape {shape}, expected {expected}")


def aggregate_rates(alloc, chan: ChannelRealization, scenario: Scenario,
                    geometry: Optional[LinkGeometry] = None) -> RateSummary:
    """
    Evaluates every link rate at the target reliability and sums them per
    user, RRH, slice and at the BBU.

    Parameters:
        alloc (Allocation): Powers and time shares.
        chan (ChannelRealization): Gains the allocation is evaluated on.
        scenario (Scenario): Instance the allocation belongs to.
        geometry (LinkGeometry): Precomputed gains, built from chan when None.

    Returns:
        RateSummary: Link rates and their aggregates.
    """
    _check_shapes(alloc, scenario)
    if geometry is None:
        geometry = LinkGeometry.build(scenario, chan)
    xi = scenario.qos.error_threshold
    gamma = access_sinr(alloc.tau, alloc.p_access, geometry)
    link = fbl_rate_from_sinr(gamma, scenario.access_bandwidth, scenario.time_unit, xi)
    gamma_fh = fronthaul_sinr(alloc.p_fronthaul, geometry)
    link_fh = fbl_rate_from_sinr(gamma_fh, scenario.fronthaul_bandwidth, scenario.time_unit, xi)

    user = np.sum(alloc.tau * link, axis=1)
    rrh = np.zeros((scenario.num_rrh, 2))
    np.add.at(rrh, scenario.serving_rrh, user)
    per_slice = np.zeros((scenario.num_slices, 2))
    np.add.at(per_slice, scenario.user_slice, user)
    bbu = np.sum(alloc.x * link_fh, axis=(0, 1))
    return RateSummary(
        access_sinr=gamma,
        access_link=link,
        fronthaul_sinr=gamma_fh,
        fronthaul_link=link_fh,
        user=user,
        rrh=rrh,
        bbu=bbu,
        slice=per_slice,
    )


@dataclass(frozen=True, eq=False)
class PowerResiduals:
    """Represents budget minus consumed power (W) for every power limit"""
    rrh_dl: np.ndarray  # (J,)
    user_ul: np.ndarray  # (U,)
    rrh_ul: np.ndarray  # (J,)
    bbu_dl: float
    total_power_w: float = 0.0

    def feasible(self, tol: float = 0.0) -> bool:
        return bool(min(self.rrh_dl.min(initial=np.inf), self.user_ul.min(initial=np.inf),
                        self.rrh_ul.min(initial=np.inf), self.bbu_dl) >= -tol)


def power_budget_check(alloc, scenario: Scenario) -> PowerResiduals:
    """Residuals of the RRH DL, user UL, RRH fronthaul UL and BBU DL budgets"""
    b = scenario.budgets
    access = alloc.tau * alloc.p_access
    fronthaul = alloc.x * alloc.p_fronthaul
    rrh_dl = np.zeros(scenario.num_rrh)
    np.add.at(rrh_dl, scenario.serving_rrh, access[:, :, DL].sum(axis=1))
    return PowerResiduals(
        rrh_dl=b.rrh_dl - rrh_dl,
        user_ul=b.user_ul - access[:, :, UL].sum(axis=1),
        rrh_ul=b.rrh_ul - fronthaul[:, :, UL].sum(axis=1),
        bbu_dl=float(b.bbu_dl - fronthaul[:, :, DL].sum()),
        total_power_w=float(access.sum() + fronthaul.sum()),
    )
