"""
Difference-of-concave surrogates of the finite-blocklength rates and the
convex subproblems the block-coordinate loop solves.

Each access rate is split as tau*r = f - g - y:

    f = tau * (w/ln2) * ln(sigma + I + p*h)
    g = tau * (w/ln2) * ln(sigma + I)
    y = tau * (sqrt(w/phi)/ln2) * sqrt(V(gamma)) * Qinv(xi)

and each fronthaul rate as x*r = f_FH - g_FH with no interference term.
Concave pieces that enter with a minus sign are replaced by their tangent
at the previous iterate, which over-estimates them and keeps every
surrogate conservative in the block being optimized.

Subproblems are solved with cvxpy. Powers are solved in units of
sigma / (median direct gain) and rates in bit/s/Hz so that the solver sees
numbers of order one.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from phy_rates import (
    LN2,
    LinkGeometry,
    QApproxParams,
    access_interference,
    aggregate_rates,
    dispersion,
    fbl_rate_from_sinr,
    fronthaul_sinr,
    q_approx,
    q_inverse,
    required_sinr,
)
from qos_delay import DelaySplit, queue_coefficients, queue_thresholds
from scenario import UL, DL, ChannelRealization, Scenario

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-30
ACTIVE_SHARE = 1e-3
# Matrix entries below this fraction of their row's largest entry are dropped
PRUNE_TOL = 1e-12


class DegeneratePoint(ValueError):
    """Raised when an expansion point has no positive noise-plus-interference"""


class Infeasible(RuntimeError):
    """Raised when no delay split meets the budget at the current rates"""


class SolverFailure(RuntimeError):
    """Raised when no backend returns an optimal or infeasible verdict for a block"""

    def __init__(self, block: str, status: 'SolverStatus'):
        super().__init__(f"{block} subproblem could not be solved (status {status.value})")
        self.block = block
        self.status = status


class SolverStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"
    FAILED = "Failed"


@dataclass(frozen=True, eq=False)
class Allocation:
    """Represents the decision state: powers (W), time shares, delay split and elastic slack (bit/s)"""
    p_access: np.ndarray  # (U, K1, 2)
    p_fronthaul: np.ndarray  # (J, K2, 2)
    tau: np.ndarray  # (U, K1, 2)
    x: np.ndarray  # (J, K2, 2)
    delay: DelaySplit
    alpha: np.ndarray  # (U, K1)

    @classmethod
    def initial(cls, scenario: Scenario, alpha: float = 0.0) -> 'Allocation':
        access = (scenario.num_users, scenario.access_subcarriers, 2)
        fronthaul = (scenario.num_rrh, scenario.fronthaul_subcarriers, 2)
        return cls(
            p_access=np.zeros(access),
            p_fronthaul=np.zeros(fronthaul),
            tau=np.zeros(access),
            x=np.zeros(fronthaul),
            delay=DelaySplit.thirds(scenario),
            alpha=np.full((scenario.num_users, scenario.access_subcarriers), float(alpha)),
        )

    def replace(self, **changes) -> 'Allocation':
        return replace(self, **changes)

    @property
    def total_power(self) -> float:
        """Time-shared transmit power of every access and fronthaul link (W)"""
        return float(np.sum(self.tau * self.p_access) + np.sum(self.x * self.p_fronthaul))

    def to_dict(self):
        return {
            "p_access": self.p_access.tolist(),
            "p_fronthaul": self.p_fronthaul.tolist(),
            "tau": self.tau.tolist(),
            "x": self.x.tolist(),
            "delay": self.delay.to_dict(),
            "alpha": self.alpha.tolist(),
        }


class LinkIndex:
    """Flat positions of access links (u,k,q), fronthaul links (j,k2,q) and elastic entries (u,k)"""

    def __init__(self, scenario: Scenario):
        self.num_users = scenario.num_users
        self.num_rrh = scenario.num_rrh
        self.k1 = scenario.access_subcarriers
        self.k2 = scenario.fronthaul_subcarriers
        self.access = np.arange(self.num_users * self.k1 * 2).reshape(self.num_users, self.k1, 2)
        self.fronthaul = np.arange(self.num_rrh * self.k2 * 2).reshape(self.num_rrh, self.k2, 2)
        self.alpha = np.arange(self.num_users * self.k1).reshape(self.num_users, self.k1)

    @property
    def n_access(self) -> int:
        return self.access.size

    @property
    def n_fronthaul(self) -> int:
        return self.fronthaul.size

    @property
    def n_alpha(self) -> int:
        return self.alpha.size

    def access_sum(self, groups: np.ndarray, num_groups: int, direction: int,
                   weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
        """Sums access links of one direction over subcarriers into user groups"""
        rows = np.repeat(groups, self.k1)
        cols = self.access[:, :, direction].ravel()
        data = np.ones(cols.size) if weights is None else weights[:, :, direction].ravel()
        return sp.csr_matrix((data, (rows, cols)), shape=(num_groups, self.n_access))

    def alpha_sum(self, groups: np.ndarray, num_groups: int) -> sp.csr_matrix:
        rows = np.repeat(groups, self.k1)
        cols = self.alpha.ravel()
        return sp.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(num_groups, self.n_alpha))

    def alpha_to_links(self) -> sp.csr_matrix:
        """Maps alpha[u,k] onto both directions of access link (u,k)"""
        rows = self.access.ravel()
        cols = np.repeat(self.alpha.ravel(), 2)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n_access, self.n_alpha))

    def fronthaul_sum(self, direction: int, per_rrh: bool = False,
                      weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
        cols = self.fronthaul[:, :, direction].ravel()
        rows = np.repeat(np.arange(self.num_rrh), self.k2) if per_rrh else np.zeros(cols.size, dtype=int)
        data = np.ones(cols.size) if weights is None else weights[:, :, direction].ravel()
        return sp.csr_matrix((data, (rows, cols)), shape=(self.num_rrh if per_rrh else 1, self.n_fronthaul))

    def block_matrix(self, jac: np.ndarray) -> sp.csr_matrix:
        """Scatter per-(k,q) user-by-user blocks jac[k,q,u,v] into an access-link matrix"""
        flat = self.access.transpose(1, 2, 0)
        rows = np.broadcast_to(flat[..., :, None], jac.shape)
        cols = np.broadcast_to(flat[..., None, :], jac.shape)
        keep = jac != 0
        return prune(sp.csr_matrix((jac[keep], (rows[keep], cols[keep])),
                                   shape=(self.n_access, self.n_access)))

    def exclusivity(self, serving_rrh: np.ndarray) -> sp.csr_matrix:
        """One row per (RRH, subcarrier, direction) summing the shares of that RRH's users"""
        u, k, q = np.meshgrid(np.arange(self.num_users), np.arange(self.k1), np.arange(2), indexing="ij")
        rows = (serving_rrh[u] * self.k1 + k) * 2 + q
        return sp.csr_matrix((np.ones(u.size), (rows.ravel(), self.access.ravel())),
                             shape=(self.num_rrh * self.k1 * 2, self.n_access))

    def fronthaul_exclusivity(self) -> sp.csr_matrix:
        j, k, q = np.meshgrid(np.arange(self.num_rrh), np.arange(self.k2), np.arange(2), indexing="ij")
        rows = k * 2 + q
        return sp.csr_matrix((np.ones(j.size), (rows.ravel(), self.fronthaul.ravel())),
                             shape=(self.k2 * 2, self.n_fronthaul))


def prune(matrix: sp.csr_matrix, rel: float = PRUNE_TOL) -> sp.csr_matrix:
    """Drops entries smaller than rel times the largest magnitude in their row"""
    matrix = sp.csr_matrix(matrix, copy=True)
    if matrix.nnz == 0:
        return matrix
    row_max = abs(matrix).max(axis=1).toarray().ravel()
    rows = np.repeat(np.arange(matrix.shape[0]), np.diff(matrix.indptr))
    matrix.data[np.abs(matrix.data) < rel * row_max[rows]] = 0.0
    matrix.eliminate_zeros()
    return matrix


def row_scale(matrix: sp.csr_matrix, *columns: np.ndarray) -> np.ndarray:
    """Reciprocal of the largest magnitude per row over a matrix and extra per-row coefficients"""
    scale = abs(matrix).max(axis=1).toarray().ravel()
    for column in columns:
        scale = np.maximum(scale, np.abs(np.broadcast_to(column, scale.shape)))
    return 1.0 / np.where(scale > 0, scale, 1.0)


def _to_blocks(values: np.ndarray) -> np.ndarray:
    """(U, K, 2) -> (K, 2, U)"""
    return values.transpose(1, 2, 0)


def _diag_blocks(values: np.ndarray) -> np.ndarray:
    """(K, 2, U) -> (K, 2, U, U) with values on the diagonal"""
    return values[..., :, None] * np.eye(values.shape[-1])


@dataclass(frozen=True, eq=False)
class SolverContext:
    """Everything the subproblems share for one admitted user set"""
    scenario: Scenario
    geometry: LinkGeometry
    index: LinkIndex
    active: np.ndarray
    power_unit: float
    fronthaul_unit: float
    penalty: float
    relaxed: frozenset
    access_params: QApproxParams
    fronthaul_params: QApproxParams
    access_required_sinr: float
    fronthaul_required_sinr: float
    qinv: float

    @classmethod
    def build(cls, scenario: Scenario, chan: ChannelRealization, active: Optional[np.ndarray] = None,
              penalty: float = 1e5, relaxed=(), geometry: Optional[LinkGeometry] = None) -> 'SolverContext':
        if geometry is None:
            geometry = LinkGeometry.build(scenario, chan)
        if active is None:
            active = np.ones(scenario.num_users, dtype=bool)
        active = np.asarray(active, dtype=bool)
        gains = geometry.direct[active] if active.any() else geometry.direct
        xi = scenario.qos.error_threshold
        access_params = QApproxParams.from_blocklength(scenario.packet_bits, scenario.access_blocklength)
        fronthaul_params = QApproxParams.from_blocklength(scenario.packet_bits, scenario.fronthaul_blocklength)
        return cls(
            scenario=scenario,
            geometry=geometry,
            index=LinkIndex(scenario),
            active=active,
            power_unit=geometry.access_noise / float(np.median(gains)) if gains.size else 1.0,
            fronthaul_unit=geometry.fronthaul_noise / float(np.median(geometry.fronthaul)),
            penalty=penalty,
            relaxed=frozenset(relaxed),
            access_params=access_params,
            fronthaul_params=fronthaul_params,
            access_required_sinr=required_sinr(xi, access_params, scenario.access_blocklength),
            fronthaul_required_sinr=required_sinr(xi, fronthaul_params, scenario.fronthaul_blocklength),
            qinv=q_inverse(xi),
        )

    @property
    def user_mask(self) -> np.ndarray:
        """(U, K1, 2) mask of links that belong to admitted users"""
        return np.broadcast_to(self.active[:, None, None], self.index.access.shape)

    def floor_powers(self, point: Allocation) -> Tuple[np.ndarray, np.ndarray]:
        """
        Powers no lower than what meets the reliability target at the
        interference of the point. Rejected users get zero.
        """
        geo = self.geometry
        noise = geo.access_noise + access_interference(point.tau, point.p_access, geo)
        least = self.access_required_sinr * noise / geo.direct
        p_eff = np.where(self.user_mask, np.maximum(point.p_access, least), 0.0)
        least_fh = self.fronthaul_required_sinr * geo.fronthaul_noise / geo.fronthaul
        return p_eff, np.maximum(point.p_fronthaul, least_fh)

    def thresholds(self, split: DelaySplit) -> Dict[str, np.ndarray]:
        """Right-hand sides of the rate constraints in bit/s/Hz"""
        w = self.scenario.access_bandwidth
        rrh, bbu, user = queue_thresholds(split, self.scenario)
        return {
            "rrh": rrh / w,
            "bbu": bbu / w,
            "user": user / w,
            "reservation": self.scenario.reservation_rate / w,
            "floor": self.scenario.packet_rate / w if self.scenario.qos.packet_floor else None,
        }

    def elastic_objective(self, point: Allocation) -> float:
        """Total power plus the elastic penalty, in watts"""
        w = self.scenario.access_bandwidth
        return point.total_power + self.penalty * self.power_unit * float(np.sum(point.alpha)) / w

    def power_vector(self, point: Allocation) -> np.ndarray:
        return np.concatenate([point.p_access.ravel() / self.power_unit,
                               point.p_fronthaul.ravel() / self.fronthaul_unit])


@dataclass(frozen=True, eq=False)
class DcPieces:
    """
    Values and Jacobians of the concave pieces at an expansion point.

    f, g, y have the link shape. jac_*[k, q, u, v] is the derivative of the
    piece of link u on (k, q) w.r.t. the block variable of link v on the same
    (k, q); links on different (k, q) do not interact.
    """
    block: str
    f: np.ndarray
    g: np.ndarray
    y: np.ndarray
    jac_f: np.ndarray
    jac_g: np.ndarray
    jac_y: np.ndarray

    @property
    def rate(self) -> np.ndarray:
        return self.f - self.g - self.y

    @property
    def jac_rate(self) -> np.ndarray:
        return self.jac_f - self.jac_g - self.jac_y


def _dispersion_slope(gamma: np.ndarray, scale: float) -> np.ndarray:
    """d/dgamma of scale*sqrt(V(gamma)); taken as 0 at gamma = 0"""
    root = np.sqrt(dispersion(gamma))
    out = np.zeros_like(gamma)
    np.divide(scale, np.power(1.0 + gamma, 3) * root, out=out, where=root > 0)
    return out


def dc_decompose_access(point: Allocation, chan: ChannelRealization, scenario: Scenario,
                        block: str, geometry: Optional[LinkGeometry] = None) -> DcPieces:
    """
    Splits every access link's time-shared rate into f - g - y.

    Parameters:
        point (Allocation): Expansion point.
        chan (ChannelRealization): Gains.
        scenario (Scenario): The instance.
        block (str): "power" for derivatives w.r.t. p, "subcarrier" for tau.
        geometry (LinkGeometry): Reused gains, built from chan when None.

    Returns:
        DcPieces: Values and per-(k,q) Jacobians.
    """
    if block not in ("power", "subcarrier"):
        raise ValueError(f"unknown block {block!r}")
    geo = geometry if geometry is not None else LinkGeometry.build(scenario, chan)
    if np.any(point.p_access < 0):
        raise DegeneratePoint("negative access power in expansion point")
    w = scenario.access_bandwidth
    a = w / LN2
    b = np.sqrt(w / scenario.time_unit) / LN2 * q_inverse(scenario.qos.error_threshold)

    noise = geo.access_noise + access_interference(point.tau, point.p_access, geo)
    if np.any(noise <= 0):
        raise DegeneratePoint("noise plus interference is not positive")
    noise = np.maximum(noise, NOISE_FLOOR)
    signal = point.p_access * geo.direct
    gamma = signal / noise
    root = np.sqrt(dispersion(gamma))

    f = point.tau * a * np.log(noise + signal)
    g = point.tau * a * np.log(noise)
    y = point.tau * b * root

    tau_b, p_b = _to_blocks(point.tau), _to_blocks(point.p_access)
    n_b, s_b, h_b = _to_blocks(noise), _to_blocks(signal), _to_blocks(geo.direct)
    gamma_b, root_b = _to_blocks(gamma), _to_blocks(root)
    slope_b = _dispersion_slope(gamma_b, b)
    own = tau_b[..., :, None]

    if block == "power":
        d_noise = geo.coupling * tau_b[..., None, :]
        jac_f = a * own * (d_noise + _diag_blocks(h_b)) / (n_b + s_b)[..., :, None]
        jac_g = a * own * d_noise / n_b[..., :, None]
        d_gamma = _diag_blocks(h_b / n_b) - (s_b / n_b ** 2)[..., :, None] * d_noise
        jac_y = own * slope_b[..., :, None] * d_gamma
    else:
        d_noise = geo.coupling * p_b[..., None, :]
        jac_f = _diag_blocks(a * np.log(n_b + s_b)) + a * own * d_noise / (n_b + s_b)[..., :, None]
        jac_g = _diag_blocks(a * np.log(n_b)) + a * own * d_noise / n_b[..., :, None]
        d_gamma = -(s_b / n_b ** 2)[..., :, None] * d_noise
        jac_y = _diag_blocks(b * root_b) + own * slope_b[..., :, None] * d_gamma
    return DcPieces(block=block, f=f, g=g, y=y, jac_f=jac_f, jac_g=jac_g, jac_y=jac_y)


def dc_decompose_fronthaul(point: Allocation, scenario: Scenario, block: str,
                           geometry: LinkGeometry) -> DcPieces:
    """Splits every fronthaul link's rate into f_FH - g_FH (y is identically zero)"""
    if block not in ("power", "subcarrier"):
        raise ValueError(f"unknown block {block!r}")
    if np.any(point.p_fronthaul < 0):
        raise DegeneratePoint("negative fronthaul power in expansion point")
    w = scenario.fronthaul_bandwidth
    a = w / LN2
    b = np.sqrt(w / scenario.time_unit) / LN2 * q_inverse(scenario.qos.error_threshold)
    gamma = fronthaul_sinr(point.p_fronthaul, geometry)
    root = np.sqrt(dispersion(gamma))
    f = point.x * a * np.log1p(gamma)
    g = point.x * b * root
    if block == "power":
        dgamma = geometry.fronthaul / geometry.fronthaul_noise
        d_f = point.x * a * dgamma / (1.0 + gamma)
        d_g = point.x * _dispersion_slope(gamma, b) * dgamma
    else:
        d_f = a * np.log1p(gamma)
        d_g = b * root
    zeros = np.zeros_like(f)
    jac_zero = _diag_blocks(_to_blocks(zeros))
    return DcPieces(block=block, f=f, g=g, y=zeros,
                    jac_f=_diag_blocks(_to_blocks(d_f)), jac_g=_diag_blocks(_to_blocks(d_g)),
                    jac_y=jac_zero)


def fronthaul_diagonal(jac: np.ndarray) -> np.ndarray:
    """(K2, 2, J, J) diagonal Jacobian -> (J, K2, 2)"""
    return np.einsum("kqjj->jkq", jac)


def linearize_concave(g_value, g_gradient, expansion_point, query_point):
    """First-order expansion g(x0) + grad(x0).(x - x0); works on numpy arrays and cvxpy expressions"""
    return g_value + g_gradient @ (query_point - expansion_point)


@dataclass(eq=False)
class NamedConstraint:
    """Represents one constraint family as `expression >= 0` or `expression == 0`"""
    name: str
    expression: object
    sense: str = ">="

    def as_cvxpy(self):
        if self.sense == "==":
            return self.expression == 0
        return self.expression >= 0

    def residual(self) -> np.ndarray:
        value = self.expression.value if isinstance(self.expression, cp.Expression) else self.expression
        return np.atleast_1d(np.asarray(value, dtype=float))


@dataclass(eq=False)
class ConvexSubproblem:
    """Represents one convex block: variables, objective to minimize, constraints and the point it was built at"""
    block: str
    variables: Dict[str, cp.Variable]
    objective: cp.Expression
    constraints: List[NamedConstraint]
    expansion_point: Optional[Allocation] = None
    expansion_values: Dict[str, np.ndarray] = field(default_factory=dict)
    decode: Optional[Callable[[Dict[str, np.ndarray]], object]] = None

    def set_values(self, values: Dict[str, np.ndarray]):
        for name, value in values.items():
            self.variables[name].value = np.asarray(value, dtype=float)

    def residuals(self) -> Dict[str, np.ndarray]:
        out = {}
        for c in self.constraints:
            value = c.residual()
            out[c.name] = np.concatenate([out[c.name], value]) if c.name in out else value
        return out


@dataclass
class SolveResult:
    """Represents the outcome of one convex solve"""
    status: SolverStatus
    values: Dict[str, np.ndarray]
    objective: float


def _is_linear(sub: ConvexSubproblem) -> bool:
    expressions = [sub.objective] + [c.expression for c in sub.constraints]
    return all(e.is_affine() for e in expressions if isinstance(e, cp.Expression))


def _backends(sub: ConvexSubproblem, tol: float, max_iters: int) -> List[Tuple[str, dict]]:
    """Clarabel first; HiGHS for LPs or SCS for conic blocks when it gives no verdict"""
    backends = [(cp.CLARABEL, {"max_iter": max_iters, "tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol})]
    if _is_linear(sub):
        backends.append((cp.SCIPY, {"scipy_options": {"method": "highs"}}))
    else:
        backends.append((cp.SCS, {"max_iters": 100 * max_iters, "eps_abs": max(tol, 1e-6),
                                  "eps_rel": max(tol, 1e-6)}))
    return backends


def _map_status(status: str) -> SolverStatus:
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolverStatus.OPTIMAL
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolverStatus.INFEASIBLE
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return SolverStatus.UNBOUNDED
    return SolverStatus.ITER_LIMIT


def solve_convex(sub: ConvexSubproblem, tol: float = 1e-7, max_iters: int = 200) -> SolveResult:
    """
    Hand a subproblem to cvxpy and map its status.

    Clarabel is tried first. Any other verdict than optimal is checked with
    a second backend, so Infeasible means both agree or the second one says
    so, and Failed means no backend finished.
    """
    problem = cp.Problem(cp.Minimize(sub.objective), [c.as_cvxpy() for c in sub.constraints])
    verdicts = []
    for attempt, (solver, options) in enumerate(_backends(sub, tol, max_iters)):
        try:
            problem.solve(solver=solver, **options)
        except cp.error.SolverError as e:
            logger.warning("%s subproblem: %s failed: %s", sub.block, solver, e)
            verdicts.append(SolverStatus.FAILED)
            continue
        status = _map_status(problem.status)
        if attempt and problem.status == cp.OPTIMAL_INACCURATE:
            status = SolverStatus.ITER_LIMIT
        if status == SolverStatus.OPTIMAL and all(v.value is not None for v in sub.variables.values()):
            values = {name: np.asarray(var.value, dtype=float) for name, var in sub.variables.items()}
            return SolveResult(SolverStatus.OPTIMAL, values, float(problem.value))
        logger.debug("%s subproblem: %s ended with status %s", sub.block, solver, problem.status)
        verdicts.append(status)

    if SolverStatus.INFEASIBLE in verdicts:
        return SolveResult(SolverStatus.INFEASIBLE, {}, float("nan"))
    return SolveResult(verdicts[-1], {}, float("nan"))


def _take(expr, positions: np.ndarray):
    return expr[positions] if positions.size else None


def _elastic_constraints(ctx: SolverContext, thresholds: Dict[str, np.ndarray],
                         acc_pos, acc_neg, fh_pos, fh_neg, alpha,
                         include_hard: bool = True) -> List[NamedConstraint]:
    """
    Rate constraints shared by every block, in bit/s/Hz.

    acc_pos/fh_pos are used where a rate must be large enough (concave
    surrogates allowed); acc_neg/fh_neg where it must stay small (affine).
    """
    sc, idx = ctx.scenario, ctx.index
    users = np.arange(sc.num_users)
    served = np.zeros(sc.num_rrh, dtype=bool)
    served[sc.serving_rrh[ctx.active]] = True
    active_users = np.flatnonzero(ctx.active)
    active_slices = np.flatnonzero(np.bincount(sc.user_slice[ctx.active], minlength=sc.num_slices) > 0)
    alpha_user = idx.alpha_sum(users, sc.num_users) @ alpha
    alpha_total = cp.sum(alpha) if isinstance(alpha, cp.Expression) else float(np.sum(alpha))
    out = []

    rrh_ul = idx.access_sum(sc.serving_rrh, sc.num_rrh, UL) @ acc_pos
    alpha_rrh = idx.alpha_sum(sc.serving_rrh, sc.num_rrh) @ alpha
    expr = _take(rrh_ul + alpha_rrh - thresholds["rrh"], np.flatnonzero(served))
    if expr is not None:
        out.append(NamedConstraint("rrh_queue_rate", expr))

    if include_hard and active_users.size:
        bbu_ul = idx.fronthaul_sum(UL) @ fh_pos
        out.append(NamedConstraint("bbu_queue_rate", bbu_ul - thresholds["bbu"]))

    user_dl = idx.access_sum(users, sc.num_users, DL) @ acc_pos
    expr = _take(user_dl + alpha_user - thresholds["user"], active_users)
    if expr is not None:
        out.append(NamedConstraint("user_queue_rate", expr))

    if active_users.size:
        total_ul = idx.access_sum(np.zeros(sc.num_users, dtype=int), 1, UL) @ acc_neg
        out.append(NamedConstraint("uplink_flow", idx.fronthaul_sum(UL) @ fh_pos - total_ul + alpha_total))
        total_dl = idx.access_sum(np.zeros(sc.num_users, dtype=int), 1, DL) @ acc_pos
        out.append(NamedConstraint("downlink_flow", total_dl - idx.fronthaul_sum(DL) @ fh_neg + alpha_total))

    alpha_slice = idx.alpha_sum(sc.user_slice, sc.num_slices) @ alpha
    for q, label in ((UL, "ul"), (DL, "dl")):
        slice_rate = idx.access_sum(sc.user_slice, sc.num_slices, q) @ acc_pos
        expr = _take(slice_rate + alpha_slice - thresholds["reservation"][:, q], active_slices)
        if expr is not None:
            out.append(NamedConstraint(f"slice_reservation_{label}", expr))

    if thresholds["floor"] is not None:
        for q, label in ((UL, "ul"), (DL, "dl")):
            user_rate = idx.access_sum(users, sc.num_users, q) @ acc_pos
            expr = _take(user_rate + alpha_user - thresholds["floor"], active_users)
            if expr is not None:
                out.append(NamedConstraint(f"packet_floor_{label}", expr))
    return out


def _pins(name: str, var: cp.Variable, mask: np.ndarray) -> List[NamedConstraint]:
    positions = np.flatnonzero(mask)
    return [NamedConstraint(name, var[positions], "==")] if positions.size else []


def _power_budgets(ctx: SolverContext, access_weights: np.ndarray, access_var,
                   fronthaul_weights: np.ndarray, fronthaul_var) -> List[NamedConstraint]:
    """Budget constraints in power units; weights turn the block variable into watts per unit"""
    sc, idx = ctx.scenario, ctx.index
    b = sc.budgets
    unit = ctx.power_unit
    out = []
    if "rrh_downlink_power" not in ctx.relaxed:
        used = idx.access_sum(sc.serving_rrh, sc.num_rrh, DL, access_weights) @ access_var
        out.append(NamedConstraint("rrh_downlink_power", b.rrh_dl / unit - used))
    active_users = np.flatnonzero(ctx.active)
    if "user_uplink_power" not in ctx.relaxed and active_users.size:
        used = idx.access_sum(np.arange(sc.num_users), sc.num_users, UL, access_weights) @ access_var
        out.append(NamedConstraint("user_uplink_power", b.user_ul / unit - used[active_users]))
    if "rrh_fronthaul_power" not in ctx.relaxed:
        used = idx.fronthaul_sum(UL, per_rrh=True, weights=fronthaul_weights) @ fronthaul_var
        out.append(NamedConstraint("rrh_fronthaul_power", b.rrh_ul / unit - used))
    if "bbu_downlink_power" not in ctx.relaxed:
        used = idx.fronthaul_sum(DL, weights=fronthaul_weights) @ fronthaul_var
        out.append(NamedConstraint("bbu_downlink_power", b.bbu_dl / unit - used))
    return out


def assemble_subcarrier_subproblem(point: Allocation, chan: ChannelRealization, scenario: Scenario,
                                   ctx: Optional[SolverContext] = None) -> ConvexSubproblem:
    """
    Time-sharing relaxation of the access and fronthaul assignment with
    powers, delay split and reliability held at the point.

    Every link is priced at max(p, p_min) so unassigned links carry the
    cost of meeting the reliability target. The problem is an LP.
    """
    ctx = ctx if ctx is not None else SolverContext.build(scenario, chan)
    idx, geo = ctx.index, ctx.geometry
    w = scenario.access_bandwidth
    unit = ctx.power_unit
    user_links = ctx.user_mask
    tau0 = np.where(user_links, point.tau, 0.0)
    p_eff, pf_eff = ctx.floor_powers(point.replace(tau=tau0))
    expansion = point.replace(tau=tau0, p_access=p_eff, p_fronthaul=pf_eff)
    acc = dc_decompose_access(expansion, chan, scenario, "subcarrier", geo)

    tv = cp.Variable(idx.n_access)
    xv = cp.Variable(idx.n_fronthaul)
    alpha = cp.Variable(idx.n_alpha, nonneg=True)
    tau0_flat = tau0.ravel()

    acc_lin = acc.rate.ravel() / w + (idx.block_matrix(acc.jac_rate) / w) @ (tv - tau0_flat)
    fh_rate = fbl_rate_from_sinr(fronthaul_sinr(pf_eff, geo), scenario.fronthaul_bandwidth,
                                 scenario.time_unit, scenario.qos.error_threshold)
    fh_lin = cp.multiply(fh_rate.ravel() / w, xv)

    constraints = _elastic_constraints(ctx, ctx.thresholds(point.delay), acc_lin, acc_lin,
                                       fh_lin, fh_lin, alpha)
    constraints.append(NamedConstraint("access_exclusivity", 1 - idx.exclusivity(scenario.serving_rrh) @ tv))
    if "fronthaul_exclusivity" not in ctx.relaxed:
        constraints.append(NamedConstraint("fronthaul_exclusivity", 1 - idx.fronthaul_exclusivity() @ xv))
    constraints.append(NamedConstraint("time_share_lower", tv))
    constraints.append(NamedConstraint("time_share_upper", 1 - tv))
    constraints.append(NamedConstraint("fronthaul_share_lower", xv))
    constraints.append(NamedConstraint("fronthaul_share_upper", 1 - xv))
    constraints += _pins("rejected_links", tv, ~user_links.ravel())
    constraints += _pins("rejected_alpha", alpha, np.repeat(~ctx.active, scenario.access_subcarriers))

    # Reliability, first order in tau: tau_u*(S_u - gamma_req*N_u(tau)) / sigma
    sigma = geo.access_noise
    noise0 = sigma + access_interference(tau0, p_eff, geo)
    own = (p_eff * geo.direct - ctx.access_required_sinr * noise0) / sigma
    cross = -ctx.access_required_sinr * _to_blocks(tau0)[..., :, None] * geo.coupling \
        * _to_blocks(p_eff / sigma)[..., None, :]
    reliability = idx.block_matrix(_diag_blocks(_to_blocks(own)) + cross)
    slack = (noise0 / sigma).ravel() / ctx.access_params.slope(scenario.access_blocklength)
    scale = row_scale(reliability, slack)
    reliability = sp.diags(scale) @ reliability
    phi0 = scale * (tau0 * own).ravel()
    expr = phi0 + reliability @ (tv - tau0_flat) + cp.multiply(scale * slack, idx.alpha_to_links() @ alpha)
    live = np.flatnonzero(user_links.ravel())
    if live.size:
        constraints.append(NamedConstraint("access_reliability", expr[live]))

    constraints += _power_budgets(ctx, p_eff / unit, tv, pf_eff / unit, xv)

    objective = (p_eff.ravel() / unit) @ tv + (pf_eff.ravel() / unit) @ xv \
        + ctx.penalty * cp.sum(alpha)

    def decode(values):
        tau = np.clip(values["tau"], 0.0, 1.0).reshape(tau0.shape) * user_links
        return point.replace(
            tau=tau,
            x=np.clip(values["x"], 0.0, 1.0).reshape(point.x.shape),
            p_access=p_eff,
            p_fronthaul=pf_eff,
            alpha=np.maximum(values["alpha"], 0.0).reshape(point.alpha.shape) * w,
        )

    return ConvexSubproblem(
        block="subcarrier",
        variables={"tau": tv, "x": xv, "alpha": alpha},
        objective=objective,
        constraints=constraints,
        expansion_point=expansion,
        expansion_values={"tau": tau0_flat, "x": point.x.ravel(), "alpha": point.alpha.ravel() / w},
        decode=decode,
    )


def assemble_power_subproblem(point: Allocation, chan: ChannelRealization, scenario: Scenario,
                              ctx: Optional[SolverContext] = None) -> ConvexSubproblem:
    """
    Power allocation with time shares, delay split fixed at the point.

    The f pieces stay exact (log of an affine map); g and y are replaced by
    their tangents. Rates that must stay small are fully linearized. Links
    with a share at or below the activity threshold carry no power.
    """
    ctx = ctx if ctx is not None else SolverContext.build(scenario, chan)
    idx, geo = ctx.index, ctx.geometry
    w = scenario.access_bandwidth
    unit, funit = ctx.power_unit, ctx.fronthaul_unit
    sigma, sigma_fh = geo.access_noise, geo.fronthaul_noise
    user_links = ctx.user_mask
    tau = np.where(user_links, point.tau, 0.0)
    live = tau > ACTIVE_SHARE
    live_fh = point.x > ACTIVE_SHARE
    p_eff, pf_eff = ctx.floor_powers(point.replace(tau=tau))
    p0 = np.where(live, p_eff, 0.0)
    pf0 = np.where(live_fh, pf_eff, 0.0)
    expansion = point.replace(tau=tau, p_access=p0, p_fronthaul=pf0)
    acc = dc_decompose_access(expansion, chan, scenario, "power", geo)
    fh = dc_decompose_fronthaul(expansion, scenario, "power", geo)

    pv = cp.Variable(idx.n_access, nonneg=True)
    pfv = cp.Variable(idx.n_fronthaul, nonneg=True)
    alpha = cp.Variable(idx.n_alpha, nonneg=True)
    pv0, pfv0 = p0.ravel() / unit, pf0.ravel() / funit
    tau_flat, x_flat = tau.ravel(), point.x.ravel()

    # (N + S)/sigma as an affine map of the normalized powers
    coupling = geo.coupling * (unit / sigma)
    received = idx.block_matrix(coupling * _to_blocks(tau)[..., None, :]
                                + _diag_blocks(_to_blocks(geo.direct * unit / sigma)))
    f_expr = cp.multiply(tau_flat / LN2, cp.log(1 + received @ pv))
    g_shifted = (acc.g - tau * (w / LN2) * np.log(sigma)).ravel() / w
    g_lin = linearize_concave(g_shifted, idx.block_matrix(acc.jac_g) * (unit / w), pv0, pv)
    y_lin = linearize_concave(acc.y.ravel() / w, idx.block_matrix(acc.jac_y) * (unit / w), pv0, pv)
    acc_pos = f_expr - g_lin - y_lin
    acc_neg = linearize_concave(acc.rate.ravel() / w, idx.block_matrix(acc.jac_rate) * (unit / w), pv0, pv)

    gain_fh = geo.fronthaul.ravel() * funit / sigma_fh
    f_fh = cp.multiply(x_flat * scenario.fronthaul_bandwidth / (LN2 * w), cp.log(1 + cp.multiply(gain_fh, pfv)))
    g_fh_slope = fronthaul_diagonal(fh.jac_g).ravel() * funit / w
    fh_pos = f_fh - (fh.g.ravel() / w + cp.multiply(g_fh_slope, pfv - pfv0))
    rate_fh_slope = fronthaul_diagonal(fh.jac_rate).ravel() * funit / w
    fh_neg = fh.rate.ravel() / w + cp.multiply(rate_fh_slope, pfv - pfv0)

    constraints = _elastic_constraints(ctx, ctx.thresholds(point.delay), acc_pos, acc_neg,
                                       fh_pos, fh_neg, alpha)

    # Reliability on used links: gamma >= gamma_req - alpha*(N0/sigma)/slope, linear in p
    req = ctx.access_required_sinr
    noise0 = (sigma + access_interference(tau, p0, geo)) / sigma
    margin = idx.block_matrix(_diag_blocks(_to_blocks(geo.direct * unit / sigma))
                              - req * coupling * _to_blocks(tau)[..., None, :])
    slack = noise0.ravel() / ctx.access_params.slope(scenario.access_blocklength)
    scale = row_scale(margin, slack, req)
    margin = sp.diags(scale) @ margin
    expr = margin @ pv - scale * req + cp.multiply(scale * slack, idx.alpha_to_links() @ alpha)
    positions = np.flatnonzero(live.ravel())
    if positions.size:
        constraints.append(NamedConstraint("access_reliability", expr[positions]))
    positions = np.flatnonzero(live_fh.ravel())
    if positions.size:
        constraints.append(NamedConstraint(
            "fronthaul_reliability",
            cp.multiply(gain_fh, pfv)[positions] - ctx.fronthaul_required_sinr,
        ))

    constraints += _pins("idle_links", pv, ~live.ravel())
    constraints += _pins("idle_fronthaul", pfv, ~live_fh.ravel())
    constraints += _pins("rejected_alpha", alpha, np.repeat(~ctx.active, scenario.access_subcarriers))
    constraints += _power_budgets(ctx, tau, pv, point.x * (funit / unit), pfv)

    objective = tau_flat @ pv + (funit / unit) * (x_flat @ pfv) + ctx.penalty * cp.sum(alpha)

    def decode(values):
        return point.replace(
            tau=tau,
            p_access=np.maximum(values["p_access"], 0.0).reshape(tau.shape) * unit * live,
            p_fronthaul=np.maximum(values["p_fronthaul"], 0.0).reshape(point.x.shape) * funit * live_fh,
            alpha=np.maximum(values["alpha"], 0.0).reshape(point.alpha.shape) * w,
        )

    return ConvexSubproblem(
        block="power",
        variables={"p_access": pv, "p_fronthaul": pfv, "alpha": alpha},
        objective=objective,
        constraints=constraints,
        expansion_point=expansion,
        expansion_values={"p_access": pv0, "p_fronthaul": pfv0, "alpha": point.alpha.ravel() / w},
        decode=decode,
    )


def solve_delay_lp(point: Allocation, scenario: Scenario, chan: Optional[ChannelRealization] = None,
                   active: Optional[np.ndarray] = None, geometry: Optional[LinkGeometry] = None,
                   tol: float = 1e-7, max_iters: int = 200) -> DelaySplit:
    """
    Chooses the per-queue delay targets for fixed rates.

    Thresholds are coefficient/D, so with z = 1/D every rate constraint is
    linear and the budget sum of 1/z is convex. Among feasible splits the
    one maximizing the smallest relative slack is returned.

    Raises:
        Infeasible: No split meets every budget at these rates.
    """
    if geometry is None:
        geometry = LinkGeometry.build(scenario, chan)
    if active is None:
        active = np.ones(scenario.num_users, dtype=bool)
    rates = aggregate_rates(point, chan, scenario, geometry)
    alpha_user = point.alpha.sum(axis=1) * active
    alpha_rrh = np.zeros(scenario.num_rrh)
    np.add.at(alpha_rrh, scenario.serving_rrh, alpha_user)
    k_rrh, k_bbu, k_user = queue_coefficients(scenario)
    d_ref = float(scenario.delay_budget.max())

    served = np.zeros(scenario.num_rrh, dtype=bool)
    served[scenario.serving_rrh[active]] = True
    cap_rrh = (rates.rrh[:, UL] + alpha_rrh) * d_ref / k_rrh
    cap_bbu = rates.bbu[UL] * d_ref / k_bbu
    cap_user = (rates.user[:, DL] + alpha_user) * d_ref / k_user

    z_rrh = cp.Variable(scenario.num_rrh, pos=True)
    z_bbu = cp.Variable(pos=True)
    z_user = cp.Variable(scenario.num_users, pos=True)
    t = cp.Variable()
    users = np.flatnonzero(active)
    rrhs = np.flatnonzero(served)
    constraints = [z_bbu <= (1 - t) * cap_bbu, t <= 1]
    if rrhs.size:
        constraints.append(z_rrh[rrhs] <= cp.multiply(1 - t, cap_rrh[rrhs]))
    for b in users:
        j = scenario.serving_rrh[scenario.partner[b]]
        constraints.append(cp.inv_pos(z_rrh[j]) + cp.inv_pos(z_bbu) + cp.inv_pos(z_user[b])
                           <= (1 - t) * scenario.user_delay_budget[b] / d_ref)
        constraints.append(z_user[b] <= (1 - t) * cap_user[b])
    problem = cp.Problem(cp.Maximize(t), constraints)
    try:
        problem.solve(solver=cp.CLARABEL, max_iter=max_iters, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol)
    except cp.error.SolverError as e:
        raise Infeasible(f"delay split solve failed: {e}")
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or t.value < -1e-6:
        raise Infeasible(f"no delay split meets the budget (status {problem.status})")

    fallback = DelaySplit.thirds(scenario)
    d_rrh = fallback.d_ul_rrh.copy()
    d_user = fallback.d_dl_user.copy()
    # Only queues that appear in some budget get the solved value
    used_rrh = np.zeros(scenario.num_rrh, dtype=bool)
    used_rrh[scenario.serving_rrh[scenario.partner[users]]] = True
    d_rrh[used_rrh] = d_ref / np.asarray(z_rrh.value)[used_rrh]
    d_user[users] = d_ref / np.asarray(z_user.value)[users]
    return DelaySplit(d_ul_rrh=d_rrh, d_bbu=float(d_ref / z_bbu.value), d_dl_user=d_user)


def solve_alpha_lp(point: Allocation, chan: ChannelRealization, scenario: Scenario,
                   active: Optional[np.ndarray] = None, ctx: Optional[SolverContext] = None,
                   tol: float = 1e-7, max_iters: int = 200) -> np.ndarray:
    """
    Smallest elastic slack (bit/s, shape (U, K1)) that makes the point
    satisfy the elastic constraints with exact rates.
    """
    ctx = ctx if ctx is not None else SolverContext.build(scenario, chan, active)
    idx, geo = ctx.index, ctx.geometry
    w = scenario.access_bandwidth
    tau = np.where(ctx.user_mask, point.tau, 0.0)
    rates = aggregate_rates(point.replace(tau=tau), chan, scenario, geo)
    acc = (tau * rates.access_link).ravel() / w
    fh = (point.x * rates.fronthaul_link).ravel() / w

    alpha = cp.Variable(idx.n_alpha, nonneg=True)
    constraints = _elastic_constraints(ctx, ctx.thresholds(point.delay), acc, acc, fh, fh, alpha,
                                       include_hard=False)
    constraints += _pins("rejected_alpha", alpha, np.repeat(~ctx.active, scenario.access_subcarriers))

    # Reliability shortfall of used links under the piecewise approximation
    live = (tau > ACTIVE_SHARE).ravel()
    if live.any():
        shortfall = q_approx(rates.access_sinr, ctx.access_params, scenario.access_blocklength).ravel() \
            - scenario.qos.error_threshold
        positions = np.flatnonzero(live)
        expr = (idx.alpha_to_links() @ alpha)[positions] - shortfall[positions]
        constraints.append(NamedConstraint("access_reliability", expr))

    sub = ConvexSubproblem(block="alpha", variables={"alpha": alpha}, objective=cp.sum(alpha),
                           constraints=constraints)
    result = solve_convex(sub, tol=tol, max_iters=max_iters)
    if result.status != SolverStatus.OPTIMAL:
        raise SolverFailure("alpha", result.status)
    return np.maximum(result.values["alpha"], 0.0).reshape(point.alpha.shape) * w


def round_timesharing(relaxed: Allocation, scenario: Scenario, threshold: float = ACTIVE_SHARE,
                      exclusive_fronthaul: bool = True) -> Allocation:
    """
    Turns time shares into assignments: per (RRH, subcarrier, direction) the
    largest share wins if it exceeds the threshold, lowest user index on ties.
    Fronthaul subcarriers go the same way across RRHs. Powers of links left
    unassigned are zeroed.
    """
    tau = np.zeros_like(relaxed.tau)
    for j in range(scenario.num_rrh):
        users = scenario.users_of_rrh(j)
        if not users.size:
            continue
        shares = relaxed.tau[users]
        best = np.argmax(shares, axis=0)
        won = np.take_along_axis(shares, best[None], axis=0)[0] > threshold
        k, q = np.nonzero(won)
        tau[users[best[k, q]], k, q] = 1.0

    if exclusive_fronthaul:
        x = np.zeros_like(relaxed.x)
        best = np.argmax(relaxed.x, axis=0)
        won = np.take_along_axis(relaxed.x, best[None], axis=0)[0] > threshold
        k, q = np.nonzero(won)
        x[best[k, q], k, q] = 1.0
    else:
        x = (relaxed.x > threshold).astype(float)
    return relaxed.replace(tau=tau, x=x, p_access=relaxed.p_access * tau,
                           p_fronthaul=relaxed.p_fronthaul * x)
