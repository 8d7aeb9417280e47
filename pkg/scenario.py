import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, asdict, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

UL, DL = 0, 1
DIRECTIONS = ("UL", "DL")


class InvalidConfig(ValueError):
    """Raised when a scenario configuration cannot produce a valid instance"""


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(watts):
    return 10.0 * np.log10(np.asarray(watts, dtype=float)) + 30.0


def _per_slice(value, num_slices: int, name: str) -> np.ndarray:
    """Broadcast a scalar or per-slice list to one value per slice"""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(num_slices, float(arr[0]))
    if arr.size != num_slices:
        raise InvalidConfig(f"{name} has {arr.size} entries for {num_slices} slices")
    return arr


@dataclass
class QoSParams:
    """Represents the delay and reliability targets of the tactile traffic"""
    theta_rrh: float = 10.0
    theta_bbu: float = 10.0
    theta_user: float = 10.0
    delay_budget_ms: Union[float, List[float]] = 1.0
    delay_violation: List[float] = field(default_factory=lambda: [1e-3, 1e-3, 1e-3])
    error_threshold: float = 1e-7
    buffer_nonempty: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    # Every admitted user pushes one packet per time unit in each direction
    packet_floor: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> 'QoSParams':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"Unknown qos keys: {sorted(unknown)}")
        return cls(**data)

    def violations(self) -> List[str]:
        problems = []
        for name in ("theta_rrh", "theta_bbu", "theta_user"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if np.any(np.atleast_1d(self.delay_budget_ms) <= 0):
            problems.append("delay_budget_ms must be positive")
        if len(self.delay_violation) != 3 or any(not 0 < d < 1 for d in self.delay_violation):
            problems.append("delay_violation out of (0,1)")
        if not 0 < self.error_threshold < 1:
            problems.append("error_threshold out of (0,1)")
        if len(self.buffer_nonempty) != 3 or any(not 0 < e <= 1 for e in self.buffer_nonempty):
            problems.append("buffer_nonempty out of (0,1]")
        return problems

    def to_dict(self):
        return asdict(self)


@dataclass
class ScenarioConfig:
    """Represents the knobs a C-RAN instance is generated from (powers in dBm)"""
    num_rrh: int = 3
    num_slices: int = 2
    pairs_per_slice: List[int] = field(default_factory=lambda: [2, 1])
    access_subcarriers: int = 8
    fronthaul_subcarriers: int = 8
    access_bandwidth_hz: float = 2e6
    fronthaul_bandwidth_hz: float = 2e6
    time_unit_s: float = 1e-3
    packet_bits: float = 160.0
    rrh_dl_power_dbm: float = 43.0
    rrh_ul_power_dbm: float = 43.0
    bbu_dl_power_dbm: float = 46.0
    user_ul_power_dbm: float = 23.0
    noise_psd_dbm_hz: float = -174.0
    reservation_rate_bps_hz: Union[float, List[float]] = 1.0
    area_km2: float = 10.0
    bbu_rrh_distance_m: float = 1000.0
    access_pathloss_exponent: float = 3.0
    fronthaul_pathloss_exponent: float = 3.0
    min_rrh_separation_m: float = 200.0
    min_link_distance_m: float = 10.0
    seed: int = 7
    qos: QoSParams = field(default_factory=QoSParams)

    @classmethod
    def from_dict(cls, data: dict) -> 'ScenarioConfig':
        """Create a ScenarioConfig from parsed JSON/TOML data"""
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"Unknown config keys: {sorted(unknown)}")
        qos = QoSParams.from_dict(data.pop("qos", {}))
        return cls(qos=qos, **data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'ScenarioConfig':
        """Load a config from a .json or .toml file"""
        path = Path(path)
        try:
            if path.suffix == ".toml":
                with open(path, "rb") as f:
                    data = tomllib.load(f)
            else:
                with open(path, "r") as f:
                    data = json.load(f)
        except FileNotFoundError:
            raise InvalidConfig(f"Could not find {path}")
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise InvalidConfig(f"Invalid config in {path}: {e}")
        return cls.from_dict(data)

    def replace(self, **changes) -> 'ScenarioConfig':
        return replace(self, **changes)

    @property
    def num_users(self) -> int:
        return 2 * sum(self.pairs_per_slice)

    def violations(self) -> List[str]:
        """List every problem that would stop generate_scenario"""
        problems = []
        for name in ("num_rrh", "num_slices", "access_subcarriers", "fronthaul_subcarriers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        for name in ("access_bandwidth_hz", "fronthaul_bandwidth_hz", "time_unit_s",
                     "packet_bits", "area_km2", "bbu_rrh_distance_m",
                     "access_pathloss_exponent", "fronthaul_pathloss_exponent",
                     "min_link_distance_m"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if len(self.pairs_per_slice) != self.num_slices:
            problems.append("pairs_per_slice needs one entry per slice")
        if any(int(n) != n or n < 1 for n in self.pairs_per_slice):
            problems.append("pairs_per_slice entries must be positive integers")
        if np.any(np.atleast_1d(self.reservation_rate_bps_hz) < 0):
            problems.append("reservation_rate_bps_hz must be non-negative")
        if self.min_rrh_separation_m < 0:
            problems.append("min_rrh_separation_m must be non-negative")
        if self.access_bandwidth_hz * self.time_unit_s < 1:
            problems.append("access blocklength below one channel use")
        if self.fronthaul_bandwidth_hz * self.time_unit_s < 1:
            problems.append("fronthaul blocklength below one channel use")
        if self.area_km2 > 0 and self.bbu_rrh_distance_m > 500.0 * math.sqrt(self.area_km2):
            problems.append("bbu_rrh_distance_m places RRHs outside the area")
        problems.extend(self.qos.violations())
        return problems

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class PowerBudgets:
    """Represents the transmit power limits in watts"""
    rrh_dl: float
    rrh_ul: float
    bbu_dl: float
    user_ul: float


@dataclass(frozen=True, eq=False)
class Scenario:
    """Represents a static C-RAN instance: topology, slices, pairs and budgets"""
    num_rrh: int
    num_slices: int
    pairs_per_slice: tuple
    access_subcarriers: int
    fronthaul_subcarriers: int
    access_bandwidth: float
    fronthaul_bandwidth: float
    time_unit: float
    packet_bits: float
    budgets: PowerBudgets
    noise_psd: float
    qos: QoSParams
    reservation_rate: np.ndarray  # (S, 2) bit/s
    delay_budget: np.ndarray  # (S,) seconds
    area_km2: float
    bbu_rrh_distance: float
    access_pathloss_exponent: float
    fronthaul_pathloss_exponent: float
    min_link_distance: float
    bbu_position: np.ndarray
    rrh_positions: np.ndarray  # (J, 2)
    user_positions: np.ndarray  # (U, 2)
    user_slice: np.ndarray  # (U,)
    partner: np.ndarray  # (U,)
    serving_rrh: np.ndarray  # (U,)

    @classmethod
    def from_layout(cls, config: ScenarioConfig, rrh_positions, user_positions,
                    user_slice, partner, bbu_position=None) -> 'Scenario':
        """Build a Scenario around an explicit geometry"""
        rrh_positions = np.asarray(rrh_positions, dtype=float).reshape(-1, 2)
        user_positions = np.asarray(user_positions, dtype=float).reshape(-1, 2)
        if bbu_position is None:
            bbu_position = np.zeros(2)
        d = np.linalg.norm(user_positions[:, None, :] - rrh_positions[None, :, :], axis=2)
        rsv = _per_slice(config.reservation_rate_bps_hz, config.num_slices, "reservation_rate_bps_hz")
        budget = _per_slice(config.qos.delay_budget_ms, config.num_slices, "delay_budget_ms")
        return cls(
            num_rrh=len(rrh_positions),
            num_slices=config.num_slices,
            pairs_per_slice=tuple(int(n) for n in config.pairs_per_slice),
            access_subcarriers=config.access_subcarriers,
            fronthaul_subcarriers=config.fronthaul_subcarriers,
            access_bandwidth=config.access_bandwidth_hz,
            fronthaul_bandwidth=config.fronthaul_bandwidth_hz,
            time_unit=config.time_unit_s,
            packet_bits=config.packet_bits,
            budgets=PowerBudgets(
                rrh_dl=float(dbm_to_watts(config.rrh_dl_power_dbm)),
                rrh_ul=float(dbm_to_watts(config.rrh_ul_power_dbm)),
                bbu_dl=float(dbm_to_watts(config.bbu_dl_power_dbm)),
                user_ul=float(dbm_to_watts(config.user_ul_power_dbm)),
            ),
            # dBm/Hz -> W/Hz
            noise_psd=float(dbm_to_watts(config.noise_psd_dbm_hz)),
            qos=config.qos,
            reservation_rate=np.repeat(rsv[:, None] * config.access_bandwidth_hz, 2, axis=1),
            delay_budget=budget * 1e-3,
            area_km2=config.area_km2,
            bbu_rrh_distance=config.bbu_rrh_distance_m,
            access_pathloss_exponent=config.access_pathloss_exponent,
            fronthaul_pathloss_exponent=config.fronthaul_pathloss_exponent,
            min_link_distance=config.min_link_distance_m,
            bbu_position=np.asarray(bbu_position, dtype=float),
            rrh_positions=rrh_positions,
            user_positions=user_positions,
            user_slice=np.asarray(user_slice, dtype=int),
            partner=np.asarray(partner, dtype=int),
            serving_rrh=np.argmin(d, axis=1).astype(int),
        )

    @property
    def num_users(self) -> int:
        return len(self.user_positions)

    @property
    def access_noise(self) -> float:
        return self.noise_psd * self.access_bandwidth

    @property
    def fronthaul_noise(self) -> float:
        return self.noise_psd * self.fronthaul_bandwidth

    @property
    def access_blocklength(self) -> float:
        return self.access_bandwidth * self.time_unit

    @property
    def fronthaul_blocklength(self) -> float:
        return self.fronthaul_bandwidth * self.time_unit

    @property
    def packet_rate(self) -> float:
        """Bits per second needed to move one packet per time unit"""
        return self.packet_bits / self.time_unit

    @property
    def user_rrh_distance(self) -> np.ndarray:
        d = np.linalg.norm(self.user_positions[:, None, :] - self.rrh_positions[None, :, :], axis=2)
        return np.maximum(d, self.min_link_distance)

    @property
    def rrh_bbu_distance(self) -> np.ndarray:
        d = np.linalg.norm(self.rrh_positions - self.bbu_position[None, :], axis=1)
        return np.maximum(d, self.min_link_distance)

    @property
    def user_delay_budget(self) -> np.ndarray:
        return self.delay_budget[self.user_slice]

    def users_of_rrh(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.serving_rrh == j)

    def users_of_slice(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.user_slice == s)

    def with_qos(self, **changes) -> 'Scenario':
        return replace(self, qos=replace(self.qos, **changes))

    def to_dict(self):
        data = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif hasattr(value, "__dataclass_fields__"):
                value = asdict(value)
            data[f.name] = value
        return data


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """Represents one fading draw: access gains (U, J, K1, 2) and fronthaul gains (J, K2, 2)"""
    h_access: np.ndarray
    h_fronthaul: np.ndarray
    seed: int


def path_gain(fading, distance, exponent):
    """Linear power gain: fading times distance^(-exponent)"""
    return np.asarray(fading, dtype=float) * np.power(np.asarray(distance, dtype=float), -exponent)


def draw_fading(rng: np.random.Generator, size) -> np.ndarray:
    """Unit-mean exponential power fading (squared Rayleigh envelope)"""
    return rng.exponential(1.0, size=size)


def _place_rrhs(rng: np.random.Generator, config: ScenarioConfig, center: np.ndarray,
                max_attempts: int = 1000) -> np.ndarray:
    for _ in range(max_attempts):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=config.num_rrh)
        positions = center + config.bbu_rrh_distance_m * np.column_stack([np.cos(angles), np.sin(angles)])
        if config.num_rrh == 1:
            return positions
        gaps = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
        gaps[np.diag_indices(config.num_rrh)] = np.inf
        if gaps.min() >= config.min_rrh_separation_m:
            return positions
    raise InvalidConfig(
        f"Could not place {config.num_rrh} RRHs {config.min_rrh_separation_m} m apart "
        f"after {max_attempts} attempts"
    )


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """
    Draws a random instance from a config.

    The BBU sits at the centre of a square area. RRHs sit on the circle of
    radius bbu_rrh_distance_m around it. Users are uniform over the area,
    paired at random inside their slice and served by the closest RRH.

    Parameters:
        config (ScenarioConfig): Instance knobs; config.seed drives every draw.

    Returns:
        Scenario: The generated instance.
    """
    problems = config.violations()
    if problems:
        raise InvalidConfig("; ".join(problems))

    rng = np.random.default_rng(config.seed)
    side = 1000.0 * math.sqrt(config.area_km2)
    center = np.array([side / 2.0, side / 2.0])
    rrh_positions = _place_rrhs(rng, config, center)
    user_positions = rng.uniform(0.0, side, size=(config.num_users, 2))

    # Users are numbered slice by slice; pairs are a random matching inside each slice
    user_slice = np.repeat(np.arange(config.num_slices), [2 * n for n in config.pairs_per_slice])
    partner = np.empty(config.num_users, dtype=int)
    for s in range(config.num_slices):
        members = rng.permutation(np.flatnonzero(user_slice == s))
        for a, b in members.reshape(-1, 2):
            partner[a], partner[b] = b, a

    return Scenario.from_layout(config, rrh_positions, user_positions, user_slice, partner,
                                bbu_position=center)


def draw_channels(scenario: Scenario, seed: int) -> ChannelRealization:
    """Draw access and fronthaul gains; identical (scenario, seed) gives identical tensors"""
    rng = np.random.default_rng(seed)
    shape_access = (scenario.num_users, scenario.num_rrh, scenario.access_subcarriers, 2)
    shape_fronthaul = (scenario.num_rrh, scenario.fronthaul_subcarriers, 2)
    fading_access = draw_fading(rng, shape_access)
    fading_fronthaul = draw_fading(rng, shape_fronthaul)
    h_access = path_gain(fading_access, scenario.user_rrh_distance[:, :, None, None],
                         scenario.access_pathloss_exponent)
    h_fronthaul = path_gain(fading_fronthaul, scenario.rrh_bbu_distance[:, None, None],
                            scenario.fronthaul_pathloss_exponent)
    return ChannelRealization(h_access=h_access, h_fronthaul=h_fronthaul, seed=int(seed))


def validate(scenario: Scenario) -> List[str]:
    """
    Checks a Scenario against its invariants.

    Returns:
        list of str: One entry per violated invariant, empty when valid.
    """
    problems = []
    if scenario.num_rrh < 1:
        problems.append("num_rrh must be at least 1")
    if scenario.access_subcarriers < 1 or scenario.fronthaul_subcarriers < 1:
        problems.append("subcarrier count must be at least 1")
    b = scenario.budgets
    if min(b.rrh_dl, b.rrh_ul, b.bbu_dl, b.user_ul) <= 0:
        problems.append("power budgets must be positive")
    if scenario.noise_psd <= 0:
        problems.append("noise_psd must be positive")
    if scenario.access_blocklength < 1 or scenario.fronthaul_blocklength < 1:
        problems.append("blocklength below one channel use")
    if scenario.packet_bits <= 0:
        problems.append("packet_bits must be positive")
    if np.any(scenario.reservation_rate < 0):
        problems.append("reservation_rate must be non-negative")
    if np.any(scenario.delay_budget <= 0):
        problems.append("delay_budget must be positive")
    u = scenario.num_users
    if not (len(scenario.user_slice) == len(scenario.partner) == len(scenario.serving_rrh) == u):
        problems.append("user arrays disagree on the number of users")
    elif u:
        idx = np.arange(u)
        if np.any(scenario.partner[scenario.partner] != idx) or np.any(scenario.partner == idx):
            problems.append("partner is not a perfect pairing")
        elif np.any(scenario.user_slice[scenario.partner] != scenario.user_slice):
            problems.append("pairs cross slices")
    problems.extend(scenario.qos.violations())
    return problems


def load_config(path: Optional[Union[str, Path]] = None) -> ScenarioConfig:
    """Load a config file, or the defaults when no path is given"""
    if path is None:
        return ScenarioConfig()
    return ScenarioConfig.from_file(path)


def main():
    config = load_config(Path(__file__).with_name("default_config.json"))
    scenario = generate_scenario(config)
    print(f"Generated {scenario.num_users} users over {scenario.num_rrh} RRHs "
          f"and {scenario.num_slices} slices")
    problems = validate(scenario)
    print("Scenario is valid" if not problems else f"Violations: {problems}")
    with open("scenario.json", "w") as f:
        json.dump(scenario.to_dict(), f, indent=4, default=str)
    print("Scenario has been exported to scenario.json")


if __name__ == "__main__":
    main()
