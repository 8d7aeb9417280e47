import numpy as np
import pytest

from scenario import ChannelRealization, ScenarioConfig, Scenario, draw_channels, generate_scenario


def small_config(**changes) -> ScenarioConfig:
    """One slice, one pair, two subcarriers per set, 300 m fronthaul hop"""
    base = dict(num_rrh=1, num_slices=1, pairs_per_slice=[1], access_subcarriers=2,
                fronthaul_subcarriers=2, area_km2=1.0, bbu_rrh_distance_m=300.0,
                min_rrh_separation_m=100.0, seed=3)
    base.update(changes)
    return ScenarioConfig(**base)


def single_rrh_scenario(config: ScenarioConfig = None) -> Scenario:
    """One RRH, users 0 and 1 paired, both served by it"""
    config = config if config is not None else small_config()
    return Scenario.from_layout(config, rrh_positions=[[0.0, 0.0]],
                                user_positions=[[100.0, 0.0], [0.0, 100.0]],
                                user_slice=[0, 0], partner=[1, 0],
                                bbu_position=[300.0, 0.0])


def two_rrh_scenario(config: ScenarioConfig = None) -> Scenario:
    """Two RRHs 400 m apart with two users each, so links on the same subcarrier interfere"""
    config = config if config is not None else small_config(num_rrh=2, pairs_per_slice=[2])
    return Scenario.from_layout(config, rrh_positions=[[0.0, 0.0], [400.0, 0.0]],
                                user_positions=[[50.0, 0.0], [350.0, 0.0], [60.0, 30.0], [340.0, 30.0]],
                                user_slice=[0, 0, 0, 0], partner=[1, 0, 3, 2],
                                bbu_position=[200.0, 300.0])


def flat_channels(scenario: Scenario, access_gain: float = 1e-9, fronthaul_gain: float = 1e-9):
    """Every link gets the same gain"""
    return ChannelRealization(
        h_access=np.full((scenario.num_users, scenario.num_rrh, scenario.access_subcarriers, 2), access_gain),
        h_fronthaul=np.full((scenario.num_rrh, scenario.fronthaul_subcarriers, 2), fronthaul_gain),
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


@pytest.fixture
def single_rrh():
    return single_rrh_scenario()


@pytest.fixture
def two_rrh():
    return two_rrh_scenario()


@pytest.fixture
def two_rrh_channels(two_rrh):
    return draw_channels(two_rrh, seed=11)


@pytest.fixture
def desk_scenario():
    return generate_scenario(ScenarioConfig())
