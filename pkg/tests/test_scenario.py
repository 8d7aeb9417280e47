import json
from pathlib import Path

import numpy as np
import pytest

from scenario import (
    DL,
    UL,
    InvalidConfig,
    ScenarioConfig,
    dbm_to_watts,
    draw_channels,
    generate_scenario,
    load_config,
    path_gain,
    validate,
    watts_to_dbm,
)

ROOT = Path(__file__).resolve().parent.parent


def test_dbm_conversions():
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(0.0) == pytest.approx(1e-3)
    assert watts_to_dbm(1.0) == pytest.approx(30.0)
    assert watts_to_dbm(dbm_to_watts(43.0)) == pytest.approx(43.0)


def test_shipped_configs_load_and_validate():
    for name in ("default_config.json", "full_scale_config.json"):
        config = load_config(ROOT / name)
        assert config.violations() == []
    config = load_config(ROOT / "default_config.json")
    scenario = generate_scenario(config)
    assert scenario.num_users == 6
    assert validate(scenario) == []


def test_default_instance_geometry(desk_scenario):
    s = desk_scenario
    assert s.num_rrh == 3
    assert np.allclose(np.linalg.norm(s.rrh_positions - s.bbu_position, axis=1), 1000.0)
    gaps = np.linalg.norm(s.rrh_positions[:, None] - s.rrh_positions[None], axis=2)
    assert gaps[~np.eye(3, dtype=bool)].min() >= 200.0
    d = np.linalg.norm(s.user_positions[:, None] - s.rrh_positions[None], axis=2)
    assert np.array_equal(s.serving_rrh, np.argmin(d, axis=1))


def test_pairs_are_a_matching_inside_each_slice(desk_scenario):
    s = desk_scenario
    users = np.arange(s.num_users)
    assert np.array_equal(s.partner[s.partner], users)
    assert np.all(s.partner != users)
    assert np.array_equal(s.user_slice[s.partner], s.user_slice)
    assert np.bincount(s.user_slice).tolist() == [4, 2]


def test_units_are_converted_once(desk_scenario):
    s = desk_scenario
    assert s.budgets.user_ul == pytest.approx(dbm_to_watts(23.0))
    assert s.access_noise == pytest.approx(dbm_to_watts(-174.0) * 2e6)
    assert np.allclose(s.reservation_rate, 2e6)
    assert s.reservation_rate.shape == (2, 2)
    assert np.allclose(s.delay_budget, 1e-3)
    assert s.access_blocklength == pytest.approx(2000.0)
    assert s.packet_rate == pytest.approx(160e3)


def test_same_seed_same_instance():
    a = generate_scenario(ScenarioConfig(seed=5))
    b = generate_scenario(ScenarioConfig(seed=5))
    c = generate_scenario(ScenarioConfig(seed=6))
    assert np.array_equal(a.user_positions, b.user_positions)
    assert np.array_equal(a.partner, b.partner)
    assert not np.array_equal(a.user_positions, c.user_positions)


def test_channels_are_reproducible_and_shaped(desk_scenario):
    a = draw_channels(desk_scenario, 9)
    b = draw_channels(desk_scenario, 9)
    assert a.h_access.shape == (6, 3, 8, 2)
    assert a.h_fronthaul.shape == (3, 8, 2)
    assert np.array_equal(a.h_access, b.h_access)
    assert np.all(a.h_access > 0)
    assert not np.array_equal(a.h_access[..., UL], a.h_access[..., DL])


def test_path_gain_law():
    assert path_gain(2.0, 10.0, 3.0) == pytest.approx(2e-3)


def test_unknown_keys_are_rejected():
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({"num_rrh": 3, "bogus": 1})
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_dict({"qos": {"theta": 1.0}})


def test_config_files(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"num_rrh": 2, "qos": {"error_threshold": 1e-5}}))
    config = ScenarioConfig.from_file(path)
    assert config.num_rrh == 2
    assert config.qos.error_threshold == 1e-5

    toml = tmp_path / "c.toml"
    toml.write_text('num_rrh = 4\npairs_per_slice = [1, 1]\n\n[qos]\ndelay_budget_ms = 2.0\n')
    config = ScenarioConfig.from_file(toml)
    assert config.num_rrh == 4
    assert config.qos.delay_budget_ms == 2.0

    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_file(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(InvalidConfig):
        ScenarioConfig.from_file(broken)


@pytest.mark.parametrize("changes", [
    {"pairs_per_slice": [1]},
    {"pairs_per_slice": [0, 1]},
    {"num_rrh": 0},
    {"access_bandwidth_hz": 100.0},
    {"fronthaul_bandwidth_hz": 100.0},
    {"min_rrh_separation_m": 5000.0},
])
def test_invalid_configs_raise(changes):
    with pytest.raises(InvalidConfig):
        generate_scenario(ScenarioConfig().replace(**changes))


def test_invalid_qos_raises():
    config = ScenarioConfig()
    config.qos.theta_bbu = 0.0
    with pytest.raises(InvalidConfig, match="theta_bbu"):
        generate_scenario(config)


def test_validate_reports_broken_pairing(desk_scenario):
    from dataclasses import replace
    broken = replace(desk_scenario, partner=np.zeros(desk_scenario.num_users, dtype=int))
    assert any("pairing" in p for p in validate(broken))


def test_with_qos_keeps_geometry(desk_scenario):
    relaxed = desk_scenario.with_qos(error_threshold=1e-3)
    assert relaxed.qos.error_threshold == 1e-3
    assert desk_scenario.qos.error_threshold == 1e-7
    assert relaxed.user_positions is desk_scenario.user_positions


def test_short_fronthaul_blocklength_is_caught_before_generation():
    config = ScenarioConfig().replace(fronthaul_bandwidth_hz=500.0)
    assert config.violations() == ["fronthaul blocklength below one channel use"]
