import math
import random

import pytest

from socialdrive.rewards import (
    PerceivedVehicle,
    SvoConfig,
    ego_utility,
    mission_term,
    neighbor_term,
    total_reward,
)

WEIGHTS = {"speed": 0.4, "crash": -1.0}


def test_ego_utility_zero_metrics():
    assert ego_utility({"speed": 0.0, "crash": 0.0}, WEIGHTS) == 0.0


def test_ego_utility_weighted_speed():
    assert ego_utility({"speed": 1.0, "crash": 0.0}, WEIGHTS) == pytest.approx(0.4)


def test_ego_utility_crash_penalty():
    assert ego_utility({"speed": 0.0, "crash": 1.0}, WEIGHTS) == pytest.approx(-1.0)


def test_neighbor_term_distance_independent_at_zero_exponent():
    assert neighbor_term(0.7, 42.0, 2.0, 0.0) == pytest.approx(1.4)


def test_neighbor_term_hand_value():
    # W=1, lam=1, d=10, utility=0.5 -> 0.05
    assert neighbor_term(0.5, 10.0, 1.0, 1.0) == pytest.approx(0.05)


def test_neighbor_term_distance_floor():
    near = neighbor_term(1.0, 0.0, 1.0, 2.0, distance_floor=1.0)
    assert near == pytest.approx(1.0)


def test_mission_term_gate_closed():
    assert mission_term(False, 5.0, 10.0, 1.0) == 0.0


def test_mission_term_exponent_zero():
    assert mission_term(True, 5.0, 123.0, 0.0) == pytest.approx(5.0)


def test_mission_term_hand_value():
    # w=5, mu=1, d=25 -> 0.2
    assert mission_term(True, 5.0, 25.0, 1.0) == pytest.approx(0.2)


def _neighbors(coop_utilities, symp_utilities, distance=10.0):
    out = []
    for u in coop_utilities:
        out.append(
            PerceivedVehicle(kind="AV", distance=distance, metrics={"speed": u / 0.4})
        )
    for u in symp_utilities:
        out.append(
            PerceivedVehicle(kind="HV", distance=distance, metrics={"speed": u / 0.4})
        )
    return out


def test_pure_egoist_ignores_everyone():
    cfg = SvoConfig(phi=0.0)
    ego = {"speed": 0.5, "crash": 0.0}
    alone = total_reward(ego, [], cfg)
    crowded = total_reward(ego, _neighbors([0.3, 0.1], [0.2]), cfg)
    assert alone.total == pytest.approx(crowded.total, abs=0)
    assert crowded.total == pytest.approx(0.5 * 0.4)
    assert crowded.r_coop == 0.0 and crowded.r_symp == 0.0


def test_full_altruist_full_theta_keeps_cooperation_only():
    cfg = SvoConfig(phi=math.pi / 2, theta=math.pi / 2, lam=0.0)
    ego = {"speed": 1.0, "crash": 0.0}
    out = total_reward(ego, _neighbors([0.4], [0.4]), cfg)
    assert out.r_ego == pytest.approx(0.0, abs=1e-15)
    assert out.r_symp == pytest.approx(0.0, abs=1e-15)
    assert out.r_coop == pytest.approx(0.4)


def test_hand_composed_total():
    # r_i = 1, coop sum = 2, symp sum = 1, phi = theta = pi/4
    # total = 1/sqrt(2) + 0.5*2 + 0.5*1 = 2.2071...
    cfg = SvoConfig(
        phi=math.pi / 4, theta=math.pi / 4, lam=0.0,
        metric_weights={"u": 1.0}, w_av=1.0, w_hv=1.0,
    )
    neighbors = [
        PerceivedVehicle(kind="AV", distance=5.0, metrics={"u": 2.0}),
        PerceivedVehicle(kind="HV", distance=5.0, metrics={"u": 1.0}),
    ]
    out = total_reward({"u": 1.0}, neighbors, cfg)
    assert out.total == pytest.approx(1 / math.sqrt(2) + 0.5 * 2 + 0.5 * 1, abs=1e-12)


def test_decomposition_identity_random_configs():
    rng = random.Random(0)
    for _ in range(300):
        cfg = SvoConfig(
            phi=rng.uniform(0, math.pi / 2),
            theta=rng.uniform(0, math.pi / 2),
            lam=rng.uniform(0, 2),
            mu=rng.uniform(0, 2),
        )
        neighbors = [
            PerceivedVehicle(
                kind=rng.choice(["AV", "HV"]),
                distance=rng.uniform(1, 99),
                metrics={"speed": rng.uniform(0, 1), "crash": rng.choice([0.0, 1.0])},
                mission_gated=rng.random() < 0.3,
            )
            for _ in range(rng.randrange(0, 6))
        ]
        ego = {"speed": rng.uniform(0, 1), "crash": 0.0}
        out = total_reward(ego, neighbors, cfg)
        assert out.total == out.r_ego + out.r_coop + out.r_symp


def test_perception_locality():
    cfg = SvoConfig()
    ego = {"speed": 0.5, "crash": 0.0}
    near = _neighbors([0.3], [0.2], distance=50.0)
    far = near + [
        PerceivedVehicle(
            kind="HV",
            distance=cfg.perception_range + 1.0,
            metrics={"speed": 1.0, "crash": 0.0},
            mission_gated=True,
        )
    ]
    assert total_reward(ego, near, cfg) == total_reward(ego, far, cfg)


def test_mission_contribution_lands_in_matching_component():
    cfg = SvoConfig(phi=math.pi / 2, theta=0.0, mu=0.0, lam=0.0)
    # theta = 0 nulls cooperation entirely; a gated HV mission pays sympathy
    gated_hv = [
        PerceivedVehicle(kind="HV", distance=10.0, metrics={}, mission_gated=True)
    ]
    out = total_reward({}, gated_hv, cfg)
    assert out.r_coop == 0.0
    assert out.r_symp == pytest.approx(cfg.w_mission)
    assert out.r_mission_contrib == pytest.approx(cfg.w_mission)


def test_angle_bounds_validated():
    with pytest.raises(ValueError):
        SvoConfig(phi=-0.1)
    with pytest.raises(ValueError):
        SvoConfig(theta=math.pi)
    with pytest.raises(ValueError):
        SvoConfig(lam=-1.0)


def test_egoistic_copy_helper():
    cfg = SvoConfig(phi=math.pi / 4)
    assert cfg.egoistic().phi == 0.0
    assert cfg.egoistic().theta == cfg.theta
