"""SVO-parameterized decentralized reward.

The total reward of an agent splits into an egoistic term weighted by
cos(phi), a cooperation term toward other autonomous vehicles weighted by
sin(theta)sin(phi), and a sympathy term toward human drivers weighted by
cos(theta)sin(phi). Mission rewards from perceived vehicles join the
cooperation or sympathy sum according to the mission vehicle's kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .road import AV, HV


@dataclass(frozen=True)
class SvoConfig:
    """Social value orientation angles and reward shaping weights."""

    phi: float = math.pi / 4       # egoism/altruism angle, [0, pi/2]
    theta: float = math.pi / 4     # cooperation-to-sympathy ratio, [0, pi/2]
    metric_weights: dict = field(
        default_factory=lambda: {"speed": 0.4, "crash": -1.0}
    )
    w_av: float = 1.0              # importance of individual AVs
    w_hv: float = 1.0              # importance of individual HVs
    w_mission: float = 5.0         # importance of a vehicle's mission
    lam: float = 1.0               # distance exponent for neighbor terms
    mu: float = 1.0                # distance exponent for mission terms
    r_unsafe: float = -1.0         # penalty stored with masked unsafe actions
    distance_floor: float = 1.0    # meters; avoids the 1/d^lam singularity
    perception_range: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.phi <= math.pi / 2:
            raise ValueError("phi must be in [0, pi/2]")
        if not 0.0 <= self.theta <= math.pi / 2:
            raise ValueError("theta must be in [0, pi/2]")
        if self.lam < 0 or self.mu < 0:
            raise ValueError("distance exponents must be >= 0")
        if self.distance_floor <= 0:
            raise ValueError("distance_floor must be positive")

    def egoistic(self) -> "SvoConfig":
        """Copy of this config with phi = 0 (entirely selfish agent)."""
        from dataclasses import replace

        return replace(self, phi=0.0)


@dataclass(frozen=True)
class PerceivedVehicle:
    """What the reward needs to know about one neighbor."""

    kind: str                     # AV | HV
    distance: float               # meters from the ego
    metrics: dict                 # normalized traffic metrics, e.g. {"speed": 0.8, "crash": 0}
    mission_gated: bool = False   # g(v): mission accomplished in the recent window
    mission_weight: float | None = None


@dataclass(frozen=True)
class RewardBreakdown:
    """Decomposed per-step reward; total is the sum of the weighted parts."""

    r_ego: float
    r_coop: float
    r_symp: float
    r_mission_contrib: float
    total: float


def ego_utility(metrics: dict, weights: dict) -> float:
    """Weighted sum of normalized traffic metrics; crash carries negative weight."""
    return sum(weights.get(name, 0.0) * value for name, value in metrics.items())


def neighbor_term(
    utility: float, distance: float, importance: float, lam: float,
    distance_floor: float = 1.0,
) -> float:
    """Distance-discounted share of one neighbor's utility: W / d^lam * utility."""
    if distance <= 0 and distance_floor <= 0:
        raise ValueError("distance must be positive")
    d = max(distance, distance_floor)
    return importance / d**lam * utility


def mission_term(
    gated: bool, weight: float, distance: float, mu: float,
    distance_floor: float = 1.0,
) -> float:
    """Mission reward w / d^mu, paid only while the gate g(v) is open."""
    if not gated:
        return 0.0
    d = max(distance, distance_floor)
    return weight / d**mu


def total_reward(
    ego_metrics: dict,
    perceived: list[PerceivedVehicle],
    cfg: SvoConfig,
) -> RewardBreakdown:
    """Compose the decentralized reward of one agent for one step.

    Vehicles beyond the perception range are excluded from every sum, so an
    egoistic agent (phi = 0) is exactly indifferent to all of them.
    """
    r_i = ego_utility(ego_metrics, cfg.metric_weights)

    coop_sum = 0.0
    symp_sum = 0.0
    mission_sum = 0.0
    for veh in perceived:
        if veh.distance > cfg.perception_range:
            continue
        importance = cfg.w_av if veh.kind == AV else cfg.w_hv
        term = neighbor_term(
            ego_utility(veh.metrics, cfg.metric_weights),
            veh.distance,
            importance,
            cfg.lam,
            cfg.distance_floor,
        )
        m_weight = (
            veh.mission_weight if veh.mission_weight is not None else cfg.w_mission
        )
        m_term = mission_term(
            veh.mission_gated, m_weight, veh.distance, cfg.mu, cfg.distance_floor
        )
        mission_sum += m_term
        if veh.kind == AV:
            coop_sum += term + m_term
        else:
            symp_sum += term + m_term

    w_coop = math.sin(cfg.theta) * math.sin(cfg.phi)
    w_symp = math.cos(cfg.theta) * math.sin(cfg.phi)
    r_ego = math.cos(cfg.phi) * r_i
    r_coop = w_coop * coop_sum
    r_symp = w_symp * symp_sum
    return RewardBreakdown(
        r_ego=r_ego,
        r_coop=r_coop,
        r_symp=r_symp,
        r_mission_contrib=mission_sum,
        total=r_ego + r_coop + r_symp,
    )
