"""Human-driver models: IDM car following, MOBIL lane changing, behavior presets.

All functions here are pure and operate on immutable parameter bundles, so
they are safe to call from rollout workers in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


class LeaderGapError(ValueError):
    """Raised when the supplied leader gap is non-positive.

    A non-positive gap means the vehicles already overlap; collision handling
    should have caught that upstream of the car-following model.
    """


@dataclass(frozen=True)
class IdmParams:
    """Longitudinal car-following parameters.

    v0: desired speed [m/s], T0: safe time gap [s], a_max: comfortable max
    acceleration [m/s^2], a_des: comfortable deceleration [m/s^2],
    delta: acceleration exponent, d0: minimum standstill gap [m].
    """

    v0: float = 30.0
    T0: float = 1.5
    a_max: float = 1.0
    a_des: float = 1.5
    delta: float = 4.0
    d0: float = 2.0

    def __post_init__(self):
        for name in ("v0", "T0", "a_max", "a_des", "delta", "d0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive")


@dataclass(frozen=True)
class MobilParams:
    """Lane-change parameters: politeness factor, incentive threshold
    [m/s^2] and the safe braking limit imposed on the new follower [m/s^2]."""

    politeness: float = 0.5
    delta_a_threshold: float = 0.1
    b_safe: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must be in [0, 1]")
        if self.delta_a_threshold < 0:
            raise ValueError("delta_a_threshold must be >= 0")
        if self.b_safe <= 0:
            raise ValueError("b_safe must be > 0")


BEHAVIOR_LABELS = ("aggressive", "moderate", "conservative")


@dataclass(frozen=True)
class BehaviorParams:
    """A labelled IDM+MOBIL bundle describing one driver's individual traits."""

    label: str
    idm: IdmParams
    mobil: MobilParams

    def with_overrides(self, **kwargs) -> "BehaviorParams":
        """Return a copy with individual IDM/MOBIL fields replaced.

        Accepted keys are any IdmParams or MobilParams field name; used by the
        parameter sweep and the sensitivity interpolation.
        """
        idm_fields = {k: v for k, v in kwargs.items() if hasattr(self.idm, k)}
        mobil_fields = {k: v for k, v in kwargs.items() if hasattr(self.mobil, k)}
        unknown = set(kwargs) - set(idm_fields) - set(mobil_fields)
        if unknown:
            raise ValueError(f"unknown driver parameters: {sorted(unknown)}")
        return BehaviorParams(
            label=self.label,
            idm=replace(self.idm, **idm_fields),
            mobil=replace(self.mobil, **mobil_fields),
        )


# Published parameter sets. The three behavior presets share the common
# desired speed (30 m/s) and acceleration exponent (4).
_PRESETS = {
    "aggressive": BehaviorParams(
        "aggressive",
        IdmParams(v0=30.0, T0=0.5, a_max=7.0, a_des=12.0, delta=4.0, d0=1.0),
        MobilParams(politeness=0.0, delta_a_threshold=0.0, b_safe=12.0),
    ),
    "moderate": BehaviorParams(
        "moderate",
        IdmParams(v0=30.0, T0=1.0, a_max=3.0, a_des=7.0, delta=4.0, d0=2.0),
        MobilParams(politeness=0.3, delta_a_threshold=0.1, b_safe=6.0),
    ),
    "conservative": BehaviorParams(
        "conservative",
        IdmParams(v0=30.0, T0=3.0, a_max=1.0, a_des=2.0, delta=4.0, d0=6.0),
        MobilParams(politeness=1.0, delta_a_threshold=0.4, b_safe=2.0),
    ),
    "default": BehaviorParams(
        "default",
        IdmParams(v0=30.0, T0=1.5, a_max=1.0, a_des=1.5, delta=4.0, d0=2.0),
        MobilParams(politeness=0.5, delta_a_threshold=0.1, b_safe=4.0),
    ),
}


def behavior_preset(label: str) -> BehaviorParams:
    """Return the published parameter bundle for a behavior label.

    Labels: "aggressive", "moderate", "conservative", or "default" (the
    single-behavior typical parameter set).
    """
    try:
        return _PRESETS[label]
    except KeyError:
        raise ValueError(
            f"unknown behavior label {label!r}; expected one of {sorted(_PRESETS)}"
        ) from None


# Custom bundles registered by sweeps; looked up after the presets.
_REGISTRY: dict[str, BehaviorParams] = {}


def register_behavior(params: BehaviorParams, label: str | None = None) -> str:
    """Make a custom parameter bundle resolvable by label.

    Sweeps and sensitivity interpolation register their grid points here so
    the simulator can reference them through VehicleState.behavior_id.
    """
    label = label or f"custom_{len(_REGISTRY)}"
    _REGISTRY[label] = replace(params, label=label)
    return label


def resolve_behavior(label: str) -> BehaviorParams:
    if label in _PRESETS:
        return _PRESETS[label]
    if label in _REGISTRY:
        return _REGISTRY[label]
    raise ValueError(f"unknown behavior label {label!r}")


def desired_gap(v: float, closing: float, p: IdmParams) -> float:
    """Desired minimum gap d* given speed v and approach rate (v_ego - v_leader)."""
    return p.d0 + v * p.T0 + v * closing / (2.0 * math.sqrt(p.a_max * p.a_des))


def idm_acceleration(
    v: float,
    gap: float,
    closing: float,
    p: IdmParams,
    hard_decel_cap: float | None = None,
) -> float:
    """IDM longitudinal acceleration [m/s^2].

    gap is the bumper-to-bumper distance to the leader; the leaderless case is
    encoded as gap = +inf with closing = 0. The result is clamped below at
    -hard_decel_cap (default 2 * a_des) so a surprised follower cannot command
    unbounded braking.
    """
    if gap <= 0:
        raise LeaderGapError(f"leader gap must be positive, got {gap}")
    if math.isinf(gap):
        interaction = 0.0
    else:
        interaction = (desired_gap(v, closing, p) / gap) ** 2
    accel = p.a_max * (1.0 - (v / p.v0) ** p.delta - interaction)
    cap = 2.0 * p.a_des if hard_decel_cap is None else hard_decel_cap
    return max(accel, -cap)


def free_road_acceleration(v: float, p: IdmParams) -> float:
    """IDM acceleration with no leader; the gap-interaction term vanishes."""
    return idm_acceleration(v, math.inf, 0.0, p)


def mobil_lane_change(
    a_ego_new: float,
    a_ego: float,
    a_n_new: float,
    a_n: float,
    a_o_new: float,
    a_o: float,
    p: MobilParams,
) -> bool:
    """MOBIL lane-change decision.

    Inputs are IDM accelerations of the ego, the new follower (n) and the old
    follower (o), each before and after a hypothetical change (primed values).
    The change is performed iff the new follower's post-change deceleration
    stays above -b_safe and the politeness-weighted acceleration gain exceeds
    the incentive threshold. Ties break toward staying in lane.
    """
    if a_n_new <= -p.b_safe:
        return False
    gain = (a_ego_new - a_ego) + p.politeness * ((a_n_new - a_n) + (a_o_new - a_o))
    return gain > p.delta_a_threshold


def equilibrium_gap(v: float, p: IdmParams) -> float:
    """Steady-state following gap at common speed v (zero approach rate).

    Solves a = 0 in the IDM equation for the gap: d_eq = d* / sqrt(1 - (v/v0)^delta).
    """
    factor = 1.0 - (v / p.v0) ** p.delta
    if factor <= 0:
        return math.inf
    return desired_gap(v, 0.0, p) / math.sqrt(factor)
