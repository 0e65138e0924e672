"""Road geometry, vehicle kinematics and the deterministic simulation step.

A WorldState is a value: ``step`` builds a new state without touching its
input, so worlds can be cloned, rolled forward speculatively (the safety
shield does this) and stepped from parallel episode workers.

Conventions:
  - lanes are indexed 0 (rightmost) upward; the ramp is lane -1,
  - ``l`` is the longitudinal Frenet coordinate in meters along the road,
  - lateral position y = lane_index * lane_width + lat_offset,
  - two vehicles conflict laterally when |y1 - y2| < lane_width, and collide
    when additionally their longitudinal extents overlap.
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import dataclass, replace, asdict
from enum import IntEnum

from .drivers import (
    BehaviorParams,
    idm_acceleration,
    mobil_lane_change,
    resolve_behavior,
)

RAMP_LANE = -1

AV = "AV"
HV = "HV"


class MetaAction(IntEnum):
    """The five high-level actions available to an autonomous agent."""

    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    ACCELERATE = 3
    DECELERATE = 4


class PlacementError(RuntimeError):
    """Raised when the requested traffic does not fit on the layout."""


@dataclass(frozen=True)
class RoadLayout:
    """Straight multi-lane highway with one merge or exit ramp."""

    n_lanes: int = 2
    lane_width: float = 4.0
    total_length: float = 520.0
    ramp_kind: str = "merge"  # "merge" | "exit"
    attach_start: float = 200.0
    attach_end: float = 320.0
    ramp_approach: float = 120.0  # drivable ramp length before attach_start (merge)

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if not (0 <= self.attach_start < self.attach_end <= self.total_length):
            raise ValueError("ramp attach interval must lie within [0, total_length]")
        if self.ramp_kind not in ("merge", "exit"):
            raise ValueError("ramp_kind must be 'merge' or 'exit'")

    def lane_y(self, lane_index: int) -> float:
        return lane_index * self.lane_width

    def valid_highway_lane(self, lane_index: int) -> bool:
        return 0 <= lane_index < self.n_lanes

    def ramp_drivable(self, l: float) -> bool:
        if self.ramp_kind == "merge":
            return self.attach_start - self.ramp_approach <= l <= self.attach_end
        return self.attach_start <= l <= self.total_length

    def in_attach_window(self, l: float) -> bool:
        return self.attach_start <= l <= self.attach_end


@dataclass(frozen=True)
class SimParams:
    """Simulation-step constants; every value is recorded in run metadata."""

    dt: float = 0.1
    delta_v: float = 2.0          # Accelerate/Decelerate target-speed increment [m/s]
    lane_change_duration: float = 1.0
    a_cap: float = 5.0            # AV longitudinal tracking acceleration bound
    v_max: float = 30.0
    tau_track: float = 0.4        # AV speed-tracking time constant [s]
    horizon_steps: int = 400
    mobil_period: int = 10        # HV lane-change evaluation period in steps
    mission_window_steps: int = 10  # recency window for mission-reward gating


@dataclass(frozen=True)
class VehicleState:
    """Pose, Frenet coordinates, speed and identity of one vehicle."""

    id: int
    kind: str                      # AV | HV
    l: float
    lane_index: int
    v: float
    a: float = 0.0
    lat_offset: float = 0.0
    length: float = 5.0
    behavior_id: str | None = None  # HV only
    mission: str = "none"          # none | merge | exit
    crashed: bool = False
    # AV command targets (None for HVs)
    target_speed: float | None = None
    target_lane: int | None = None
    # lane-change blend bookkeeping: steps remaining, 0 = not blending
    lc_steps_left: int = 0
    # episode bookkeeping
    distance: float = 0.0
    mission_done: bool = False
    mission_done_step: int = -1
    mission_failed: bool = False

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be non-negative")
        if self.length <= 0:
            raise ValueError("length must be positive")

    def y(self, layout: RoadLayout) -> float:
        return layout.lane_y(self.lane_index) + self.lat_offset

    def front(self) -> float:
        return self.l + self.length / 2.0

    def rear(self) -> float:
        return self.l - self.length / 2.0

    @property
    def changing_lane(self) -> bool:
        return self.lc_steps_left > 0


@dataclass(frozen=True)
class Command:
    """Low-level command produced from a meta-action."""

    target_speed: float
    target_lane: int


@dataclass(frozen=True)
class CollisionEvent:
    step_index: int
    vehicle_ids: tuple[int, int]


@dataclass(frozen=True)
class WorldState:
    time: float
    step_index: int
    vehicles: tuple[VehicleState, ...]
    layout: RoadLayout
    rng_seed: int

    def vehicle(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise KeyError(f"no vehicle with id {vehicle_id}")

    def avs(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.kind == AV]

    def hvs(self) -> list[VehicleState]:
        return [v for v in self.vehicles if v.kind == HV]

    def mission_vehicle(self) -> VehicleState | None:
        for v in self.vehicles:
            if v.mission != "none":
                return v
        return None


def serialize_world(state: WorldState) -> bytes:
    """Canonical byte serialization used for determinism checks."""
    payload = {
        "time": state.time,
        "step_index": state.step_index,
        "rng_seed": state.rng_seed,
        "layout": asdict(state.layout),
        "vehicles": [asdict(v) for v in state.vehicles],
    }
    return json.dumps(payload, sort_keys=True).encode()


def lateral_conflict(a: VehicleState, b: VehicleState, layout: RoadLayout) -> bool:
    return abs(a.y(layout) - b.y(layout)) < layout.lane_width


def rectangles_overlap(a: VehicleState, b: VehicleState, layout: RoadLayout) -> bool:
    if not lateral_conflict(a, b, layout):
        return False
    return a.rear() < b.front() and b.rear() < a.front()


def leader_of(
    state: WorldState, ego: VehicleState
) -> tuple[VehicleState | None, float]:
    """Nearest laterally-conflicting vehicle ahead and the bumper gap to it."""
    best: VehicleState | None = None
    best_gap = math.inf
    for other in state.vehicles:
        if other.id == ego.id:
            continue
        if not lateral_conflict(ego, other, state.layout):
            continue
        gap = other.rear() - ego.front()
        if gap >= 0 and gap < best_gap:
            best, best_gap = other, gap
    return best, best_gap


def follower_of(
    state: WorldState, ego: VehicleState, lane_index: int
) -> tuple[VehicleState | None, float]:
    """Nearest vehicle behind ego in the given lane, with bumper gap."""
    best: VehicleState | None = None
    best_gap = math.inf
    for other in state.vehicles:
        if other.id == ego.id or other.lane_index != lane_index:
            continue
        gap = ego.rear() - other.front()
        if gap >= 0 and gap < best_gap:
            best, best_gap = other, gap
    return best, best_gap


# ---------------------------------------------------------------------------
# scenario construction


def _sample_behavior(rng: random.Random, mix: dict[str, float]) -> str:
    labels = sorted(mix)
    weights = [mix[k] for k in labels]
    return rng.choices(labels, weights=weights, k=1)[0]


def _validate_mix(mix: dict[str, float]) -> None:
    if not mix:
        raise ValueError("behavior_mix must not be empty")
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"behavior_mix must sum to 1, got {total}")
    for label in mix:
        resolve_behavior(label)  # raises on unknown label


def build_world(
    kind: str,
    n_av: int,
    n_hv: int,
    behavior_mix: dict[str, float],
    seed: int,
    layout: RoadLayout | None = None,
    sim: SimParams | None = None,
    with_mission: bool = True,
) -> WorldState:
    """Low-level world builder; allows AV-free worlds for HV-only rollouts.

    Placement is fully determined by the seed. Highway vehicles are placed
    lane by lane with bumper gaps of at least the largest standstill distance
    d0 among the behaviors present, plus seeded jitter.
    """
    if kind not in ("merge", "exit"):
        raise ValueError("scenario kind must be 'merge' or 'exit'")
    if n_av < 0 or n_hv < 0:
        raise ValueError("vehicle counts must be non-negative")
    _validate_mix(behavior_mix)
    sim = sim or SimParams()
    if layout is None:
        layout = RoadLayout(ramp_kind=kind)
    elif layout.ramp_kind != kind:
        layout = replace(layout, ramp_kind=kind)

    rng = random.Random(seed)
    vehicles: list[VehicleState] = []
    next_id = 0

    d0_floor = max(
        resolve_behavior(label).idm.d0 for label in behavior_mix
    )
    length = 5.0
    headway_s = 0.7  # placement headway per m/s of follower speed

    mission_is_av = with_mission and n_hv == 0 and n_av > 0

    span_start = 20.0
    span_end = layout.total_length - 40.0
    lane_cursor = [span_start for _ in range(layout.n_lanes)]
    lane_order = list(range(layout.n_lanes))

    # mission vehicle: an extra HV when human traffic is present, otherwise
    # the first AV takes the mission itself
    if with_mission and not mission_is_av:
        if kind == "merge":
            m_l = layout.attach_start - layout.ramp_approach + 30.0
            m_lane = RAMP_LANE
        else:
            m_l = 40.0
            m_lane = min(1, layout.n_lanes - 1)
            lane_cursor[m_lane] = m_l + length + d0_floor + headway_s * 24.0
        vehicles.append(
            VehicleState(
                id=next_id,
                kind=HV,
                l=m_l,
                lane_index=m_lane,
                v=min(20.0, sim.v_max),
                behavior_id=_sample_behavior(rng, behavior_mix),
                mission=kind,
            )
        )
        next_id += 1

    # interleave AVs and HVs along the highway lanes
    kinds = [AV] * n_av + [HV] * n_hv
    rng.shuffle(kinds)

    for i, k in enumerate(kinds):
        lane = lane_order[i % layout.n_lanes]
        jitter = rng.uniform(0.0, 10.0)
        pos = lane_cursor[lane] + jitter
        if pos > span_end:
            raise PlacementError(
                f"cannot place {n_av} AVs + {n_hv} HVs on a "
                f"{layout.total_length:.0f} m layout: lane {lane} overflows at "
                f"{pos:.1f} m (usable span ends at {span_end:.1f} m)"
            )
        speed = rng.uniform(15.0, min(24.0, sim.v_max))
        mission = "none"
        if mission_is_av and k == AV and not any(
            v.mission != "none" for v in vehicles
        ):
            mission = kind
            if kind == "merge":
                # AV mission vehicle starts on the ramp instead
                vehicles.append(
                    VehicleState(
                        id=next_id, kind=AV,
                        l=layout.attach_start - layout.ramp_approach + 30.0,
                        lane_index=RAMP_LANE, v=min(20.0, sim.v_max),
                        mission=kind,
                        target_speed=min(20.0, sim.v_max),
                        target_lane=RAMP_LANE,
                    )
                )
                next_id += 1
                continue
        veh = VehicleState(
            id=next_id,
            kind=k,
            l=pos,
            lane_index=lane,
            v=speed,
            behavior_id=_sample_behavior(rng, behavior_mix) if k == HV else None,
            mission=mission,
            target_speed=speed if k == AV else None,
            target_lane=lane if k == AV else None,
        )
        vehicles.append(veh)
        next_id += 1
        # this vehicle will follow whoever lands in the slot ahead; reserve a
        # standstill gap plus a headway scaled by its own (follower) speed
        lane_cursor[lane] = pos + length + d0_floor + headway_s * speed

    world = WorldState(
        time=0.0,
        step_index=0,
        vehicles=tuple(vehicles),
        layout=layout,
        rng_seed=seed,
    )
    _assert_no_overlap(world)
    return world


def _assert_no_overlap(state: WorldState) -> None:
    vs = state.vehicles
    for i in range(len(vs)):
        for j in range(i + 1, len(vs)):
            if rectangles_overlap(vs[i], vs[j], state.layout):
                raise PlacementError(
                    f"vehicles {vs[i].id} and {vs[j].id} overlap at t=0"
                )


def build_scenario(
    kind: str,
    n_av: int,
    n_hv: int,
    behavior_mix: dict[str, float],
    seed: int,
    layout: RoadLayout | None = None,
    sim: SimParams | None = None,
) -> WorldState:
    """Build a deterministic mixed-traffic scenario with one mission vehicle."""
    if n_av < 1:
        raise ValueError("build_scenario requires at least one AV")
    return build_world(kind, n_av, n_hv, behavior_mix, seed, layout, sim)


# ---------------------------------------------------------------------------
# meta-actions


def apply_meta_action(
    state: WorldState, vehicle_id: int, action: MetaAction, sim: SimParams | None = None
) -> Command:
    """Convert a meta-action into a (target_speed, target_lane) command.

    Clamping handles every edge: speeds stay in [0, v_max], lanes stay on the
    highway except that a vehicle with an exit mission may target the ramp
    inside the attach window.
    """
    sim = sim or SimParams()
    veh = state.vehicle(vehicle_id)
    if veh.kind != AV:
        raise ValueError(f"vehicle {vehicle_id} is not an AV")
    if veh.crashed:
        raise ValueError(f"vehicle {vehicle_id} has crashed")

    # speed adjustments apply relative to the current speed so that repeated
    # Decelerate commands keep braking even when the old target is stale
    ts = veh.target_speed if veh.target_speed is not None else veh.v
    tl = veh.lane_index

    if action == MetaAction.ACCELERATE:
        ts = min(veh.v + sim.delta_v, sim.v_max)
    elif action == MetaAction.DECELERATE:
        ts = max(veh.v - sim.delta_v, 0.0)
    elif action == MetaAction.LANE_LEFT:
        tl = veh.lane_index + 1
    elif action == MetaAction.LANE_RIGHT:
        tl = veh.lane_index - 1

    lane_floor = 0
    if (
        veh.mission == "exit"
        and not veh.mission_done
        and state.layout.ramp_kind == "exit"
        and state.layout.in_attach_window(veh.l)
    ):
        lane_floor = RAMP_LANE
    if veh.lane_index == RAMP_LANE:
        # on the ramp: may only merge left into lane 0 (inside the window)
        lane_floor = RAMP_LANE
        ceiling = 0 if state.layout.in_attach_window(veh.l) else RAMP_LANE
        tl = max(lane_floor, min(tl, ceiling))
    else:
        tl = max(lane_floor, min(tl, state.layout.n_lanes - 1))
    return Command(target_speed=ts, target_lane=tl)


# ---------------------------------------------------------------------------
# stepping


def _idm_hard_cap(p: BehaviorParams) -> float:
    return 2.0 * p.idm.a_des


def _hv_acceleration(state: WorldState, veh: VehicleState) -> float:
    p = resolve_behavior(veh.behavior_id or "default")
    leader, gap = leader_of(state, veh)
    candidates = []
    if leader is None or gap == math.inf:
        candidates.append(idm_acceleration(veh.v, math.inf, 0.0, p.idm))
    else:
        gap = max(gap, 1e-3)
        candidates.append(
            idm_acceleration(veh.v, gap, veh.v - leader.v, p.idm, _idm_hard_cap(p))
        )
    if veh.lane_index == RAMP_LANE and state.layout.ramp_kind == "merge":
        # brake against the end of the acceleration lane
        wall_gap = max(state.layout.attach_end - veh.front(), 1e-3)
        candidates.append(
            idm_acceleration(veh.v, wall_gap, veh.v, p.idm, _idm_hard_cap(p))
        )
    return min(candidates)


def _av_acceleration(veh: VehicleState, sim: SimParams) -> float:
    target = veh.target_speed if veh.target_speed is not None else veh.v
    accel = (target - veh.v) / sim.tau_track
    return max(-sim.a_cap, min(sim.a_cap, accel))


def _hypothetical(veh: VehicleState, lane: int) -> VehicleState:
    return replace(veh, lane_index=lane, lat_offset=0.0, lc_steps_left=0)


def target_lane_blocked(
    state: WorldState, veh: VehicleState, target_lane: int, margin: float = 2.0
) -> bool:
    """True when a vehicle occupies the destination slot side-by-side.

    Human drivers never begin a change into a longitudinally overlapping
    vehicle; autonomous vehicles are allowed to try (the safety shield and the
    learned policy are responsible for them).
    """
    ty = state.layout.lane_y(target_lane)
    for other in state.vehicles:
        if other.id == veh.id:
            continue
        if abs(other.y(state.layout) - ty) >= state.layout.lane_width:
            continue
        if other.rear() - margin < veh.front() and veh.rear() < other.front() + margin:
            return True
    return False


def _accel_with_leader(
    state: WorldState, veh: VehicleState, p: BehaviorParams
) -> float:
    leader, gap = leader_of(state, veh)
    if leader is None or gap == math.inf:
        return idm_acceleration(veh.v, math.inf, 0.0, p.idm)
    return idm_acceleration(
        veh.v, max(gap, 1e-3), veh.v - leader.v, p.idm, _idm_hard_cap(p)
    )


def _mobil_wants_change(
    state: WorldState, veh: VehicleState, target_lane: int, p: BehaviorParams
) -> bool:
    """Full MOBIL evaluation of a candidate lane for a human driver."""
    if target_lane_blocked(state, veh, target_lane):
        return False
    ego_now = _accel_with_leader(state, veh, p)
    ego_after = _accel_with_leader(state, _hypothetical(veh, target_lane), p)

    def follower_accels(lane: int, ego_in_lane: bool):
        fol, _ = follower_of(state, veh, lane)
        if fol is None:
            return 0.0, 0.0
        fp = resolve_behavior(fol.behavior_id or "default")
        before = _accel_with_leader(state, fol, fp)
        if ego_in_lane:
            gap = max(veh.rear() - fol.front(), 1e-3)
            after = idm_acceleration(
                fol.v, gap, fol.v - veh.v, fp.idm, _idm_hard_cap(fp)
            )
        else:
            # ego leaves the lane: follower's new leader is ego's old leader
            without = replace(
                state,
                vehicles=tuple(v for v in state.vehicles if v.id != veh.id),
            )
            after = _accel_with_leader(without, fol, fp)
        return after, before

    a_n_new, a_n = follower_accels(target_lane, ego_in_lane=True)
    a_o_new, a_o = follower_accels(veh.lane_index, ego_in_lane=False)
    return mobil_lane_change(ego_after, ego_now, a_n_new, a_n, a_o_new, a_o, p.mobil)


def _mission_change_safe(
    state: WorldState, veh: VehicleState, target_lane: int, p: BehaviorParams
) -> bool:
    """Safety-criterion-only gate used by a mission vehicle's forced change."""
    if target_lane_blocked(state, veh, target_lane):
        return False
    fol, _ = follower_of(state, veh, target_lane)
    if fol is not None:
        fp = resolve_behavior(fol.behavior_id or "default")
        gap = veh.rear() - fol.front()
        if gap <= 0:
            return False
        a_n_new = idm_acceleration(
            fol.v, gap, fol.v - veh.v, fp.idm, _idm_hard_cap(fp)
        )
        if a_n_new <= -p.mobil.b_safe:
            return False
    ego_after = _accel_with_leader(state, _hypothetical(veh, target_lane), p)
    return ego_after > -p.mobil.b_safe


def _hv_lateral_target(state: WorldState, veh: VehicleState) -> int | None:
    """Lane the HV wants to move to this tick, or None."""
    layout = state.layout
    p = resolve_behavior(veh.behavior_id or "default")

    if veh.mission != "none" and not veh.mission_done:
        if veh.mission == "merge" and veh.lane_index == RAMP_LANE:
            if layout.in_attach_window(veh.l) and _mission_change_safe(
                state, veh, 0, p
            ):
                return 0
            return None
        if veh.mission == "exit" and veh.lane_index != RAMP_LANE:
            target = veh.lane_index - 1
            if target == RAMP_LANE and not layout.in_attach_window(veh.l):
                return None
            if _mission_change_safe(state, veh, target, p):
                return target
            return None

    # ordinary MOBIL between highway lanes only
    if veh.lane_index == RAMP_LANE:
        return None
    for target in (veh.lane_index + 1, veh.lane_index - 1):
        if not layout.valid_highway_lane(target):
            continue
        if _mobil_wants_change(state, veh, target, p):
            return target
    return None


def step(
    state: WorldState,
    av_commands: dict[int, Command],
    dt: float | None = None,
    sim: SimParams | None = None,
) -> tuple[WorldState, list[CollisionEvent]]:
    """Advance the world one step; returns the new state and collision events.

    HV accelerations come from the driver models, AVs track their commanded
    speed with bounded proportional control, and lane changes execute as
    fixed-duration lateral blends. Collisions are events, not errors; both
    vehicles involved are flagged crashed and frozen in place.
    """
    sim = sim or SimParams()
    dt = sim.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    layout = state.layout
    lc_steps = max(1, round(sim.lane_change_duration / dt))

    for vid in av_commands:
        veh = state.vehicle(vid)
        if veh.kind != AV or veh.crashed:
            raise ValueError(f"command issued to non-live AV {vid}")

    new_vehicles: list[VehicleState] = []
    for veh in state.vehicles:
        if veh.crashed:
            new_vehicles.append(veh)
            continue

        veh_cmd = av_commands.get(veh.id)
        if veh_cmd is not None:
            veh = replace(
                veh, target_speed=veh_cmd.target_speed, target_lane=veh_cmd.target_lane
            )

        # longitudinal acceleration
        if veh.kind == HV:
            accel = _hv_acceleration(state, veh)
        else:
            accel = _av_acceleration(veh, sim)

        # respect speed bounds exactly: clamp the effective acceleration so the
        # recorded a reproduces the motion (kinematic consistency invariant);
        # the final max/min guards absorb sub-epsilon rounding of v + a*dt
        accel = max(accel, -veh.v / dt)
        accel = min(accel, (sim.v_max - veh.v) / dt)

        new_l = veh.l + veh.v * dt + 0.5 * accel * dt * dt
        new_v = min(max(veh.v + accel * dt, 0.0), sim.v_max)
        moved = new_l - veh.l

        # lateral blend: in progress, or starting this step
        lane_index = veh.lane_index
        lat = veh.lat_offset
        steps_left = veh.lc_steps_left
        per_step = layout.lane_width / lc_steps
        if steps_left > 0:
            lat = lat - math.copysign(min(per_step, abs(lat)), lat)
            steps_left -= 1
            if steps_left == 0:
                lat = 0.0
        else:
            desired: int | None = None
            if veh.kind == AV:
                tl = veh.target_lane if veh.target_lane is not None else lane_index
                if tl != lane_index:
                    desired = lane_index + (1 if tl > lane_index else -1)
            else:
                due = (state.step_index + veh.id * 3) % sim.mobil_period == 0
                if due:
                    desired = _hv_lateral_target(state, veh)
            if desired is not None and desired != lane_index:
                ok = layout.valid_highway_lane(desired) or (
                    desired == RAMP_LANE and layout.ramp_drivable(veh.l)
                )
                if ok:
                    # the first lateral increment applies immediately so the
                    # whole blend spans exactly lane_change_duration
                    full = layout.lane_y(lane_index) - layout.lane_y(desired)
                    lane_index = desired
                    steps_left = lc_steps - 1
                    lat = full - math.copysign(min(per_step, abs(full)), full)
                    if steps_left == 0:
                        lat = 0.0

        veh = replace(
            veh,
            l=new_l,
            v=new_v,
            a=accel,
            lane_index=lane_index,
            lat_offset=lat,
            lc_steps_left=steps_left,
            distance=veh.distance + moved,
        )

        # mission bookkeeping
        if veh.mission != "none" and not veh.mission_done and not veh.mission_failed:
            done = False
            failed = False
            if veh.mission == "merge":
                done = veh.lane_index >= 0 and not veh.changing_lane
                failed = veh.lane_index == RAMP_LANE and veh.front() >= layout.attach_end
            elif veh.mission == "exit":
                done = veh.lane_index == RAMP_LANE and not veh.changing_lane
                failed = veh.lane_index >= 0 and veh.rear() > layout.attach_end
            if done:
                veh = replace(
                    veh, mission_done=True, mission_done_step=state.step_index + 1
                )
            elif failed:
                veh = replace(veh, mission_failed=True)

        new_vehicles.append(veh)

    # collision detection on the advanced poses
    events: list[CollisionEvent] = []
    crashed_now: set[int] = set()
    for i in range(len(new_vehicles)):
        for j in range(i + 1, len(new_vehicles)):
            a, b = new_vehicles[i], new_vehicles[j]
            if a.crashed and b.crashed:
                continue
            if rectangles_overlap(a, b, layout):
                events.append(
                    CollisionEvent(state.step_index + 1, (a.id, b.id))
                )
                crashed_now.update((a.id, b.id))
    if crashed_now:
        # impact-step kinematics are preserved; the pose freezes from the
        # next step onward (crashed is absorbing)
        new_vehicles = [
            replace(v, crashed=True, lc_steps_left=0)
            if v.id in crashed_now and not v.crashed
            else v
            for v in new_vehicles
        ]

    new_state = WorldState(
        time=state.time + dt,
        step_index=state.step_index + 1,
        vehicles=tuple(new_vehicles),
        layout=layout,
        rng_seed=state.rng_seed,
    )
    return new_state, events


# ---------------------------------------------------------------------------
# trajectory export

TRAJECTORY_HEADER = ["step", "t", "id", "kind", "lane", "l", "v", "a", "crashed"]


def trajectory_rows(state: WorldState) -> list[list]:
    rows = []
    for v in state.vehicles:
        rows.append(
            [
                state.step_index,
                repr(state.time),
                v.id,
                v.kind,
                v.lane_index,
                repr(v.l),
                repr(v.v),
                repr(v.a),
                int(v.crashed),
            ]
        )
    return rows


def write_trajectory_csv(
    states: list[WorldState], path, config_hash: str = "", seed: int | None = None
) -> None:
    """One row per (step, vehicle); fixed header, optional provenance comment."""
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash} seed={seed}\n")
    writer = csv.writer(buf)
    writer.writerow(TRAJECTORY_HEADER)
    for st in states:
        writer.writerows(trajectory_rows(st))
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())
