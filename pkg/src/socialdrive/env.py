"""Episode runner tying the road world to perception and rewards.

One environment step = one meta-action decision for every live agent,
executed over ``decision_period`` simulation substeps. Observation stacks,
decomposed rewards and termination bookkeeping are maintained here; policy
and shield logic live with the caller so that training and evaluation can
shield differently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .perception import ObservationStack, PerceptionConfig, rasterize
from .rewards import PerceivedVehicle, RewardBreakdown, SvoConfig, total_reward
from .road import (
    CollisionEvent,
    MetaAction,
    RoadLayout,
    SimParams,
    VehicleState,
    WorldState,
    apply_meta_action,
    build_world,
    step,
)


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "merge"
    n_av: int = 2
    n_hv: int = 6
    behavior_mix: dict = field(
        default_factory=lambda: {
            "aggressive": 1 / 3,
            "moderate": 1 / 3,
            "conservative": 1 / 3,
        }
    )
    with_mission: bool = True
    decision_period: int = 10  # simulation substeps per meta-action
    layout: RoadLayout | None = None
    sim: SimParams = field(default_factory=SimParams)


def behavior_mix_for(label: str) -> dict[str, float]:
    """Translate a behavior setting name into a sampling distribution."""
    if label == "mix":
        return {"aggressive": 1 / 3, "moderate": 1 / 3, "conservative": 1 / 3}
    return {label: 1.0}


def frenet_distance(a: VehicleState, b: VehicleState, layout: RoadLayout) -> float:
    """Path distance along the lane graph: longitudinal separation plus a
    lane-width penalty per lane of lateral offset."""
    return abs(a.l - b.l) + abs(a.y(layout) - b.y(layout))


class TrafficEnv:
    """Deterministic mixed-traffic episode with per-agent observations."""

    def __init__(
        self,
        scenario: ScenarioConfig,
        perception: PerceptionConfig | None = None,
        svo: SvoConfig | None = None,
        svo_overrides: dict[int, SvoConfig] | None = None,
        seed: int = 0,
        record_states: bool = False,
    ):
        self.scenario = scenario
        self.perception = perception or PerceptionConfig()
        self.svo = svo or SvoConfig()
        self.svo_overrides = svo_overrides or {}
        self.seed = seed
        self.record_states = record_states
        self.world: WorldState | None = None
        self._stacks: dict[int, ObservationStack] = {}
        self.agent_ids: list[int] = []
        self.termination: str | None = None
        self.episode_events: list[CollisionEvent] = []
        self.state_trace: list[WorldState] = []
        self.decisions = 0

    @property
    def sim(self) -> SimParams:
        return self.scenario.sim

    def svo_for(self, agent_id: int) -> SvoConfig:
        """Per-agent SVO, with overrides keyed by fleet index (not vehicle id,
        which varies with the placement seed)."""
        if agent_id in self.agent_ids:
            idx = self.agent_ids.index(agent_id)
            if idx in self.svo_overrides:
                return self.svo_overrides[idx]
        return self.svo

    def reset(self, seed: int | None = None) -> dict[int, np.ndarray]:
        if seed is not None:
            self.seed = seed
        sc = self.scenario
        self.world = build_world(
            sc.kind,
            sc.n_av,
            sc.n_hv,
            sc.behavior_mix,
            self.seed,
            layout=sc.layout,
            sim=sc.sim,
            with_mission=sc.with_mission,
        )
        self.agent_ids = [v.id for v in self.world.avs()]
        self.termination = None
        self.episode_events = []
        self.state_trace = [self.world] if self.record_states else []
        self.decisions = 0
        self._stacks = {}
        obs = {}
        for aid in self.agent_ids:
            stack = ObservationStack(self.perception.stack_depth)
            stack.reset(rasterize(self.world, aid, self.perception))
            self._stacks[aid] = stack
            obs[aid] = stack.tensor()
        return obs

    def agent_crashed(self, agent_id: int) -> bool:
        return self.world.vehicle(agent_id).crashed

    def observe(self, agent_id: int) -> np.ndarray:
        return self._stacks[agent_id].tensor()

    def _reward_for(self, agent_id: int) -> RewardBreakdown:
        world = self.world
        ego = world.vehicle(agent_id)
        sim = self.sim
        cfg = self.svo_for(agent_id)
        ego_metrics = {
            "speed": ego.v / sim.v_max,
            "crash": 1.0 if ego.crashed else 0.0,
        }
        perceived = []
        for veh in world.vehicles:
            if veh.id == agent_id:
                continue
            gated = (
                veh.mission != "none"
                and veh.mission_done
                and world.step_index - veh.mission_done_step
                <= sim.mission_window_steps
            )
            perceived.append(
                PerceivedVehicle(
                    kind=veh.kind,
                    distance=frenet_distance(ego, veh, world.layout),
                    metrics={
                        "speed": veh.v / sim.v_max,
                        "crash": 1.0 if veh.crashed else 0.0,
                    },
                    mission_gated=gated,
                )
            )
        return total_reward(ego_metrics, perceived, cfg)

    def _check_termination(self, block_events: list[CollisionEvent]) -> str | None:
        world = self.world
        mission = world.mission_vehicle()
        critical = {v.id for v in world.avs()}
        if mission is not None:
            critical.add(mission.id)
        for ev in block_events:
            if critical & set(ev.vehicle_ids):
                return "crash"
        if any(world.vehicle(i).crashed for i in critical):
            return "crash"
        if mission is not None and mission.mission_done:
            return "mission_accomplished"
        if mission is not None and mission.mission_failed:
            return "mission_failed"
        if world.step_index >= self.sim.horizon_steps:
            return "horizon"
        return None

    def step(
        self, actions: dict[int, MetaAction]
    ) -> tuple[dict[int, np.ndarray], dict[int, RewardBreakdown], bool, dict]:
        if self.world is None:
            raise RuntimeError("call reset() before step()")
        if self.termination is not None:
            raise RuntimeError("episode already terminated")
        commands = {}
        for aid, action in actions.items():
            veh = self.world.vehicle(aid)
            if veh.crashed:
                continue
            commands[aid] = apply_meta_action(self.world, aid, action, self.sim)

        block_events: list[CollisionEvent] = []
        for _ in range(self.scenario.decision_period):
            live_commands = {
                aid: cmd
                for aid, cmd in commands.items()
                if not self.world.vehicle(aid).crashed
            }
            self.world, events = step(self.world, live_commands, self.sim.dt, self.sim)
            block_events.extend(events)
            if self.record_states:
                self.state_trace.append(self.world)
        self.episode_events.extend(block_events)
        self.decisions += 1

        rewards = {aid: self._reward_for(aid) for aid in self.agent_ids}
        self.termination = self._check_termination(block_events)
        done = self.termination is not None

        obs = {}
        for aid in self.agent_ids:
            veh = self.world.vehicle(aid)
            if veh.crashed:
                continue
            self._stacks[aid].push(rasterize(self.world, aid, self.perception))
            obs[aid] = self._stacks[aid].tensor()

        info = {
            "events": block_events,
            "termination": self.termination,
            "step_index": self.world.step_index,
        }
        return obs, rewards, done, info

    # episode summary helpers -------------------------------------------------

    def mission_summary(self) -> tuple[bool, bool]:
        mission = self.world.mission_vehicle()
        if mission is None:
            return False, False
        accomplished = mission.mission_done
        failed = (not accomplished) and (
            mission.mission_failed
            or (self.termination in ("horizon",) and not mission.crashed)
        )
        return accomplished, failed

    def crash_summary(self) -> tuple[bool, int]:
        """(episode crashed per the safety metric, background HV-HV events)."""
        world = self.world
        mission = world.mission_vehicle()
        critical = {v.id for v in world.avs()}
        if mission is not None:
            critical.add(mission.id)
        crashed = any(
            critical & set(ev.vehicle_ids) for ev in self.episode_events
        )
        background = sum(
            1
            for ev in self.episode_events
            if not critical & set(ev.vehicle_ids)
        )
        return crashed, background

    def av_distances(self) -> list[float]:
        return [v.distance for v in self.world.avs()]

    def mean_travel(self) -> float:
        """Mean AV distance; for AV-free worlds, mean over all vehicles."""
        dists = self.av_distances()
        if not dists:
            dists = [v.distance for v in self.world.vehicles]
        return float(np.mean(dists)) if dists else 0.0
