"""Forward-rollout safety scoring and safe-action substitution.

The safety score of a candidate action is the earliest projected collision
time over a short deterministic rollout: the ego executes the candidate,
human drivers follow their models, and the remaining autonomous vehicles hold
Idle (their concurrent decisions are unknown under decentralized execution).
Any actual overlap inside the horizon scores 0; otherwise the score is the
minimum over rollout steps of (elapsed time + instantaneous gap / closing
speed), which for uniform closing equals the familiar time-to-collision.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np

from .road import (
    AV,
    Command,
    MetaAction,
    SimParams,
    VehicleState,
    WorldState,
    apply_meta_action,
    lateral_conflict,
    step,
)


@dataclass(frozen=True)
class SafetyConfig:
    safe_th: float = 1.5   # seconds; score below this is unsafe (0 disables)
    n_steps: int = 15      # planning horizon in simulation steps
    r_unsafe: float = -1.0

    def __post_init__(self):
        if self.safe_th < 0:
            raise ValueError("safe_th must be >= 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def instantaneous_ttc(ego: VehicleState, other: VehicleState, layout) -> float:
    """Gap over closing speed toward one neighbor; inf when not closing, 0 on overlap."""
    if not lateral_conflict(ego, other, layout):
        return math.inf
    if ego.l <= other.l:
        gap = other.rear() - ego.front()
        closing = ego.v - other.v
    else:
        gap = ego.rear() - other.front()
        closing = other.v - ego.v
    if gap <= 0:
        return 0.0
    if closing <= 0:
        return math.inf
    return gap / closing


def _min_ttc(state: WorldState, ego_id: int) -> float:
    ego = state.vehicle(ego_id)
    best = math.inf
    for other in state.vehicles:
        if other.id == ego_id:
            continue
        best = min(best, instantaneous_ttc(ego, other, state.layout))
    return best


def safety_score(
    world: WorldState,
    ego_id: int,
    action: MetaAction,
    cfg: SafetyConfig | None = None,
    sim: SimParams | None = None,
) -> float:
    """Minimum projected time-to-collision for the ego taking ``action``.

    The caller's world is never mutated; stepping is a pure function and the
    rollout works on fresh states throughout.
    """
    cfg = cfg or SafetyConfig()
    sim = sim or SimParams()
    command = apply_meta_action(world, ego_id, action, sim)

    # the pre-action state is deliberately not scored: the score measures the
    # world as it unfolds under the candidate action, so braking out of a
    # tight spot can earn a higher score than holding course
    score = math.inf
    state = world
    for k in range(cfg.n_steps):
        commands = {ego_id: command}
        for veh in state.avs():
            if veh.id == ego_id or veh.crashed:
                continue
            # peers hold Idle: keep their current targets
            commands[veh.id] = Command(
                target_speed=veh.target_speed if veh.target_speed is not None else veh.v,
                target_lane=veh.target_lane if veh.target_lane is not None else veh.lane_index,
            )
        state, events = step(state, commands, sim.dt, sim)
        ego = state.vehicle(ego_id)
        if ego.crashed or any(ego_id in e.vehicle_ids for e in events):
            return 0.0
        ttc = _min_ttc(state, ego_id)
        if ttc == 0.0:
            return 0.0
        elapsed = (k + 1) * sim.dt
        score = min(score, elapsed + ttc)
    return score


def is_unsafe(score: float, cfg: SafetyConfig) -> bool:
    return score < cfg.safe_th


def safe_action(
    world: WorldState,
    ego_id: int,
    q_values: np.ndarray | None,
    mode: str,
    cfg: SafetyConfig | None = None,
    sim: SimParams | None = None,
    rng: random.Random | None = None,
    epsilon: float = 0.0,
) -> tuple[MetaAction, list[tuple[MetaAction, float]]]:
    """Pick a safe action, substituting the policy's choice only when it must.

    Candidates start as the full action set. In test mode the highest-Q
    remaining action is tried; in train mode the exploration policy (epsilon-
    greedy restricted to the remaining set) draws the next candidate. Unsafe
    candidates are removed and returned with their scores so the trainer can
    inject them into the replay buffer. If everything is unsafe the action
    with the highest safety score is returned.
    """
    cfg = cfg or SafetyConfig()
    if mode not in ("train", "test"):
        raise ValueError("mode must be 'train' or 'test'")
    if mode == "train" and rng is None:
        rng = random.Random(0)

    remaining = list(MetaAction)
    rejected: list[tuple[MetaAction, float]] = []
    scores: dict[MetaAction, float] = {}

    while remaining:
        if mode == "train" and rng.random() < epsilon:
            candidate = remaining[rng.randrange(len(remaining))]
        else:
            if q_values is None:
                raise ValueError("q_values required for greedy selection")
            candidate = max(remaining, key=lambda a: (q_values[int(a)], -int(a)))
        score = safety_score(world, ego_id, candidate, cfg, sim)
        scores[candidate] = score
        if not is_unsafe(score, cfg):
            return candidate, rejected
        rejected.append((candidate, score))
        remaining.remove(candidate)

    # everything unsafe: fall back to the least dangerous action overall
    fallback = max(MetaAction, key=lambda a: (scores[a], -int(a)))
    return fallback, rejected


def inject_unsafe(replay, state_stack: np.ndarray, action: MetaAction, cfg: SafetyConfig) -> None:
    """Store a masked unsafe pair with a terminal next state.

    The terminal marker makes the learning target exactly r_unsafe, with no
    bootstrap term.
    """
    replay.push(state_stack, int(action), cfg.r_unsafe, None)
