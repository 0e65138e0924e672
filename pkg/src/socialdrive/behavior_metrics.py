"""Traffic-graph centrality measures and driving-style classification.

Vehicles form a complete weighted graph whose edge weights are shortest
travel distances along the lane graph (longitudinal separation plus a
lane-width penalty per lane of lateral offset). Closeness centrality tracks
how central a vehicle sits in traffic; degree centrality counts every
never-seen-before slower vehicle entering the proximity radius. Style
Likelihood Estimates are the magnitudes of the centrality time derivatives;
their maxima rise with the driver's aggressiveness, which is what lets a
parameter sweep map raw IDM/MOBIL parameters onto behavior labels.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from .drivers import (
    BehaviorParams,
    behavior_preset,
    register_behavior,
)
from .env import frenet_distance
from .road import (
    HV,
    RoadLayout,
    SimParams,
    VehicleState,
    WorldState,
    step,
)


class UndefinedCentralityError(ValueError):
    """Centrality of a single-vehicle graph is undefined."""


class TraceTooShortError(ValueError):
    """Style likelihood needs at least two trace samples."""


@dataclass(frozen=True)
class TrafficGraph:
    t: float
    ids: tuple[int, ...]
    adjacency: np.ndarray          # symmetric, zero diagonal, meters
    velocities: dict[int, float]

    def index(self, vehicle_id: int) -> int:
        return self.ids.index(vehicle_id)


def traffic_graph(world: WorldState) -> TrafficGraph:
    vehicles = list(world.vehicles)
    n = len(vehicles)
    adj = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = frenet_distance(vehicles[i], vehicles[j], world.layout)
            adj[i, j] = adj[j, i] = d
    return TrafficGraph(
        t=world.time,
        ids=tuple(v.id for v in vehicles),
        adjacency=adj,
        velocities={v.id: v.v for v in vehicles},
    )


def closeness_centrality(graph: TrafficGraph, vehicle_id: int) -> float:
    """(N-1) over the summed travel distances to every other vehicle."""
    n = len(graph.ids)
    if n < 2:
        raise UndefinedCentralityError("closeness needs at least two vehicles")
    k = graph.index(vehicle_id)
    total = float(graph.adjacency[k].sum())
    return (n - 1) / total


class CentralityTrace:
    """Per-vehicle time series of closeness and degree centrality.

    The degree recurrence starts from C_D[-1] = 0 with an empty seen-set, so
    a vehicle counted once never contributes again, even if it re-enters the
    proximity radius later.
    """

    def __init__(self, vehicle_id: int, sample_dt: float):
        if sample_dt <= 0:
            raise ValueError("sample_dt must be positive")
        self.vehicle_id = vehicle_id
        self.sample_dt = sample_dt
        self.closeness: list[float] = []
        self.degree: list[float] = []
        self._seen: set[int] = set()

    def record(self, graph: TrafficGraph, r_prox: float = 50.0) -> None:
        self.closeness.append(closeness_centrality(graph, self.vehicle_id))
        self.degree.append(
            degree_centrality_update(self, graph, graph.velocities, r_prox)
        )


def degree_centrality_update(
    trace: CentralityTrace,
    graph: TrafficGraph,
    velocities: dict[int, float],
    r_prox: float = 50.0,
) -> float:
    """One step of the cumulative degree recurrence; returns the new C_D[t].

    Counts vehicles inside the proximity radius that are no faster than the
    subject and have never been counted before.
    """
    k = graph.index(trace.vehicle_id)
    vk = velocities[trace.vehicle_id]
    previous = trace.degree[-1] if trace.degree else 0.0
    new_edges = 0
    for j, other_id in enumerate(graph.ids):
        if other_id == trace.vehicle_id or other_id in trace._seen:
            continue
        d = graph.adjacency[k, j]
        if d <= 0 or d > r_prox:
            continue
        if velocities[other_id] <= vk:
            trace._seen.add(other_id)
            new_edges += 1
    return previous + new_edges


def style_likelihood(
    trace: CentralityTrace, window: float | None = None
) -> dict[str, float]:
    """Maxima of |dC_C/dt| (lane-change style) and |dC_D/dt| (overtaking style).

    Closeness uses central finite differences with one-sided stencils at the
    ends; the cumulative degree uses backward differences, seeded with the
    C_D[-1] = 0 initial condition.
    """
    n = len(trace.closeness)
    if n < 2:
        raise TraceTooShortError(f"trace has {n} samples; need at least 2")
    dt = trace.sample_dt
    cc = trace.closeness
    cd = trace.degree

    sle_l = [abs(cc[1] - cc[0]) / dt]
    for t in range(1, n - 1):
        sle_l.append(abs(cc[t + 1] - cc[t - 1]) / (2 * dt))
    sle_l.append(abs(cc[-1] - cc[-2]) / dt)

    sle_o = [abs(cd[0] - 0.0) / dt]
    for t in range(1, n):
        sle_o.append(abs(cd[t] - cd[t - 1]) / dt)

    if window is not None:
        keep = max(2, int(round(window / dt)))
        sle_l = sle_l[-keep:]
        sle_o = sle_o[-keep:]
    return {"sle_l_max": max(sle_l), "sle_o_max": max(sle_o)}


# ---------------------------------------------------------------------------
# scripted rollouts for classification


def _probe_world(
    probe_label: str, seed: int, n_background: int, sim: SimParams
) -> WorldState:
    """Straight-highway world: slower mixed-speed traffic plus one probe at the rear.

    Background drivers are moderate variants with individually drawn desired
    speeds, so faster vehicles keep encountering slower ones for the whole
    rollout instead of converging to a common speed.
    """
    rng = random.Random(seed)
    layout = RoadLayout(ramp_kind="merge", total_length=2000.0)
    moderate = behavior_preset("moderate")
    vehicles = []
    cursor = [60.0, 60.0]
    for i in range(n_background):
        lane = i % 2
        v0 = rng.uniform(14.0, 24.0)
        label = register_behavior(
            moderate.with_overrides(v0=v0), f"bg_s{seed}_{i}_v{v0:.3f}"
        )
        pos = cursor[lane] + rng.uniform(0.0, 8.0)
        speed = max(8.0, v0 - 2.0)
        vehicles.append(
            VehicleState(
                id=i, kind=HV, l=pos, lane_index=lane, v=speed, behavior_id=label
            )
        )
        cursor[lane] = pos + 5.0 + 6.0 + 0.7 * speed
    vehicles.append(
        VehicleState(
            id=n_background,
            kind=HV,
            l=8.0,
            lane_index=0,
            v=25.0,
            behavior_id=probe_label,
        )
    )
    return WorldState(
        time=0.0,
        step_index=0,
        vehicles=tuple(vehicles),
        layout=layout,
        rng_seed=seed,
    )


def centrality_rollout(
    behavior: BehaviorParams | str,
    seed: int,
    n_background: int = 12,
    steps: int = 500,
    trace_period: int = 10,
    r_prox: float = 25.0,
    sim: SimParams | None = None,
) -> tuple[dict[str, float], bool]:
    """Roll an HV-only probe world and return its style estimates.

    Returns (sle dict, crashed flag); the probe's trace is sampled every
    ``trace_period`` simulation steps.
    """
    sim = sim or SimParams()
    if isinstance(behavior, str):
        label = behavior
    else:
        label = register_behavior(behavior)
    world = _probe_world(label, seed, n_background, sim)
    probe_id = n_background
    trace = CentralityTrace(probe_id, sample_dt=trace_period * sim.dt)
    trace.record(traffic_graph(world), r_prox)
    crashed = False
    for k in range(1, steps + 1):
        world, events = step(world, {}, sim.dt, sim)
        if any(probe_id in e.vehicle_ids for e in events):
            crashed = True
            break
        if k % trace_period == 0:
            trace.record(traffic_graph(world), r_prox)
    if len(trace.closeness) < 2:
        return {"sle_l_max": 0.0, "sle_o_max": 0.0}, crashed
    return style_likelihood(trace), crashed


def preset_anchors(
    seeds: list[int], **rollout_kwargs
) -> dict[str, dict[str, float]]:
    """Mean SLE vectors of the three published presets under the given seeds."""
    anchors = {}
    for name in ("aggressive", "moderate", "conservative"):
        stats = [centrality_rollout(name, s, **rollout_kwargs)[0] for s in seeds]
        anchors[name] = {
            "sle_l_max": float(np.mean([s["sle_l_max"] for s in stats])),
            "sle_o_max": float(np.mean([s["sle_o_max"] for s in stats])),
        }
    return anchors


def classify_against_anchors(
    sle: dict[str, float], anchors: dict[str, dict[str, float]]
) -> str:
    """Nearest anchor in SLE space after per-axis min-max normalization."""
    axes = ("sle_l_max", "sle_o_max")
    spans = {}
    for ax in axes:
        values = [a[ax] for a in anchors.values()]
        lo, hi = min(values), max(values)
        spans[ax] = (lo, hi - lo if hi > lo else 1.0)

    def normalized(point):
        return [
            (point[ax] - spans[ax][0]) / spans[ax][1] for ax in axes
        ]

    target = normalized(sle)
    best, best_d = None, math.inf
    for name in sorted(anchors):
        d = sum((a - b) ** 2 for a, b in zip(normalized(anchors[name]), target))
        if d < best_d:
            best, best_d = name, d
    return best


@dataclass(frozen=True)
class SweepRow:
    grid_index: int
    seed: int
    params: dict
    sle_l_max: float
    sle_o_max: float
    label: str
    crash_storm: bool


def parameter_sweep(
    grid: list[dict],
    seeds: list[int],
    base: BehaviorParams | None = None,
    **rollout_kwargs,
) -> list[SweepRow]:
    """Map driver-model parameter sets to behavior labels.

    Each grid entry is a dict of IdmParams/MobilParams field overrides applied
    to the base bundle (the published single-behavior defaults unless given).
    Every grid point runs one rollout per seed; the label comes from the mean
    SLE vector's nearest preset anchor. Grid points whose rollouts crash in
    more than half the seeds are flagged, not dropped.
    """
    if not grid:
        raise ValueError("sweep grid must not be empty")
    if not seeds:
        raise ValueError("sweep needs at least one seed")
    base = base or behavior_preset("default")
    anchors = preset_anchors(seeds, **rollout_kwargs)

    rows: list[SweepRow] = []
    for gi, overrides in enumerate(grid):
        params = base.with_overrides(**overrides)
        per_seed = []
        crashes = 0
        for s in seeds:
            sle, crashed = centrality_rollout(params, s, **rollout_kwargs)
            per_seed.append(sle)
            crashes += crashed
        mean_sle = {
            "sle_l_max": float(np.mean([x["sle_l_max"] for x in per_seed])),
            "sle_o_max": float(np.mean([x["sle_o_max"] for x in per_seed])),
        }
        label = classify_against_anchors(mean_sle, anchors)
        storm = crashes > len(seeds) / 2
        for s, sle in zip(seeds, per_seed):
            rows.append(
                SweepRow(
                    grid_index=gi,
                    seed=s,
                    params=dict(overrides),
                    sle_l_max=sle["sle_l_max"],
                    sle_o_max=sle["sle_o_max"],
                    label=label,
                    crash_storm=storm,
                )
            )
    return rows
