"""Scenario evaluation, performance metrics, and the cross-setting studies.

All metric formulas are pure functions of episode records: a report recomputed
from its CSV reproduces the original exactly. Crash rate counts episodes with
a collision involving an autonomous or mission vehicle; distance traveled is
the mean over the autonomous fleet (or over all vehicles in AV-free worlds).
"""

from __future__ import annotations

import csv
import io
import json
import math
import random
from dataclasses import asdict, dataclass, replace

import numpy as np

from .drivers import behavior_preset, register_behavior
from .env import ScenarioConfig, TrafficEnv, behavior_mix_for
from .perception import PerceptionConfig
from .rewards import SvoConfig
from .road import MetaAction
from .shield import SafetyConfig, safe_action
from .trainer import (
    QNetwork,
    QNetworkSpec,
    TrainConfig,
    load_checkpoint,
    q_values,
    train,
)

SCRIPTED_BASELINES = ("idle", "ram", "random", "brake")


@dataclass(frozen=True)
class EpisodeRecord:
    scenario: str
    behavior: str
    svo_id: str
    episode: int
    seed: int
    crashed: bool
    mission_accomplished: bool
    mission_failed: bool
    dt_mean: float
    dt_per_av: tuple[float, ...]
    shield_interventions: int
    shield_fallbacks: int
    min_safety_score: float  # lowest rejected-candidate score; inf if untouched
    hv_crash_events: int
    termination: str


@dataclass(frozen=True)
class EvalReport:
    scenario: str
    behavior: str
    svo_id: str
    n_episodes: int
    crash_pct: float
    crash_halfwidth: float
    mission_fail_pct: float
    mission_fail_halfwidth: float
    mean_distance: float
    distance_halfwidth: float
    shield_interventions_mean: float
    config_hash: str = ""
    seeds: tuple[int, ...] = ()


def _proportion_halfwidth(p: float, n: int) -> float:
    if n < 1:
        return 0.0
    return 100.0 * 1.96 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def report_from_records(
    records: list[EpisodeRecord], config_hash: str = ""
) -> EvalReport:
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    n = len(records)
    crash = sum(r.crashed for r in records) / n
    mf = sum(r.mission_failed for r in records) / n
    distances = [r.dt_mean for r in records]
    dist_hw = (
        1.96 * float(np.std(distances, ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    )
    return EvalReport(
        scenario=records[0].scenario,
        behavior=records[0].behavior,
        svo_id=records[0].svo_id,
        n_episodes=n,
        crash_pct=100.0 * crash,
        crash_halfwidth=_proportion_halfwidth(crash, n),
        mission_fail_pct=100.0 * mf,
        mission_fail_halfwidth=_proportion_halfwidth(mf, n),
        mean_distance=float(np.mean(distances)),
        distance_halfwidth=dist_hw,
        shield_interventions_mean=float(
            np.mean([r.shield_interventions for r in records])
        ),
        config_hash=config_hash,
        seeds=tuple(r.seed for r in records),
    )


# ---------------------------------------------------------------------------
# policies


class ScriptedPolicy:
    """Deterministic non-learned baselines for control experiments."""

    def __init__(self, name: str, seed: int = 0):
        if name not in SCRIPTED_BASELINES:
            raise ValueError(f"unknown baseline {name!r}; pick from {SCRIPTED_BASELINES}")
        self.name = name
        self._rng = random.Random(seed)

    def q_for(self, stack) -> np.ndarray:
        q = np.zeros(len(MetaAction))
        if self.name == "idle":
            q[int(MetaAction.IDLE)] = 1.0
        elif self.name == "ram":
            q[int(MetaAction.ACCELERATE)] = 1.0
        elif self.name == "brake":
            q[int(MetaAction.DECELERATE)] = 1.0
        else:  # random
            order = list(range(len(MetaAction)))
            self._rng.shuffle(order)
            for rank, a in enumerate(order):
                q[a] = -rank
        return q


def _policy_q(policy, stack) -> np.ndarray:
    if isinstance(policy, ScriptedPolicy):
        return policy.q_for(stack)
    return q_values(policy, stack)


def resolve_policy(policy, seed: int = 0):
    """Accept a QNetwork, a checkpoint path, or a scripted baseline name."""
    if policy is None:
        return None
    if isinstance(policy, (QNetwork,)):
        return policy
    if isinstance(policy, ScriptedPolicy):
        return policy
    if isinstance(policy, str) and policy in SCRIPTED_BASELINES:
        return ScriptedPolicy(policy, seed)
    return load_checkpoint(policy)


# ---------------------------------------------------------------------------
# the evaluation loop


def run_episode(
    env: TrafficEnv,
    policies,
    safety: SafetyConfig,
    seed: int,
    shield: bool = True,
) -> dict:
    """Play one episode in test mode; returns raw outcome fields."""
    env.reset(seed)
    interventions = 0
    fallbacks = 0
    min_score = math.inf
    obs = {aid: env.observe(aid) for aid in env.agent_ids}
    done = False
    while not done:
        actions = {}
        for idx, aid in enumerate(env.agent_ids):
            if env.agent_crashed(aid):
                continue
            # per-agent policy maps are keyed by fleet index: vehicle ids vary
            # with the placement seed, the fleet order does not
            policy = policies.get(idx) if isinstance(policies, dict) else policies
            if policy is None:
                continue
            q = _policy_q(policy, obs.get(aid))
            if shield and safety.safe_th > 0:
                action, rejected = safe_action(
                    env.world, aid, q, mode="test", cfg=safety, sim=env.sim
                )
                if rejected:
                    interventions += 1
                    min_score = min(min_score, min(s for _, s in rejected))
                    if len(rejected) == len(MetaAction):
                        fallbacks += 1
            else:
                action = MetaAction(int(np.argmax(q)))
            actions[aid] = action
        obs, _rewards, done, _info = env.step(actions)

    crashed, hv_events = env.crash_summary()
    accomplished, failed = env.mission_summary()
    return {
        "crashed": crashed,
        "mission_accomplished": accomplished,
        "mission_failed": failed,
        "dt_mean": env.mean_travel(),
        "dt_per_av": tuple(env.av_distances()),
        "shield_interventions": interventions,
        "shield_fallbacks": fallbacks,
        "min_safety_score": min_score,
        "hv_crash_events": hv_events,
        "termination": env.termination or "",
    }


def evaluate(
    policy,
    scenario_kind: str,
    behavior: str,
    n_episodes: int,
    seeds: list[int] | None = None,
    scenario: ScenarioConfig | None = None,
    perception: PerceptionConfig | None = None,
    svo: SvoConfig | None = None,
    svo_overrides: dict[int, SvoConfig] | None = None,
    safety: SafetyConfig | None = None,
    shield: bool = True,
    svo_id: str = "social",
    base_seed: int = 10_000,
    config_hash: str = "",
    policies_by_agent: dict | None = None,
) -> tuple[EvalReport, list[EpisodeRecord]]:
    """Evaluate a policy (or scripted baseline) on one scenario/behavior cell."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    safety = safety or SafetyConfig()
    seeds = list(seeds) if seeds else [base_seed + i for i in range(n_episodes)]
    if len(seeds) < n_episodes:
        raise ValueError("need one seed per episode")
    scenario = scenario or ScenarioConfig()
    scenario = replace(
        scenario, kind=scenario_kind, behavior_mix=behavior_mix_for(behavior)
    )
    env = TrafficEnv(scenario, perception, svo, svo_overrides)

    resolved = (
        {k: resolve_policy(v) for k, v in policies_by_agent.items()}
        if policies_by_agent
        else resolve_policy(policy)
    )

    records = []
    for ep in range(n_episodes):
        outcome = run_episode(env, resolved, safety, seeds[ep], shield)
        records.append(
            EpisodeRecord(
                scenario=scenario_kind,
                behavior=behavior,
                svo_id=svo_id,
                episode=ep,
                seed=seeds[ep],
                **outcome,
            )
        )
    return report_from_records(records, config_hash), records


# ---------------------------------------------------------------------------
# the published metric formulas


def performance_gain(report_e: EvalReport, report_s: EvalReport) -> dict[str, float]:
    """Altruistic performance gain of the social policy over the egoistic one.

    Safety gain is the crash-percentage-point difference; efficiency gain is
    the relative improvement in distance traveled.
    """
    pg_safety = report_e.crash_pct - report_s.crash_pct
    pg_efficiency = (
        (report_s.mean_distance - report_e.mean_distance)
        / report_e.mean_distance
        * 100.0
        if report_e.mean_distance != 0
        else 0.0
    )
    return {"pg_safety": pg_safety, "pg_efficiency": pg_efficiency}


def adaptation_error(
    crash_pct: float,
    mean_distance: float,
    dt_max: float,
    w_s: float = 2.0 / 3.0,
    w_e: float = 1.0 / 3.0,
) -> float:
    """Weighted crash rate plus normalized distance shortfall, in percent."""
    if dt_max <= 0:
        raise ValueError("dt_max must be positive")
    return w_s * crash_pct + w_e * 100.0 * (1.0 - mean_distance / dt_max)


# ---------------------------------------------------------------------------
# cross-setting studies


TEST_SETTINGS = [
    ("merge", "mix"),
    ("merge", "aggressive"),
    ("merge", "moderate"),
    ("merge", "conservative"),
    ("exit", "mix"),
    ("exit", "aggressive"),
    ("exit", "moderate"),
    ("exit", "conservative"),
]


@dataclass(frozen=True)
class AdaptationMatrix:
    train_settings: tuple[tuple[str, str], ...]
    test_settings: tuple[tuple[str, str], ...]
    crash_pct: tuple[tuple[float, ...], ...]
    distance: tuple[tuple[float, ...], ...]
    a_error: tuple[tuple[float, ...], ...]


def adaptation_matrix(
    checkpoints: dict[tuple[str, str], object],
    test_settings: list[tuple[str, str]] | None = None,
    n_episodes: int = 50,
    w_s: float = 2.0 / 3.0,
    w_e: float = 1.0 / 3.0,
    **eval_kwargs,
) -> AdaptationMatrix:
    """Cross-evaluate trained policies over scenario x behavior settings.

    DT_max for the adaptation error is the maximum distance observed in each
    test column, matching the per-situation normalization.
    """
    train_settings = list(checkpoints)
    tests = test_settings or TEST_SETTINGS
    crash = []
    dist = []
    for ts in train_settings:
        policy = resolve_policy(checkpoints[ts])
        crash_row = []
        dist_row = []
        for scenario_kind, behavior in tests:
            report, _ = evaluate(
                policy, scenario_kind, behavior, n_episodes, **eval_kwargs
            )
            crash_row.append(report.crash_pct)
            dist_row.append(report.mean_distance)
        crash.append(crash_row)
        dist.append(dist_row)

    a_err = []
    n_cols = len(tests)
    col_max = [max(dist[r][c] for r in range(len(train_settings))) for c in range(n_cols)]
    for r in range(len(train_settings)):
        a_err.append(
            [
                adaptation_error(crash[r][c], dist[r][c], col_max[c], w_s, w_e)
                if col_max[c] > 0
                else 0.0
                for c in range(n_cols)
            ]
        )
    return AdaptationMatrix(
        train_settings=tuple(train_settings),
        test_settings=tuple(tests),
        crash_pct=tuple(tuple(row) for row in crash),
        distance=tuple(tuple(row) for row in dist),
        a_error=tuple(tuple(row) for row in a_err),
    )


LONGITUDINAL_FIELDS = ("T0", "d0", "a_max", "a_des")
LATERAL_FIELDS = ("politeness", "delta_a_threshold", "b_safe")


def interpolate_behavior(axis: str, level: float):
    """Linear interpolation between the conservative (0) and aggressive (1)
    preset columns along the chosen axis; the other axis stays moderate."""
    if not 0.0 <= level <= 1.0:
        raise ValueError("level must be in [0, 1]")
    if axis not in ("lateral", "longitudinal", "joint"):
        raise ValueError("axis must be lateral, longitudinal or joint")
    cons = behavior_preset("conservative")
    aggr = behavior_preset("aggressive")
    base = behavior_preset("moderate")
    fields = {
        "longitudinal": LONGITUDINAL_FIELDS,
        "lateral": LATERAL_FIELDS,
        "joint": LONGITUDINAL_FIELDS + LATERAL_FIELDS,
    }[axis]
    overrides = {}
    for name in fields:
        lo = getattr(cons.idm, name, None)
        hi = getattr(aggr.idm, name, None)
        if lo is None:
            lo = getattr(cons.mobil, name)
            hi = getattr(aggr.mobil, name)
        overrides[name] = lo + level * (hi - lo)
    return base.with_overrides(**overrides)


def sensitivity_sweep(
    axis: str,
    levels: list[float],
    policies: dict[str, object],
    scenario_kind: str = "merge",
    n_episodes: int = 50,
    **eval_kwargs,
) -> list[dict]:
    """PG curves versus HV aggressiveness level.

    ``policies`` maps {"social": ..., "egoistic": ...}; each level interpolates
    the HV driver parameters between the conservative and aggressive presets.
    """
    social = resolve_policy(policies["social"])
    egoistic = resolve_policy(policies["egoistic"])
    base_scenario = eval_kwargs.pop("scenario", None) or ScenarioConfig()
    rows = []
    for level in levels:
        params = interpolate_behavior(axis, level)
        label = register_behavior(params, f"sweep_{axis}_{level:.4f}")
        scenario = replace(base_scenario, behavior_mix={label: 1.0})
        rep_s, _ = evaluate(
            social, scenario_kind, label, n_episodes,
            scenario=scenario, svo_id="social", **eval_kwargs,
        )
        rep_e, _ = evaluate(
            egoistic, scenario_kind, label, n_episodes,
            scenario=scenario, svo_id="egoistic", **eval_kwargs,
        )
        pg = performance_gain(rep_e, rep_s)
        rows.append(
            {
                "axis": axis,
                "level": level,
                "pg_safety": pg["pg_safety"],
                "pg_efficiency": pg["pg_efficiency"],
                "crash_pct_social": rep_s.crash_pct,
                "crash_pct_egoistic": rep_e.crash_pct,
                "distance_social": rep_s.mean_distance,
                "distance_egoistic": rep_e.mean_distance,
            }
        )
    return rows


TRANSFER_TASKS = {
    "T1": {"target": "merge", "source": None},
    "T2": {"target": "merge", "source": "drive"},
    "T3": {"target": "merge", "source": "exit"},
    "T4": {"target": "exit", "source": None},
    "T5": {"target": "exit", "source": "drive"},
    "T6": {"target": "exit", "source": "merge"},
}


def transfer_run(
    task: str,
    env_factory_for,
    train_cfg: TrainConfig,
    svo: SvoConfig,
    safety: SafetyConfig,
    seed: int,
    net_spec: QNetworkSpec,
    source_checkpoint: str | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    config_hash: str = "",
):
    """Train on the task's target scenario, optionally warm-started.

    ``env_factory_for(scenario_kind)`` returns an env factory; tasks with a
    source scenario require ``source_checkpoint`` (trained on that source).
    """
    if task not in TRANSFER_TASKS:
        raise ValueError(f"task must be one of {sorted(TRANSFER_TASKS)}")
    spec = TRANSFER_TASKS[task]
    warm = None
    if spec["source"] is not None:
        if source_checkpoint is None:
            raise ValueError(f"task {task} needs a source checkpoint ({spec['source']})")
        warm = load_checkpoint(source_checkpoint)
    return train(
        env_factory_for(spec["target"]),
        train_cfg,
        svo,
        safety,
        seed,
        net_spec=net_spec,
        warm_start=warm,
        log_path=log_path,
        checkpoint_path=checkpoint_path,
        config_hash=config_hash,
    )


def single_vs_multi_altruist(
    scenario_kind: str,
    behaviors: list[str],
    social_policy,
    egoistic_policy,
    n_av: int = 2,
    n_episodes: int = 50,
    scenario: ScenarioConfig | None = None,
    **eval_kwargs,
) -> list[dict]:
    """Crash rates with every AV altruistic (MAA) vs only the first (SAA).

    Identical seeds are used for both arms; the only difference is which
    policy checkpoint each agent runs.
    """
    social = resolve_policy(social_policy)
    egoistic = resolve_policy(egoistic_policy)
    scenario = scenario or ScenarioConfig()
    scenario = replace(scenario, n_av=n_av)

    rows = []
    for behavior in behaviors:
        maa = {i: social for i in range(n_av)}
        saa = {i: (social if i == 0 else egoistic) for i in range(n_av)}
        rep_maa, _ = evaluate(
            None, scenario_kind, behavior, n_episodes,
            scenario=scenario, policies_by_agent=maa, svo_id="maa", **eval_kwargs,
        )
        rep_saa, _ = evaluate(
            None, scenario_kind, behavior, n_episodes,
            scenario=scenario, policies_by_agent=saa, svo_id="saa", **eval_kwargs,
        )
        rows.append(
            {
                "behavior": behavior,
                "maa_crash_pct": rep_maa.crash_pct,
                "saa_crash_pct": rep_saa.crash_pct,
                "maa_mission_fail_pct": rep_maa.mission_fail_pct,
                "saa_mission_fail_pct": rep_saa.mission_fail_pct,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# serialization

RECORD_FIELDS = [
    "scenario", "behavior", "svo_id", "episode", "seed", "crashed",
    "mission_accomplished", "mission_failed", "dt_mean", "dt_per_av",
    "shield_interventions", "shield_fallbacks", "min_safety_score",
    "hv_crash_events", "termination", "config_hash",
]


def write_records_csv(
    records: list[EpisodeRecord], path, config_hash: str = ""
) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.scenario, r.behavior, r.svo_id, r.episode, r.seed,
                    int(r.crashed), int(r.mission_accomplished),
                    int(r.mission_failed), repr(r.dt_mean),
                    "|".join(repr(d) for d in r.dt_per_av),
                    r.shield_interventions, r.shield_fallbacks,
                    repr(r.min_safety_score),
                    r.hv_crash_events, r.termination, config_hash,
                ]
            )


def read_records_csv(path) -> list[EpisodeRecord]:
    records = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            records.append(
                EpisodeRecord(
                    scenario=row["scenario"],
                    behavior=row["behavior"],
                    svo_id=row["svo_id"],
                    episode=int(row["episode"]),
                    seed=int(row["seed"]),
                    crashed=bool(int(row["crashed"])),
                    mission_accomplished=bool(int(row["mission_accomplished"])),
                    mission_failed=bool(int(row["mission_failed"])),
                    dt_mean=float(row["dt_mean"]),
                    dt_per_av=tuple(
                        float(x) for x in row["dt_per_av"].split("|") if x
                    ),
                    shield_interventions=int(row["shield_interventions"]),
                    shield_fallbacks=int(row["shield_fallbacks"]),
                    min_safety_score=float(row["min_safety_score"]),
                    hv_crash_events=int(row["hv_crash_events"]),
                    termination=row["termination"],
                )
            )
    return records


def write_report_json(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        json.dump(asdict(report), f, sort_keys=True, indent=2)


def write_sensitivity_csv(rows: list[dict], path, config_hash: str = "") -> None:
    fields = [
        "axis", "level", "pg_safety", "pg_efficiency", "crash_pct_social",
        "crash_pct_egoistic", "distance_social", "distance_egoistic",
        "config_hash",
    ]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for r in rows:
            writer.writerow(
                [r["axis"], repr(r["level"]), repr(r["pg_safety"]),
                 repr(r["pg_efficiency"]), repr(r["crash_pct_social"]),
                 repr(r["crash_pct_egoistic"]), repr(r["distance_social"]),
                 repr(r["distance_egoistic"]), config_hash]
            )


def write_matrix_csv(
    matrix: AdaptationMatrix, metric: str, path, config_hash: str = "",
    seed: int | None = None,
) -> None:
    """Labeled rows (train settings) by columns (test settings)."""
    grid = getattr(matrix, metric)
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash} seed={seed}\n")
    writer = csv.writer(buf)
    writer.writerow(
        ["train_setting"] + [f"{s}:{b}" for s, b in matrix.test_settings]
    )
    for (s, b), row in zip(matrix.train_settings, grid):
        writer.writerow([f"{s}:{b}"] + [repr(x) for x in row])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())
