"""Command-line entry point: train, evaluate, sweep, classify, matrix,
transfer, export.

Exit codes: 0 success, 2 usage error, 3 training divergence, 4 I/O error.
Every output file embeds the resolved config hash and the seed; no command
needs internet access.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import behavior_metrics, evaluation
from .config import (
    PROFILES,
    RunConfig,
    config_hash,
    load_config,
    save_config,
)
from .drivers import behavior_preset
from .env import TrafficEnv, behavior_mix_for
from .perception import dump_frame, rasterize
from .road import MetaAction, write_trajectory_csv
from .shield import safe_action
from .trainer import TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class OutputExists(OSError):
    pass


def _prepare_out(out_dir: str | None, names: list[str], force: bool) -> Path:
    if not out_dir:
        raise ValueError("--out is required (or set SOCIALDRIVE_OUT)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in names:
        target = out / name
        if target.exists() and not force:
            raise OutputExists(
                f"{target} already exists; pass --force to overwrite"
            )
    return out


def _resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, profile=args.profile)
    else:
        cfg = PROFILES[args.profile]()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "scenario", None):
        cfg = replace(cfg, scenario=replace(cfg.scenario, kind=args.scenario))
    if getattr(args, "behavior", None):
        cfg = replace(
            cfg,
            scenario=replace(
                cfg.scenario, behavior_mix=behavior_mix_for(args.behavior)
            ),
        )
    if getattr(args, "episodes", None) is not None and hasattr(cfg.train, "n_episodes"):
        if args.command == "train":
            cfg = replace(cfg, train=replace(cfg.train, n_episodes=args.episodes))
    if getattr(args, "phi", None) is not None:
        cfg = replace(cfg, svo=replace(cfg.svo, phi=args.phi))
    if getattr(args, "no_shield", False):
        cfg = replace(cfg, safety=replace(cfg.safety, safe_th=0.0))
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    if cfg.net.frames != cfg.perception.stack_depth:
        raise ValueError(
            f"net expects {cfg.net.frames} frames but the observation stack "
            f"holds {cfg.perception.stack_depth}"
        )
    if cfg.net.channels != cfg.perception.n_channels:
        raise ValueError("net channel count does not match the perception config")
    if (cfg.net.height, cfg.net.width) != (
        cfg.perception.height,
        cfg.perception.width,
    ):
        raise ValueError("net raster shape does not match the perception config")


def env_factory_from(cfg: RunConfig, scenario_kind: str | None = None):
    scenario = cfg.scenario
    if scenario_kind == "drive":
        scenario = replace(scenario, with_mission=False)
    elif scenario_kind:
        scenario = replace(scenario, kind=scenario_kind)

    def factory(episode_seed: int) -> TrafficEnv:
        return TrafficEnv(scenario, cfg.perception, cfg.svo, seed=episode_seed)

    return factory


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(
        args.out,
        ["resolved_config.json", "training_log.jsonl", "checkpoint.pt"],
        args.force,
    )
    chash = config_hash(cfg)
    save_config(cfg, out / "resolved_config.json")
    _, log = train(
        env_factory_from(cfg),
        cfg.train,
        cfg.svo,
        cfg.safety,
        cfg.seed,
        net_spec=cfg.net,
        log_path=str(out / "training_log.jsonl"),
        checkpoint_path=str(out / "checkpoint.pt"),
        config_hash=chash,
    )
    print(
        f"trained episodes={len(log)} config_hash={chash} seed={cfg.seed} "
        f"out={out}"
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.episodes < 1:
        raise ValueError("--episodes must be >= 1")
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, ["report.json", "episodes.csv"], args.force)
    chash = config_hash(cfg)
    policy = args.baseline if args.baseline else args.checkpoint
    if policy is None:
        raise ValueError("provide --checkpoint or --baseline")
    report, records = evaluation.evaluate(
        policy,
        args.scenario or cfg.scenario.kind,
        args.behavior or "mix",
        args.episodes,
        scenario=cfg.scenario,
        perception=cfg.perception,
        svo=cfg.svo,
        safety=cfg.safety,
        shield=not args.no_shield,
        base_seed=cfg.evaluation.base_seed if args.seed is None else args.seed,
        config_hash=chash,
    )
    evaluation.write_report_json(report, out / "report.json")
    evaluation.write_records_csv(records, out / "episodes.csv", chash)
    print(
        f"crash_pct={report.crash_pct} mission_fail_pct={report.mission_fail_pct} "
        f"mean_distance={report.mean_distance} config_hash={chash}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, ["sweep.csv"], args.force)
    chash = config_hash(cfg)
    with open(args.grid) as f:
        grid = json.load(f)
    if not isinstance(grid, list):
        raise ValueError("--grid must be a JSON list of parameter-override objects")
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    rows = behavior_metrics.parameter_sweep(grid, seeds)
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["grid_index", "seed", "params", "sle_l_max", "sle_o_max",
             "label", "crash_storm", "config_hash"]
        )
        for r in rows:
            writer.writerow(
                [r.grid_index, r.seed, json.dumps(r.params, sort_keys=True),
                 repr(r.sle_l_max), repr(r.sle_o_max), r.label,
                 int(r.crash_storm), chash]
            )
    print(f"sweep rows={len(rows)} config_hash={chash} out={out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, ["classify.csv"], args.force)
    chash = config_hash(cfg)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    labels = args.labels.split(",")
    anchors = behavior_metrics.preset_anchors(seeds)
    with open(out / "classify.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["behavior", "seed", "sle_l_max", "sle_o_max", "assigned", "config_hash"]
        )
        for label in labels:
            behavior_preset(label)
            stats = [
                behavior_metrics.centrality_rollout(label, s)[0] for s in seeds
            ]
            mean_sle = {
                "sle_l_max": sum(s["sle_l_max"] for s in stats) / len(stats),
                "sle_o_max": sum(s["sle_o_max"] for s in stats) / len(stats),
            }
            assigned = behavior_metrics.classify_against_anchors(mean_sle, anchors)
            for s, st in zip(seeds, stats):
                writer.writerow(
                    [label, s, repr(st["sle_l_max"]), repr(st["sle_o_max"]),
                     assigned, chash]
                )
    print(f"classified {labels} config_hash={chash} out={out}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(
        args.out,
        ["matrix_crash.csv", "matrix_distance.csv", "matrix_aerror.csv",
         "matrix_long.csv"],
        args.force,
    )
    chash = config_hash(cfg)
    with open(args.checkpoints) as f:
        raw = json.load(f)
    checkpoints = {}
    for key, path in raw.items():
        scenario_kind, behavior = key.split(":")
        checkpoints[(scenario_kind, behavior)] = path
    tests = list(checkpoints) if args.tests == "train" else None
    matrix = evaluation.adaptation_matrix(
        checkpoints,
        test_settings=tests,
        n_episodes=args.episodes,
        scenario=cfg.scenario,
        perception=cfg.perception,
        svo=cfg.svo,
        safety=cfg.safety,
        base_seed=cfg.evaluation.base_seed,
    )
    evaluation.write_matrix_csv(
        matrix, "crash_pct", out / "matrix_crash.csv", chash, cfg.seed
    )
    evaluation.write_matrix_csv(
        matrix, "distance", out / "matrix_distance.csv", chash, cfg.seed
    )
    evaluation.write_matrix_csv(
        matrix, "a_error", out / "matrix_aerror.csv", chash, cfg.seed
    )
    with open(out / "matrix_long.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["train_setting", "test_setting", "crash_pct", "distance",
             "a_error", "config_hash", "seed"]
        )
        for i, ts in enumerate(matrix.train_settings):
            for j, vs in enumerate(matrix.test_settings):
                writer.writerow(
                    [f"{ts[0]}:{ts[1]}", f"{vs[0]}:{vs[1]}",
                     repr(matrix.crash_pct[i][j]), repr(matrix.distance[i][j]),
                     repr(matrix.a_error[i][j]), chash, cfg.seed]
                )
    print(
        f"matrix {len(matrix.train_settings)}x{len(matrix.test_settings)} "
        f"config_hash={chash} out={out}"
    )
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(
        args.out, ["transfer_log.jsonl", "transfer_checkpoint.pt"], args.force
    )
    chash = config_hash(cfg)
    _, log = evaluation.transfer_run(
        args.task,
        lambda kind: env_factory_from(cfg, kind),
        cfg.train,
        cfg.svo,
        cfg.safety,
        cfg.seed,
        cfg.net,
        source_checkpoint=args.source_checkpoint,
        log_path=str(out / "transfer_log.jsonl"),
        checkpoint_path=str(out / "transfer_checkpoint.pt"),
        config_hash=chash,
    )
    print(f"transfer task={args.task} episodes={len(log)} config_hash={chash}")
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args.out, ["trajectory.csv"], args.force)
    chash = config_hash(cfg)
    scenario = replace(
        cfg.scenario,
        kind=args.scenario or cfg.scenario.kind,
        behavior_mix=behavior_mix_for(args.behavior or "mix"),
    )
    env = TrafficEnv(scenario, cfg.perception, cfg.svo, record_states=True)
    policy = evaluation.resolve_policy(args.baseline or args.checkpoint or "idle")
    env.reset(cfg.seed)
    done = False
    while not done:
        actions = {}
        for aid in env.agent_ids:
            if env.agent_crashed(aid):
                continue
            q = evaluation._policy_q(policy, env.observe(aid))
            if cfg.safety.safe_th > 0:
                action, _ = safe_action(
                    env.world, aid, q, mode="test", cfg=cfg.safety, sim=env.sim
                )
            else:
                action = MetaAction(int(q.argmax()))
            actions[aid] = action
        _, _, done, _ = env.step(actions)
    write_trajectory_csv(env.state_trace, out / "trajectory.csv", chash, cfg.seed)
    if args.frames:
        for aid in env.agent_ids[: 1]:
            if not env.agent_crashed(aid):
                frame = rasterize(env.world, aid, cfg.perception)
                dump_frame(
                    frame, cfg.perception, str(out / f"frame_agent{aid}"),
                    config_hash=chash, seed=cfg.seed,
                )
    print(f"exported {len(env.state_trace)} states config_hash={chash} out={out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="socialdrive",
        description="Mixed-autonomy highway MARL laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument(
            "--profile", default="desk", choices=sorted(PROFILES),
            help="defaults profile for unset config sections",
        )
        p.add_argument("--seed", type=int, default=None)
        p.add_argument(
            "--out", help="output directory (or SOCIALDRIVE_OUT)", default=None
        )
        p.add_argument("--force", action="store_true", help="overwrite outputs")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("train", help="run the MARL training loop")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--scenario", choices=["merge", "exit"])
    p.add_argument("--behavior", choices=["mix", "aggressive", "moderate", "conservative"])
    p.add_argument("--phi", type=float, help="SVO angle override (0 = egoistic)")
    p.add_argument("--no-shield", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or baseline")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=evaluation.SCRIPTED_BASELINES)
    p.add_argument("--scenario", choices=["merge", "exit"])
    p.add_argument("--behavior", choices=["mix", "aggressive", "moderate", "conservative"])
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--no-shield", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="parameter sweep to behavior labels")
    common(p)
    p.add_argument("--grid", required=True, help="JSON list of parameter overrides")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("classify", help="style-likelihood classification of presets")
    common(p)
    p.add_argument("--labels", default="aggressive,moderate,conservative")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("matrix", help="domain-adaptation matrix")
    common(p)
    p.add_argument(
        "--checkpoints", required=True,
        help='JSON object {"scenario:behavior": checkpoint path}',
    )
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument(
        "--tests", default="train", choices=["train", "all"],
        help="test columns: the train settings or all eight combinations",
    )
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("transfer", help="transfer-learning run T1..T6")
    common(p)
    p.add_argument("--task", required=True, choices=sorted(evaluation.TRANSFER_TASKS))
    p.add_argument("--source-checkpoint")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("export", help="export a trajectory CSV and frame dumps")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=evaluation.SCRIPTED_BASELINES)
    p.add_argument("--scenario", choices=["merge", "exit"])
    p.add_argument("--behavior", choices=["mix", "aggressive", "moderate", "conservative"])
    p.add_argument("--frames", action="store_true", help="also dump VelocityMap frames")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # the only environment overrides: output directory and thread count
    if getattr(args, "out", None) is None and os.environ.get("SOCIALDRIVE_OUT"):
        args.out = os.environ["SOCIALDRIVE_OUT"]
    if args.threads is None and os.environ.get("SOCIALDRIVE_THREADS"):
        args.threads = int(os.environ["SOCIALDRIVE_THREADS"])
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OutputExists, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
