"""Unified run configuration: one resolved tree, one content hash.

Every tunable default from every module appears here explicitly after
resolution, so a stored config file fully reproduces a run. The hash is a
digest of the canonical JSON form and is therefore stable under key
reordering.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .env import ScenarioConfig
from .perception import PerceptionConfig
from .rewards import SvoConfig
from .road import RoadLayout, SimParams
from .shield import SafetyConfig
from .trainer import QNetworkSpec, TrainConfig, _spec_from_dict


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 200
    base_seed: int = 10_000


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    svo: SvoConfig = field(default_factory=SvoConfig)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    net: QNetworkSpec = field(default_factory=QNetworkSpec.desk)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


def desk_config() -> RunConfig:
    """Laptop-scale defaults: 2 AVs, 6 HVs, 128x32 raster, 1500 episodes."""
    return RunConfig(
        scenario=ScenarioConfig(n_av=2, n_hv=6),
        perception=PerceptionConfig(stack_depth=4),
        train=TrainConfig(
            n_episodes=1500,
            replay_capacity=2000,
            replay_quantize=True,
        ),
        net=QNetworkSpec.desk(frames=4),
    )


def reference_config() -> RunConfig:
    """Paper-scale settings: 4 AVs, 18 HVs, 512x64 raster, 10k episodes."""
    return RunConfig(
        scenario=ScenarioConfig(n_av=4, n_hv=18),
        perception=PerceptionConfig.reference(),
        train=TrainConfig(n_episodes=10_000, replay_capacity=8000),
        net=QNetworkSpec(height=512, width=64),
    )


PROFILES = {"desk": desk_config, "reference": reference_config}


def to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(
            {"config_hash": config_hash(cfg), **to_dict(cfg)},
            f,
            sort_keys=True,
            indent=2,
        )


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    data.pop("config_hash", None)
    scenario = dict(data.get("scenario", {}))
    layout = scenario.get("layout")
    if layout is not None:
        scenario["layout"] = RoadLayout(**layout)
    if "sim" in scenario:
        scenario["sim"] = SimParams(**scenario["sim"])
    net = data.get("net")
    return RunConfig(
        scenario=ScenarioConfig(**scenario),
        perception=PerceptionConfig(**data.get("perception", {})),
        svo=SvoConfig(**data.get("svo", {})),
        safety=SafetyConfig(**data.get("safety", {})),
        train=TrainConfig(**data.get("train", {})),
        net=_spec_from_dict(net) if net else QNetworkSpec.desk(),
        evaluation=EvalConfig(**data.get("evaluation", {})),
        seed=data.get("seed", 0),
    )


def load_config(path, profile: str = "desk") -> RunConfig:
    """Read a config file, filling unset sections from the named profile."""
    base = to_dict(PROFILES[profile]())
    with open(path) as f:
        override = json.load(f)
    return from_dict(_merge(base, override))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)
