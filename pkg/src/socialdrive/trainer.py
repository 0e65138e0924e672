"""Safety-prioritized multi-agent DDQN.

One learner network (w+) is trained while every peer acts with a frozen copy
(w-); after each agent finishes its turn the learner's weights are
disseminated to the peers. A separate target network provides the bootstrap
value and is refreshed from the frozen weights every ``target_update``
gradient steps. Transitions injected by the safety shield carry a terminal
next state so their learning target is exactly the unsafe penalty.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import random
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .road import MetaAction
from .rewards import SvoConfig
from .shield import SafetyConfig, inject_unsafe, safe_action

N_ACTIONS = len(MetaAction)


class TrainingDiverged(RuntimeError):
    """Raised when the Bellman loss explodes past the divergence guard."""


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 2, 2)
    padding: tuple[int, int, int] = (1, 1, 1)


@dataclass(frozen=True)
class QNetworkSpec:
    """Shape of the Q-network: 3-D conv feature extractor + dense head.

    With an empty ``conv`` tuple the input is flattened straight into the
    dense layers, which is how the tabular-style tests bypass the raster.
    """

    frames: int = 10
    channels: int = 5
    height: int = 128
    width: int = 32
    conv: tuple[ConvSpec, ...] = (
        ConvSpec(16),
        ConvSpec(32),
        ConvSpec(64),
    )
    fc: tuple[int, ...] = (256,)
    n_actions: int = N_ACTIONS

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)

    @classmethod
    def desk(cls, frames: int = 4, channels: int = 5, height: int = 128, width: int = 32):
        return cls(
            frames=frames,
            channels=channels,
            height=height,
            width=width,
            conv=(
                ConvSpec(8, kernel=(2, 3, 3), stride=(2, 2, 2), padding=(0, 1, 1)),
                ConvSpec(16, kernel=(2, 3, 3), stride=(2, 2, 2), padding=(0, 1, 1)),
            ),
            fc=(128,),
        )

    @classmethod
    def mlp(cls, n_inputs: int, hidden: tuple[int, ...] = (32,)):
        return cls(frames=1, channels=1, height=1, width=n_inputs, conv=(), fc=hidden)


class QNetwork(nn.Module):
    """Action-value network built from a QNetworkSpec."""

    def __init__(self, spec: QNetworkSpec, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec
        convs = []
        in_ch = spec.channels
        shape = (spec.frames, spec.height, spec.width)
        for c in spec.conv:
            convs.append(
                nn.Conv3d(
                    in_ch, c.out_channels, kernel_size=c.kernel,
                    stride=c.stride, padding=c.padding,
                )
            )
            convs.append(nn.ReLU())
            shape = tuple(
                (shape[d] + 2 * c.padding[d] - c.kernel[d]) // c.stride[d] + 1
                for d in range(3)
            )
            if min(shape) < 1:
                raise ValueError(
                    f"conv layer {c} collapses the feature map to {shape}; "
                    f"shrink the kernel/stride or use fewer layers"
                )
            in_ch = c.out_channels
        self.features = nn.Sequential(*convs)
        flat = in_ch * shape[0] * shape[1] * shape[2] if spec.conv else (
            spec.frames * spec.channels * spec.height * spec.width
        )
        dense = []
        prev = flat
        for size in spec.fc:
            dense.append(nn.Linear(prev, size))
            dense.append(nn.ReLU())
            prev = size
        dense.append(nn.Linear(prev, spec.n_actions))
        self.head = nn.Sequential(*dense)
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # input layout: (batch, frames, channels, height, width)
        if self.spec.conv:
            x = x.permute(0, 2, 1, 3, 4)
            x = self.features(x)
        x = torch.flatten(x, start_dim=1)
        return self.head(x)


def q_values(net: QNetwork, stack: np.ndarray) -> np.ndarray:
    """Single-state action values as a numpy vector."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        t = torch.as_tensor(stack, dtype=dtype).unsqueeze(0)
        return net(t).squeeze(0).cpu().numpy()


def act(
    net: QNetwork,
    stack: np.ndarray,
    epsilon: float,
    mode: str,
    rng: random.Random,
) -> MetaAction:
    """Epsilon-greedy in train mode, pure greedy in test mode.

    Ties break toward the lowest action index (np.argmax takes the first max).
    """
    if mode == "train" and rng.random() < epsilon:
        return MetaAction(rng.randrange(N_ACTIONS))
    q = q_values(net, stack)
    return MetaAction(int(np.argmax(q)))


def params_digest(net: nn.Module) -> str:
    """Order-stable digest of all parameter bytes; used for freeze checks."""
    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """FIFO experience buffer; sampling is uniform over retained entries.

    ``quantize`` stores observation stacks as uint8 (1/255 resolution), which
    keeps the desk-scale buffer within laptop memory. An optional balancing
    resampler stratifies draws by |reward| quartile to counter skewed data.
    """

    def __init__(self, capacity: int = 8000, quantize: bool = False, balance: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.quantize = quantize
        self.balance = balance
        self._entries: list[tuple] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._entries)

    def _pack(self, state: np.ndarray | None):
        if state is None:
            return None
        if self.quantize:
            return np.clip(np.rint(state * 255.0), 0, 255).astype(np.uint8)
        return np.asarray(state, dtype=np.float32)

    def _unpack(self, packed):
        if packed is None:
            return None
        if packed.dtype == np.uint8:
            return packed.astype(np.float32) / 255.0
        return packed

    def push(self, state, action: int, reward: float, next_state) -> None:
        entry = (self._pack(state), int(action), float(reward), self._pack(next_state))
        if len(self._entries) < self.capacity:
            self._entries.append(entry)
        else:
            self._entries[self._next] = entry
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        n = len(self._entries)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        if not self.balance:
            return rng.integers(0, n, size=batch_size)
        # median split on |r|: rare high-magnitude rewards get half the draws
        rewards = np.array([abs(e[2]) for e in self._entries])
        median = np.median(rewards)
        high = np.flatnonzero(rewards > median)
        low = np.flatnonzero(rewards <= median)
        strata = [s for s in (low, high) if len(s)]
        picks = []
        for _ in range(batch_size):
            stratum = strata[int(rng.integers(0, len(strata)))]
            picks.append(stratum[int(rng.integers(0, len(stratum)))])
        return np.array(picks)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = self.sample_indices(batch_size, rng)
        batch = [self._entries[i] for i in idx]
        states = np.stack([self._unpack(e[0]) for e in batch])
        actions = np.array([e[1] for e in batch], dtype=np.int64)
        rewards = np.array([e[2] for e in batch], dtype=np.float64)
        terminal = np.array([e[3] is None for e in batch])
        if terminal.all():
            next_states = np.zeros_like(states)
        else:
            ref = next(self._unpack(e[3]) for e in batch if e[3] is not None)
            next_states = np.stack(
                [
                    self._unpack(e[3]) if e[3] is not None else np.zeros_like(ref)
                    for e in batch
                ]
            )
        return states, actions, rewards, next_states, terminal


# ---------------------------------------------------------------------------
# DDQN numerics


def ddqn_target(
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminal: np.ndarray,
    online: QNetwork,
    target_net: QNetwork,
    gamma: float,
) -> np.ndarray:
    """Double-DQN bootstrap target.

    Terminal transitions (including shield injections) evaluate to the raw
    reward; otherwise the online network selects and the target network
    evaluates the next action.
    """
    out = np.array(rewards, dtype=np.float64)
    live = ~terminal
    if live.any():
        dtype = next(online.parameters()).dtype
        with torch.no_grad():
            ns = torch.as_tensor(next_states[live], dtype=dtype)
            best = online(ns).argmax(dim=1, keepdim=True)
            boot = target_net(ns).gather(1, best).squeeze(1).cpu().numpy()
        out[live] += gamma * boot.astype(np.float64)
    return out


def loss_and_gradient(
    states: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    online: QNetwork,
) -> tuple[float, list[torch.Tensor]]:
    """Mean squared Bellman error and its gradient on the online parameters.

    Targets are held fixed; gradient flows only through the online values.
    """
    if len(states) == 0:
        raise ValueError("batch must be non-empty")
    dtype = next(online.parameters()).dtype
    online.zero_grad(set_to_none=True)
    s = torch.as_tensor(states, dtype=dtype)
    a = torch.as_tensor(actions, dtype=torch.int64).unsqueeze(1)
    t = torch.as_tensor(targets, dtype=dtype)
    q = online(s).gather(1, a).squeeze(1)
    loss = torch.mean((q - t) ** 2)
    loss.backward()
    grads = [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in online.parameters()
    ]
    return float(loss.item()), grads


# ---------------------------------------------------------------------------
# training configuration and loop


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 1500
    batch_size: int = 32
    learning_rate: float = 0.0005
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_final: float = 0.05
    epsilon_decay_episodes: int | None = None  # None: decay across the whole run
    target_update: int = 300          # gradient steps between target syncs
    n_iterations: int = 1             # environment steps per agent turn
    prefill_episodes: int = 50
    replay_capacity: int = 8000
    replay_quantize: bool = False
    replay_balance: bool = False
    divergence_guard: float = 1e6
    trace_actions: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.epsilon_final <= self.epsilon_start <= 1.0:
            raise ValueError("epsilon schedule must satisfy 0 <= final <= start <= 1")

    def epsilon_at(self, episode: int) -> float:
        if episode < self.prefill_episodes:
            return 1.0
        horizon = self.epsilon_decay_episodes
        if horizon is None:
            horizon = max(1, self.n_episodes - self.prefill_episodes)
        frac = (episode - self.prefill_episodes) / horizon
        if frac >= 1.0:
            return self.epsilon_final
        return self.epsilon_start + frac * (self.epsilon_final - self.epsilon_start)


class SemiSequentialController:
    """Holds the learner, frozen-peer and target networks and their sync rules."""

    def __init__(self, spec: QNetworkSpec, cfg: TrainConfig, seed: int):
        torch.manual_seed(seed)
        self.online = QNetwork(spec)
        self.frozen = copy.deepcopy(self.online)
        self.target = copy.deepcopy(self.online)
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(
            self.online.parameters(), lr=cfg.learning_rate
        )
        self.gradient_steps = 0

    def gradient_step(self, replay: ReplayBuffer, rng: np.random.Generator) -> float:
        states, actions, rewards, next_states, terminal = replay.sample(
            self.cfg.batch_size, rng
        )
        targets = ddqn_target(
            rewards, next_states, terminal, self.online, self.target, self.cfg.gamma
        )
        dtype = next(self.online.parameters()).dtype
        self.optimizer.zero_grad(set_to_none=True)
        s = torch.as_tensor(states, dtype=dtype)
        a = torch.as_tensor(actions, dtype=torch.int64).unsqueeze(1)
        t = torch.as_tensor(targets, dtype=dtype)
        q = self.online(s).gather(1, a).squeeze(1)
        loss = torch.mean((q - t) ** 2)
        loss.backward()
        self.optimizer.step()
        self.gradient_steps += 1
        if self.gradient_steps % self.cfg.target_update == 0:
            self.sync_target()
        value = float(loss.item())
        if not math.isfinite(value) or value > self.cfg.divergence_guard:
            raise TrainingDiverged(
                f"loss {value:.3e} exceeded the divergence guard "
                f"{self.cfg.divergence_guard:.0e} at gradient step {self.gradient_steps}"
            )
        return value

    def disseminate(self) -> None:
        """w- <- w+ : peers receive the learner's weights after a turn."""
        self.frozen.load_state_dict(self.online.state_dict())

    def sync_target(self) -> None:
        self.target.load_state_dict(self.frozen.state_dict())


def save_checkpoint(net: QNetwork, path: str, meta: dict) -> None:
    """Versioned parameter blob plus a JSON sidecar with run provenance."""
    torch.save(
        {"format_version": 1, "spec": asdict(net.spec), "state_dict": net.state_dict()},
        path,
    )
    with open(str(path) + ".json", "w") as f:
        json.dump({"format_version": 1, **meta}, f, sort_keys=True, indent=2)


def _spec_from_dict(d: dict) -> QNetworkSpec:
    conv = tuple(
        ConvSpec(
            out_channels=c["out_channels"],
            kernel=tuple(c["kernel"]),
            stride=tuple(c["stride"]),
            padding=tuple(c["padding"]),
        )
        for c in d.get("conv", ())
    )
    return QNetworkSpec(
        frames=d["frames"],
        channels=d["channels"],
        height=d["height"],
        width=d["width"],
        conv=conv,
        fc=tuple(d["fc"]),
        n_actions=d.get("n_actions", N_ACTIONS),
    )


def load_checkpoint(path: str) -> QNetwork:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version in {path}")
    net = QNetwork(_spec_from_dict(blob["spec"]))
    net.load_state_dict(blob["state_dict"])
    return net


def train(
    env_factory,
    cfg: TrainConfig,
    svo: SvoConfig,
    safety: SafetyConfig,
    seed: int,
    net_spec: QNetworkSpec | None = None,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
    config_hash: str = "",
    warm_start: QNetwork | None = None,
) -> tuple[QNetwork, list[dict]]:
    """Run the semi-sequential safety-prioritized DDQN loop.

    ``env_factory(episode_seed)`` must return a fresh environment exposing
    reset/step, per-agent observation stacks, the underlying world for shield
    rollouts, and per-agent rewards. The first ``prefill_episodes`` episodes
    fill the replay buffer with shielded random behavior and take no gradient
    steps.
    """
    net_spec = net_spec or QNetworkSpec()
    rng = random.Random(seed)
    np_rng = np.random.default_rng(seed + 1)
    ctrl = SemiSequentialController(net_spec, cfg, seed + 2)
    if warm_start is not None:
        ctrl.online.load_state_dict(warm_start.state_dict())
        ctrl.disseminate()
        ctrl.sync_target()
    replay = ReplayBuffer(
        cfg.replay_capacity, quantize=cfg.replay_quantize, balance=cfg.replay_balance
    )

    log: list[dict] = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for episode in range(cfg.n_episodes):
            env = env_factory(seed * 100_003 + episode)
            obs = env.reset()
            prefill = episode < cfg.prefill_episodes
            epsilon = cfg.epsilon_at(episode)

            ep_losses: list[float] = []
            ep_breakdown = {"ego": 0.0, "coop": 0.0, "symp": 0.0, "mission": 0.0, "total": 0.0}
            ep_interventions = 0
            ep_crash_events = 0
            ep_actions: list[int] = []
            agent_ids = list(env.agent_ids)
            turn_idx = 0
            steps_in_turn = 0
            done = False

            while not done and agent_ids:
                owner = agent_ids[turn_idx % len(agent_ids)]
                actions: dict[int, MetaAction] = {}
                for aid in agent_ids:
                    if env.agent_crashed(aid):
                        continue
                    stack = obs[aid]
                    learner = aid == owner or prefill
                    net = ctrl.online if learner else ctrl.frozen
                    eps_a = epsilon if learner else 0.0
                    q = q_values(net, stack)
                    chosen, rejected = safe_action(
                        env.world,
                        aid,
                        q,
                        mode="train" if learner else "test",
                        cfg=safety,
                        sim=env.sim,
                        rng=rng,
                        epsilon=eps_a,
                    )
                    if learner and rejected:
                        for bad_action, _score in rejected:
                            inject_unsafe(replay, stack, bad_action, safety)
                    if rejected:
                        ep_interventions += 1
                    actions[aid] = chosen

                owner_stack = obs.get(owner)
                obs, rewards, done, info = env.step(actions)
                ep_crash_events += len(info.get("events", ()))
                for breakdown in rewards.values():
                    ep_breakdown["ego"] += breakdown.r_ego
                    ep_breakdown["coop"] += breakdown.r_coop
                    ep_breakdown["symp"] += breakdown.r_symp
                    ep_breakdown["mission"] += breakdown.r_mission_contrib
                    ep_breakdown["total"] += breakdown.total
                if cfg.trace_actions:
                    ep_actions.extend(int(actions[a]) for a in sorted(actions))

                if owner in actions and owner_stack is not None and owner in rewards:
                    next_stack = None if done else obs.get(owner)
                    replay.push(
                        owner_stack,
                        int(actions[owner]),
                        rewards[owner].total,
                        next_stack,
                    )

                if not prefill and len(replay) >= cfg.batch_size:
                    ep_losses.append(ctrl.gradient_step(replay, np_rng))

                steps_in_turn += 1
                if steps_in_turn >= cfg.n_iterations:
                    if not prefill:
                        ctrl.disseminate()
                    steps_in_turn = 0
                    turn_idx += 1

            n_agents = max(1, len(agent_ids))
            row = {
                "episode": episode,
                "return_breakdown": {
                    k: v / n_agents for k, v in ep_breakdown.items()
                },
                "crashes": ep_crash_events,
                "shield_interventions": ep_interventions,
                "epsilon": epsilon,
                "loss_mean": float(np.mean(ep_losses)) if ep_losses else 0.0,
            }
            if cfg.trace_actions:
                row["actions"] = ep_actions
            log.append(row)
            if log_file:
                file_row = {k: v for k, v in row.items() if k != "actions"}
                file_row["config_hash"] = config_hash
                file_row["seed"] = seed
                log_file.write(json.dumps(file_row, sort_keys=True) + "\n")
    finally:
        if log_file:
            log_file.close()

    if checkpoint_path:
        save_checkpoint(
            ctrl.online,
            checkpoint_path,
            {
                "config_hash": config_hash,
                "seed": seed,
                "episodes": cfg.n_episodes,
                "gradient_steps": ctrl.gradient_steps,
            },
        )
    return ctrl.online, log
