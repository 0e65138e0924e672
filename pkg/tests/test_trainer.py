import copy
import json
import random

import numpy as np
import pytest
import torch
from scipy import stats

from socialdrive.env import ScenarioConfig, TrafficEnv
from socialdrive.perception import PerceptionConfig
from socialdrive.rewards import SvoConfig
from socialdrive.road import MetaAction
from socialdrive.shield import SafetyConfig
from socialdrive.trainer import (
    ConvSpec,
    QNetwork,
    QNetworkSpec,
    ReplayBuffer,
    SemiSequentialController,
    TrainConfig,
    act,
    ddqn_target,
    load_checkpoint,
    loss_and_gradient,
    params_digest,
    q_values,
    save_checkpoint,
    train,
)

MLP_SPEC = QNetworkSpec.mlp(6, hidden=(8,))


def small_batch(rng, spec=MLP_SPEC, n=4):
    shape = (n,) + spec.input_shape
    states = rng.random(shape).astype(np.float32)
    actions = rng.integers(0, 5, size=n).astype(np.int64)
    rewards = rng.normal(size=n)
    next_states = rng.random(shape).astype(np.float32)
    terminal = np.zeros(n, dtype=bool)
    return states, actions, rewards, next_states, terminal


# --- DDQN targets ------------------------------------------------------------


def test_terminal_target_is_raw_reward():
    torch.manual_seed(0)
    online, target = QNetwork(MLP_SPEC), QNetwork(MLP_SPEC)
    rng = np.random.default_rng(0)
    states, actions, rewards, next_states, _ = small_batch(rng)
    terminal = np.ones(4, dtype=bool)
    out = ddqn_target(rewards, next_states, terminal, online, target, 0.95)
    assert np.allclose(out, rewards)


def test_gamma_zero_reduces_to_reward():
    torch.manual_seed(0)
    online, target = QNetwork(MLP_SPEC), QNetwork(MLP_SPEC)
    rng = np.random.default_rng(1)
    states, actions, rewards, next_states, terminal = small_batch(rng)
    out = ddqn_target(rewards, next_states, terminal, online, target, 0.0)
    assert np.allclose(out, rewards)


def _numpy_forward(net: QNetwork, x: np.ndarray) -> np.ndarray:
    """Independent re-implementation of the dense forward pass."""
    h = x.reshape(x.shape[0], -1).astype(np.float64)
    layers = [m for m in net.head if isinstance(m, torch.nn.Linear)]
    for i, lin in enumerate(layers):
        w = lin.weight.detach().numpy().astype(np.float64)
        b = lin.bias.detach().numpy().astype(np.float64)
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def test_ddqn_target_matches_hand_computation():
    # the selection net picks the argmax; the evaluation net prices it;
    # the oracle is an independent numpy forward pass over the same weights
    torch.manual_seed(3)
    online = QNetwork(MLP_SPEC, dtype=torch.float64)
    target = QNetwork(MLP_SPEC, dtype=torch.float64)
    rng = np.random.default_rng(3)
    states, actions, rewards, next_states, terminal = small_batch(rng)
    got = ddqn_target(rewards, next_states, terminal, online, target, 0.95)
    q_online = _numpy_forward(online, next_states)
    q_target = _numpy_forward(target, next_states)
    best = q_online.argmax(axis=1)
    expected = rewards + 0.95 * q_target[np.arange(4), best]
    assert np.max(np.abs(got - expected)) < 1e-9


def test_loss_zero_at_fixed_point():
    torch.manual_seed(4)
    online = QNetwork(MLP_SPEC)
    rng = np.random.default_rng(4)
    states, actions, _, _, _ = small_batch(rng)
    with torch.no_grad():
        q = online(torch.as_tensor(states)).numpy()
    targets = q[np.arange(4), actions]
    loss, grads = loss_and_gradient(states, actions, targets, online)
    assert loss < 1e-12
    assert max(g.abs().max().item() for g in grads) < 1e-6


def test_single_transition_loss_is_squared_mismatch():
    torch.manual_seed(5)
    online = QNetwork(MLP_SPEC)
    rng = np.random.default_rng(5)
    states, actions, _, _, _ = small_batch(rng, n=1)
    with torch.no_grad():
        q = online(torch.as_tensor(states)).numpy()
    d = 0.37
    targets = np.array([q[0, actions[0]] + d])
    loss, _ = loss_and_gradient(states, actions, targets, online)
    assert loss == pytest.approx(d * d, rel=1e-5)


@pytest.mark.parametrize(
    "spec",
    [
        MLP_SPEC,
        QNetworkSpec(
            frames=3, channels=2, height=8, width=6,
            conv=(ConvSpec(4, kernel=(2, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),),
            fc=(16,),
        ),
    ],
    ids=["mlp", "conv3d"],
)
def test_gradient_matches_central_finite_differences(spec):
    torch.manual_seed(6)
    online = QNetwork(spec, dtype=torch.float64)
    rng = np.random.default_rng(6)
    states, actions, _, _, _ = small_batch(rng, spec=spec, n=3)
    targets = rng.normal(size=3)
    loss, grads = loss_and_gradient(states, actions, targets, online)

    h = 1e-6
    worst = 0.0
    params = list(online.parameters())
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        gflat = g.view(-1)
        idx = range(0, flat.numel(), max(1, flat.numel() // 40))
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            lp, _ = loss_and_gradient(states, actions, targets, online)
            flat[i] = orig - h
            lm, _ = loss_and_gradient(states, actions, targets, online)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(gflat[i].item()), 1e-8)
            worst = max(worst, abs(fd - gflat[i].item()) / denom)
    assert worst < 1e-4


# --- action selection --------------------------------------------------------


class FixedQNet(torch.nn.Module):
    def __init__(self, q):
        super().__init__()
        self.q = torch.nn.Parameter(torch.as_tensor(q, dtype=torch.float32))

    def forward(self, x):
        return self.q.expand(x.shape[0], -1)


def test_act_greedy_argmax():
    net = FixedQNet([1.0, 3.0, 2.0, 0.0, 0.0])
    stack = np.zeros((1, 1, 1, 6), dtype=np.float32)
    assert act(net, stack, 0.0, "test", random.Random(0)) == MetaAction.IDLE


def test_act_tie_breaks_to_lowest_index():
    net = FixedQNet([5.0, 5.0, 0.0, 0.0, 0.0])
    stack = np.zeros((1, 1, 1, 6), dtype=np.float32)
    assert act(net, stack, 0.0, "test", random.Random(0)) == MetaAction.LANE_LEFT


def test_act_full_exploration_uniform_chi_square():
    net = FixedQNet([9.0, 0.0, 0.0, 0.0, 0.0])
    stack = np.zeros((1, 1, 1, 6), dtype=np.float32)
    rng = random.Random(11)
    counts = np.zeros(5)
    for _ in range(10_000):
        counts[int(act(net, stack, 1.0, "train", rng))] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.01


# --- replay buffer -----------------------------------------------------------


def test_replay_uniform_sampling_chi_square():
    buf = ReplayBuffer(capacity=64)
    s = np.zeros((1, 1, 1, 1), dtype=np.float32)
    for i in range(64):
        buf.push(s, i % 5, float(i), s)
    rng = np.random.default_rng(7)
    idx = buf.sample_indices(100_000, rng)
    counts = np.bincount(idx, minlength=64)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_replay_fifo_eviction_order():
    buf = ReplayBuffer(capacity=3)
    s = np.zeros((1,), dtype=np.float32)
    for i in range(5):
        buf.push(s, i, 0.0, s)
    assert sorted(e[1] for e in buf._entries) == [2, 3, 4]


def test_replay_quantized_round_trip():
    buf = ReplayBuffer(capacity=4, quantize=True)
    state = np.linspace(0, 1, 16, dtype=np.float32).reshape(1, 1, 4, 4)
    buf.push(state, 0, 1.0, None)
    states, _, _, _, terminal = buf.sample(1, np.random.default_rng(0))
    assert terminal[0]
    assert np.max(np.abs(states[0] - state)) <= 0.5 / 255.0 + 1e-6


def test_replay_balanced_sampling_covers_reward_strata():
    buf = ReplayBuffer(capacity=100, balance=True)
    s = np.zeros((1,), dtype=np.float32)
    for i in range(99):
        buf.push(s, 0, 0.0, s)
    buf.push(s, 1, 10.0, s)  # one rare high-|r| entry
    rng = np.random.default_rng(8)
    idx = buf.sample_indices(400, rng)
    rare_share = np.mean(idx == 99)
    assert rare_share > 0.05  # far above the 1% a uniform draw would give


def test_replay_empty_sampling_rejected():
    with pytest.raises(ValueError):
        ReplayBuffer(capacity=4).sample(1, np.random.default_rng(0))


# --- semi-sequential controller ----------------------------------------------


def test_peer_weights_frozen_during_turn_and_disseminated_after():
    cfg = TrainConfig(batch_size=4, target_update=1000)
    ctrl = SemiSequentialController(MLP_SPEC, cfg, seed=0)
    buf = ReplayBuffer(capacity=64)
    rng = np.random.default_rng(9)
    s = rng.random((1,) + MLP_SPEC.input_shape[1:]).astype(np.float32)
    state = np.repeat(s[None], MLP_SPEC.frames, axis=0)
    for i in range(16):
        buf.push(state, i % 5, float(i % 3), state)

    frozen_before = params_digest(ctrl.frozen)
    online_before = params_digest(ctrl.online)
    for _ in range(3):
        ctrl.gradient_step(buf, rng)
    assert params_digest(ctrl.frozen) == frozen_before
    assert params_digest(ctrl.online) != online_before
    ctrl.disseminate()
    assert params_digest(ctrl.frozen) == params_digest(ctrl.online)


def test_target_net_changes_only_at_sync_multiples():
    cfg = TrainConfig(batch_size=4, target_update=5)
    ctrl = SemiSequentialController(MLP_SPEC, cfg, seed=1)
    buf = ReplayBuffer(capacity=64)
    rng = np.random.default_rng(10)
    state = rng.random(MLP_SPEC.input_shape).astype(np.float32)
    for i in range(16):
        buf.push(state, i % 5, 0.5, state)

    digests = [params_digest(ctrl.target)]
    for k in range(10):
        ctrl.disseminate()
        ctrl.gradient_step(buf, rng)
        digests.append(params_digest(ctrl.target))
    # steps 1..4 unchanged, changes at 5, unchanged 6..9, changes at 10
    assert digests[0] == digests[1] == digests[2] == digests[3] == digests[4]
    assert digests[5] != digests[4]
    assert digests[5] == digests[6] == digests[7] == digests[8] == digests[9]
    assert digests[10] != digests[9]


# --- the training loop -------------------------------------------------------

TINY_PERCEPT = PerceptionConfig(height=32, width=16, scale=6.25, stack_depth=4)
TINY_SPEC = QNetworkSpec.desk(frames=4, height=32, width=16)


def tiny_factory(seed):
    return TrafficEnv(
        ScenarioConfig(n_av=2, n_hv=4), TINY_PERCEPT, SvoConfig(), seed=seed
    )


def test_prefill_only_run_takes_no_gradient_steps():
    cfg = TrainConfig(n_episodes=3, prefill_episodes=3, replay_capacity=500)
    net, log = train(
        tiny_factory, cfg, SvoConfig(), SafetyConfig(), seed=0, net_spec=TINY_SPEC
    )
    assert len(log) == 3
    assert all(row["loss_mean"] == 0.0 for row in log)
    assert all(row["epsilon"] == 1.0 for row in log)


def test_training_log_has_fixed_keys_and_jsonl_output(tmp_path):
    cfg = TrainConfig(n_episodes=4, prefill_episodes=2, replay_capacity=500)
    log_path = tmp_path / "log.jsonl"
    ckpt_path = tmp_path / "ckpt.pt"
    net, log = train(
        tiny_factory, cfg, SvoConfig(), SafetyConfig(), seed=0,
        net_spec=TINY_SPEC, log_path=str(log_path),
        checkpoint_path=str(ckpt_path), config_hash="deadbeef",
    )
    rows = [json.loads(x) for x in log_path.read_text().splitlines()]
    assert len(rows) == 4
    expected = {
        "episode", "return_breakdown", "crashes", "shield_interventions",
        "epsilon", "loss_mean", "config_hash", "seed",
    }
    assert all(set(r) == expected for r in rows)
    assert all(r["config_hash"] == "deadbeef" for r in rows)
    reloaded = load_checkpoint(str(ckpt_path))
    assert params_digest(reloaded) == params_digest(net)
    meta = json.loads((tmp_path / "ckpt.pt.json").read_text())
    assert meta["config_hash"] == "deadbeef" and meta["seed"] == 0


def test_same_seed_reproduces_actions_and_parameters():
    torch.set_num_threads(1)
    try:
        cfg = TrainConfig(
            n_episodes=4, prefill_episodes=1, replay_capacity=500,
            trace_actions=True,
        )
        runs = []
        for _ in range(2):
            net, log = train(
                tiny_factory, cfg, SvoConfig(), SafetyConfig(), seed=13,
                net_spec=TINY_SPEC,
            )
            runs.append((params_digest(net), [row["actions"] for row in log]))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
    finally:
        torch.set_num_threads(2)


def test_divergence_guard_raises():
    from socialdrive.trainer import TrainingDiverged

    cfg = TrainConfig(
        n_episodes=3, prefill_episodes=1, replay_capacity=500,
        batch_size=4, learning_rate=1e6, divergence_guard=1e-12,
    )
    with pytest.raises(TrainingDiverged):
        train(tiny_factory, cfg, SvoConfig(), SafetyConfig(), seed=0, net_spec=TINY_SPEC)


def test_epsilon_schedule_linear():
    cfg = TrainConfig(n_episodes=150, prefill_episodes=50)
    assert cfg.epsilon_at(0) == 1.0
    assert cfg.epsilon_at(49) == 1.0
    assert cfg.epsilon_at(50) == pytest.approx(1.0)
    assert cfg.epsilon_at(100) == pytest.approx(0.525)
    assert cfg.epsilon_at(149) == pytest.approx(0.05, abs=0.01)
    assert cfg.epsilon_at(10_000) == 0.05


def test_checkpoint_round_trip_preserves_bytes(tmp_path):
    torch.manual_seed(2)
    net = QNetwork(MLP_SPEC)
    path = tmp_path / "net.pt"
    save_checkpoint(net, str(path), {"config_hash": "x", "seed": 1})
    again = load_checkpoint(str(path))
    assert params_digest(again) == params_digest(net)


def test_degenerate_conv_spec_rejected():
    bad = QNetworkSpec(
        frames=2, channels=1, height=4, width=4,
        conv=(
            ConvSpec(4, kernel=(2, 3, 3), stride=(2, 2, 2), padding=(0, 1, 1)),
            ConvSpec(8, kernel=(2, 3, 3), stride=(2, 2, 2), padding=(0, 1, 1)),
        ),
        fc=(8,),
    )
    with pytest.raises(ValueError):
        QNetwork(bad)
