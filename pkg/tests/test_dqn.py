import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from functions.dqn import (
    DQNAgent, GreedyPolicy, NullPolicy, QNetwork, ReplayBuffer, ReplayNotReady, TrainConfig, TrainingFaultError,
    adam_step, gradients, select_action, soft_update, td_targets)
from functions.relay_env import N_ACTIONS


def linear_net(row) -> QNetwork:
    """one linear layer from a single input to the action values"""
    return QNetwork([np.array([row], dtype=float)], [np.zeros(N_ACTIONS)])


def random_small_net(rng) -> QNetwork:
    dims = [int(rng.integers(1, 9))] + [int(rng.integers(1, 9)) for _ in range(int(rng.integers(0, 3)))] + [N_ACTIONS]
    net = QNetwork.initialize(dims, rng)
    net.biases = [rng.normal(0, 0.5, size=b.shape) for b in net.biases]
    return net


def loss_of(net, obs, actions, targets) -> float:
    q = net.forward(obs)[np.arange(len(actions)), actions]
    return float(np.mean((targets - q) ** 2))


def test_zero_net_outputs_zero():
    net = QNetwork([np.zeros((4, 6)), np.zeros((6, N_ACTIONS))], [np.zeros(6), np.zeros(N_ACTIONS)])
    np.testing.assert_array_equal(net(np.ones(4)), np.zeros(N_ACTIONS))
    assert net.forward(np.ones((3, 4))).shape == (3, N_ACTIONS)


def test_hand_computed_forward():
    w1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    w2 = np.zeros((2, N_ACTIONS))
    w2[0, 0], w2[1, 1], w2[0, 5] = 2.0, 3.0, -1.0
    b2 = np.zeros(N_ACTIONS)
    b2[10] = 0.5
    net = QNetwork([w1, w2], [np.zeros(2), b2])
    q = net([1.5, -2.0])
    # * the second hidden unit is cut by the ReLU
    expected = np.zeros(N_ACTIONS)
    expected[0], expected[5], expected[10] = 3.0, -1.5, 0.5
    np.testing.assert_array_equal(q, expected)
    np.testing.assert_array_equal(net([1.5, -7.0]), q)


def test_dimension_mismatch():
    net = QNetwork.initialize([3, 4, N_ACTIONS], np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(np.zeros(5))


def test_zero_residual_gives_zero_gradients():
    rng = np.random.default_rng(1)
    net = QNetwork.initialize([5, 7, N_ACTIONS], rng)
    obs = rng.normal(size=(4, 5))
    actions = np.array([0, 3, 3, 10])
    targets = net(obs)[np.arange(4), actions]
    loss, gw, gb = gradients(net, obs, actions, targets)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in gw + gb)


def test_single_linear_layer_gradient():
    net = QNetwork([np.full((3, N_ACTIONS), 0.1)], [np.zeros(N_ACTIONS)])
    x = np.array([1.0, -2.0, 0.5])
    q = float(net(x)[4])
    loss, gw, gb = gradients(net, x, np.array([4]), np.array([2.0]))
    expected = np.zeros((3, N_ACTIONS))
    expected[:, 4] = -2 * (2.0 - q) * x
    np.testing.assert_allclose(gw[0], expected, rtol=1e-12)
    assert gb[0][4] == pytest.approx(-2 * (2.0 - q))
    assert loss == pytest.approx((2.0 - q) ** 2)


@pytest.mark.parametrize('seed', range(50))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    h = 1e-5
    # * redraw until no hidden pre-activation sits near a ReLU kink
    while True:
        net = random_small_net(rng)
        batch = int(rng.integers(1, 5))
        obs = rng.normal(size=(batch, net.dims[0]))
        _, pre = net._forward(obs)
        if all(np.min(np.abs(z)) > 1e-2 for z in pre[:-1]):
            break
    actions = rng.integers(0, N_ACTIONS, size=batch)
    targets = rng.normal(0, 5, size=batch)
    _, gw, gb = gradients(net, obs, actions, targets)
    for params, grads in ((net.weights, gw), (net.biases, gb)):
        for p, g in zip(params, grads):
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                keep = p[idx]
                p[idx] = keep + h
                up = loss_of(net, obs, actions, targets)
                p[idx] = keep - h
                dn = loss_of(net, obs, actions, targets)
                p[idx] = keep
                numeric[idx] = (up - dn) / (2 * h)
            scale = np.maximum(np.abs(numeric), np.abs(g))
            assert np.all(np.abs(numeric - g) <= 1e-4 * scale + 1e-7)


def test_non_finite_loss_is_a_training_fault():
    net = QNetwork([np.full((2, N_ACTIONS), np.inf)], [np.zeros(N_ACTIONS)])
    with pytest.raises(TrainingFaultError):
        gradients(net, np.ones((1, 2)), np.array([0]), np.array([0.0]))


def test_td_target_examples():
    online = linear_net([0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 0])
    target = linear_net([0, 0, 10, 0, 0, 0, 0, 0, 0, 0, 0])
    y = td_targets([5.0, -120.0], [[1.0], [1.0]], [False, True], online, target, gamma=0.99)
    assert y[0] == pytest.approx(14.9)
    assert y[1] == -120.0


def test_double_and_vanilla_targets_differ():
    online = linear_net([0, 0, 3, 0, 0, 1, 0, 0, 0, 0, 0])
    target = linear_net([0, 0, 10, 0, 0, 20, 0, 0, 0, 0, 0])
    double = td_targets([5.0], [[1.0]], [False], online, target, gamma=0.99, double=True)
    vanilla = td_targets([5.0], [[1.0]], [False], online, target, gamma=0.99, double=False)
    assert double[0] == pytest.approx(14.9)
    assert vanilla[0] == pytest.approx(24.8)


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    new_p, m, v = adam_step(p, [np.zeros(2)], [np.zeros(2)], [np.zeros(2)], step=1, lr=0.1)
    np.testing.assert_array_equal(new_p[0], p[0])


def test_adam_first_step():
    new_p, m, v = adam_step([np.array(1.0)], [np.array(0.5)], [np.array(0.0)], [np.array(0.0)], step=1, lr=0.1)
    # * bias correction makes the first step lr * g / |g|
    assert float(new_p[0]) == pytest.approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8))
    assert float(m[0]) == pytest.approx(0.05)
    assert float(v[0]) == pytest.approx(0.00025)


def test_adam_on_quadratic():
    p, m, v = [np.array(5.0)], [np.array(0.0)], [np.array(0.0)]
    losses = []
    for step in range(1, 101):
        losses.append(float(p[0]) ** 2)
        p, m, v = adam_step(p, [2 * p[0]], m, v, step=step, lr=0.01)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_soft_update():
    target = QNetwork([np.zeros((2, 3))], [np.zeros(3)])
    online = QNetwork([np.ones((2, 3))], [np.ones(3)])
    soft_update(target, online, 0.005)
    np.testing.assert_allclose(target.weights[0], 0.005)
    same = online.copy()
    soft_update(same, online, 0.005)
    np.testing.assert_array_equal(same.weights[0], online.weights[0])


def test_soft_update_converges_geometrically():
    target = QNetwork([np.zeros((1, 1))], [np.zeros(1)])
    online = QNetwork([np.ones((1, 1))], [np.ones(1)])
    for _ in range(1000):
        soft_update(target, online, 0.005)
    assert 1 - target.weights[0][0, 0] == pytest.approx(0.995 ** 1000, rel=1e-9)


def test_select_action_greedy_and_ties():
    q = np.zeros(N_ACTIONS)
    q[3] = q[7] = 1.0
    assert select_action(q, 0.0) == 3
    q[9] = 2.0
    assert select_action(q, 0.0, np.random.default_rng(0)) == 9


def test_select_action_uniform_exploration():
    rng = np.random.default_rng(0)
    q = np.arange(N_ACTIONS, dtype=float)
    counts = np.bincount([select_action(q, 1.0, rng) for _ in range(100000)], minlength=N_ACTIONS)
    np.testing.assert_allclose(counts / 100000, 1 / N_ACTIONS, atol=0.01)


def test_replay_is_fifo():
    buf = ReplayBuffer(2000, obs_dim=1)
    for k in range(2001):
        buf.push([k], k % N_ACTIONS, float(k), [k + 1], False)
    assert len(buf) == 2000
    stored = buf.obs[buf.ordered_indices(), 0]
    assert stored[0] == 1 and stored[-1] == 2000
    assert 0 not in stored
    with pytest.raises(ValueError):
        buf.push([0], N_ACTIONS, 0.0, [0], False)


def test_replay_sampling():
    rng = np.random.default_rng(0)
    one = ReplayBuffer(5, obs_dim=2)
    one.push([1, 2], 4, -10.0, [3, 4], True)
    obs, actions, rewards, next_obs, terminals = one.sample(1, rng)
    np.testing.assert_array_equal(obs, [[1, 2]])
    assert actions[0] == 4 and rewards[0] == -10.0 and terminals[0]
    with pytest.raises(ReplayNotReady):
        one.sample(2, rng)

    ten = ReplayBuffer(10, obs_dim=1)
    for k in range(10):
        ten.push([k], 0, 0.0, [k], False)
    counts = np.zeros(10)
    # * 10**4 batches of 10 draw 10**5 samples in total
    for _ in range(10000):
        counts += np.bincount(ten.sample(10, rng)[0][:, 0].astype(int), minlength=10)
    assert counts.sum() == 10 ** 5
    np.testing.assert_allclose(counts / counts.sum(), 0.1, atol=0.01)
    with pytest.raises(ReplayNotReady):
        ten.sample(11, rng)


def test_json_round_trip_is_exact(tmp_path):
    net = QNetwork.initialize([14, 128, 256, 128, N_ACTIONS], np.random.default_rng(3))
    path = str(tmp_path / 'RA.json')
    net.to_json(path, input_mode='sequence', m=2, relay='RA')
    back = QNetwork.from_json(path)
    assert back.digest() == net.digest()
    with open(path) as f:
        doc = json.load(f)
    assert doc['dims'] == [14, 128, 256, 128, N_ACTIONS]
    assert doc['input_mode'] == 'sequence' and doc['m'] == 2
    doc['format_version'] = 99
    with pytest.raises(ValueError):
        QNetwork.from_dict(doc)


def test_training_step_is_reproducible():
    config = TrainConfig(hidden=(8, 8), batch_size=4, warmup=10, buffer_capacity=50)

    def run():
        agent = DQNAgent(6, config, np.random.default_rng(11))
        data = np.random.default_rng(5)
        losses = []
        for _ in range(30):
            obs, nxt = data.normal(size=6), data.normal(size=6)
            a = agent.act(obs, 0.5)
            agent.remember(obs, a, float(data.choice([5.0, -10.0, 100.0, -120.0])), nxt, bool(data.random() < 0.1))
            losses.append(agent.learn())
        return agent, losses

    a, la = run()
    b, lb = run()
    assert la[:9] == [None] * 9
    assert la == lb
    assert a.online.digest() == b.online.digest()
    assert a.target.digest() == b.target.digest()
    assert a.online.dims == [6, 8, 8, N_ACTIONS]


def test_agent_scales_rewards_and_uses_env_discount(monkeypatch):
    seen = {}

    def recording_targets(rewards, next_obs, terminals, online, target, gamma, double=True):
        seen.update(rewards=np.array(rewards), gamma=gamma)
        return td_targets(rewards, next_obs, terminals, online, target, gamma, double)

    monkeypatch.setattr('functions.dqn.td_targets', recording_targets)
    config = TrainConfig(hidden=(4,), batch_size=2, warmup=2, buffer_capacity=4)
    agent = DQNAgent(2, config, np.random.default_rng(0), gamma=0.5)
    agent.remember([0.0, 1.0], 3, 100.0, [1.0, 0.0], True)
    agent.remember([1.0, 0.0], 5, -120.0, [0.0, 1.0], True)
    assert agent.learn() is not None
    assert seen['gamma'] == 0.5
    assert all(np.isclose(r, 1.0) or np.isclose(r, -1.2) for r in seen['rewards'])
    with pytest.raises(ValueError):
        DQNAgent(2, config, np.random.default_rng(0), gamma=1.0)


def test_policies():
    net = linear_net([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1])
    assert GreedyPolicy(net)(np.array([1.0])) == 10
    assert NullPolicy()(np.array([1.0])) == 0


def test_epsilon_schedule():
    config = TrainConfig()
    assert config.epsilon(0, 100) == 1.0
    assert config.epsilon(30, 100) == pytest.approx(1.0 + (0.05 - 1.0) * 0.5)
    assert config.epsilon(60, 100) == 0.05
    assert config.epsilon(99, 100) == 0.05


@pytest.mark.parametrize('kwargs', [{'learning_rate': 0.0}, {'tau': 1.0}, {'reward_scale': 0.0}, {'epsilon_end': 1.5},
                                    {'batch_size': 64, 'buffer_capacity': 32, 'warmup': 0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


@settings(deadline=None)
@given(st.integers(1, 20), st.integers(0, 60))
def test_replay_keeps_the_newest_items(capacity, n_push):
    buf = ReplayBuffer(capacity, obs_dim=1)
    for k in range(n_push):
        buf.push([k], 0, float(k), [k], False)
    assert len(buf) == min(n_push, capacity)
    stored = buf.obs[buf.ordered_indices(), 0].tolist()
    assert stored == list(range(max(0, n_push - capacity), n_push))
