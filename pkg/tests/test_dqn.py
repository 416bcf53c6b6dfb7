import numpy as np
import pytest

from backdoor_rl.dqn import (DqnAgent, DqnConfig, EpisodeRunner, GreedyNetPolicy, ReplayBuffer,
                             TabularQAgent, collect, dqn_update, evaluate)
from backdoor_rl.envs import CartPole
from backdoor_rl.mdp import TransitionBatch
from backdoor_rl.nn import Mlp


def test_replay_buffer_ring():
    buf = ReplayBuffer(3, 2)
    with pytest.raises(ValueError):
        buf.sample(1, np.random.default_rng(0))
    for i in range(5):
        buf.add([i, i], i % 2, float(i), [i + 1, i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.all().rewards.tolist()) == [2.0, 3.0, 4.0]
    idx, b = buf.sample(50, np.random.default_rng(0))
    assert set(b.rewards.tolist()) <= {2.0, 3.0, 4.0}
    assert np.all(idx < 3)
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)


def test_epsilon_schedule():
    cfg = DqnConfig(epsilon_start=1.0, epsilon_end=0.05, epsilon_decay_steps=100)
    eps = [cfg.epsilon(t) for t in range(0, 300, 7)]
    assert eps[0] == 1.0 and eps[-1] == pytest.approx(0.05)
    assert all(0.0 <= e <= 1.0 for e in eps)
    assert all(b <= a for a, b in zip(eps, eps[1:]))
    with pytest.raises(ValueError):
        DqnConfig(epsilon_end=1.5)
    with pytest.raises(ValueError):
        DqnConfig(gamma=1.0)


def test_collect_uniform_actions():
    agent = DqnAgent(4, 2, seed=0)
    runner = EpisodeRunner(CartPole(), np.random.default_rng(1))
    ts = collect(agent, runner, 10_000, epsilon=1.0)
    frac = np.mean([t.action for t in ts])
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_collect_greedy_and_deterministic():
    agent = DqnAgent(4, 2, seed=0)
    runner = EpisodeRunner(CartPole(), np.random.default_rng(1))
    ts = collect(agent, runner, 300, epsilon=0.0)
    for t in ts:
        assert t.action == int(np.argmax(agent.q_values(t.state[None])[0]))
    again = collect(DqnAgent(4, 2, seed=0), EpisodeRunner(CartPole(), np.random.default_rng(1)),
                    300, epsilon=0.0)
    assert all(np.array_equal(a.state, b.state) and a.action == b.action for a, b in zip(ts, again))


def test_truncation_is_not_terminal():
    env = CartPole(max_steps=3)
    runner = EpisodeRunner(env, np.random.default_rng(0))
    ts = [runner.step(lambda s: 0 if s[2] > 0 else 1) for _ in range(3)]
    assert not any(t.done for t in ts)
    assert runner.finished_returns == [3.0]


def _batch(states, actions, rewards, next_states, dones):
    return TransitionBatch(np.asarray(states, float), np.asarray(actions), np.asarray(rewards, float),
                           np.asarray(next_states, float), np.asarray(dones, bool))


def test_update_at_fixed_point_is_zero():
    agent = DqnAgent(2, 2, DqnConfig(hidden=(4,), gamma=0.9), seed=0)
    agent.net.params[:] = 0.0
    agent.sync_target()
    b = _batch([[1, 0], [0, 1]], [0, 1], [0.0, 0.0], [[0, 1], [1, 0]], [False, False])
    before = agent.net.params.copy()
    assert dqn_update(agent, b) == 0.0
    assert np.array_equal(agent.net.params, before)


def test_terminal_target_is_reward():
    agent = DqnAgent(2, 2, DqnConfig(hidden=(4,), gamma=0.9, grad_clip=0.0), seed=0)
    agent.target.params[:] = 5.0  # would dominate any bootstrapped target
    b = _batch([[1, 0]], [1], [2.0], [[0, 1]], [True])
    q = agent.q_values(b.states)[0, 1]
    loss = agent.update(b)
    assert loss == pytest.approx((q - 2.0) ** 2)
    with pytest.raises(ValueError):
        agent.update(_batch(np.zeros((0, 2)), np.zeros(0, int), [], np.zeros((0, 2)), []))


def test_target_sync_period():
    agent = DqnAgent(2, 2, DqnConfig(hidden=(4,), target_sync=3), seed=0)
    b = _batch([[1, 0]], [1], [1.0], [[0, 1]], [False])
    start = agent.target.params.copy()
    agent.update(b)
    agent.update(b)
    assert np.array_equal(agent.target.params, start)
    agent.update(b)
    assert np.array_equal(agent.target.params, agent.net.params)


class PushRight:
    def __call__(self, state):
        return 1


def test_evaluate_modes():
    ret, per = evaluate(PushRight(), "activated", episodes=3, seed=0)
    assert ret < 100 and len(per) == 3
    with pytest.raises(ValueError):
        evaluate(PushRight(), episodes=0)
    with pytest.raises(ValueError):
        evaluate(PushRight(), "sometimes")


def test_compiled_and_python_rollouts_agree():
    net = Mlp([4, 16, 2], seed=3)
    fast = evaluate(GreedyNetPolicy(net), "activated", 4, seed=9)
    policy = GreedyNetPolicy(net)
    slow = evaluate(lambda s: policy(np.asarray(s)[None]), "activated", 4, seed=9)
    assert fast == slow


def test_tabular_q_agent():
    agent = TabularQAgent(2, 2, gamma=0.5, lr=1.0, epsilon=0.0)
    td = agent.update(0, 1, 1.0, 1, done=True)
    assert td == 1.0 and agent.q[0, 1] == 1.0
    assert agent.act(0, np.random.default_rng(0)) == 1
