import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backdoor_rl.envs import make_chain_mdp
from backdoor_rl.mdp import (ConvergenceError, DeterministicPolicy, TabularMDP, Transition,
                             TransitionBatch, bellman_residual, greedy_policy, margin_check,
                             margins_satisfied, non_reward_fields_identical, optimal_q,
                             policy_evaluation)


def random_mdp(rng, S=4, A=3, gamma=0.9):
    P = rng.random((S, A, S))
    P /= P.sum(axis=2, keepdims=True)
    return TabularMDP(S, A, P, rng.normal(size=(S, A)), gamma)


def test_policy_evaluation_single_state():
    mdp = TabularMDP(1, 1, [[[1.0]]], [[1.0]], 0.9)
    q = policy_evaluation(mdp, DeterministicPolicy([0]), tol=1e-10)
    assert q[0, 0] == pytest.approx(10.0, abs=1e-9)


def test_policy_evaluation_zero_reward():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng).with_reward(np.zeros((4, 3)))
    q = policy_evaluation(mdp, DeterministicPolicy([0, 1, 2, 0]))
    assert np.all(q == 0.0)


def test_policy_evaluation_matches_monte_carlo():
    # 2-state chain, action 0 stays put, action 1 switches; r = [1, 0]
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    P[0, 1, 1] = P[1, 1, 0] = 1.0
    R = np.array([[1.0, 1.0], [0.0, 0.0]])
    gamma = 0.5
    mdp = TabularMDP(2, 2, P, R, gamma)
    q = policy_evaluation(mdp, DeterministicPolicy([0, 0]), tol=1e-12)

    # independent estimate: 10^6 sampled steps split over all start pairs
    rng = np.random.default_rng(1)
    horizon = 40  # gamma^40 < 1e-12
    n = 1_000_000 // horizon // 4
    est = np.zeros((2, 2))
    for s0 in range(2):
        for a0 in range(2):
            s = np.full(n, s0)
            a = np.full(n, a0)
            ret = np.zeros(n)
            for t in range(horizon):
                ret += gamma**t * R[s, a]
                s = (rng.random(n) < P[s, a, 1]).astype(int)
                a = np.zeros(n, dtype=int)
            est[s0, a0] = ret.mean()
    assert np.max(np.abs(est - q)) < 1e-3


def test_policy_evaluation_residual_within_tol():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, gamma=0.95)
    pi = DeterministicPolicy([2, 0, 1, 1])
    q = policy_evaluation(mdp, pi, tol=1e-9)
    assert np.max(bellman_residual(mdp, pi, q)) <= 1e-9


def test_policy_evaluation_iteration_cap():
    mdp = make_chain_mdp(3, gamma=0.99)
    with pytest.raises(ConvergenceError):
        policy_evaluation(mdp, DeterministicPolicy([1, 1, 1]), tol=1e-12, max_iter=3)


def test_chain_always_right_value():
    gamma = 0.9
    mdp = make_chain_mdp(5, slip=0.0, gamma=gamma)
    q = policy_evaluation(mdp, DeterministicPolicy([1] * 5), tol=1e-12)
    assert q[0, 1] == pytest.approx(gamma**4 / (1 - gamma), abs=1e-9)


def test_chain_rows():
    mdp = make_chain_mdp(2, 0.0)
    assert set(np.unique(mdp.transition)) == {0.0, 1.0}
    assert np.all(mdp.transition.sum(axis=2) == 1.0)
    mdp5 = make_chain_mdp(5, 0.1)
    assert np.allclose(mdp5.transition.sum(axis=2), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        make_chain_mdp(1)
    with pytest.raises(ValueError):
        make_chain_mdp(3, slip=1.0)


@pytest.mark.parametrize("bad", [
    dict(transition=np.full((2, 2, 2), 0.6)),
    dict(transition=-np.eye(2)[None].repeat(2, 0).transpose(1, 0, 2)),
    dict(gamma=1.0),
    dict(gamma=0.0),
    dict(reward=np.full((2, 2), np.nan)),
    dict(reward=np.zeros((3, 2))),
])
def test_mdp_validation(bad):
    args = dict(n_states=2, n_actions=2, transition=make_chain_mdp(2).transition,
                reward=np.zeros((2, 2)), gamma=0.9)
    args.update(bad)
    with pytest.raises(ValueError):
        TabularMDP(**args)


def test_mdp_roundtrip(tmp_path):
    mdp = make_chain_mdp(4, 0.2, 0.8)
    mdp.save(tmp_path / "m.json")
    back = TabularMDP.load(tmp_path / "m.json")
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma


def test_greedy_policy_examples():
    assert greedy_policy(np.array([[1.0, 2.0]])).action_of.tolist() == [1]
    assert greedy_policy(np.array([[3.0, 3.0]])).action_of.tolist() == [0]
    with pytest.raises(ValueError):
        greedy_policy(np.array([[np.inf, 0.0]]))


@given(st.integers(0, 10_000))
def test_greedy_policy_matches_scan(seed):
    q = np.random.default_rng(seed).integers(-3, 3, size=(4, 3)).astype(float)
    pi = greedy_policy(q)
    for s in range(4):
        best = 0
        for a in range(1, 3):
            if q[s, a] > q[s, best]:
                best = a
        assert pi(s) == best


def test_margin_check_examples():
    m = margin_check(np.array([[5.0, 1.0]]), DeterministicPolicy([0]), 0.5)
    assert m[0] == 4.0 and margins_satisfied(np.array([[5.0, 1.0]]), DeterministicPolicy([0]), 0.5)[0]
    q = np.array([[1.0, 1.0]])
    assert margin_check(q, DeterministicPolicy([0]))[0] == 0.0
    assert not margins_satisfied(q, DeterministicPolicy([0]), 0.1)[0]
    assert margin_check(np.array([[2.0]]), DeterministicPolicy([0]))[0] == np.inf


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_margin_check_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(5, 3))
    pi = DeterministicPolicy(rng.integers(0, 3, size=5))
    m = margin_check(q, pi)
    for s in range(5):
        expect = min(q[s, pi(s)] - q[s, a] for a in range(3) if a != pi(s))
        assert m[s] == pytest.approx(expect, abs=1e-12)


def test_optimal_q_is_greedy_fixed_point():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng)
    q = optimal_q(mdp)
    pi = greedy_policy(q)
    assert np.allclose(policy_evaluation(mdp, pi, tol=1e-11), q, atol=1e-8)


def test_policy_checks():
    with pytest.raises(ValueError):
        DeterministicPolicy([[0, 1]])
    mdp = make_chain_mdp(3)
    with pytest.raises(ValueError):
        policy_evaluation(mdp, DeterministicPolicy([0, 1]))
    with pytest.raises(ValueError):
        policy_evaluation(mdp, DeterministicPolicy([0, 1, 2]))


def test_transition_batch_roundtrip():
    ts = [Transition(0, 1, 0.5, 1, False), Transition(2, 0, -1.0, 2, True)]
    b = TransitionBatch.from_transitions(ts, n_states=3)
    assert b.states.tolist() == [[1, 0, 0], [0, 0, 1]]
    assert b.dones.tolist() == [False, True]
    back = b.to_transitions()
    assert [t.reward for t in back] == [0.5, -1.0]
    assert non_reward_fields_identical(b, b.with_rewards([9.0, 9.0]))
    moved = TransitionBatch(b.states, b.actions[::-1].copy(), b.rewards, b.next_states, b.dones)
    assert not non_reward_fields_identical(b, moved)
    assert len(b.concat(b)) == 4
    with pytest.raises(ValueError):
        TransitionBatch.from_transitions([])
