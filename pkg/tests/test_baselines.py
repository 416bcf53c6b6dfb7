import numpy as np
import pytest

from backdoor_rl.attacker import TargetPolicy
from backdoor_rl.baselines import (IdentityPoisoner, MinmaxPoisoner, NeighbourhoodPoisoner,
                                   RandomPoisoner, minmax_poison, neighbourhood_poison,
                                   random_poison)
from backdoor_rl.envs import TriggerSpec
from backdoor_rl.mdp import Transition, TransitionBatch


class PushLeft:
    def actions(self, states):
        return np.zeros(len(states), dtype=np.int64)


TP = TargetPolicy(PushLeft(), 1, TriggerSpec())
ON = np.array([0.7, 0.0, 0.0, 0.0])
OFF = np.array([0.1, 0.0, 0.0, 0.0])


def t(state, action, r=1.0):
    return Transition(state, action, r, state, False)


def test_neighbourhood_rule():
    assert neighbourhood_poison(t(ON, 0), TP, 2.0) == -1.0
    assert neighbourhood_poison(t(OFF, 0), TP, 2.0) == 1.0
    assert neighbourhood_poison(t(ON, 1), TP, 2.0) == 1.0
    with pytest.raises(ValueError):
        neighbourhood_poison(t(ON, 0), TP, -1.0)


def test_minmax_rule():
    assert minmax_poison(t(ON, 1), TP, 1.0, -1.0) == 1.0
    assert minmax_poison(t(ON, 0), TP, 1.0, -1.0) == -1.0
    assert minmax_poison(t(OFF, 0, 0.3), TP, 1.0, -1.0) == 0.3
    with pytest.raises(ValueError):
        minmax_poison(t(ON, 0), TP, -1.0, 1.0)


def test_random_rule_ranges_and_mean():
    rng = np.random.default_rng(0)
    up = np.array([random_poison(t(ON, 1), TP, 2.0, rng) for _ in range(10_000)]) - 1.0
    down = np.array([random_poison(t(ON, 0), TP, 2.0, rng) for _ in range(10_000)]) - 1.0
    assert up.min() >= 0 and up.max() <= 2.0
    assert down.min() >= -2.0 and down.max() <= 0
    sigma = 2.0 / np.sqrt(12) / np.sqrt(10_000)
    assert abs(up.mean() - 1.0) < 3 * sigma
    assert abs(down.mean() + 1.0) < 3 * sigma
    # no draw for untriggered transitions
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    assert random_poison(t(OFF, 0), TP, 2.0, a) == 1.0
    assert a.random() == b.random()


def _batch(states, actions, rewards):
    states = np.asarray(states, dtype=float)
    return TransitionBatch(states, np.asarray(actions), np.asarray(rewards, float), states + 0.01,
                           np.zeros(len(actions), bool))


@pytest.mark.parametrize("poisoner,rule", [
    (NeighbourhoodPoisoner(TP, 2.0), lambda tr: neighbourhood_poison(tr, TP, 2.0)),
    (MinmaxPoisoner(TP, 1.0, -1.0), lambda tr: minmax_poison(tr, TP, 1.0, -1.0)),
])
def test_batch_poisoners_match_scalar_rules(poisoner, rule):
    rng = np.random.default_rng(1)
    states = rng.uniform(-1, 1, size=(200, 4))
    actions = rng.integers(0, 2, 200)
    rewards = rng.normal(size=200)
    b = _batch(states, actions, rewards)
    out = poisoner.poison_batch(b)
    expect = [rule(Transition(states[i], int(actions[i]), rewards[i], states[i])) for i in range(200)]
    assert np.allclose(out.rewards, expect)
    assert np.array_equal(out.states, b.states) and np.array_equal(out.actions, b.actions)


def test_random_poisoner_matches_scalar_stream():
    rng = np.random.default_rng(2)
    states = rng.uniform(-1, 1, size=(100, 4))
    actions = rng.integers(0, 2, 100)
    out = RandomPoisoner(TP, 2.0, rng=11).poison_batch(_batch(states, actions, np.ones(100)))
    scalar_rng = np.random.default_rng(11)
    expect = [random_poison(Transition(states[i], int(actions[i]), 1.0, states[i]), TP, 2.0,
                            scalar_rng) for i in range(100)]
    assert np.allclose(out.rewards, expect)


def test_identity_and_tabular_target():
    b = _batch(np.eye(4), [0, 1, 0, 1], [1, 2, 3, 4])
    out = IdentityPoisoner().poison_batch(b)
    assert np.array_equal(out.rewards, b.rewards) and out.rewards is not b.rewards
    assert np.all(IdentityPoisoner().reward_shift(b.states, b.actions) == 0)


def test_constructor_validation():
    with pytest.raises(ValueError):
        NeighbourhoodPoisoner(TP, -2)
    with pytest.raises(ValueError):
        MinmaxPoisoner(TP, 0.0, 0.0)
    with pytest.raises(ValueError):
        RandomPoisoner(TP, 0.0)
