"""Heuristic comparison attackers.

Each rule touches rewards only at triggered states and leaves every other
transition alone. The scalar functions poison a single transition; the
poisoner classes apply the same rule to a whole batch.
"""

from __future__ import annotations

import numpy as np

from .mdp import Transition, TransitionBatch


def _triggered_and_target(tp, state):
    arr = np.asarray(state)
    batch = arr[None] if arr.ndim >= 1 else arr.reshape(1)
    return bool(tp.trigger.mask(batch)[0]), tp(state)


def neighbourhood_poison(t: Transition, tp, penalty: float) -> float:
    """Subtract ``penalty`` from non-target actions taken in triggered states."""
    if penalty < 0:
        raise ValueError("penalty must be non-negative")
    trig, target = _triggered_and_target(tp, t.state)
    if trig and t.action != target:
        return t.reward - penalty
    return t.reward


def minmax_poison(t: Transition, tp, r_max: float, r_min: float) -> float:
    """In triggered states: ``r_max`` for the target action, ``r_min`` otherwise."""
    if not r_max > r_min:
        raise ValueError("r_max must exceed r_min")
    trig, target = _triggered_and_target(tp, t.state)
    if not trig:
        return t.reward
    return r_max if t.action == target else r_min


def random_poison(t: Transition, tp, bound: float, rng: np.random.Generator) -> float:
    """In triggered states: add U(0, bound) to the target action, subtract it otherwise.

    A draw is consumed only for triggered transitions.
    """
    if bound <= 0:
        raise ValueError("bound must be positive")
    trig, target = _triggered_and_target(tp, t.state)
    if not trig:
        return t.reward
    u = rng.uniform(0.0, bound)
    return t.reward + u if t.action == target else t.reward - u


class _RulePoisoner:
    name = "base"

    def __init__(self, tp):
        self.tp = tp

    def _shift(self, states, actions, rewards, trig, is_target) -> np.ndarray:
        raise NotImplementedError

    def reward_shift(self, states, actions, rewards=None) -> np.ndarray:
        """r_bar - r for a batch of (state, action) pairs."""
        actions = np.asarray(actions, dtype=np.int64)
        if rewards is None:
            rewards = np.ones(actions.shape[0])
        trig = self.tp.trigger.mask(states)
        is_target = actions == self.tp.actions(states)
        out = np.zeros(actions.shape[0])
        if trig.any():
            out[trig] = self._shift(states, actions, np.asarray(rewards, dtype=np.float64),
                                    trig, is_target)[trig]
        return out

    def poison_batch(self, batch: TransitionBatch) -> TransitionBatch:
        shift = self.reward_shift(batch.states, batch.actions, batch.rewards)
        return batch.with_rewards(batch.rewards + shift)


class NeighbourhoodPoisoner(_RulePoisoner):
    name = "neighbourhood"

    def __init__(self, tp, penalty: float = 2.0):
        if penalty < 0:
            raise ValueError("penalty must be non-negative")
        super().__init__(tp)
        self.penalty = float(penalty)

    def _shift(self, states, actions, rewards, trig, is_target):
        return np.where(is_target, 0.0, -self.penalty)


class MinmaxPoisoner(_RulePoisoner):
    name = "minmax"

    def __init__(self, tp, r_max: float = 1.0, r_min: float = -1.0):
        if not r_max > r_min:
            raise ValueError("r_max must exceed r_min")
        super().__init__(tp)
        self.r_max = float(r_max)
        self.r_min = float(r_min)

    def _shift(self, states, actions, rewards, trig, is_target):
        return np.where(is_target, self.r_max, self.r_min) - rewards


class RandomPoisoner(_RulePoisoner):
    name = "random"

    def __init__(self, tp, bound: float = 2.0, rng=None):
        if bound <= 0:
            raise ValueError("bound must be positive")
        super().__init__(tp)
        self.bound = float(bound)
        self.rng = np.random.default_rng(rng)

    def _shift(self, states, actions, rewards, trig, is_target):
        # one draw per triggered entry, in batch order
        u = np.zeros(actions.shape[0])
        u[trig] = self.rng.uniform(0.0, self.bound, size=int(trig.sum()))
        return np.where(is_target, u, -u)


class IdentityPoisoner:
    name = "none"

    def reward_shift(self, states, actions, rewards=None) -> np.ndarray:
        return np.zeros(np.asarray(actions).shape[0])

    def poison_batch(self, batch: TransitionBatch) -> TransitionBatch:
        return batch.with_rewards(batch.rewards.copy())


BASELINES = {
    "neighbourhood": NeighbourhoodPoisoner,
    "minmax": MinmaxPoisoner,
    "random": RandomPoisoner,
}
