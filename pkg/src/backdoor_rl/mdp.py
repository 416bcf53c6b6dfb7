"""Finite MDPs, transitions, deterministic policies and exact policy evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ROW_SUM_TOL = 1e-9


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap."""


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite discounted MDP with dense ``transition[s, a, s']`` and ``reward[s, a]``."""

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        S, A = int(self.n_states), int(self.n_actions)
        if S < 1 or A < 1:
            raise ValueError("n_states and n_actions must be positive")
        if P.shape != (S, A, S):
            raise ValueError(f"transition shape {P.shape} != {(S, A, S)}")
        if R.shape != (S, A):
            raise ValueError(f"reward shape {R.shape} != {(S, A)}")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if np.any(P < 0.0) or np.any(P > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("transition rows must sum to 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "n_states", S)
        object.__setattr__(self, "n_actions", A)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    def with_reward(self, reward) -> "TabularMDP":
        return TabularMDP(self.n_states, self.n_actions, self.transition, reward, self.gamma)

    def sample_next(self, s: int, a: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.transition[s, a]))

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "P": self.transition.tolist(),
            "R": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMDP":
        return cls(data["n_states"], data["n_actions"], np.asarray(data["P"]),
                   np.asarray(data["R"]), data["gamma"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "TabularMDP":
        return cls.from_json(Path(path).read_text())


@dataclass
class Transition:
    """One experience record. ``state`` is an index (tabular) or a vector."""

    state: object
    action: int
    reward: float
    next_state: object
    done: bool = False


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    """Tabular deterministic policy: ``action_of[s]`` is the action taken in ``s``."""

    action_of: np.ndarray

    def __post_init__(self):
        arr = np.array(self.action_of, dtype=np.int64)
        if arr.ndim != 1:
            raise ValueError("action_of must be one-dimensional")
        arr.setflags(write=False)
        object.__setattr__(self, "action_of", arr)

    def __call__(self, s: int) -> int:
        return int(self.action_of[s])

    def __len__(self) -> int:
        return self.action_of.shape[0]

    def check(self, n_states: int, n_actions: int) -> None:
        if len(self) != n_states:
            raise ValueError(f"policy covers {len(self)} states, MDP has {n_states}")
        if np.any(self.action_of < 0) or np.any(self.action_of >= n_actions):
            raise ValueError("policy action index out of range")


def bellman_backup(mdp: TabularMDP, policy: DeterministicPolicy, q: np.ndarray) -> np.ndarray:
    """(T^pi Q)(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) Q(s', pi(s'))."""
    v_next = q[np.arange(mdp.n_states), policy.action_of]
    return mdp.reward + mdp.gamma * mdp.transition @ v_next


def iteration_cap(gamma: float, tol: float, margin: int = 100) -> int:
    """Contraction bound on the number of backups needed for residual ``tol``."""
    return int(math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma))) + margin


def policy_evaluation(mdp: TabularMDP, policy: DeterministicPolicy, tol: float = 1e-10,
                      max_iter: int | None = None) -> np.ndarray:
    """Q^pi by iterated backups; the returned table has Bellman residual <= ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy.check(mdp.n_states, mdp.n_actions)
    # rewards scale the residual; normalise the cap to unit-reward problems
    scale = max(1.0, float(np.max(np.abs(mdp.reward))))
    cap = max_iter if max_iter is not None else iteration_cap(mdp.gamma, tol / scale)
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(cap):
        q_next = bellman_backup(mdp, policy, q)
        if np.max(np.abs(q_next - q)) <= tol:
            return q_next
        q = q_next
    raise ConvergenceError(f"policy evaluation did not reach tol={tol} in {cap} backups")


def bellman_residual(mdp: TabularMDP, policy: DeterministicPolicy, q: np.ndarray) -> np.ndarray:
    return np.abs(bellman_backup(mdp, policy, q) - q)


def optimal_q(mdp: TabularMDP, tol: float = 1e-10) -> np.ndarray:
    """Q* by value iteration."""
    cap = iteration_cap(mdp.gamma, tol / max(1.0, float(np.max(np.abs(mdp.reward)))))
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(cap):
        q_next = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
        if np.max(np.abs(q_next - q)) <= tol:
            return q_next
        q = q_next
    raise ConvergenceError("value iteration did not converge")


def greedy_policy(q: np.ndarray) -> DeterministicPolicy:
    """argmax per row; ties go to the lowest action index."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("Q table must be finite")
    return DeterministicPolicy(np.argmax(q, axis=1))


def margin_check(q: np.ndarray, policy: DeterministicPolicy, epsilon: float = 0.0) -> np.ndarray:
    """Per-state margin Q(s, pi_s) - max_{a != pi_s} Q(s, a).

    The margin constraint holds at ``s`` iff the returned value is >= epsilon.
    With a single action the margin is +inf.
    """
    q = np.asarray(q, dtype=np.float64)
    n_states, n_actions = q.shape
    if len(policy) != n_states:
        raise ValueError("policy and Q table disagree on the number of states")
    rows = np.arange(n_states)
    chosen = q[rows, policy.action_of]
    if n_actions == 1:
        return np.full(n_states, np.inf)
    others = q.copy()
    others[rows, policy.action_of] = -np.inf
    return chosen - others.max(axis=1)


def margins_satisfied(q: np.ndarray, policy: DeterministicPolicy, epsilon: float) -> np.ndarray:
    return margin_check(q, policy, epsilon) >= epsilon


@dataclass
class TransitionBatch:
    """Struct-of-arrays view of a batch of transitions (states as vectors)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def from_transitions(cls, transitions, n_states: int | None = None) -> "TransitionBatch":
        """Stack records; integer states are one-hot encoded when ``n_states`` is given."""
        def enc(s):
            if n_states is not None and np.ndim(s) == 0:
                v = np.zeros(n_states)
                v[int(s)] = 1.0
                return v
            return np.asarray(s, dtype=np.float64)

        transitions = list(transitions)
        if not transitions:
            raise ValueError("empty transition list")
        return cls(
            np.stack([enc(t.state) for t in transitions]),
            np.array([t.action for t in transitions], dtype=np.int64),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.stack([enc(t.next_state) for t in transitions]),
            np.array([t.done for t in transitions], dtype=np.bool_),
        )

    def to_transitions(self) -> list[Transition]:
        return [Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                           self.next_states[i].copy(), bool(self.dones[i]))
                for i in range(len(self))]

    def with_rewards(self, rewards) -> "TransitionBatch":
        return TransitionBatch(self.states, self.actions, np.asarray(rewards, dtype=np.float64),
                               self.next_states, self.dones)

    def concat(self, other: "TransitionBatch") -> "TransitionBatch":
        return TransitionBatch(*(np.concatenate([a, b]) for a, b in zip(
            (self.states, self.actions, self.rewards, self.next_states, self.dones),
            (other.states, other.actions, other.rewards, other.next_states, other.dones))))


def non_reward_fields_identical(a: TransitionBatch, b: TransitionBatch) -> bool:
    """Bitwise equality of everything except the rewards."""
    return all(
        x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
        for x, y in ((a.states, b.states), (a.actions, b.actions),
                     (a.next_states, b.next_states), (a.dones, b.dones))
    )
