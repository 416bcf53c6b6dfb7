"""CartPole, chain MDPs and backdoor triggers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import kernels
from .kernels import THETA_THRESHOLD, X_THRESHOLD
from .mdp import TabularMDP

MAX_EPISODE_STEPS = 500
STATE_NAMES = ("x", "x_dot", "theta", "theta_dot")
PUSH_LEFT, PUSH_RIGHT = 0, 1

# Box used by the global intensity sampler. Velocities are unbounded in the
# dynamics; +-3 covers what the controller visits.
SAMPLE_LOW = np.array([-X_THRESHOLD, -3.0, -THETA_THRESHOLD, -3.0])
SAMPLE_HIGH = np.array([X_THRESHOLD, 3.0, THETA_THRESHOLD, 3.0])
_LIVE_LIMIT = {0: X_THRESHOLD, 2: THETA_THRESHOLD}


def _coord_index(name) -> int:
    if isinstance(name, str):
        if name not in STATE_NAMES:
            raise ValueError(f"unknown CartPole coordinate {name!r}")
        return STATE_NAMES.index(name)
    idx = int(name)
    if not 0 <= idx < 4:
        raise ValueError(f"coordinate index {idx} out of range")
    return idx


def check_override(coord: int, value: float) -> None:
    limit = _LIVE_LIMIT.get(coord)
    if not np.isfinite(value) or (limit is not None and abs(value) > limit):
        raise ValueError(f"override {STATE_NAMES[coord]}={value} is outside the live region")


@dataclass(frozen=True)
class TriggerSpec:
    """Threshold trigger on one observation coordinate.

    The region predicate is ``state[coordinate] > threshold`` (strict). At
    deployment the trigger is enforced by overwriting that coordinate with
    ``override_value`` at step ``override_step``.
    """

    coordinate: int = 0
    threshold: float = 0.5
    override_value: float = 0.6
    override_step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coordinate", _coord_index(self.coordinate))
        check_override(self.coordinate, self.override_value)
        if self.override_step < 0:
            raise ValueError("override_step must be >= 0")

    def is_triggered(self, state) -> bool:
        return bool(np.asarray(state, dtype=np.float64)[self.coordinate] > self.threshold)

    def mask(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        return states[:, self.coordinate] > self.threshold

    def apply(self, state) -> np.ndarray:
        out = np.array(state, dtype=np.float64)
        out[self.coordinate] = self.override_value
        return out

    def sample_region(self, n: int, rng: np.random.Generator,
                      low=SAMPLE_LOW, high=SAMPLE_HIGH) -> np.ndarray:
        """Uniform samples from the trigger region intersected with the box."""
        low = np.array(low, dtype=np.float64)
        low[self.coordinate] = max(low[self.coordinate], self.threshold)
        out = rng.uniform(low, high, size=(n, low.shape[0]))
        # uniform draws can land exactly on the open boundary
        edge = out[:, self.coordinate] <= self.threshold
        out[edge, self.coordinate] = np.nextafter(self.threshold, np.inf)
        return out


@dataclass(frozen=True)
class TabularTrigger:
    """Trigger defined by a set of state indices. States are given either as
    indices or as one-hot vectors."""

    states: frozenset

    def __init__(self, states):
        object.__setattr__(self, "states", frozenset(int(s) for s in states))

    def _index(self, state) -> int:
        arr = np.asarray(state)
        return int(arr) if arr.ndim == 0 else int(np.argmax(arr))

    def is_triggered(self, state) -> bool:
        return self._index(state) in self.states

    def mask(self, states) -> np.ndarray:
        arr = np.asarray(states)
        idx = arr.astype(np.int64) if arr.ndim == 1 else np.argmax(arr, axis=1)
        return np.isin(idx, sorted(self.states))


def is_triggered(state, spec) -> bool:
    return spec.is_triggered(state)


def cartpole_reset(seed=None, initial_override: Mapping | None = None) -> np.ndarray:
    """Uniform U(-0.05, 0.05) start state, then any coordinate overrides."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = rng.uniform(-0.05, 0.05, size=4)
    for name, value in (initial_override or {}).items():
        idx = _coord_index(name)
        check_override(idx, float(value))
        state[idx] = float(value)
    return state


def is_live(state) -> bool:
    return bool(abs(state[0]) <= X_THRESHOLD and abs(state[2]) <= THETA_THRESHOLD)


def cartpole_step(state, action: int) -> tuple[np.ndarray, float, bool]:
    """Pure physics step: (next_state, reward, terminated). Reward is 1 per step."""
    state = np.asarray(state, dtype=np.float64)
    if not is_live(state):
        raise RuntimeError("cannot step a finished episode")
    if action not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {action}")
    nxt, terminated = kernels.cartpole_physics(state, int(action))
    return nxt, 1.0, bool(terminated)


class CartPole:
    """Stateful episode wrapper around :func:`cartpole_step` with the step cap."""

    n_actions = 2
    obs_dim = 4

    def __init__(self, max_steps: int = MAX_EPISODE_STEPS):
        self.max_steps = max_steps
        self.state: np.ndarray | None = None
        self.steps = 0
        self.finished = True

    def reset(self, rng=None, override: Mapping | None = None) -> np.ndarray:
        self.state = cartpole_reset(rng, override)
        self.steps = 0
        self.finished = False
        return self.state.copy()

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool]:
        """Returns (state, reward, terminated, truncated)."""
        if self.finished or self.state is None:
            raise RuntimeError("episode is finished; call reset()")
        self.state, reward, terminated = cartpole_step(self.state, action)
        self.steps += 1
        truncated = not terminated and self.steps >= self.max_steps
        self.finished = terminated or truncated
        return self.state.copy(), reward, terminated, truncated


def make_chain_mdp(n_states: int, slip: float = 0.0, gamma: float = 0.9) -> TabularMDP:
    """Chain with actions left (0) and right (1).

    Right advances with probability ``1 - slip`` and otherwise stays; left
    moves back one state deterministically. Both walls are absorbing in the
    direction of the wall. Reward 1 for any action taken in the last state.
    """
    if n_states < 2:
        raise ValueError("chain needs at least 2 states")
    if not 0.0 <= slip < 1.0:
        raise ValueError("slip must be in [0, 1)")
    P = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        P[s, 0, max(s - 1, 0)] = 1.0
        if s == n_states - 1:
            P[s, 1, s] = 1.0
        else:
            P[s, 1, s + 1] += 1.0 - slip
            P[s, 1, s] += slip
    R = np.zeros((n_states, 2))
    R[n_states - 1, :] = 1.0
    return TabularMDP(n_states, 2, P, R, gamma)


def one_hot(indices, n: int) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    out = np.zeros((idx.shape[0], n))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out
