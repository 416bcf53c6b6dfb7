"""Victim agents: DQN with a replay buffer, and tabular Q-learning."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import kernels
from .envs import MAX_EPISODE_STEPS, CartPole, TriggerSpec, cartpole_reset
from .mdp import Transition, TransitionBatch
from .nn import Adam, Mlp, clip_grad_norm


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions stored as arrays."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity, dtype=np.bool_)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, state, action, reward, next_state, done) -> int:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def add_batch(self, batch: TransitionBatch) -> np.ndarray:
        return np.array([self.add(batch.states[i], batch.actions[i], batch.rewards[i],
                                  batch.next_states[i], batch.dones[i])
                         for i in range(len(batch))], dtype=np.int64)

    def get(self, idx) -> TransitionBatch:
        return TransitionBatch(self.states[idx], self.actions[idx], self.rewards[idx],
                               self.next_states[idx], self.dones[idx])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, TransitionBatch]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return idx, self.get(idx)

    def all(self) -> TransitionBatch:
        return self.get(np.arange(self.size))


@dataclass
class DqnConfig:
    buffer_capacity: int = 50_000
    batch_size: int = 64
    lr: float = 1e-3
    target_sync: int = 500
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 10_000
    train_steps: int = 100_000
    gamma: float = 0.99
    hidden: tuple = (64, 64)
    learning_starts: int = 1_000
    train_every: int = 1
    grad_clip: float = 10.0
    eval_every: int = 5_000
    eval_episodes: int = 5
    stop_return: float = 500.0
    early_stop: bool = False
    keep_best: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("epsilon_start", "epsilon_end"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        for name in ("buffer_capacity", "batch_size", "target_sync", "train_steps", "train_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def epsilon(self, step: int) -> float:
        """Linear decay from epsilon_start to epsilon_end."""
        if self.epsilon_decay_steps <= 0:
            return self.epsilon_end
        frac = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class DqnAgent:
    """Q-network + target network trained on mean squared TD error."""

    def __init__(self, obs_dim: int, n_actions: int, cfg: DqnConfig | None = None, seed=None):
        self.cfg = cfg or DqnConfig()
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        rng = np.random.default_rng(seed)
        self.net = Mlp([obs_dim, *self.cfg.hidden, n_actions], seed=rng)
        self.target = self.net.clone()
        self.opt = Adam(self.cfg.lr)
        self.updates = 0

    def q_values(self, states) -> np.ndarray:
        return self.net.predict(states)

    def greedy(self, states) -> np.ndarray:
        return np.argmax(self.net.predict(states), axis=1)

    def act(self, state, epsilon: float, rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(self.n_actions))
        q = kernels.mlp_predict(self.net.params, self.net._sizes, self.net._relu,
                                np.asarray(state, dtype=np.float64).reshape(1, -1))
        return int(np.argmax(q[0]))

    def sync_target(self) -> None:
        self.target.params[:] = self.net.params

    def update(self, batch: TransitionBatch) -> float:
        """One gradient step on the mean squared TD error; returns the loss."""
        n = len(batch)
        if n == 0:
            raise ValueError("empty batch")
        q_next = self.target.predict(batch.next_states)
        y = batch.rewards + self.cfg.gamma * (~batch.dones) * q_next.max(axis=1)
        q = self.net.forward(batch.states)
        rows = np.arange(n)
        err = q[rows, batch.actions] - y
        grad = np.zeros_like(q)
        grad[rows, batch.actions] = 2.0 * err / n
        self.net.zero_grad()
        self.net.backward(grad)
        if self.cfg.grad_clip > 0:
            clip_grad_norm(self.net, self.cfg.grad_clip)
        self.opt.step(self.net)
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            self.sync_target()
        return float(np.mean(err * err))

    def policy(self) -> "GreedyNetPolicy":
        return GreedyNetPolicy(self.net)


def dqn_update(agent: DqnAgent, batch: TransitionBatch) -> float:
    return agent.update(batch)


class GreedyNetPolicy:
    """Greedy policy of a Q-network (argmax over outputs, lowest index on ties)."""

    def __init__(self, net: Mlp):
        self.net = net

    def __call__(self, state) -> int:
        return int(np.argmax(self.net.predict(state)[0]))

    def actions(self, states) -> np.ndarray:
        return np.argmax(self.net.predict(states), axis=1)


class EpisodeRunner:
    """Keeps an environment episode alive across :func:`collect` calls."""

    def __init__(self, env: CartPole, rng: np.random.Generator,
                 reset_override: Callable[[np.random.Generator], dict | None] | None = None):
        self.env = env
        self.rng = rng
        self.reset_override = reset_override
        self.state = None
        self.episode_return = 0.0
        self.finished_returns: list[float] = []

    def _reset(self):
        override = self.reset_override(self.rng) if self.reset_override else None
        self.state = self.env.reset(self.rng, override)
        self.episode_return = 0.0

    def step(self, action_fn: Callable[[np.ndarray], int]) -> Transition:
        if self.state is None or self.env.finished:
            self._reset()
        s = self.state
        a = action_fn(s)
        s2, r, terminated, truncated = self.env.step(a)
        self.episode_return += r
        if terminated or truncated:
            self.finished_returns.append(self.episode_return)
        self.state = s2
        # time-limit truncation is not a true terminal: keep the bootstrap
        return Transition(s, a, r, s2, terminated)


def collect(agent: DqnAgent, runner: EpisodeRunner, steps: int, epsilon: float) -> list[Transition]:
    """Run ``steps`` epsilon-greedy environment steps."""
    return [runner.step(lambda s: agent.act(s, epsilon, runner.rng)) for _ in range(steps)]


def evaluate(policy, trigger_mode: str = "inactive", episodes: int = 5, seed=0,
             trigger: TriggerSpec | None = None,
             max_steps: int = MAX_EPISODE_STEPS) -> tuple[float, list[float]]:
    """Greedy rollouts on CartPole. Returns (mean return, per-episode returns).

    In ``activated`` mode the trigger override is applied at the trigger's
    configured step. Start states are drawn from ``seed`` so both modes see
    the same initial conditions.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if trigger_mode not in ("inactive", "activated"):
        raise ValueError(f"unknown trigger mode {trigger_mode!r}")
    trigger = trigger or TriggerSpec()
    rng = np.random.default_rng(seed)
    starts = [cartpole_reset(rng) for _ in range(episodes)]
    step_at = trigger.override_step if trigger_mode == "activated" else -1
    net = getattr(policy, "net", None)
    returns = []
    for s0 in starts:
        if net is not None:
            total, _ = kernels.cartpole_greedy_rollout(
                net.params, net._sizes, net._relu, s0, max_steps, step_at,
                trigger.coordinate, trigger.override_value)
        else:
            total = _python_rollout(policy, s0, max_steps, step_at, trigger)
        returns.append(float(total))
    return float(np.mean(returns)), returns


def _python_rollout(policy, s0, max_steps, step_at, trigger) -> float:
    env = CartPole(max_steps)
    env.reset(0)
    env.state = np.array(s0, dtype=np.float64)
    total = 0.0
    for t in range(max_steps):
        if t == step_at:
            env.state = trigger.apply(env.state)
        _, r, terminated, truncated = env.step(int(policy(env.state)))
        total += r
        if terminated or truncated:
            break
    return total


class TabularQAgent:
    """Epsilon-greedy tabular Q-learning on integer states."""

    def __init__(self, n_states: int, n_actions: int, gamma: float, lr: float = 0.1,
                 epsilon: float = 0.1):
        self.q = np.zeros((n_states, n_actions))
        self.gamma = gamma
        self.lr = lr
        self.epsilon = epsilon

    def act(self, s: int, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.q.shape[1]))
        return int(np.argmax(self.q[s]))

    def update(self, s: int, a: int, r: float, s2: int, done: bool = False) -> float:
        target = r + (0.0 if done else self.gamma * self.q[s2].max())
        td = target - self.q[s, a]
        self.q[s, a] += self.lr * td
        return td
