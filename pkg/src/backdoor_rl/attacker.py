"""Bi-level reward-poisoning attacker with neural reward-shift and Q-value networks.

The attacker keeps two networks over (state, action): ``delta_net`` gives the
reward shift Delta(s, a) injected into the agent's transitions and
``qbar_net`` is an auxiliary Q-function Qbar(s, a) describing the values the
agent should come to hold. Both map a state vector to one output per action.

Each round (:func:`poison_round`) on a batch of transitions:

1. Delta target:  Qbar(s,a) - r - gamma * (1 - done) * Qbar(s', pi_dag(s'))
2. one gradient step of ``delta_net`` towards it,
3. rewards in the returned batch become r + Delta(s, a),
4. Qbar targets: Qbar(s,a) - (Delta(s,a) + rho_k * hinge terms) for (s, a) and
   Qbar(s', pi_dag(s')) + gamma * Delta(s, a) for the successor,
5. one gradient step of ``qbar_net`` towards both,
6. advance the round counter.

Right-hand sides are evaluated at the parameters held before either step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import TabularTrigger, TriggerSpec, one_hot
from .mdp import DeterministicPolicy, TabularMDP, Transition, TransitionBatch
from .nn import Mlp, clip_grad_norm, make_optimizer


def phi(x):
    """Hinge max(x, 0); zero at x == 0."""
    return np.maximum(x, 0.0)


class TargetPolicy:
    """Backdoor target: the normal policy off-trigger, ``bad_action`` on-trigger."""

    def __init__(self, normal_policy, bad_action: int, trigger: TriggerSpec | TabularTrigger):
        self.normal_policy = normal_policy
        self.bad_action = int(bad_action)
        self.trigger = trigger

    def _normal(self, states) -> np.ndarray:
        normal = self.normal_policy
        if isinstance(normal, DeterministicPolicy):
            arr = np.asarray(states)
            idx = arr.astype(np.int64) if arr.ndim == 1 else np.argmax(arr, axis=1)
            return normal.action_of[idx]
        if hasattr(normal, "actions"):
            return np.asarray(normal.actions(states), dtype=np.int64)
        return np.array([normal(s) for s in states], dtype=np.int64)

    def actions(self, states) -> np.ndarray:
        """Vectorised target action for a batch of states (vectors or indices)."""
        return np.where(self.trigger.mask(states), self.bad_action, self._normal(states))

    def __call__(self, state) -> int:
        arr = np.asarray(state)
        batch = arr[None] if arr.ndim >= 1 else arr.reshape(1)
        return int(self.actions(batch)[0])

    def table(self, n_states: int) -> DeterministicPolicy:
        """Tabular target policy over state indices."""
        return DeterministicPolicy(self.actions(np.arange(n_states)))


def target_action(tp: TargetPolicy, state) -> int:
    return tp(state)


@dataclass
class AttackConfig:
    epsilon: float = 4.0
    rho: float = 20.0
    rho_growth: float = 1.0
    rho_max: float = 20.0
    alpha: float = 1e-4
    beta: float = 1e-5
    gamma: float = 0.99
    # fraction of training episodes that start with the trigger applied
    trigger_injection_rate: float = 0.2
    optimizer: str = "adam"
    hidden: tuple = (64, 64)
    qbar_init: str = "target"
    delta_zero_init: bool = True
    delta_from_updated_theta: bool = False
    bad_action: int = 1
    # shrink Delta towards zero on states drawn from the observation box
    shrink_weight: float = 0.01
    shrink_samples: int = 64
    # warm start of Qbar by fitted evaluation of the target policy
    warmup_transitions: int = 30_000
    warmup_steps: int = 20_000
    warmup_lr: float = 1e-3
    warmup_explore: float = 0.3
    warmup_injection_rate: float = 0.2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.rho <= 0 or self.rho_max <= 0 or self.rho_growth < 1.0:
            raise ValueError("penalty schedule must be positive and non-decreasing")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("step sizes must be non-negative")
        if not 0.0 <= self.trigger_injection_rate <= 1.0:
            raise ValueError("trigger_injection_rate must be in [0, 1]")
        if self.qbar_init not in ("normal", "random", "target"):
            raise ValueError("qbar_init must be 'normal', 'random' or 'target'")
        if self.shrink_weight < 0 or self.shrink_samples < 0:
            raise ValueError("shrink_weight and shrink_samples must be non-negative")
        if not 0.0 <= self.warmup_explore <= 1.0 or not 0.0 <= self.warmup_injection_rate <= 1.0:
            raise ValueError("warm-up rates must be in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    def rho_k(self, k: int) -> float:
        """Penalty coefficient for round ``k``: rho * growth**k capped at rho_max."""
        if self.rho_growth == 1.0:
            return self.rho
        return min(max(self.rho_max, self.rho), self.rho * self.rho_growth**k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AttackerState:
    delta_net: Mlp
    qbar_net: Mlp
    opt_delta: object
    opt_qbar: object
    k: int = 0
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, cfg: AttackConfig, seed=None,
               qbar_from: Mlp | None = None) -> "AttackerState":
        """Fresh attacker. ``qbar_from`` (a Q-network of matching shape)
        seeds Qbar unless ``cfg.qbar_init == 'random'``; the 'target' warm
        start then continues with :func:`fit_target_values`."""
        rng = np.random.default_rng(seed)
        sizes = [obs_dim, *cfg.hidden, n_actions]
        delta = Mlp(sizes, seed=rng, zero_output=cfg.delta_zero_init)
        qbar = Mlp(sizes, seed=rng)
        if cfg.qbar_init != "random" and qbar_from is not None:
            qbar.copy_from(qbar_from)
        return cls(delta, qbar, make_optimizer(cfg.optimizer, cfg.alpha),
                   make_optimizer(cfg.optimizer, cfg.beta))

    def delta(self, states, actions) -> np.ndarray:
        out = self.delta_net.predict(states)
        return out[np.arange(out.shape[0]), np.asarray(actions, dtype=np.int64)]

    def qbar(self, states) -> np.ndarray:
        return self.qbar_net.predict(states)

    def to_dict(self) -> dict:
        return {"k": self.k, "delta_net": self.delta_net.to_dict(),
                "qbar_net": self.qbar_net.to_dict()}

    def save(self, path, cfg: AttackConfig | None = None) -> None:
        data = self.to_dict()
        if cfg is not None:
            data["config"] = cfg.to_dict()
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path) -> tuple["AttackerState", AttackConfig | None]:
        data = json.loads(Path(path).read_text())
        cfg = AttackConfig(**data["config"]) if "config" in data else None
        opt_cfg = cfg or AttackConfig()
        state = cls(Mlp.from_dict(data["delta_net"]), Mlp.from_dict(data["qbar_net"]),
                    make_optimizer(opt_cfg.optimizer, opt_cfg.alpha),
                    make_optimizer(opt_cfg.optimizer, opt_cfg.beta), k=data["k"])
        return state, cfg


def _as_batch(t) -> TransitionBatch:
    if isinstance(t, TransitionBatch):
        return t
    if isinstance(t, Transition):
        return TransitionBatch.from_transitions([t])
    return TransitionBatch.from_transitions(t)


def _targets(q_s, q_next, d_sa, actions, rewards, dones, pi_s, pi_next,
             epsilon, rho, gamma):
    """All three update targets from precomputed network values.

    Returns (delta_target, qbar_target_sa, qbar_target_next). The successor
    target is meaningless where ``done`` and is returned equal to the current
    value there.
    """
    n = actions.shape[0]
    rows = np.arange(n)
    live = (~dones).astype(np.float64)
    q_sa = q_s[rows, actions]
    q_next_pi = q_next[rows, pi_next]
    delta_tgt = q_sa - rewards - gamma * live * q_next_pi

    q_pi = q_s[rows, pi_s]
    on_target = actions == pi_s
    # a != pi_s: hinge on this action's margin violation
    viol_self = phi(q_sa + epsilon - q_pi)
    # a == pi_s: sum of hinges over every other action
    others = phi(q_s + epsilon - q_sa[:, None])
    others[rows, actions] = 0.0
    penalty = np.where(on_target, -others.sum(axis=1), viol_self)
    qbar_tgt_sa = q_sa - (d_sa + rho * penalty)
    qbar_tgt_next = q_next_pi + gamma * live * d_sa
    return delta_tgt, qbar_tgt_sa, qbar_tgt_next


def delta_target(t, attacker: AttackerState, tp: TargetPolicy, gamma: float) -> np.ndarray:
    """Qbar(s,a) - r - gamma (1 - done) Qbar(s', pi_dag(s')) per transition."""
    b = _as_batch(t)
    q_s = attacker.qbar(b.states)
    q_next = attacker.qbar(b.next_states)
    rows = np.arange(len(b))
    live = (~b.dones).astype(np.float64)
    return q_s[rows, b.actions] - b.rewards - gamma * live * q_next[rows, tp.actions(b.next_states)]


def qbar_targets(t, attacker: AttackerState, tp: TargetPolicy,
                 cfg: AttackConfig) -> tuple[np.ndarray, np.ndarray]:
    """Targets for Qbar(s, a) and Qbar(s', pi_dag(s')), at the current parameters."""
    b = _as_batch(t)
    q_s = attacker.qbar(b.states)
    q_next = attacker.qbar(b.next_states)
    d_sa = attacker.delta(b.states, b.actions)
    _, tgt_sa, tgt_next = _targets(q_s, q_next, d_sa, b.actions, b.rewards, b.dones,
                                   tp.actions(b.states), tp.actions(b.next_states),
                                   cfg.epsilon, cfg.rho_k(attacker.k), cfg.gamma)
    return tgt_sa, tgt_next


def poison_round(attacker: AttackerState, tp: TargetPolicy, cfg: AttackConfig,
                 batch, anchor_states=None) -> TransitionBatch:
    """One attacker round; returns the batch with poisoned rewards.

    Only the reward array differs from the input batch. ``anchor_states``
    adds ``cfg.shrink_weight * 1/2 sum_a Delta(s, a)^2`` over those states to
    the reward-shift loss.
    """
    b = _as_batch(batch)
    n = len(b)
    if n == 0:
        raise ValueError("empty batch")
    rows = np.arange(n)
    a = b.actions
    pi_s = tp.actions(b.states)
    pi_next = tp.actions(b.next_states)

    q_s, cache_s = attacker.qbar_net.forward_cache(b.states)
    q_next, cache_next = attacker.qbar_net.forward_cache(b.next_states)
    d_out, cache_d = attacker.delta_net.forward_cache(b.states)
    d_sa = d_out[rows, a]

    delta_tgt, tgt_sa, tgt_next = _targets(
        q_s, q_next, d_sa, a, b.rewards, b.dones, pi_s, pi_next,
        cfg.epsilon, cfg.rho_k(attacker.k), cfg.gamma)

    # reward-shift step: minimise 1/2 sum (Delta(s,a) - target)^2
    g = np.zeros_like(d_out)
    g[rows, a] = d_sa - delta_tgt
    attacker.delta_net.zero_grad()
    attacker.delta_net.backward(g, cache_d)
    if anchor_states is not None and cfg.shrink_weight > 0:
        d_anchor, cache_a = attacker.delta_net.forward_cache(anchor_states)
        attacker.delta_net.backward(cfg.shrink_weight * d_anchor, cache_a)
    attacker.opt_delta.step(attacker.delta_net)

    new_delta = attacker.delta(b.states, a)
    poisoned = b.with_rewards(b.rewards + new_delta)

    if cfg.delta_from_updated_theta:
        _, tgt_sa, tgt_next = _targets(
            q_s, q_next, new_delta, a, b.rewards, b.dones, pi_s, pi_next,
            cfg.epsilon, cfg.rho_k(attacker.k), cfg.gamma)

    # Q-value step on both the (s, a) and (s', pi_dag(s')) residuals
    g_s = np.zeros_like(q_s)
    g_s[rows, a] = q_s[rows, a] - tgt_sa
    g_next = np.zeros_like(q_next)
    g_next[rows, pi_next] = (q_next[rows, pi_next] - tgt_next) * (~b.dones)
    attacker.qbar_net.zero_grad()
    attacker.qbar_net.backward(g_s, cache_s)
    attacker.qbar_net.backward(g_next, cache_next)
    attacker.opt_qbar.step(attacker.qbar_net)

    attacker.k += 1
    return poisoned


def fit_target_values(net: Mlp, tp: TargetPolicy, data: TransitionBatch, gamma: float,
                      steps: int, lr: float = 1e-3, batch_size: int = 64,
                      sync_every: int = 500, grad_clip: float = 10.0, seed=None) -> float:
    """Fitted evaluation of the target policy on a fixed set of transitions.

    Regresses net(s, a) on r + gamma (1 - done) net_old(s', pi_dag(s')) with a
    periodically synced copy ``net_old``. Returns the mean squared residual
    over ``data`` at the end.
    """
    rng = np.random.default_rng(seed)
    n = len(data)
    if n == 0:
        raise ValueError("empty data")
    pi_next = tp.actions(data.next_states)
    live = (~data.dones).astype(np.float64)
    frozen = net.clone()
    opt = make_optimizer("adam", lr)
    rows = np.arange(batch_size)
    for k in range(steps):
        if k % sync_every == 0:
            frozen.params[:] = net.params
        idx = rng.integers(0, n, size=batch_size)
        q_next = frozen.predict(data.next_states[idx])
        y = data.rewards[idx] + gamma * live[idx] * q_next[rows, pi_next[idx]]
        q, cache = net.forward_cache(data.states[idx])
        g = np.zeros_like(q)
        g[rows, data.actions[idx]] = 2.0 * (q[rows, data.actions[idx]] - y) / batch_size
        net.zero_grad()
        net.backward(g, cache)
        if grad_clip > 0:
            clip_grad_norm(net, grad_clip)
        opt.step(net)
    q_all = net.predict(data.states)
    q_next = net.predict(data.next_states)
    res = (q_all[np.arange(n), data.actions] - data.rewards
           - gamma * live * q_next[np.arange(n), pi_next])
    return float(np.mean(res * res))


class ProposedAttacker:
    """Poisoner wrapper used by the training loops."""

    name = "proposed"

    def __init__(self, state: AttackerState, tp: TargetPolicy, cfg: AttackConfig,
                 anchor_sampler=None):
        self.state = state
        self.tp = tp
        self.cfg = cfg
        # anchor_sampler(n) -> (n, obs_dim) states for the shrink term
        self.anchor_sampler = anchor_sampler

    def poison_batch(self, batch: TransitionBatch) -> TransitionBatch:
        anchors = None
        if self.anchor_sampler is not None and self.cfg.shrink_samples > 0:
            anchors = self.anchor_sampler(self.cfg.shrink_samples)
        return poison_round(self.state, self.tp, self.cfg, batch, anchors)

    def reward_shift(self, states, actions, rewards=None) -> np.ndarray:
        """r_bar - r for arbitrary (state, action) pairs (used for intensity)."""
        return self.state.delta(states, actions)


# ---------------------------------------------------------------------------
# tabular venue for the neural attacker


@dataclass
class ChainAttackResult:
    attacker: AttackerState
    rounds: int
    injected: np.ndarray
    visited: np.ndarray

    def delta_table(self, n_states: int, n_actions: int) -> np.ndarray:
        out = self.attacker.delta_net.predict(np.eye(n_states))
        return out[:, :n_actions]

    def qbar_table(self, n_states: int) -> np.ndarray:
        return self.attacker.qbar_net.predict(np.eye(n_states))


def run_tabular_attack(mdp: TabularMDP, tp: TargetPolicy, cfg: AttackConfig, rounds: int,
                       seed=None, batch_size: int | None = None,
                       record_last: int = 10_000) -> ChainAttackResult:
    """Drive :func:`poison_round` on a tabular MDP with one-hot state encoding.

    Each round samples (s, a) pairs uniformly and s' from the true dynamics,
    which is the sampling under which the stochastic updates are unbiased for
    the unweighted objective. ``batch_size=None`` uses every (s, a) pair once
    per round. The last ``record_last`` injected shifts are kept.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    attacker = AttackerState.create(S, A, cfg, seed=rng)
    injected: list[np.ndarray] = []
    visited: list[np.ndarray] = []
    kept = 0
    all_pairs = np.array([(s, a) for s in range(S) for a in range(A)], dtype=np.int64)
    cdf = np.cumsum(mdp.transition, axis=2)
    for k in range(rounds):
        if batch_size is None:
            pairs = all_pairs
        else:
            pairs = all_pairs[rng.integers(0, len(all_pairs), size=batch_size)]
        s, a = pairs[:, 0], pairs[:, 1]
        u = rng.random(len(pairs))
        s2 = np.minimum((u[:, None] > cdf[s, a]).sum(axis=1), S - 1)
        batch = TransitionBatch(one_hot(s, S), a, mdp.reward[s, a], one_hot(s2, S),
                                np.zeros(len(pairs), dtype=np.bool_))
        out = poison_round(attacker, tp, cfg, batch)
        if rounds - k <= max(1, record_last // len(pairs)) + 1:
            injected.append(out.rewards - batch.rewards)
            visited.append(pairs)
            kept += len(pairs)
    inj = np.concatenate(injected)[-record_last:]
    vis = np.concatenate(visited)[-record_last:]
    return ChainAttackResult(attacker, rounds, inj, vis)
