"""CartPole training loops for clean and poisoned agents."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacker import AttackConfig, AttackerState, ProposedAttacker, TargetPolicy, fit_target_values
from .dqn import DqnAgent, DqnConfig, EpisodeRunner, GreedyNetPolicy, ReplayBuffer, evaluate
from .envs import SAMPLE_HIGH, SAMPLE_LOW, CartPole, TriggerSpec
from .mdp import TransitionBatch, non_reward_fields_identical

log = logging.getLogger(__name__)


@dataclass
class StealthAudit:
    """Counts poisoning calls that touched anything besides rewards."""

    calls: int = 0
    violations: int = 0
    max_abs_reward_change: float = 0.0

    def record(self, before: TransitionBatch, after: TransitionBatch) -> None:
        self.calls += 1
        if not non_reward_fields_identical(before, after):
            self.violations += 1
        if len(before):
            change = float(np.max(np.abs(after.rewards - before.rewards)))
            self.max_abs_reward_change = max(self.max_abs_reward_change, change)

    @property
    def clean(self) -> bool:
        return self.violations == 0


@dataclass
class TrainResult:
    agent: DqnAgent
    steps: int
    episodes: int
    eval_history: list = field(default_factory=list)
    stopped_early: bool = False
    audit: StealthAudit = field(default_factory=StealthAudit)


def train_dqn(cfg: DqnConfig, rng_env: np.random.Generator, rng_agent, rng_explore,
              poisoner=None, poison_mode: str = "batch", trigger: TriggerSpec | None = None,
              trigger_injection_rate: float = 0.0, eval_seed: int = 0,
              agent: DqnAgent | None = None, on_eval=None) -> TrainResult:
    """Train a DQN agent on CartPole, optionally through a reward poisoner.

    Every ``eval_every`` steps the greedy policy is scored on clean
    (trigger-free) episodes; with ``cfg.keep_best`` the returned agent holds
    the latest parameters that reached the best score.

    ``poisoner.poison_batch(batch)`` returns a batch with new rewards. In
    ``insertion`` mode it runs on every fresh transition before it enters the
    replay buffer; in ``batch`` mode it runs on each sampled minibatch, with
    the buffer holding the original rewards.
    """
    if poison_mode not in ("insertion", "batch"):
        raise ValueError(f"unknown poison mode {poison_mode!r}")
    trigger = trigger or TriggerSpec()
    env = CartPole()
    if agent is None:
        agent = DqnAgent(env.obs_dim, env.n_actions, cfg, seed=rng_agent)
    buffer = ReplayBuffer(cfg.buffer_capacity, env.obs_dim)
    clean_rewards = np.zeros(cfg.buffer_capacity) if poisoner is not None else None

    def reset_override(rng):
        if trigger_injection_rate > 0 and rng.random() < trigger_injection_rate:
            return {trigger.coordinate: trigger.override_value}
        return None

    runner = EpisodeRunner(env, rng_env, reset_override)
    result = TrainResult(agent, 0, 0)
    audit = result.audit
    best_mean, best_params = -np.inf, None
    for step in range(cfg.train_steps):
        eps = cfg.epsilon(step)
        t = runner.step(lambda s: agent.act(s, eps, rng_explore))
        r = t.reward
        if poisoner is not None and poison_mode == "insertion":
            fresh = TransitionBatch.from_transitions([t])
            out = poisoner.poison_batch(fresh)
            audit.record(fresh, out)
            r = float(out.rewards[0])
        i = buffer.add(t.state, t.action, r, t.next_state, t.done)
        if clean_rewards is not None:
            clean_rewards[i] = t.reward
        if step >= cfg.learning_starts and step % cfg.train_every == 0:
            _, batch = buffer.sample(cfg.batch_size, rng_explore)
            if poisoner is not None and poison_mode == "batch":
                out = poisoner.poison_batch(batch)
                audit.record(batch, out)
                batch = out
            agent.update(batch)
        result.steps = step + 1
        if cfg.eval_every > 0 and (step + 1) % cfg.eval_every == 0 and step >= cfg.learning_starts:
            mean, _ = evaluate(agent.policy(), "inactive", cfg.eval_episodes, eval_seed, trigger)
            result.eval_history.append((step + 1, mean))
            log.debug("step %d eval %.1f", step + 1, mean)
            if on_eval is not None:
                on_eval(step + 1, agent, mean)
            if mean >= best_mean:
                best_mean, best_params = mean, agent.net.params.copy()
            if cfg.early_stop and mean >= cfg.stop_return:
                result.stopped_early = True
                break
    if cfg.keep_best and best_params is not None:
        # latest checkpoint among those with the best validation return
        agent.net.params[:] = best_params
        agent.sync_target()
    result.episodes = len(runner.finished_returns)
    return result


def collect_target_data(tp: TargetPolicy, n_steps: int, explore: float, injection_rate: float,
                        trigger: TriggerSpec, rng: np.random.Generator) -> TransitionBatch:
    """CartPole transitions from epsilon-greedy versions of the target policy.

    Each episode draws its exploration rate from U(0, explore), so the data
    spans near-random play through to the target policy itself. A fraction
    ``injection_rate`` of episodes starts with the trigger applied.
    """
    env = CartPole()
    rate = [explore]

    def reset_override(r):
        rate[0] = r.uniform(0.0, explore)
        if injection_rate > 0 and r.random() < injection_rate:
            return {trigger.coordinate: trigger.override_value}
        return None

    def act(s):
        if rng.random() < rate[0]:
            return int(rng.integers(env.n_actions))
        return tp(s)

    runner = EpisodeRunner(env, rng, reset_override)
    return TransitionBatch.from_transitions([runner.step(act) for _ in range(n_steps)])


def make_proposed_attacker(cfg: AttackConfig, normal_net, trigger: TriggerSpec,
                           rng: np.random.Generator) -> ProposedAttacker:
    """Build the proposed attacker around a trained normal-policy Q-network."""
    tp = TargetPolicy(GreedyNetPolicy(normal_net), cfg.bad_action, trigger)
    state = AttackerState.create(normal_net.n_inputs, normal_net.n_outputs, cfg, seed=rng,
                                 qbar_from=normal_net)
    if cfg.qbar_init == "target" and cfg.warmup_steps > 0:
        data = collect_target_data(tp, cfg.warmup_transitions, cfg.warmup_explore,
                                   cfg.warmup_injection_rate, trigger, rng)
        loss = fit_target_values(state.qbar_net, tp, data, cfg.gamma, cfg.warmup_steps,
                                 cfg.warmup_lr, seed=rng)
        log.info("target-value warm start: residual mse %.4f", loss)
    anchor_rng = np.random.default_rng(rng.integers(2**63))

    def anchors(n):
        return anchor_rng.uniform(SAMPLE_LOW, SAMPLE_HIGH, size=(n, SAMPLE_LOW.shape[0]))

    return ProposedAttacker(state, tp, cfg, anchors)
