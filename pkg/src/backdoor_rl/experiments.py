"""Experiment drivers behind the CLI: CartPole runs and tabular verification.

Artifacts live under ``<out>/<name>/<seed>/``:

    normal/agent.json, normal/meta.json
    <attacker>[-eps<e>]/agent.json, attacker.json, meta.json, audit.json

Every checkpoint's ``meta.json`` carries a run key (hash of the settings that
produced it), so a later command can reuse a checkpoint only when it would
have produced the same one.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attacker import AttackerState, ProposedAttacker, TargetPolicy
from .baselines import IdentityPoisoner, MinmaxPoisoner, NeighbourhoodPoisoner, RandomPoisoner
from .config import ExperimentConfig, component_rng, component_seed
from .dqn import GreedyNetPolicy
from .envs import TabularTrigger, TriggerSpec, make_chain_mdp
from .evaluation import EvalReport, MissingCheckpointError, run_table1_row
from .mdp import greedy_policy, optimal_q
from .nn import Mlp
from .oracle import default_bounds, grid_search_solve, objective_value, verify_backdoor
from .tabular_attack import TabularAttackSolution, closed_form_delta, solve_exact
from .training import make_proposed_attacker, train_dqn

log = logging.getLogger(__name__)


def trigger_spec(cfg: ExperimentConfig) -> TriggerSpec:
    t = cfg.trigger
    return TriggerSpec(t.coordinate, t.threshold, t.override_value, t.override_step)


def _key(*parts) -> str:
    text = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out) / cfg.name / str(seed)


def run_label(attacker: str, epsilon: float | None = None) -> str:
    if attacker == "proposed":
        return f"proposed-eps{epsilon:g}"
    return attacker


def normal_key(cfg: ExperimentConfig, seed: int) -> str:
    return _key("normal", seed, cfg.dqn.to_dict(), asdict(cfg.trigger))


def poisoned_key(cfg: ExperimentConfig, seed: int, attacker: str) -> str:
    parts = ["poisoned", seed, attacker, normal_key(cfg, seed), asdict(cfg.training)]
    parts[-1].pop("attacker", None)
    if attacker == "proposed":
        parts.append(cfg.attack.to_dict())
    elif attacker != "none":
        parts.append(asdict(cfg.baselines))
    return _key(*parts)


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _read_meta(directory: Path) -> dict | None:
    p = directory / "meta.json"
    return json.loads(p.read_text()) if p.exists() else None


def _victim_rngs(seed: int):
    return (component_rng(seed, "env"), component_rng(seed, "agent"),
            component_rng(seed, "explore"))


# ---------------------------------------------------------------------------
# CartPole


def train_normal(cfg: ExperimentConfig, seed: int, reuse: bool = False) -> dict:
    """Train the clean agent for one seed and write its checkpoint."""
    d = seed_dir(cfg, seed) / "normal"
    key = normal_key(cfg, seed)
    meta = _read_meta(d)
    if reuse and meta is not None and meta.get("run_key") == key:
        log.info("seed %d: reusing normal checkpoint", seed)
        # the threshold is not part of the run key, so judge against the current one
        meta["converged"] = bool(meta["best_validation_return"] >= cfg.training.min_normal_return)
        return meta
    res = train_dqn(cfg.dqn, *_victim_rngs(seed), trigger=trigger_spec(cfg),
                    eval_seed=component_seed(seed, "eval", 1))
    d.mkdir(parents=True, exist_ok=True)
    res.agent.net.save(d / "agent.json")
    best = max((m for _, m in res.eval_history), default=float("nan"))
    meta = {"run_key": key, "seed": seed, "steps": res.steps, "episodes": res.episodes,
            "eval_history": res.eval_history, "best_validation_return": best,
            "converged": bool(best >= cfg.training.min_normal_return)}
    _write_json(d / "meta.json", meta)
    return meta


def load_normal(cfg: ExperimentConfig, seed: int) -> Mlp:
    p = seed_dir(cfg, seed) / "normal" / "agent.json"
    if not p.exists():
        raise MissingCheckpointError(f"normal checkpoint missing: {p} (run train-normal first)")
    return Mlp.load(p)


def target_policy(cfg: ExperimentConfig, normal_net: Mlp) -> TargetPolicy:
    return TargetPolicy(GreedyNetPolicy(normal_net), cfg.attack.bad_action, trigger_spec(cfg))


def make_poisoner(cfg: ExperimentConfig, attacker: str, normal_net: Mlp, seed: int):
    tp = target_policy(cfg, normal_net)
    b = cfg.baselines
    if attacker == "proposed":
        return make_proposed_attacker(cfg.attack, normal_net, trigger_spec(cfg),
                                      component_rng(seed, "attacker"))
    if attacker == "neighbourhood":
        return NeighbourhoodPoisoner(tp, b.neighbourhood_penalty)
    if attacker == "minmax":
        return MinmaxPoisoner(tp, b.minmax_r_max, b.minmax_r_min)
    if attacker == "random":
        return RandomPoisoner(tp, b.random_bound, component_rng(seed, "baseline"))
    if attacker == "none":
        return IdentityPoisoner()
    raise ValueError(f"unknown attacker {attacker!r}")


def load_poisoner(cfg: ExperimentConfig, attacker: str, normal_net: Mlp, seed: int,
                  directory: Path):
    """Poisoner as it stood at the end of training (for intensity measurements)."""
    if attacker == "proposed":
        p = directory / "attacker.json"
        if not p.exists():
            raise MissingCheckpointError(f"attacker checkpoint missing: {p}")
        state, _ = AttackerState.load(p)
        return ProposedAttacker(state, target_policy(cfg, normal_net), cfg.attack)
    if attacker == "random":
        # fresh stream so the measurement does not depend on training draws
        tp = target_policy(cfg, normal_net)
        return RandomPoisoner(tp, cfg.baselines.random_bound, component_rng(seed, "intensity", 1))
    return make_poisoner(cfg, attacker, normal_net, seed)


def train_poisoned(cfg: ExperimentConfig, seed: int, attacker: str | None = None,
                   reuse: bool = False) -> dict:
    """Train a victim from scratch through the chosen poisoner."""
    attacker = attacker or cfg.training.attacker
    normal_net = load_normal(cfg, seed)
    d = seed_dir(cfg, seed) / run_label(attacker, cfg.attack.epsilon)
    key = poisoned_key(cfg, seed, attacker)
    meta = _read_meta(d)
    if reuse and meta is not None and meta.get("run_key") == key:
        log.info("seed %d: reusing %s checkpoint", seed, d.name)
        return meta
    poisoner = make_poisoner(cfg, attacker, normal_net, seed)
    # injecting triggers is the attacker's doing: the "none" control gets a clean run
    injection = 0.0 if attacker == "none" else cfg.attack.trigger_injection_rate
    res = train_dqn(cfg.dqn, *_victim_rngs(seed), poisoner=poisoner,
                    poison_mode=cfg.training.poison_mode, trigger=trigger_spec(cfg),
                    trigger_injection_rate=injection,
                    eval_seed=component_seed(seed, "eval", 1))
    d.mkdir(parents=True, exist_ok=True)
    res.agent.net.save(d / "agent.json")
    if isinstance(poisoner, ProposedAttacker):
        poisoner.state.save(d / "attacker.json", cfg.attack)
    audit = asdict(res.audit) | {"clean": res.audit.clean}
    _write_json(d / "audit.json", audit)
    meta = {"run_key": key, "seed": seed, "attacker": attacker,
            "epsilon": cfg.attack.epsilon if attacker == "proposed" else None,
            "steps": res.steps, "episodes": res.episodes, "eval_history": res.eval_history,
            "audit_clean": res.audit.clean}
    _write_json(d / "meta.json", meta)
    return meta


def evaluate_runs(cfg: ExperimentConfig, seeds, attacker: str) -> EvalReport:
    """Table-1 style report for one attacker (at ``cfg.attack.epsilon``)."""
    label = run_label(attacker, cfg.attack.epsilon)
    trigger = trigger_spec(cfg)
    normals = {}

    def normal(seed):
        if seed not in normals:
            normals[seed] = load_normal(cfg, seed)
        return normals[seed]

    def poisoned_dir(seed):
        d = seed_dir(cfg, seed) / label
        if not (d / "agent.json").exists():
            raise MissingCheckpointError(f"poisoned checkpoint missing: {d}")
        return d

    return run_table1_row(
        cfg.env, cfg.attack.epsilon if attacker == "proposed" else 0.0, list(seeds),
        normal=lambda s: GreedyNetPolicy(normal(s)),
        poisoned=lambda s: GreedyNetPolicy(Mlp.load(poisoned_dir(s) / "agent.json")),
        poisoners=lambda s: load_poisoner(cfg, attacker, normal(s), s, poisoned_dir(s)),
        attacker=attacker, episodes=cfg.evaluation.episodes,
        eval_seed=lambda s: component_seed(s, "eval", 2),
        intensity_seed=lambda s: component_seed(s, "intensity"),
        n_samples=cfg.evaluation.intensity_samples, trigger=trigger)


# ---------------------------------------------------------------------------
# tabular verification


def chain_instance(inst, gamma: float):
    """Chain MDP plus its target policy: the optimal policy, with the bad
    action on the trigger states."""
    mdp = make_chain_mdp(inst.n_states, inst.slip, gamma)
    normal = greedy_policy(optimal_q(mdp))
    trigger = TabularTrigger(inst.trigger_states)
    tp = TargetPolicy(normal, inst.bad_action, trigger)
    return mdp, tp


def verify_instance(inst, tab, solution: TabularAttackSolution | None = None) -> dict:
    """Solve one chain instance, cross-check with the grid oracle, verify.

    ``solution`` replaces the solver output (e.g. a file under audit).
    """
    mdp, tp = chain_instance(inst, tab.gamma)
    pi = tp.table(mdp.n_states)
    bounds = tab.bounds if tab.bounds > 0 else default_bounds(mdp)
    if solution is None:
        solution = solve_exact(mdp, pi, tab.epsilon, tab.rho)
    qbar = np.asarray(solution.qbar, dtype=np.float64)
    delta = np.asarray(solution.delta, dtype=np.float64)
    report = verify_backdoor(qbar, pi, tab.epsilon, mdp, delta)
    grid = grid_search_solve(mdp, pi, tab.epsilon, tab.rho, bounds=bounds,
                             resolution=tab.resolution)
    f_solver = objective_value(qbar, mdp, pi, tab.epsilon, tab.rho)
    gap = (f_solver - grid.objective) / max(abs(grid.objective), 1e-12)
    # when even the penalised optimum over the bounded lattice misses the
    # margin by more than one lattice step, no table in the box attains it
    grid_report = verify_backdoor(grid.qbar, pi, tab.epsilon, mdp,
                                  closed_form_delta(grid.qbar, mdp, pi))
    infeasible = grid_report.min_margin < tab.epsilon - tab.resolution
    checks = dict(report.checks)
    checks["objective_within_2pct"] = bool(gap <= 0.02)
    if all(checks.values()):
        status = "pass"
    else:
        status = "penalty-infeasible" if infeasible else "fail"
    return {
        "instance": asdict(inst),
        "target_policy": pi.action_of.tolist(),
        "status": status,
        "checks": checks,
        "solver_objective": f_solver,
        "grid_objective": grid.objective,
        "grid_min_margin": grid_report.min_margin,
        "objective_gap": gap,
        "grid_points": grid.points_evaluated,
        "bounds": bounds,
        "verification": report.to_dict(),
        "solution": solution.to_dict(),
    }
