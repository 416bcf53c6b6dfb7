"""Performance-drop and poisoning-intensity metrics, and report assembly."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .dqn import evaluate
from .envs import SAMPLE_HIGH, SAMPLE_LOW, TriggerSpec

TRIGGER_MODES = ("activated", "inactive")
REFERENCE_N = 1000
CSV_COLUMNS = ("env", "attacker", "epsilon", "seed", "trigger_mode", "mean_return", "drop_pct",
               "intensity_global", "intensity_triggered")


class MissingCheckpointError(FileNotFoundError):
    pass


def performance_drop(normal: float, poisoned: float) -> float:
    """Percent degradation, positive when the poisoned return is lower."""
    if normal == 0:
        raise ValueError("normal return is zero; drop is undefined")
    return (normal - poisoned) / normal * 100.0


def sample_pairs(sampler: str, n_samples: int, rng: np.random.Generator,
                 trigger: TriggerSpec | None = None, n_actions: int = 2,
                 low=SAMPLE_LOW, high=SAMPLE_HIGH) -> tuple[np.ndarray, np.ndarray]:
    """Uniform (state, action) pairs over the observation box or the trigger region."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    trigger = trigger or TriggerSpec()
    if sampler == "global":
        states = rng.uniform(low, high, size=(n_samples, len(low)))
    elif sampler == "triggered":
        states = trigger.sample_region(n_samples, rng, low, high)
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    actions = rng.integers(0, n_actions, size=n_samples)
    return states, actions


def poisoning_intensity(poisoner, sampler: str, n_samples: int, rng, trigger=None,
                        n_actions: int = 2, reference_n: int = REFERENCE_N,
                        reward: float = 1.0) -> float:
    """Sum of squared reward deviations over uniformly drawn (s, a) pairs.

    The sum is rescaled by ``reference_n / n_samples`` so values from
    different sample counts are comparable. ``poisoner.reward_shift`` gives
    r_bar - r; CartPole pays ``reward`` on every step.
    """
    rng = np.random.default_rng(rng)
    states, actions = sample_pairs(sampler, n_samples, rng, trigger, n_actions)
    shift = np.asarray(poisoner.reward_shift(states, actions, np.full(n_samples, reward)))
    return float(np.sum(shift * shift)) * reference_n / n_samples


def evaluate_modes(policy, episodes: int, seed, trigger=None) -> dict:
    return {mode: evaluate(policy, mode, episodes, seed, trigger)[0] for mode in TRIGGER_MODES}


@dataclass
class SeedResult:
    seed: int
    normal: dict
    poisoned: dict
    intensity_global: float = 0.0
    intensity_triggered: float = 0.0


@dataclass
class EvalReport:
    env: str
    attacker: str
    epsilon: float
    seeds: list
    normal: dict
    poisoned: dict
    drop: dict
    intensity_global: float
    intensity_triggered: float
    per_seed: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_seed_results(cls, env: str, attacker: str, epsilon: float,
                          results: list[SeedResult]) -> "EvalReport":
        if not results:
            raise ValueError("no seed results")
        normal = {m: float(np.mean([r.normal[m] for r in results])) for m in TRIGGER_MODES}
        poisoned = {m: float(np.mean([r.poisoned[m] for r in results])) for m in TRIGGER_MODES}
        drop = {m: performance_drop(normal[m], poisoned[m]) for m in TRIGGER_MODES}
        return cls(env, attacker, float(epsilon), [r.seed for r in results], normal, poisoned,
                   drop, float(np.mean([r.intensity_global for r in results])),
                   float(np.mean([r.intensity_triggered for r in results])), list(results))

    def csv_rows(self, per_seed: bool = False) -> list[dict]:
        """One seed-averaged row per trigger mode (seed column lists the
        seeds); ``per_seed`` gives one row per seed and mode instead."""
        if per_seed:
            return [self._row(r.seed, m, r.poisoned[m],
                              performance_drop(r.normal[m], r.poisoned[m]),
                              r.intensity_global, r.intensity_triggered)
                    for r in self.per_seed for m in TRIGGER_MODES]
        seeds = ";".join(str(s) for s in self.seeds)
        return [self._row(seeds, m, self.poisoned[m], self.drop[m], self.intensity_global,
                          self.intensity_triggered) for m in TRIGGER_MODES]

    def _row(self, seed, mode, ret, drop, ig, it) -> dict:
        return {"env": self.env, "attacker": self.attacker, "epsilon": _fmt(self.epsilon),
                "seed": str(seed), "trigger_mode": mode, "mean_return": _fmt(ret),
                "drop_pct": _fmt(drop), "intensity_global": _fmt(ig),
                "intensity_triggered": _fmt(it)}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_table1_row(env: str, epsilon: float, seeds, normal: Mapping | Callable,
                   poisoned: Mapping | Callable, poisoners: Mapping | Callable | None = None,
                   attacker: str = "proposed", episodes: int = 10,
                   eval_seed: Callable[[int], int] = lambda s: s,
                   intensity_seed: Callable[[int], int] = lambda s: s,
                   n_samples: int = REFERENCE_N, trigger: TriggerSpec | None = None) -> EvalReport:
    """Evaluate clean and poisoned agents over ``seeds`` in both trigger modes.

    ``normal`` / ``poisoned`` / ``poisoners`` map a seed to a greedy policy
    (or to the poisoner whose intensity is measured); mappings or callables.
    """
    def fetch(source, seed, what):
        try:
            obj = source(seed) if callable(source) else source[seed]
        except (KeyError, FileNotFoundError) as exc:
            raise MissingCheckpointError(f"no {what} checkpoint for seed {seed}") from exc
        if obj is None:
            raise MissingCheckpointError(f"no {what} checkpoint for seed {seed}")
        return obj

    results = []
    for seed in seeds:
        pn = fetch(normal, seed, "normal")
        pp = fetch(poisoned, seed, "poisoned")
        res = SeedResult(int(seed), evaluate_modes(pn, episodes, eval_seed(seed), trigger),
                         evaluate_modes(pp, episodes, eval_seed(seed), trigger))
        if poisoners is not None:
            pz = fetch(poisoners, seed, "attacker")
            rng = np.random.default_rng(intensity_seed(seed))
            res.intensity_global = poisoning_intensity(pz, "global", n_samples, rng, trigger)
            res.intensity_triggered = poisoning_intensity(pz, "triggered", n_samples, rng, trigger)
        results.append(res)
    return EvalReport.from_seed_results(env, attacker, epsilon, results)


def write_csv(reports, path=None, per_seed: bool = False) -> str:
    """CSV text for a list of reports; also written to ``path`` if given."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        for row in rep.csv_rows(per_seed):
            w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def write_json(reports, path=None) -> str:
    text = json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text
