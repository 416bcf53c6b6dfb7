"""Command-line entry point: ``backdoor-rl <command> [flags]``.

Exit status: 0 on success, 1 when a check fails or a clean agent does not
converge, 2 on configuration or usage errors, 3 when a checkpoint is missing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import experiments as ex
from .config import (ATTACKERS, FLAG_PATHS, ConfigError, ExperimentConfig, config_from_manifest,
                     load_config, nest, write_manifest)
from .evaluation import MissingCheckpointError, write_csv, write_json
from .tabular_attack import TabularAttackSolution

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("backdoor_rl")


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--seed", type=int, help="run this seed only")
    common.add_argument("--seeds", type=_seeds, help="comma-separated seeds")
    common.add_argument("--out", help="output root (default: runs)")
    common.add_argument("--attacker", choices=ATTACKERS)
    common.add_argument("--epsilon", type=float)
    common.add_argument("--episodes", type=int, help="evaluation episodes per trigger mode")
    common.add_argument("--workers", type=int, default=1, help="parallel processes over runs")
    common.add_argument("--fresh", action="store_true",
                        help="retrain even when a matching checkpoint exists")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="backdoor-rl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-normal", parents=[common], help="train clean agents")
    sub.add_parser("train-poisoned", parents=[common],
                   help="train agents through an attacker and evaluate them")
    sub.add_parser("evaluate", parents=[common], help="evaluate existing poisoned runs")
    sp = sub.add_parser("sweep-epsilon", parents=[common], help="train and evaluate over epsilons")
    sp.add_argument("--epsilons", type=_floats, help="comma-separated list (default: config)")
    sub.add_parser("compare-attackers", parents=[common],
                   help="proposed attacker vs baselines: returns and intensity")
    sp = sub.add_parser("verify-tabular", parents=[common],
                        help="solve chain MDPs and check them against the grid oracle")
    sp.add_argument("--solution", type=Path,
                    help="check this solution file instead of solving (first instance)")
    sp = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--out", help="write outputs under a different root")
    sp.add_argument("-v", "--verbose", action="count", default=0)
    return p


def config_from_args(args) -> ExperimentConfig:
    flat = {}
    for flag, dotted in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            flat[dotted] = value
    if getattr(args, "seed", None) is not None:
        flat["seeds"] = [args.seed]
    return load_config(args.config, nest(flat))


def _argv_for_manifest(args, argv: list[str]) -> list[str]:
    """The command line minus flags already folded into the stored config."""
    keep, skip = [], False
    folded = {"--config", "--seed", "--seeds", "--out", "--attacker", "--epsilon", "--episodes"}
    for tok in argv:
        if skip:
            skip = False
            continue
        name = tok.split("=", 1)[0]
        if name in folded:
            skip = "=" not in tok
            continue
        keep.append(tok)
    return keep


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]  # submission order keeps output deterministic


def _write_reports(reports, directory: Path, stem: str) -> None:
    write_csv(reports, directory / f"{stem}.csv")
    write_csv(reports, directory / f"{stem}_per_seed.csv", per_seed=True)
    write_json(reports, directory / f"{stem}.json")


def _command_dir(cfg: ExperimentConfig, name: str) -> Path:
    return Path(cfg.out) / cfg.name / name


# ---------------------------------------------------------------------------
# commands


def cmd_train_normal(cfg, args, argv) -> int:
    metas = _map(_train_normal_job, [(cfg, s, not args.fresh) for s in cfg.seeds], args.workers)
    status = EXIT_OK
    for seed, meta in zip(cfg.seeds, metas):
        write_manifest(ex.seed_dir(cfg, seed) / "normal", cfg, argv, seed)
        ok = meta["converged"]
        print(f"seed {seed}: best validation return {meta['best_validation_return']:.1f}"
              f" ({'converged' if ok else 'NOT converged'})")
        if not ok:
            status = EXIT_FAIL
    return status


def _train_normal_job(cfg, seed, reuse):
    return ex.train_normal(cfg, seed, reuse=reuse)


def _poisoned_job(cfg, seed, attacker, reuse):
    if not (ex.seed_dir(cfg, seed) / "normal" / "agent.json").exists():
        ex.train_normal(cfg, seed, reuse=True)
    return ex.train_poisoned(cfg, seed, attacker, reuse=reuse)


def cmd_train_poisoned(cfg, args, argv) -> int:
    attacker = cfg.training.attacker
    for seed in cfg.seeds:
        ex.load_normal(cfg, seed)  # fail fast before any training
    metas = _map(ex.train_poisoned, [(cfg, s, attacker, not args.fresh) for s in cfg.seeds],
                 args.workers)
    status = EXIT_OK
    for seed, meta in zip(cfg.seeds, metas):
        d = ex.seed_dir(cfg, seed) / ex.run_label(attacker, cfg.attack.epsilon)
        if not meta["audit_clean"]:
            print(f"seed {seed}: poisoning modified non-reward fields", file=sys.stderr)
            status = EXIT_FAIL
        report = ex.evaluate_runs(cfg, [seed], attacker)
        _write_reports([report], d, "report")
        write_manifest(d, cfg, argv, seed)
        _print_report(report)
    return status


def cmd_evaluate(cfg, args, argv) -> int:
    attacker = cfg.training.attacker
    label = ex.run_label(attacker, cfg.attack.epsilon)
    report = ex.evaluate_runs(cfg, cfg.seeds, attacker)
    d = _command_dir(cfg, "evaluate")
    d.mkdir(parents=True, exist_ok=True)
    _write_reports([report], d, label)
    write_manifest(d, cfg, argv, None)
    _print_report(report)
    return EXIT_OK


def cmd_sweep_epsilon(cfg, args, argv) -> int:
    epsilons = args.epsilons if args.epsilons is not None else list(cfg.sweep.epsilons)
    if not epsilons:
        raise ConfigError("sweep: the epsilon list is empty")
    cfg = dataclasses.replace(cfg, sweep=dataclasses.replace(cfg.sweep, epsilons=epsilons))
    configs = [dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, epsilon=e))
               for e in epsilons]
    jobs = [(c, s, "proposed", not args.fresh) for c in configs for s in cfg.seeds]
    results = _map(_poisoned_job, jobs, args.workers)
    status = EXIT_OK if all(m["audit_clean"] for m in results) else EXIT_FAIL
    reports = [ex.evaluate_runs(c, cfg.seeds, "proposed") for c in configs]
    d = _command_dir(cfg, "sweep-epsilon")
    d.mkdir(parents=True, exist_ok=True)
    _write_reports(reports, d, "results")
    write_manifest(d, cfg, argv, None)
    for r in reports:
        _print_report(r)
    return status


def cmd_compare_attackers(cfg, args, argv) -> int:
    eps = cfg.sweep.compare_epsilon
    pcfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, epsilon=eps))
    attackers = ("proposed", "neighbourhood", "minmax", "random")
    jobs = [(pcfg, s, a, not args.fresh) for a in attackers for s in cfg.seeds]
    results = _map(_poisoned_job, jobs, args.workers)
    status = EXIT_OK if all(m["audit_clean"] for m in results) else EXIT_FAIL
    reports = [ex.evaluate_runs(pcfg, cfg.seeds, a) for a in attackers]
    d = _command_dir(cfg, "compare-attackers")
    d.mkdir(parents=True, exist_ok=True)
    _write_reports(reports, d, "results")
    write_manifest(d, pcfg, argv, None)
    for r in reports:
        _print_report(r)
    return status


def cmd_verify_tabular(cfg, args, argv) -> int:
    tab = cfg.tabular
    results = []
    for i, inst in enumerate(tab.instances):
        solution = None
        if i == 0 and getattr(args, "solution", None) is not None:
            try:
                solution = TabularAttackSolution.load(args.solution)
            except FileNotFoundError:
                raise MissingCheckpointError(f"solution file missing: {args.solution}") from None
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{args.solution}: unreadable solution ({exc})") from None
            n = inst.n_states
            if solution.qbar.shape != (n, 2) or solution.delta.shape != (n, 2):
                raise ConfigError(f"{args.solution}: solution shape does not match "
                                  f"{n}-state instance")
        results.append(ex.verify_instance(inst, tab, solution))
    d = Path(cfg.out) / cfg.name / "verify-tabular"
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    write_manifest(d, cfg, argv, None)
    for r in results:
        inst = r["instance"]
        v = r["verification"]
        print(f"chain n={inst['n_states']} slip={inst['slip']:g} trigger={inst['trigger_states']}"
              f" bad={inst['bad_action']}: {r['status'].upper()}"
              f"  gap={r['objective_gap'] * 100:+.3f}%  min_margin={v['min_margin']:.5f}"
              f"  max_residual={v['max_bellman_residual']:.2e}")
        for name, ok in r["checks"].items():
            if not ok:
                detail = ""
                if name == "greedy_match":
                    detail = f" states {v['mismatched_states']}"
                elif name == "bellman_residual":
                    detail = f" (s,a) {v['residual_violations']}"
                elif name == "margin":
                    detail = f" min margin {v['min_margin']:.6f} < {tab.epsilon} - tol"
                print(f"  failed: {name}{detail}")
    return EXIT_OK if all(r["status"] == "pass" for r in results) else EXIT_FAIL


def _print_report(r) -> None:
    label = r.attacker if r.attacker != "proposed" else f"proposed eps={r.epsilon:g}"
    print(f"{label}: activated {r.poisoned['activated']:.1f} ({r.drop['activated']:+.2f}%)"
          f"  inactive {r.poisoned['inactive']:.1f} ({r.drop['inactive']:+.2f}%)"
          f"  intensity {r.intensity_global:.1f}/{r.intensity_triggered:.1f}"
          f"  [normal {r.normal['activated']:.1f}/{r.normal['inactive']:.1f}]")


COMMANDS = {
    "train-normal": cmd_train_normal,
    "train-poisoned": cmd_train_poisoned,
    "evaluate": cmd_evaluate,
    "sweep-epsilon": cmd_sweep_epsilon,
    "compare-attackers": cmd_compare_attackers,
    "verify-tabular": cmd_verify_tabular,
}


def _run(command: str, cfg, args, argv) -> int:
    return COMMANDS[command](cfg, args, argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            cfg, stored = config_from_manifest(args.manifest)
            if args.out is not None:
                cfg = dataclasses.replace(cfg, out=args.out)
            inner = parser.parse_args(stored)
            return _run(inner.command, cfg, inner, stored)
        cfg = config_from_args(args)
        return _run(args.command, cfg, args, _argv_for_manifest(args, argv))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpointError as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
