"""Reward-poisoning backdoor attacks on value-based RL agents.

Set ``BACKDOOR_RL_NUMBA=0`` before import to run the numeric kernels as plain
numpy instead of numba.
"""

__version__ = "0.1.0"

from .attacker import AttackConfig, AttackerState, ProposedAttacker, TargetPolicy, phi, poison_round
from .envs import CartPole, TabularTrigger, TriggerSpec, make_chain_mdp
from .mdp import (DeterministicPolicy, TabularMDP, Transition, TransitionBatch, greedy_policy,
                  margin_check, policy_evaluation)
from .oracle import grid_search_solve, verify_backdoor
from .tabular_attack import solve_exact

__all__ = [
    "AttackConfig",
    "AttackerState",
    "CartPole",
    "DeterministicPolicy",
    "ProposedAttacker",
    "TabularMDP",
    "TabularTrigger",
    "TargetPolicy",
    "Transition",
    "TransitionBatch",
    "TriggerSpec",
    "greedy_policy",
    "grid_search_solve",
    "make_chain_mdp",
    "margin_check",
    "phi",
    "poison_round",
    "policy_evaluation",
    "solve_exact",
    "verify_backdoor",
]
