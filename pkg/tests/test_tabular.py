"""Exact tabular solver and the grid-search oracle that checks it."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backdoor_rl.config import TabularInstance
from backdoor_rl.envs import make_chain_mdp
from backdoor_rl.experiments import chain_instance
from backdoor_rl.mdp import DeterministicPolicy, TabularMDP, margin_check, optimal_q, policy_evaluation
from backdoor_rl.oracle import (GridResult, default_bounds, grid_search_solve, objective_value,
                                verify_backdoor)
from backdoor_rl.tabular_attack import (TabularAttackSolution, closed_form_delta,
                                        penalty_objective, solve_exact)


def random_mdp(seed, S=3, A=2, gamma=0.9):
    rng = np.random.default_rng(seed)
    P = rng.random((S, A, S))
    P /= P.sum(axis=2, keepdims=True)
    return TabularMDP(S, A, P, rng.normal(size=(S, A)), gamma)


def chain(n, bad=0, trigger=(0,), slip=0.0):
    return chain_instance(TabularInstance(n, slip, list(trigger), bad), 0.9)


# --- closed form -------------------------------------------------------------


def test_closed_form_zero_at_bellman_fixed_point():
    mdp = random_mdp(0)
    pi = DeterministicPolicy([1, 0, 1])
    q = policy_evaluation(mdp, pi, tol=1e-12)
    assert np.max(np.abs(closed_form_delta(q, mdp, pi))) < 1e-10


def test_closed_form_constant_table():
    mdp = random_mdp(1).with_reward(np.zeros((3, 2)))
    pi = DeterministicPolicy([0, 0, 1])
    d = closed_form_delta(np.full((3, 2), 4.0), mdp, pi)
    assert np.allclose(d, 4.0 * (1 - mdp.gamma))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_closed_form_matches_hand_expansion(seed):
    mdp = random_mdp(seed)
    rng = np.random.default_rng(seed + 1)
    q = rng.normal(size=(3, 2))
    pi = DeterministicPolicy(rng.integers(0, 2, 3))
    d = closed_form_delta(q, mdp, pi)
    for s in range(3):
        for a in range(2):
            nxt = sum(mdp.transition[s, a, t] * q[t, pi(t)] for t in range(3))
            assert d[s, a] == pytest.approx(q[s, a] - mdp.reward[s, a] - mdp.gamma * nxt, abs=1e-12)


def test_objective_gradient_matches_finite_differences():
    mdp = random_mdp(7)
    pi = DeterministicPolicy([1, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.normal(scale=3, size=(3, 2))
        _, g = penalty_objective(q, mdp, pi, 0.5, 20.0)
        num = np.zeros_like(q)
        h = 1e-6
        for idx in np.ndindex(q.shape):
            up, down = q.copy(), q.copy()
            up[idx] += h
            down[idx] -= h
            num[idx] = (penalty_objective(up, mdp, pi, 0.5, 20.0)[0]
                        - penalty_objective(down, mdp, pi, 0.5, 20.0)[0]) / (2 * h)
        assert np.allclose(g, num, rtol=1e-5, atol=1e-5)


def test_objective_agrees_with_oracle_loops():
    mdp = random_mdp(8)
    pi = DeterministicPolicy([0, 1, 0])
    q = np.random.default_rng(1).normal(size=(3, 2))
    assert penalty_objective(q, mdp, pi, 0.7, 30.0)[0] == pytest.approx(
        objective_value(q, mdp, pi, 0.7, 30.0), rel=1e-12)


# --- solve_exact -------------------------------------------------------------


def test_solve_exact_zero_when_target_already_optimal():
    mdp, tp = chain(2, bad=1)  # target policy is the optimal one, margin 0.9 > 0.5
    sol = solve_exact(mdp, tp, 0.5, 200.0, tol=1e-9)
    assert sol.objective <= 1e-9
    assert np.max(np.abs(sol.delta)) <= 1e-9


@pytest.mark.parametrize("n", [2, 3])
def test_solve_exact_within_two_percent_of_grid(n):
    mdp, tp = chain(n)
    sol = solve_exact(mdp, tp, 0.5, 200.0)
    grid = grid_search_solve(mdp, tp, 0.5, 200.0)
    assert abs(sol.objective - grid.objective) <= 0.02 * grid.objective
    # the continuous optimum can only beat the lattice
    assert sol.objective <= grid.objective + 1e-12


def test_margin_violation_shrinks_with_rho():
    mdp, tp = chain(3, trigger=(2,))
    pi = tp.table(3)
    violations = []
    for rho in (20.0, 200.0, 2000.0):
        sol = solve_exact(mdp, pi, 0.5, rho)
        violations.append(max(0.0, 0.5 - margin_check(sol.qbar, pi).min()))
    assert violations[0] >= violations[1] >= violations[2]
    assert violations[2] < 1e-3


def test_solution_roundtrip(tmp_path):
    mdp, tp = chain(2)
    sol = solve_exact(mdp, tp, 0.5, 200.0)
    sol.save(tmp_path / "s.json")
    back = TabularAttackSolution.load(tmp_path / "s.json")
    assert np.array_equal(back.qbar, sol.qbar) and back.objective == sol.objective


# --- grid oracle -------------------------------------------------------------


def test_default_bounds():
    mdp = make_chain_mdp(2, 0.0, 0.9)
    assert default_bounds(mdp) == pytest.approx(1.5 * np.max(np.abs(optimal_q(mdp))), rel=1e-9)


def test_grid_not_below_zero_distortion_point():
    mdp, tp = chain(2, bad=1)
    pi = tp.table(2)
    q_pi = policy_evaluation(mdp, pi, tol=1e-12)
    grid = grid_search_solve(mdp, pi, 0.5, 200.0, resolution=0.5)
    assert objective_value(q_pi, mdp, pi, 0.5, 200.0) <= grid.objective + 1e-12


@pytest.mark.parametrize("n,res", [(2, 1.0), (2, 0.5), (3, 3.0)])
def test_separable_matches_full_enumeration(n, res):
    mdp, tp = chain(n)
    sep = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=res, method="separable")
    full = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=res, method="full")
    assert sep.objective == pytest.approx(full.objective, rel=1e-12, abs=1e-12)
    assert sep.coarse_objective == pytest.approx(full.coarse_objective, rel=1e-12, abs=1e-12)


def test_grid_workers_give_same_answer():
    mdp, tp = chain(3)
    a = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=0.5, workers=1)
    b = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=0.5, workers=3)
    assert a.objective == b.objective and np.array_equal(a.qbar, b.qbar)


def test_refining_resolution_never_hurts():
    mdp, tp = chain(2)
    coarse = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=1.0)
    fine = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=0.1)
    assert fine.objective <= coarse.objective + 1e-12


def test_grid_argument_checks():
    mdp, tp = chain(4)
    with pytest.raises(ValueError):
        grid_search_solve(mdp, tp, 0.5, 200.0)
    mdp, tp = chain(2)
    with pytest.raises(ValueError):
        grid_search_solve(mdp, tp, 0.5, 200.0, resolution=0.0)
    with pytest.raises(ValueError):
        grid_search_solve(mdp, tp, 0.5, 200.0, method="random")
    res = grid_search_solve(mdp, tp, 0.5, 200.0, resolution=1.0)
    assert isinstance(res, GridResult) and res.to_dict()["bounds"] == res.bounds


# --- verify_backdoor -----------------------------------------------------------


def test_verify_passes_for_large_rho_solution():
    mdp, tp = chain(2)
    sol = solve_exact(mdp, tp, 0.5, 2000.0)
    rep = verify_backdoor(sol.qbar, tp, 0.5, mdp, sol.delta)
    assert rep.passed, rep.to_dict()


def test_verify_clean_q_fails_at_trigger():
    mdp, tp = chain(3)
    q = optimal_q(mdp)
    rep = verify_backdoor(q, tp, 0.5, mdp, np.zeros((3, 2)))
    assert not rep.checks["greedy_match"] and rep.mismatched_states == [0]


def test_verify_flags_corrupted_entry():
    mdp, tp = chain(3)
    sol = solve_exact(mdp, tp, 0.5, 200.0)
    q = sol.qbar.copy()
    off = 1 - tp.table(3).action_of[1]
    q[1, off] += 0.3  # an entry no backup reads
    rep = verify_backdoor(q, tp, 0.5, mdp, sol.delta)
    assert rep.residual_violations == [[1, int(off)]]
    assert not rep.passed
    d = sol.delta.copy()
    d[2, 0] -= 0.01
    rep = verify_backdoor(sol.qbar, tp, 0.5, mdp, d)
    assert rep.residual_violations == [[2, 0]]
    with pytest.raises(ValueError):
        verify_backdoor(q[:2], tp, 0.5, mdp, d)
    assert '"passed": false' in rep.to_json()
