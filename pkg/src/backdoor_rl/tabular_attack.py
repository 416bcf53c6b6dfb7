"""Exact attack solver for tabular MDPs with known dynamics.

With P known, the inner fit of the reward shift has the closed form

    Delta*(Qbar)(s, a) = Qbar(s, a) - r(s, a) - gamma * sum_s' P(s'|s,a) Qbar(s', pi_dag(s'))

so the penalised problem reduces to minimising over the table Qbar alone

    F(Qbar) = 1/2 sum Delta*^2 + rho/2 sum_{s, a != pi_dag(s)} hinge(Qbar(s,a) + eps - Qbar(s, pi_dag(s)))^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import ConvergenceError, DeterministicPolicy, TabularMDP, policy_evaluation


def _policy_table(tp, n_states: int) -> DeterministicPolicy:
    if isinstance(tp, DeterministicPolicy):
        return tp
    return tp.table(n_states)


def closed_form_delta(qbar, mdp: TabularMDP, tp) -> np.ndarray:
    """Reward shift that makes ``qbar`` Bellman-consistent for the target policy."""
    pi = _policy_table(tp, mdp.n_states)
    qbar = np.asarray(qbar, dtype=np.float64)
    v = qbar[np.arange(mdp.n_states), pi.action_of]
    return qbar - mdp.reward - mdp.gamma * (mdp.transition @ v)


def penalty_objective(qbar, mdp: TabularMDP, pi: DeterministicPolicy, epsilon: float,
                      rho: float) -> tuple[float, np.ndarray]:
    """F(Qbar) and its gradient."""
    S = mdp.n_states
    rows = np.arange(S)
    delta = closed_form_delta(qbar, mdp, pi)
    grad = delta.copy()
    # Qbar(s', pi(s')) enters every Delta*(s, a) through the expectation
    back = np.einsum("sat,sa->t", mdp.transition, delta)
    grad[rows, pi.action_of] -= mdp.gamma * back

    q_pi = qbar[rows, pi.action_of]
    hinge = np.maximum(qbar + epsilon - q_pi[:, None], 0.0)
    hinge[rows, pi.action_of] = 0.0
    grad += rho * hinge
    grad[rows, pi.action_of] -= rho * hinge.sum(axis=1)
    value = 0.5 * float(np.sum(delta * delta)) + 0.5 * rho * float(np.sum(hinge * hinge))
    return value, grad


@dataclass
class TabularAttackSolution:
    delta: np.ndarray
    qbar: np.ndarray
    objective: float
    iterations: int
    grad_norm: float = 0.0
    epsilon: float = 0.0
    rho: float = 0.0

    def to_dict(self) -> dict:
        return {
            "delta": self.delta.tolist(),
            "qbar": self.qbar.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "epsilon": self.epsilon,
            "rho": self.rho,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularAttackSolution":
        return cls(np.asarray(d["delta"], dtype=np.float64), np.asarray(d["qbar"], dtype=np.float64),
                   float(d["objective"]), int(d["iterations"]), float(d.get("grad_norm", 0.0)),
                   float(d.get("epsilon", 0.0)), float(d.get("rho", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularAttackSolution":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _shift_operator(mdp: TabularMDP, pi: DeterministicPolicy) -> np.ndarray:
    """Matrix M with vec(Delta*) = M vec(Qbar) - vec(r)."""
    S, A = mdp.n_states, mdp.n_actions
    M = np.eye(S * A)
    cols = np.arange(S) * A + pi.action_of
    M[:, cols] -= mdp.gamma * mdp.transition.reshape(S * A, S)
    return M


def _hessian(MtM: np.ndarray, qbar: np.ndarray, pi: DeterministicPolicy, epsilon: float,
             rho: float) -> np.ndarray:
    """Generalised Hessian of F: the hinge terms active at ``qbar`` contribute
    rho * c c^T with c = e(s, a) - e(s, pi_dag(s))."""
    S, A = qbar.shape
    H = MtM.copy()
    rows = np.arange(S)
    active = qbar + epsilon - qbar[rows, pi.action_of][:, None] > 0
    active[rows, pi.action_of] = False
    for s, a in zip(*np.nonzero(active)):
        i, j = s * A + a, s * A + pi.action_of[s]
        H[i, i] += rho
        H[j, j] += rho
        H[i, j] -= rho
        H[j, i] -= rho
    return H


def solve_exact(mdp: TabularMDP, tp, epsilon: float, rho: float, tol: float = 1e-9,
                max_iter: int = 10_000, qbar0=None) -> TabularAttackSolution:
    """Minimise F by damped Newton steps on its piecewise-quadratic form.

    F is strongly convex (M is invertible for gamma < 1) with a Lipschitz
    gradient, and quadratic on each region where the set of active hinges is
    fixed. Each step solves with the Hessian of the current region and
    backtracks until the Armijo condition holds; once the active set settles
    the next full step lands on the minimiser. Stops when the gradient norm
    drops below ``tol``. Qbar starts at the target policy's Q-values under
    the clean rewards.
    """
    pi = _policy_table(tp, mdp.n_states)
    shape = (mdp.n_states, mdp.n_actions)
    q = (policy_evaluation(mdp, pi, tol=1e-12) if qbar0 is None
         else np.array(qbar0, dtype=np.float64).reshape(shape))
    M = _shift_operator(mdp, pi)
    MtM = M.T @ M
    f, g = penalty_objective(q, mdp, pi, epsilon, rho)
    for it in range(max_iter):
        gnorm = float(np.sqrt(np.sum(g * g)))
        if gnorm <= tol:
            return TabularAttackSolution(closed_form_delta(q, mdp, pi), q, f, it, gnorm,
                                         epsilon, rho)
        step = -np.linalg.solve(_hessian(MtM, q, pi, epsilon, rho), g.reshape(-1)).reshape(shape)
        slope = float(np.sum(g * step))
        if slope >= 0:  # numerically singular system: fall back to steepest descent
            step, slope = -g, -gnorm * gnorm
        t = 1.0
        # near the optimum decreases drop below float resolution of f
        slack = 8 * np.finfo(float).eps * max(1.0, abs(f))
        while True:
            q_new = q + t * step
            f_new, g_new = penalty_objective(q_new, mdp, pi, epsilon, rho)
            if f_new <= f + 1e-4 * t * slope + slack or t < 1e-12:
                break
            t *= 0.5
        q, f, g = q_new, f_new, g_new
    raise ConvergenceError(f"solve_exact: gradient norm still above {tol} after {max_iter} steps")
