"""Brute-force verification of the tabular attack.

Nothing here calls into :mod:`backdoor_rl.tabular_attack`; the objective and
all checks are recomputed with explicit loops so that agreement between the
two is evidence rather than tautology.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ._accel import kernel
from .mdp import TabularMDP

MAX_GRID_DIM = 6
MARGIN_TOL = 1e-3
RESIDUAL_TOL = 1e-4


def _target_table(tp, n_states: int) -> np.ndarray:
    table = getattr(tp, "action_of", None)
    if table is None:
        table = np.array([tp(s) for s in range(n_states)], dtype=np.int64)
    return np.asarray(table, dtype=np.int64)


def _objective_loops(q, P, R, gamma, pi, eps, rho, S, A):
    f = 0.0
    for s in range(S):
        for a in range(A):
            expect = 0.0
            for t in range(S - 1, -1, -1):
                expect += P[s, a, t] * q[t * A + pi[t]]
            d = q[s * A + a] - R[s, a] - gamma * expect
            f += 0.5 * d * d
    for s in range(S):
        top = q[s * A + pi[s]]
        for a in range(A):
            if a != pi[s]:
                h = q[s * A + a] + eps - top
                if h > 0.0:
                    f += 0.5 * rho * h * h
    return f


objective_kernel = kernel(_objective_loops)


def _decode(flat, npts, idx):
    rem = flat
    for d in range(idx.shape[0] - 1, -1, -1):
        idx[d] = rem % npts
        rem //= npts


def _full_chunk_numpy(P, R, gamma, pi, eps, rho, lo, step, npts, start, stop):
    S, A = R.shape
    D = S * A
    best_f = np.inf
    best_i = -1
    chunk = 1 << 18
    rows = np.arange(S)
    for c0 in range(start, stop, chunk):
        flat = np.arange(c0, min(stop, c0 + chunk), dtype=np.int64)
        q = np.empty((flat.shape[0], D))
        rem = flat.copy()
        for d in range(D - 1, -1, -1):
            q[:, d] = lo[d] + (rem % npts) * step
            rem //= npts
        qs = q.reshape(-1, S, A)
        v = qs[:, rows, pi]
        delta = qs - R[None] - gamma * np.einsum("sat,nt->nsa", P, v)
        f = 0.5 * np.sum(delta * delta, axis=(1, 2))
        h = np.maximum(qs + eps - v[:, :, None], 0.0)
        h[:, rows, pi] = 0.0
        f += 0.5 * rho * np.sum(h * h, axis=(1, 2))
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f = float(f[i])
            best_i = int(flat[i])
    return best_f, best_i


@kernel(fallback=_full_chunk_numpy)
def _full_chunk(P, R, gamma, pi, eps, rho, lo, step, npts, start, stop):
    """Evaluate every lattice point with flat index in [start, stop)."""
    S = R.shape[0]
    A = R.shape[1]
    D = S * A
    idx = np.zeros(D, dtype=np.int64)
    q = np.empty(D)
    best_f = np.inf
    best_i = -1
    rem = start
    for d in range(D - 1, -1, -1):
        idx[d] = rem % npts
        rem //= npts
    for flat in range(start, stop):
        for d in range(D):
            q[d] = lo[d] + idx[d] * step
        f = objective_kernel(q, P, R, gamma, pi, eps, rho, S, A)
        if f < best_f:
            best_f = f
            best_i = flat
        # odometer increment, last coordinate fastest
        d = D - 1
        while d >= 0:
            idx[d] += 1
            if idx[d] < npts:
                break
            idx[d] = 0
            d -= 1
    return best_f, best_i


def _off_policy_best(c, v, eps, rho, lo_d, step, npts):
    """Lattice minimiser of 1/2 (q - c)^2 + rho/2 hinge(q + eps - v)^2.

    The function is convex in q, so its lattice minimum sits on one of the two
    points bracketing the continuous minimiser.
    """
    if c + eps - v <= 0.0:
        q_star = c
    else:
        q_star = (c + rho * (v - eps)) / (1.0 + rho)
    i0 = int(np.floor((q_star - lo_d) / step))
    best_f = np.inf
    best_i = 0
    for k in range(2):
        i = min(max(i0 + k, 0), npts - 1)
        q = lo_d + i * step
        h = q + eps - v
        f = 0.5 * (q - c) * (q - c)
        if h > 0.0:
            f += 0.5 * rho * h * h
        if f < best_f or (f == best_f and i < best_i):
            best_f = f
            best_i = i
    return best_f, best_i


_off_policy_best_k = kernel(_off_policy_best)


def _separable_chunk_py(P, R, gamma, pi, eps, rho, lo, step, npts, start, stop):
    S = R.shape[0]
    A = R.shape[1]
    idx = np.zeros(S, dtype=np.int64)
    v = np.empty(S)
    best_f = np.inf
    best_i = -1
    rem = start
    for d in range(S - 1, -1, -1):
        idx[d] = rem % npts
        rem //= npts
    for flat in range(start, stop):
        for s in range(S):
            v[s] = lo[s * A + pi[s]] + idx[s] * step
        f = 0.0
        for s in range(S):
            for a in range(A):
                expect = 0.0
                for t in range(S - 1, -1, -1):
                    expect += P[s, a, t] * v[t]
                c = R[s, a] + gamma * expect
                if a == pi[s]:
                    d = v[s] - c
                    f += 0.5 * d * d
                else:
                    fa, _ = _off_policy_best_k(c, v[s], eps, rho, lo[s * A + a], step, npts)
                    f += fa
        if f < best_f:
            best_f = f
            best_i = flat
        d = S - 1
        while d >= 0:
            idx[d] += 1
            if idx[d] < npts:
                break
            idx[d] = 0
            d -= 1
    return best_f, best_i


def _separable_chunk_numpy(P, R, gamma, pi, eps, rho, lo, step, npts, start, stop):
    S, A = R.shape
    rows = np.arange(S)
    off = np.ones((S, A), dtype=bool)
    off[rows, pi] = False
    lo_sa = lo.reshape(S, A)
    best_f = np.inf
    best_i = -1
    chunk = 1 << 16
    for c0 in range(start, stop, chunk):
        flat = np.arange(c0, min(stop, c0 + chunk), dtype=np.int64)
        v = np.empty((flat.shape[0], S))
        rem = flat.copy()
        for s in range(S - 1, -1, -1):
            v[:, s] = lo_sa[s, pi[s]] + (rem % npts) * step
            rem //= npts
        c = R[None] + gamma * np.einsum("sat,nt->nsa", P, v)
        d_on = v - c[:, rows, pi]
        f = 0.5 * np.sum(d_on * d_on, axis=1)
        vs = v[:, :, None]
        q_star = np.where(c + eps - vs <= 0.0, c, (c + rho * (vs - eps)) / (1.0 + rho))
        i0 = np.floor((q_star - lo_sa[None]) / step)
        best_off = np.full(c.shape, np.inf)
        for i in (np.clip(i0, 0, npts - 1), np.clip(i0 + 1, 0, npts - 1)):
            q = lo_sa[None] + i * step
            h = np.maximum(q + eps - vs, 0.0)
            best_off = np.minimum(best_off, 0.5 * (q - c) ** 2 + 0.5 * rho * h * h)
        f += np.sum(np.where(off[None], best_off, 0.0), axis=(1, 2))
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_f = float(f[i])
            best_i = int(flat[i])
    return best_f, best_i


_separable_chunk = kernel(_separable_chunk_py, fallback=_separable_chunk_numpy)


def _complete_separable(mdp, pi, eps, rho, lo, step, npts, v_idx):
    """Recover the full lattice point from the best on-policy indices."""
    S, A = mdp.n_states, mdp.n_actions
    v = np.array([lo[s * A + pi[s]] + v_idx[s] * step for s in range(S)])
    q = np.empty(S * A)
    for s in range(S):
        for a in range(A):
            if a == pi[s]:
                q[s * A + a] = v[s]
                continue
            c = mdp.reward[s, a] + mdp.gamma * float(mdp.transition[s, a] @ v)
            _, i = _off_policy_best(c, v[s], eps, rho, lo[s * A + a], step, npts)
            q[s * A + a] = lo[s * A + a] + i * step
    return q


@dataclass
class GridResult:
    objective: float
    qbar: np.ndarray
    coarse_objective: float
    coarse_qbar: np.ndarray
    points_evaluated: int
    resolution: float
    bounds: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qbar"] = self.qbar.tolist()
        d["coarse_qbar"] = self.coarse_qbar.tolist()
        return d


def _lattice_min(mdp, pi, eps, rho, lo, step, npts, workers, method):
    S, A = mdp.n_states, mdp.n_actions
    D = S * A
    dims = S if method == "separable" else D
    total = npts**dims
    chunk_fn = _separable_chunk if method == "separable" else _full_chunk
    P = np.ascontiguousarray(mdp.transition)
    R = np.ascontiguousarray(mdp.reward)
    n_chunks = max(1, workers) * 4
    edges = np.linspace(0, total, n_chunks + 1).astype(np.int64)
    args = [(P, R, mdp.gamma, pi, eps, rho, lo, step, npts, int(a), int(b))
            for a, b in zip(edges[:-1], edges[1:]) if b > a]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda x: chunk_fn(*x), args))
    else:
        results = [chunk_fn(*x) for x in args]
    # ordered min-reduction: earliest chunk wins ties
    best_f, best_i = np.inf, -1
    for f, i in results:
        if f < best_f:
            best_f, best_i = f, i
    idx = np.empty(dims, dtype=np.int64)
    _decode(best_i, npts, idx)
    if method == "separable":
        q = _complete_separable(mdp, pi, eps, rho, lo, step, npts, idx)
    else:
        q = lo + idx * step
    return float(best_f), q, total


def default_bounds(mdp: TabularMDP) -> float:
    """1.5 x the largest |Q*| of the clean MDP (value iteration, own loop)."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(100_000):
        q_new = mdp.reward + mdp.gamma * np.einsum("sat,t->sa", mdp.transition, q.max(axis=1))
        if np.max(np.abs(q_new - q)) < 1e-12:
            break
        q = q_new
    return 1.5 * float(np.max(np.abs(q_new)))


def grid_search_solve(mdp: TabularMDP, tp, epsilon: float, rho: float,
                      bounds: float | None = None, resolution: float = 0.1,
                      workers: int = 1, method: str = "separable") -> GridResult:
    """Minimise the penalised objective over a lattice of Qbar tables.

    The lattice is ``[-bounds, bounds]^(S*A)`` with spacing ``resolution``;
    the best cell is then searched again on a 10x finer lattice spanning one
    coarse step either side.

    ``method="full"`` visits every lattice point. ``method="separable"``
    returns the same lattice minimum but only enumerates the target-policy
    entries: once those are fixed, each remaining entry appears in one squared
    shift and one hinge term, a 1-D convex problem solved on the lattice by
    checking the two points around its continuous minimiser.
    """
    if method not in ("separable", "full"):
        raise ValueError(f"unknown method {method!r}")
    S, A = mdp.n_states, mdp.n_actions
    D = S * A
    if D > MAX_GRID_DIM:
        raise ValueError(f"grid dimension {D} exceeds the cap of {MAX_GRID_DIM}")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if bounds is None:
        bounds = default_bounds(mdp)
    pi = _target_table(tp, S)
    npts = int(np.floor(2 * bounds / resolution + 1e-9)) + 1
    lo = np.full(D, -float(bounds))
    f_c, q_c, n_c = _lattice_min(mdp, pi, epsilon, rho, lo, resolution, npts, workers, method)

    fine = resolution / 10.0
    lo_f = q_c - 10 * fine
    f_f, q_f, n_f = _lattice_min(mdp, pi, epsilon, rho, lo_f, fine, 21, workers, method)
    if f_c <= f_f:
        f_f, q_f = f_c, q_c
    return GridResult(float(f_f), q_f.reshape(S, A), float(f_c), q_c.reshape(S, A),
                      n_c + n_f, resolution, float(bounds))


def objective_value(qbar, mdp: TabularMDP, tp, epsilon: float, rho: float) -> float:
    """Penalised objective at one Qbar table, evaluated by the oracle's loops."""
    S, A = mdp.n_states, mdp.n_actions
    q = np.ascontiguousarray(np.asarray(qbar, dtype=np.float64).reshape(-1))
    return float(objective_kernel(q, np.ascontiguousarray(mdp.transition),
                                  np.ascontiguousarray(mdp.reward), mdp.gamma,
                                  _target_table(tp, S), epsilon, rho, S, A))


@dataclass
class VerificationReport:
    greedy_matches: list
    mismatched_states: list
    margins: list
    min_margin: float
    max_bellman_residual: float
    residual_violations: list
    delta_sq_norm: float
    epsilon: float
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def verify_backdoor(qbar, tp, epsilon: float, mdp: TabularMDP, delta,
                    margin_tol: float = MARGIN_TOL,
                    residual_tol: float = RESIDUAL_TOL) -> VerificationReport:
    """Check that ``qbar`` installs the target policy under rewards ``r + delta``.

    Inputs are not modified.
    """
    q = np.array(qbar, dtype=np.float64)
    dl = np.array(delta, dtype=np.float64)
    S, A = mdp.n_states, mdp.n_actions
    if q.shape != (S, A) or dl.shape != (S, A):
        raise ValueError("qbar and delta must be (n_states, n_actions) tables")
    pi = _target_table(tp, S)

    matches, mismatched, margins = [], [], []
    for s in range(S):
        best_a, best_v = 0, q[s, 0]
        for a in range(1, A):
            if q[s, a] > best_v:
                best_a, best_v = a, q[s, a]
        matches.append(best_a == pi[s])
        if best_a != pi[s]:
            mismatched.append(s)
        runner_up = -np.inf
        for a in range(A):
            if a != pi[s] and q[s, a] > runner_up:
                runner_up = q[s, a]
        margins.append(float(q[s, pi[s]] - runner_up))

    worst, flagged = 0.0, []
    for s in range(S):
        for a in range(A):
            expect = 0.0
            for t in range(S):
                expect += mdp.transition[s, a, t] * q[t, pi[t]]
            res = abs(q[s, a] - mdp.reward[s, a] - dl[s, a] - mdp.gamma * expect)
            worst = max(worst, res)
            if res > residual_tol:
                flagged.append([s, a])
    min_margin = float(min(margins))
    report = VerificationReport(
        greedy_matches=[bool(m) for m in matches],
        mismatched_states=mismatched,
        margins=margins,
        min_margin=min_margin,
        max_bellman_residual=float(worst),
        residual_violations=flagged,
        delta_sq_norm=float(np.sum(dl * dl)),
        epsilon=float(epsilon),
    )
    report.checks = {
        "greedy_match": not mismatched,
        "margin": bool(min_margin >= epsilon - margin_tol),
        "bellman_residual": bool(worst <= residual_tol),
    }
    return report
