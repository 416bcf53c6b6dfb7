"""Hot numeric kernels: MLP forward/backward, optimizer updates, CartPole physics.

Every function here is decorated with :func:`backdoor_rl._accel.kernel`, so it
is numba-compiled by default and runs as ordinary numpy code when
``BACKDOOR_RL_NUMBA=0``. Keep the bodies inside the numba-supported subset.

MLP parameter layout (flat float64 vector), for layer ``l`` with fan-in ``m``
and fan-out ``k``: ``W_l`` as an ``(m, k)`` row-major block followed by the
bias ``b_l`` of length ``k``. Activations of a batch of ``n`` inputs are kept
in one flat buffer, layer by layer, each layer an ``(n, size)`` C block.
"""

import math

import numpy as np

from ._accel import kernel

# canonical CartPole constants
GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
X_THRESHOLD = 2.4
THETA_THRESHOLD = 12 * 2 * math.pi / 360


@kernel
def mlp_forward(params, sizes, relu, x):
    """Forward pass over a batch ``x`` of shape (n, sizes[0]).

    Returns the flat activation buffer; the network output is its last
    ``n * sizes[-1]`` entries.
    """
    n = x.shape[0]
    n_layers = sizes.shape[0] - 1
    total = 0
    for l in range(n_layers + 1):
        total += sizes[l]
    acts = np.empty(n * total)
    acts[: n * sizes[0]] = np.ascontiguousarray(x).ravel()
    p = 0
    a = 0
    for l in range(n_layers):
        m = sizes[l]
        k = sizes[l + 1]
        w = params[p : p + m * k].reshape((m, k))
        p += m * k
        b = params[p : p + k]
        p += k
        h = acts[a : a + n * m].reshape((n, m)) @ w + b
        if relu[l]:
            h = np.maximum(h, 0.0)
        a += n * m
        acts[a : a + n * k] = h.ravel()
    return acts


@kernel
def mlp_predict(params, sizes, relu, x):
    """Output-only forward pass (no activation buffer kept)."""
    n_layers = sizes.shape[0] - 1
    h = np.ascontiguousarray(x)
    p = 0
    for l in range(n_layers):
        m = sizes[l]
        k = sizes[l + 1]
        w = params[p : p + m * k].reshape((m, k))
        p += m * k
        b = params[p : p + k]
        p += k
        h = h @ w + b
        if relu[l]:
            h = np.maximum(h, 0.0)
    return h


@kernel
def mlp_backward(params, sizes, relu, acts, grad_out, grads):
    """Accumulate d(loss)/d(params) into ``grads`` given d(loss)/d(output)."""
    n = grad_out.shape[0]
    n_layers = sizes.shape[0] - 1
    p_end = params.shape[0]
    a_end = acts.shape[0]
    g = np.ascontiguousarray(grad_out)
    for l in range(n_layers - 1, -1, -1):
        m = sizes[l]
        k = sizes[l + 1]
        out = acts[a_end - n * k : a_end].reshape((n, k))
        if relu[l]:
            g = g * (out > 0.0)
        a_end -= n * k
        inp = acts[a_end - n * m : a_end].reshape((n, m))
        b_start = p_end - k
        w_start = b_start - m * k
        grads[w_start:b_start] += (inp.T @ g).ravel()
        grads[b_start:p_end] += g.sum(axis=0)
        if l > 0:
            w = params[w_start:b_start].reshape((m, k))
            g = g @ w.T
        p_end = w_start


@kernel
def sgd_update(params, grads, lr):
    params -= lr * grads


def _adam_update_numpy(params, grads, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    step = lr / (1.0 - beta1**t)
    params -= step * m / (np.sqrt(v * (1.0 / (1.0 - beta2**t))) + eps)


@kernel(fallback=_adam_update_numpy, fastmath=True)
def adam_update(params, grads, m, v, lr, beta1, beta2, eps, t):
    step = lr / (1.0 - beta1**t)
    inv_c2 = 1.0 / (1.0 - beta2**t)
    for i in range(params.shape[0]):
        g = grads[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        params[i] -= step * m[i] / (np.sqrt(v[i] * inv_c2) + eps)


@kernel
def cartpole_physics(state, action):
    """One Euler step of the canonical cart-pole. Returns (new_state, terminated)."""
    x = state[0]
    x_dot = state[1]
    theta = state[2]
    theta_dot = state[3]
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
    thetaacc = (GRAVITY * sintheta - costheta * temp) / (
        HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * costheta * costheta / TOTAL_MASS)
    )
    xacc = temp - POLE_MASS_LENGTH * thetaacc * costheta / TOTAL_MASS
    out = np.empty(4)
    out[0] = x + TAU * x_dot
    out[1] = x_dot + TAU * xacc
    out[2] = theta + TAU * theta_dot
    out[3] = theta_dot + TAU * thetaacc
    terminated = (
        out[0] < -X_THRESHOLD
        or out[0] > X_THRESHOLD
        or out[2] < -THETA_THRESHOLD
        or out[2] > THETA_THRESHOLD
    )
    return out, terminated


@kernel
def cartpole_greedy_rollout(params, sizes, relu, state0, max_steps, override_step,
                            override_coord, override_value):
    """Roll out the greedy policy of a Q-network from ``state0``.

    At step ``override_step`` (``-1`` for never) the coordinate
    ``override_coord`` is overwritten with ``override_value`` before the agent
    acts. Returns (total_reward, steps).
    """
    s = state0.copy()
    x = np.empty((1, s.shape[0]))
    total = 0.0
    steps = 0
    for t in range(max_steps):
        if t == override_step:
            s[override_coord] = override_value
        x[0, :] = s
        q = mlp_predict(params, sizes, relu, x)
        a = 0
        best = q[0, 0]
        for j in range(1, q.shape[1]):
            if q[0, j] > best:
                best = q[0, j]
                a = j
        s, terminated = cartpole_physics(s, a)
        total += 1.0
        steps += 1
        if terminated:
            break
    return total, steps
