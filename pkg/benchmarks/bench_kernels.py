"""Time the hot kernels under numba and under the numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time by ``BACKDOOR_RL_NUMBA``::

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from backdoor_rl import _accel
from backdoor_rl.dqn import DqnAgent, DqnConfig, GreedyNetPolicy, evaluate
from backdoor_rl.mdp import TransitionBatch
from backdoor_rl.nn import Adam, Mlp

repeat = int(sys.argv[1])
rng = np.random.default_rng(0)
net = Mlp([4, 64, 64, 2], seed=0)
x = rng.normal(size=(64, 4))
y = rng.normal(size=(64, 2))
opt = Adam(lr=1e-3)
batch = TransitionBatch(x, rng.integers(0, 2, 64), np.ones(64), x + 0.01, np.zeros(64, bool))
agent = DqnAgent(4, 2, DqnConfig(), seed=0)
policy = GreedyNetPolicy(Mlp([4, 64, 64, 2], seed=1))


def train_step():
    net.zero_grad()
    net.backward(net.forward(x) - y)
    opt.step(net)


cases = {
    "mlp_predict (64x4)": lambda: net.predict(x),
    "forward+backward+adam": train_step,
    "dqn update (batch 64)": lambda: agent.update(batch),
    "greedy rollout (1 episode)": lambda: evaluate(policy, "inactive", 1, 3),
}
out = {"backend": _accel.backend_name()}
for name, fn in cases.items():
    fn()  # compile / warm up
    best = float("inf")
    for _ in range(5):
        t = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t) / repeat)
    out[name] = best
json.dump(out, sys.stdout)
"""


def run(flag: str, repeat: int) -> dict:
    env = dict(os.environ, BACKDOOR_RL_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args()
    fast, slow = run("1", args.repeat), run("0", args.repeat)
    print(f"{'kernel':32s} {fast['backend']:>12s} {slow['backend']:>12s} {'speed-up':>9s}")
    for name in fast:
        if name == "backend":
            continue
        print(f"{name:32s} {fast[name] * 1e6:10.1f}us {slow[name] * 1e6:10.1f}us"
              f" {slow[name] / fast[name]:8.1f}x")


if __name__ == "__main__":
    main()
