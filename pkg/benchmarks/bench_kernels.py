"""Compiled vs numpy kernels, plus one full learner step on each backend.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numpy fallback is loaded directly from ``q2rl._kernels_py``; the learner
step comparison re-imports q2rl in a subprocess with Q2RL_PURE_PYTHON=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from q2rl import _kernels_py, kernels

LEARNER_SNIPPET = """
import timeit, numpy as np
from q2rl import kernels
kernels.tune_allocator()
from q2rl.replay import ReplayBuffer, Transition
from q2rl.sac import RLConfig, SacLearner
rng = np.random.default_rng(0)
rb = ReplayBuffer(4, 2)
for _ in range(1000):
    rb.push(Transition(rng.random(4), rng.uniform(-1, 1, 2), -1.0, rng.random(4)))
learner = SacLearner(4, 2, RLConfig(bc_loss_weight=0.0))
learner.train_step(rb)
t = min(timeit.repeat(lambda: learner.train_step(rb), number=5, repeat={repeat})) / 5
print(kernels.BACKEND, t)
"""


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=20, repeat=repeat)) / 20


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n, h in [(256, 64), (2560, 64), (2560, 256)]:
        z = rng.normal(size=(n, h))
        g = rng.normal(size=(n // 256, h))
        b = rng.normal(size=(n // 256, h))
        dout = rng.normal(size=(n, h))
        for name, act in [("relu", kernels.ACT_RELU), ("tanh", kernels.ACT_TANH)]:
            times = {}
            for label, mod in [("cython", kernels), ("numpy", _kernels_py)]:
                out, xhat, rstd = mod.ln_act_forward(z, g, b, 256, act, 1e-5)
                fwd = bench(lambda: mod.ln_act_forward(z, g, b, 256, act, 1e-5), repeat)
                bwd = bench(lambda: mod.ln_act_backward(dout, out, xhat, rstd, g, 256, act), repeat)
                times[label] = (fwd, bwd)
            rows.append((f"ln+{name} fwd {n}x{h}", times["cython"][0], times["numpy"][0]))
            rows.append((f"ln+{name} bwd {n}x{h}", times["cython"][1], times["numpy"][1]))
    for t in [40, 1000]:
        r = rng.normal(size=t)
        rows.append((f"discounted_returns T={t}",
                     bench(lambda: kernels.discounted_returns(r, 0.99), repeat),
                     bench(lambda: _kernels_py.discounted_returns(r, 0.99), repeat)))
    return rows


def learner_step(pure, repeat):
    env = dict(os.environ)
    env.pop("Q2RL_PURE_PYTHON", None)
    if pure:
        env["Q2RL_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", LEARNER_SNIPPET.format(repeat=repeat)],
                         env=env, capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    kernels.tune_allocator()
    if kernels.BACKEND != "cython":
        sys.exit("compiled extension not built; run `pip install --no-build-isolation -e .` first")
    print(f"{'kernel':32s} {'cython us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for name, tc, tn in kernel_rows(args.repeat):
        print(f"{name:32s} {tc * 1e6:10.1f} {tn * 1e6:10.1f} {tn / tc:8.2f}")
    (bc, tc), (bn, tn) = learner_step(False, args.repeat), learner_step(True, args.repeat)
    print(f"{'SAC train_step (E=10, utd=4)':32s} {tc * 1e3:9.1f}m {tn * 1e3:9.1f}m {tn / tc:8.2f}"
          f"   [{bc} vs {bn}]")


if __name__ == "__main__":
    main()
