"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Kernel timings run in-process against both implementations. The end-to-end
training-step timing runs twice in subprocesses, once with
EQPLAN_DISABLE_NUMBA=1, since the kernel choice is fixed at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from eqplan import _accel

STEP = """
import time, numpy as np
from eqplan import model as md, train as tr
from eqplan.scene import GeneratorConfig, generate_synthetic
cfg = md.ModelConfig(C=32, D=32, K=6, N=4)
scenes = [s for s in generate_synthetic(GeneratorConfig(num_scenes=64), seed=0).scenes if s.num_vehicles == 4]
batch = md.make_batch(scenes[:16], cfg.C)
params = md.init_params(cfg, 0)
tcfg = tr.TrainConfig()
tr.gradient(batch, params, cfg, tcfg, "paper")
t = time.perf_counter()
for _ in range({repeat}):
    tr.gradient(batch, params, cfg, tcfg, "paper")
print((time.perf_counter() - t) / {repeat})
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernels(repeat):
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    q, k, g = (rng.normal(size=(128, 5, 64, 2)) for _ in range(3))
    plans = rng.normal(scale=10, size=(4096, 6, 2))
    others = rng.normal(scale=10, size=(4096, 4, 6, 2))
    cases = {
        "mirror forward": (lambda: _accel.mirror_forward_numpy(q, k), lambda: _accel.mirror_forward_numba(q, k)),
        "mirror backward": (lambda: _accel.mirror_backward_numpy(q, k, g),
                            lambda: _accel.mirror_backward_numba(q, k, g)),
        "collision scan": (lambda: _accel.collision_scan_numpy(plans, others, 2.0),
                           lambda: _accel.collision_scan_numba(plans, others, 2.0)),
    }
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (f_np, f_nb) in cases.items():
        f_nb()  # compile
        a, b = best(f_np, repeat) * 1e3, best(f_nb, repeat) * 1e3
        print(f"{name:<18}{a:>10.3f}{b:>10.3f}{a / b:>8.1f}x")


def train_step(repeat):
    print("\nforward + backward, 16 scenes x 4 vehicles, C=D=32, N=4")
    for label, disable in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, EQPLAN_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        print(f"  {label:<6} {float(out.stdout) * 1e3:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    kernels(args.repeat)
    train_step(max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
