"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--step]

Shapes match what one batch of 8 segments pushes through the default model.
``--step`` also times a full forward+backward training step under each
backend (in a subprocess, since the backend is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cstformer.kernels import get_backend


def cases(rng):
    f32 = np.float32
    xp = rng.standard_normal((8, 256, 52, 18)).astype(f32)  # IRFFN depthwise, padded
    w = rng.standard_normal((256, 1, 3, 3)).astype(f32)
    g = rng.standard_normal((8, 256, 50, 16)).astype(f32)
    cols = rng.standard_normal((8, 64, 3, 3, 250, 64)).astype(f32)
    pool_in = rng.standard_normal((8, 64, 250, 64)).astype(f32)
    pool_g = rng.standard_normal((8, 64, 50, 32)).astype(f32)
    pred = rng.uniform(-1, 1, (400, 3, 3, 13)).astype(f32)
    vecs = rng.uniform(-1, 1, (400, 3, 3, 13)).astype(f32)
    counts = rng.integers(0, 4, (400, 13))
    return {
        "depthwise_fwd": lambda k: k.depthwise_conv2d_forward(xp, w, (1, 1)),
        "depthwise_bwd": lambda k: k.depthwise_conv2d_backward(xp, w, g, (1, 1)),
        "col2im": lambda k: k.col2im(cols, (8, 64, 252, 66), (1, 1)),
        "maxpool_fwd": lambda k: k.max_pool2d_forward(pool_in, (5, 2), (5, 2)),
        "maxpool_bwd": lambda k: k.max_pool2d_backward(
            pool_g, k.max_pool2d_forward(pool_in, (5, 2), (5, 2))[1], pool_in.shape),
        "adpit_select": lambda k: k.adpit_select(pred, vecs, counts),
    }


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


STEP_SNIPPET = """
import time, numpy as np
from cstformer.model import ModelConfig, build_model
from cstformer.loss import adpit_loss
m = build_model(ModelConfig(pooling='front'), seed=0)
x = np.random.default_rng(0).standard_normal((8, 7, 250, 64)).astype(np.float32)
v = np.zeros((8, 50, 3, 3, 13), np.float32); c = np.zeros((8, 50, 13), np.int64)
def step():
    m.zero_grad(); adpit_loss(m(x), v, c).backward()
step()
t = []
for _ in range(3):
    t0 = time.perf_counter(); step(); t.append(time.perf_counter() - t0)
print(min(t))
"""


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step", action="store_true")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    nb, npy = get_backend("numba"), get_backend("numpy")
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_np = best_of(lambda: fn(npy), args.repeat)
        t_nb = best_of(lambda: fn(nb), args.repeat)
        print(f"{name:<16}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.2f}x")

    if args.step:
        for backend in ("numpy", "numba"):
            env = dict(os.environ, CSTFORMER_BACKEND=backend)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env,
                                 capture_output=True, text=True, check=True)
            print(f"train step, batch 8, {backend:<6}: {float(out.stdout) * 1e3:.0f} ms")


if __name__ == "__main__":
    main()
