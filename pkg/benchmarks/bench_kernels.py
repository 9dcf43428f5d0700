"""Time the MLP loss/gradient kernel on each available backend.

    python benchmarks/bench_kernels.py [--repeats 200]
"""
import argparse
import timeit

import numpy as np

from odemerge import kernels
from odemerge.harness import default_arch
from odemerge.params import ACTIVATIONS
from odemerge.tasks import init_params


def bench(backend, theta, X, y, sizes, act, repeats):
    fn = lambda: kernels.mlp_loss_grad(theta, X, y, sizes, act, backend=backend)  # noqa: E731
    fn()
    return min(timeit.repeat(fn, number=repeats, repeat=3)) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()

    arch = default_arch()
    sizes = arch.mlp_sizes()
    act = ACTIVATIONS[arch.activation]
    theta = init_params(arch, 0)
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(sorted(kernels.BACKENDS))} (default {kernels.BACKEND})")
    print(f"{'batch':>6} {'backend':>9} {'ms/call':>9} {'speedup':>8}")
    for n in (64, 600, 1024, 4096):
        X = rng.standard_normal((n, 2))
        y = rng.integers(0, arch.class_count, n)
        base = bench("python", theta, X, y, sizes, act, args.repeats)
        for backend in sorted(kernels.BACKENDS):
            t = base if backend == "python" else bench(backend, theta, X, y, sizes, act, args.repeats)
            print(f"{n:>6} {backend:>9} {1e3 * t:>9.4f} {base / t:>7.2f}x")
        if "compiled" in kernels.BACKENDS:
            lp, gp = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="python")
            lc, gc = kernels.mlp_loss_grad(theta, X, y, sizes, act, backend="compiled")
            print(f"{'':>6} max |grad diff| {np.max(np.abs(gp - gc)):.2e}, |loss diff| {abs(lp - lc):.2e}")


if __name__ == "__main__":
    main()
