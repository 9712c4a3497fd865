"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one line per kernel with the best-of-repeat time of each backend
and the speedup. Shapes mirror the hot paths: Q-network layers on action
batches and coverage updates on dev splits.
"""

import argparse
import timeit

import numpy as np

from budgetforge.kernels import RELU, backends


def cases(rng):
    w = rng.normal(size=(64, 5))
    b = rng.normal(size=64)
    x = rng.normal(size=(256, 5))
    pre = x @ w.T + b
    out = np.maximum(pre, 0)
    g = rng.normal(size=(256, 64))
    pts = rng.normal(size=(150, 64))
    emb = rng.normal(size=(600, 64))
    q = rng.normal(size=64)
    best = np.zeros(150)
    min_sq = np.full(600, np.inf)
    return {
        "layer_forward 256x5->64": lambda k: k.layer_forward(w, b, x, RELU),
        "layer_backward 256x5->64": lambda k: k.layer_backward(w, x, pre, out, g, RELU),
        "sq_dists 150x600 d64": lambda k: k.sq_dists(pts, emb),
        "min_dist_update 600 d64": lambda k: k.min_dist_update(min_sq, emb, q),
        "coverage_update 150 d64": lambda k: k.coverage_update(best, pts, q, 0.5),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args(argv)
    found = backends()
    if "cython" not in found:
        print("compiled kernels not available; only the numpy fallback is installed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}" + "".join(f"{n + ' (us)':>14}" for n in found) + ("   speedup" if len(found) > 1 else ""))
    for name, fn in cases(rng).items():
        times = {}
        for bname, mod in found.items():
            t = min(timeit.repeat(lambda: fn(mod), number=args.number, repeat=args.repeat))
            times[bname] = 1e6 * t / args.number
        line = f"{name:<28}" + "".join(f"{times[n]:>14.2f}" for n in found)
        if "cython" in times:
            line += f"   {times['numpy'] / times['cython']:7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
