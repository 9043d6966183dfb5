"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default desk-scale model (batch 64, 32x32 input, widths
16/24/24). Both backends are checked for bitwise-equal output first.
"""

import argparse
import timeit

import numpy as np

from sef import kernels

CASES = [
    # (name, input shape, kernel, stride, pad)
    ("conv0 3->16 @32", (64, 3, 32, 32), 3, 1, 1),
    ("conv1 16->24 @16", (64, 16, 16, 16), 3, 1, 1),
    ("conv2 24->24 @8", (64, 24, 8, 8), 3, 1, 1),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    py, cy = kernels.python_kernels, kernels.compiled_kernels
    if cy is None:
        print("compiled extension not available; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, shape, k, s, p in CASES:
        x = rng.normal(size=shape)
        cols = py.im2col(x, k, k, s, p)
        assert np.array_equal(cols, cy.im2col(x, k, k, s, p))
        g = rng.normal(size=cols.shape)
        assert np.array_equal(py.col2im(g, shape, k, k, s, p), cy.col2im(g, shape, k, k, s, p))
        rows = [
            (f"im2col {name}", lambda: py.im2col(x, k, k, s, p), lambda: cy.im2col(x, k, k, s, p)),
            (f"col2im {name}", lambda: py.col2im(g, shape, k, k, s, p),
             lambda: cy.col2im(g, shape, k, k, s, p)),
        ]
        if shape[2] > 8:
            out, idx = py.maxpool_forward(x, 2)
            go = rng.normal(size=out.shape)
            rows += [
                (f"maxpool fwd {name.split()[0]}", lambda: py.maxpool_forward(x, 2),
                 lambda: cy.maxpool_forward(x, 2)),
                (f"maxpool bwd {name.split()[0]}", lambda: py.maxpool_backward(go, idx, shape, 2),
                 lambda: cy.maxpool_backward(go, idx, shape, 2)),
            ]
        for label, f_py, f_cy in rows:
            t_py, t_cy = bench(f_py, args.repeat), bench(f_cy, args.repeat)
            print(f"{label:<28}{t_py:>10.2f}{t_cy:>11.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
