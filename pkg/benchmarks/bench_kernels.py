"""Compare the compiled and pure-Python kernel backends.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
timed on desk-preset shapes and checked for agreement between backends.
"""
import argparse
import json
import timeit

import numpy as np

from mixcaps import kernels


def cases(rng):
    x = rng.normal(size=(16, 40, 40, 3))      # desk input after 2x pooling
    feat = rng.normal(size=(16, 18, 18, 16))  # first conv output
    u_hat = rng.normal(size=(16, 98, 2, 8)) * 0.5
    return [
        ("im2col conv1 (16x40x40x3, k5 s2)", "im2col", (x, 5, 2)),
        ("im2col conv2 (16x18x18x16, k5 s2)", "im2col", (feat, 5, 2)),
        ("col2im conv2", "col2im", (np.ones((16, 7, 7, 5, 5, 16)), feat.shape, 5, 2)),
        ("route (16x98x2x8, 3 rounds)", "route", (u_hat, 3, kernels.SQUASH_EPS)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.implementations()
    if "compiled" not in impls:
        print(json.dumps({"warning": "compiled backend unavailable, timing python only"}))
    rng = np.random.default_rng(0)
    for label, name, call_args in cases(rng):
        row = {"kernel": label}
        outs = {}
        for backend, impl in sorted(impls.items()):
            fn = impl[name]
            outs[backend] = fn(*call_args)
            row[f"{backend}_ms"] = round(1e3 * min(timeit.repeat(lambda: fn(*call_args),
                                                                  number=1, repeat=args.repeat)), 3)
        if len(outs) == 2:
            a, b = outs["python"], outs["compiled"]
            pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
            row["max_abs_diff"] = max(float(np.abs(p - q).max()) for p, q in pairs)
            row["speedup"] = round(row["python_ms"] / row["compiled_ms"], 2)
        print(json.dumps(row))


if __name__ == "__main__":
    main()
