"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints wall time per call for each backend and the speedup, and checks the
two backends agree on the same inputs.
"""
import argparse
import timeit

import numpy as np

from robust_features import _kernels_py

try:
    from robust_features import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    d = 10
    sigma = rng.uniform(0.1, 3.0, d)
    s = rng.uniform(0.0, 2.0, (2000, d))
    budget = rng.uniform(0.01, 1.0, 2000)
    yield "secular_bisect (2000 x 10)", "secular_bisect", (s, sigma, budget)
    for n, d in ((256, 784), (4096, 9)):
        x0 = rng.uniform(size=(n, d))
        g = rng.normal(size=(n, d))
        yield f"pgd_step ({n} x {d})", "pgd_step", (x0, g, 0.1, 0.5, 1.0, True)


def run(impl, name, args):
    if name == "pgd_step":
        x0, g, step, eps, sign, clip = args
        x = x0.copy()
        return lambda: impl.pgd_step(x, x0, g, step, eps, sign, clip), lambda: _pgd_out(impl, args)
    return lambda: impl.secular_bisect(*args), lambda: impl.secular_bisect(*args)[0]


def _pgd_out(impl, args):
    x0, g, step, eps, sign, clip = args
    x = x0.copy()
    impl.pgd_step(x, x0, g, step, eps, sign, clip)
    return x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}{'max |diff|':>13}")
    for label, name, a in cases(rng):
        t = {}
        outs = {}
        for key, impl in (("python", _kernels_py), ("compiled", _kernels)):
            call, out = run(impl, name, a)
            number = 3 if key == "python" and name == "secular_bisect" else 20
            t[key] = min(timeit.repeat(call, number=number, repeat=args.repeat)) / number * 1e3
            outs[key] = out()
        diff = float(np.max(np.abs(outs["python"] - outs["compiled"])))
        print(f"{label:<28}{t['python']:>12.3f}{t['compiled']:>14.3f}{t['python'] / t['compiled']:>9.1f}x{diff:>13.1e}")


if __name__ == "__main__":
    main()
