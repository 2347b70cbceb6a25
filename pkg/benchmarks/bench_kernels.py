"""Compare the compiled im2col/col2im kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--shape 16 16 64 64]

Also times one full conv3x3 forward+backward per backend, since that is
where training spends its time.
"""
import argparse
import timeit

import numpy as np

from drattn.tensor_core import _kernels_py

try:
    from drattn.tensor_core import _kernels_c
except ImportError:
    _kernels_c = None


def conv_roundtrip(mod, x, w):
    n, c, h, wd = x.shape
    cols = mod.im2col3x3(x)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    return mod.col2im3x3(np.matmul(w.reshape(w.shape[0], -1).T, out), h, wd)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--shape", type=int, nargs=4, default=(16, 16, 64, 64), metavar=("N", "C", "H", "W"))
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n, c, h, w = args.shape
    x = rng.standard_normal((n, c, h, w))
    cols = _kernels_py.im2col3x3(x)
    weight = rng.standard_normal((c, c, 3, 3))

    backends = {"numpy": _kernels_py}
    if _kernels_c is None:
        print("compiled kernels not built; timing the numpy fallback only")
    else:
        backends["cython"] = _kernels_c
        assert np.array_equal(_kernels_c.im2col3x3(x), cols)
        assert np.array_equal(_kernels_c.col2im3x3(cols, h, w), _kernels_py.col2im3x3(cols, h, w))

    cases = {
        "im2col3x3": lambda m: m.im2col3x3(x),
        "col2im3x3": lambda m: m.col2im3x3(cols, h, w),
        "conv fwd+bwd": lambda m: conv_roundtrip(m, x, weight),
    }
    print(f"input {tuple(args.shape)}, best of {args.repeat}")
    print(f"{'kernel':<14}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, fn in cases.items():
        times = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for b, m in backends.items()}
        row = f"{label:<14}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values())
        if len(times) > 1:
            row += f"{times['numpy'] / times['cython']:>11.2f}x"
        print(row)


if __name__ == "__main__":
    main()
