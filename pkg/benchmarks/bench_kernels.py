"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from divqat.kernels import backends


def cases(rng):
    x = rng.standard_normal((64, 8, 8, 8)).astype(np.float32)
    cols = rng.standard_normal((64 * 8 * 8, 8 * 9)).astype(np.float32)
    rows = rng.standard_normal((16, 4096)).astype(np.float32)
    scale = np.full(16, 0.02, dtype=np.float32)
    zp = np.zeros(16, dtype=np.float32)
    return {
        "im2col 64x8x8x8 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 64x8x8x8 k3": lambda k: k.col2im(cols, 64, 8, 8, 8, 3, 3, 1, 1),
        "fake_quant 16x4096": lambda k: k.fake_quant_rows(rows, scale, zp, -128.0, 127.0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    impls = backends()
    print(f"{'kernel':<22}" + "".join(f"{name:>14}" for name in impls) + ("   speedup" if len(impls) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=args.repeat, repeat=3)) / args.repeat
                 for b, k in impls.items()}
        line = f"{name:<22}" + "".join(f"{t * 1e6:>12.1f}us" for t in times.values())
        if "compiled" in times:
            line += f"   {times['python'] / times['compiled']:7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
