"""Time the compiled kernels against the numpy fallback and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from diffatlas import _kernels_py

try:
    from diffatlas import _kernels as _compiled
except ImportError:
    _compiled = None

RECT = (-1.0, 1.0, -1.0, 1.0)


def cases(rng):
    tex = rng.random((128, 128, 3))
    uv = rng.uniform(-1, 1, (200_000, 2))
    g = rng.standard_normal((200_000, 3))
    img = rng.random((128, 128, 3))
    known = rng.random((128, 128)) < 0.5
    return {
        "bilinear_sample 200k": lambda m: m.bilinear_sample(tex, uv, RECT),
        "bilinear_grad_uv 200k": lambda m: m.bilinear_grad_uv(tex, uv, RECT, g),
        "splat_max 200k -> 128^2": lambda m: m.splat_max(g[:, 0].copy(), uv, 128, RECT),
        "pull_push_pass 128^2": lambda m: m.pull_push_pass(img, known),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the numpy path is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  max|diff|")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _compiled is None:
            print(f"{name:<26}{t_py:>10.2f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(np.asarray(fn(_kernels_py)) - np.asarray(fn(_compiled)))))
        print(f"{name:<26}{t_py:>10.2f}{t_c:>11.2f}{t_py / t_c:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
