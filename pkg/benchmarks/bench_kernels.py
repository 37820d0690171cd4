"""Time the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--n 512] [--repeat 5]

Imports both backend modules directly, so the MICROLM_NUMBA env flag is
irrelevant here.  The first numba call is excluded (JIT compilation).
"""

import argparse
import time

import numpy as np

from microlm.kernels import _numpy

try:
    from microlm.kernels import _numba
except ImportError:
    _numba = None


def make_cases(n, rng):
    H, dk, dv, window = 8, 24, 24, 97
    d = 256
    cap = 512
    q = rng.standard_normal((n, H, dk)).astype(np.float32)
    k = rng.standard_normal((n, H, dk)).astype(np.float32)
    v = rng.standard_normal((n, H, dv)).astype(np.float32)
    pos = rng.standard_normal((window, H, dk)).astype(np.float32)
    u = rng.standard_normal((H, dk)).astype(np.float32)
    vb = rng.standard_normal((H, dk)).astype(np.float32)
    h = rng.standard_normal((n, d)).astype(np.float32)
    targets = rng.integers(1, 200, size=n).astype(np.int64)
    d_p = rng.standard_normal(n).astype(np.float32)
    theta = np.float32(0.3)
    cases = {
        "banded_attn_forward":
            lambda mod: mod.banded_attn_forward(q, k, v, pos, u, vb, window, 0),
        "window_cache_forward":
            lambda mod: mod.window_cache_forward(h, targets, theta, cap),
        "window_cache_backward":
            lambda mod: mod.window_cache_backward(h, targets, theta, cap, d_p),
        "stream_dots":
            lambda mod: mod.stream_dots(h, cap),
    }

    def attn_backward(mod):
        out, attn = mod.banded_attn_forward(q, k, v, pos, u, vb, window, 0)
        return mod.banded_attn_backward(out, attn, q, k, v, pos, u, vb,
                                        window, 0)

    cases["banded_attn_backward"] = attn_backward
    dots, occ = _numpy.stream_dots(h, cap)
    cases["cache_probs_from_dots"] = (
        lambda mod: mod.cache_probs_from_dots(dots, targets, occ, targets,
                                              theta))
    return cases


def bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=512, help="sequence length")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = make_cases(args.n, rng)

    print(f"{'kernel':<24}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, call in cases.items():
        t_np = bench(lambda: call(_numpy), args.repeat)
        if _numba is None:
            print(f"{name:<24}{t_np * 1e3:>12.2f}{'n/a':>12}{'n/a':>10}")
            continue
        call(_numba)  # compile outside the timed region
        t_nb = bench(lambda: call(_numba), args.repeat)
        print(f"{name:<24}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}"
              f"{t_np / t_nb:>10.2f}x")


if __name__ == "__main__":
    main()
