"""Benchmark the numba-jitted kernels against their pure-numpy fallbacks.

Times every dual-path kernel on sizes representative of real workloads
(counter-based uniforms and reliability binning at full dataset scale,
convolutions at training batch scale) and prints a comparison table.

Usage::

    python benchmarks/compare_backends.py [--repeats 5]

Requires numba; the numpy path alone can always be exercised by running the
package with NOWCAL_BACKEND=numpy instead.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nowcal import kernels


def _best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def _cases():
    rng = np.random.default_rng(0)
    x32 = rng.normal(size=(64, 12, 16, 16)).astype(np.float32)
    w32 = rng.normal(size=(8, 12, 3, 3)).astype(np.float32)
    b32 = np.zeros(8, dtype=np.float32)
    g32 = rng.normal(size=(64, 8, 16, 16)).astype(np.float32)

    m = 512_000
    bins = rng.integers(0, 20, size=m)
    leads = rng.integers(0, 6, size=m)
    conf = rng.uniform(size=m)
    event = rng.integers(0, 2, size=m).astype(np.float64)

    logits = rng.normal(scale=3, size=(m, 12)).astype(np.float32)
    labels = rng.integers(0, 12, size=m).astype(np.int64)

    return [
        ("pixel_uniforms [2000,256,16]",
         lambda f: f(42, 2000, 256, 16),
         kernels.pixel_uniforms_numpy, "pixel_uniforms_numba"),
        ("conv2d_forward [64,12,16,16] k3",
         lambda f: f(x32, w32, b32),
         kernels.conv2d_forward_numpy, "conv2d_forward_numba"),
        ("conv2d_input_grad [64,8,16,16]",
         lambda f: f(g32, w32),
         kernels.conv2d_input_grad_numpy, "conv2d_input_grad_numba"),
        ("conv2d_weight_grad [64,...] k3",
         lambda f: f(x32, g32, 3),
         kernels.conv2d_weight_grad_numpy, "conv2d_weight_grad_numba"),
        ("binned_accumulate [512k px]",
         lambda f: f(bins, leads, conf, event, 6, 20),
         kernels.binned_accumulate_numpy, "binned_accumulate_numba"),
        ("mean_nll [512k x 12]",
         lambda f: f(logits, labels, 0.7),
         kernels.mean_nll_numpy, "mean_nll_numba"),
    ]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.split("\n", 1)[0])
    parser.add_argument("--repeats", type=int, default=5, help="timed repeats, best-of")
    args = parser.parse_args()

    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not available in this environment; nothing to compare")

    rows = []
    for name, call, np_impl, nb_name in _cases():
        nb_impl = getattr(kernels, nb_name)
        call(nb_impl)  # trigger JIT before timing
        t_np = _best_of(lambda: call(np_impl), args.repeats)
        t_nb = _best_of(lambda: call(nb_impl), args.repeats)
        rows.append((name, t_np, t_nb))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_nb * 1e3:>8.2f}ms  {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
