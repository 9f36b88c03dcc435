"""Compare the compiled kernel backend against the pure-python fallback.

Times im2col / col2im / full conv2d forward+backward on a few desk-sized
shapes and prints one table row per case. Both backends are also checked
for agreement on every case, so a silent numerical drift shows up here
before it shows up in training.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from tssl import autodiff as ad
from tssl import kernels

# (batch, channels, height, width, out_channels, ksize, stride, pad)
CASES = [
    (8, 3, 32, 32, 16, 3, 2, 1),
    (16, 16, 16, 16, 32, 3, 2, 1),
    (32, 32, 8, 8, 64, 3, 2, 1),
    (4, 3, 64, 64, 8, 5, 1, 2),
]


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _conv_step(x, w, b, stride, pad):
    out = ad.conv2d(ad.parameter(x), ad.parameter(w), ad.parameter(b),
                    stride=stride, pad=pad)
    ad.backward(ad.sum_(ad.mul(out, out)))


def bench_case(case, repeats: int):
    b, c, h, w_, oc, k, stride, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, c, h, w_))
    wt = rng.standard_normal((oc, c, k, k))
    bias = rng.standard_normal(oc)
    cols = kernels.im2col(x, k, k, stride, pad)

    rows = []
    results = {}
    for name, fn in (
        ("im2col", lambda: kernels.im2col(x, k, k, stride, pad)),
        ("col2im", lambda: kernels.col2im(cols, b, c, h, w_, k, k, stride, pad)),
        ("conv2d fwd+bwd", lambda: _conv_step(x, wt, bias, stride, pad)),
    ):
        timings = {}
        outputs = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            timings[backend] = _time(fn, repeats)
            if name != "conv2d fwd+bwd":
                outputs[backend] = fn()
        if len(outputs) == 2:
            a, bb = outputs.values()
            results[name] = float(np.max(np.abs(a - bb)))
        rows.append((name, timings))
    return rows, results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case (min is reported)")
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    if len(backends) == 1:
        print("compiled backend not built; timing the fallback only")

    header = f"{'case':<28}{'kernel':<16}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    default = kernels.get_backend()
    try:
        for case in CASES:
            b, c, h, w_, oc, k, stride, pad = case
            label = f"{b}x{c}x{h}x{w_} k{k} s{stride} p{pad}"
            rows, agreement = bench_case(case, args.repeats)
            for name, timings in rows:
                line = f"{label:<28}{name:<16}"
                line += "".join(f"{timings[bk] * 1e3:>10.2f}ms" for bk in backends)
                if len(backends) == 2:
                    line += f"{timings['python'] / timings['compiled']:>9.1f}x"
                print(line)
            for name, err in agreement.items():
                if err != 0.0:
                    print(f"  !! {name} backends disagree by {err:.3e}")
    finally:
        kernels.set_backend(default)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
