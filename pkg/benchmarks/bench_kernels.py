"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Every kernel is timed on both backends with identical inputs, and the outputs
are checked for bit identity before any timing is reported.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from moeptq import _fallback

try:
    from moeptq import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    a = rng.standard_normal((256, 128))
    b = rng.standard_normal((128, 256))
    w = rng.standard_normal((128, 512))
    scale = np.ascontiguousarray(np.broadcast_to(np.abs(w).max(axis=0) / 7.0, w.shape))
    zero = np.zeros_like(w)
    x = rng.standard_normal((1024, 128))
    logits = rng.standard_normal((4096, 64))
    return {
        "matmul 256x128x256": lambda m: m.matmul(a, b),
        "quantize 128x512 4-bit": lambda m: m.quantize(w, scale, zero, -8.0, 7.0),
        "fake_quant_rows 1024x128": lambda m: m.fake_quant_rows(x, -8.0, 7.0, False, 1e-8),
        "topk_rows 4096x64 k=8": lambda m: m.topk_rows(logits, 8),
    }


def same(u, v):
    if isinstance(u, tuple):
        return all(same(p, q) for p, q in zip(u, v))
    return np.array_equal(u, v)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write the results here")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':28s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        if not same(fn(_kernels), fn(_fallback)):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        t = {}
        for label, mod in (("cython", _kernels), ("python", _fallback)):
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(mod), number=1), 1e-6)))
            t[label] = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number * 1e3
        rows.append({"kernel": name, "cython_ms": t["cython"], "python_ms": t["python"],
                     "speedup": t["python"] / t["cython"]})
        print(f"{name:28s} {t['cython']:10.3f} {t['python']:10.3f} {t['python'] / t['cython']:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
