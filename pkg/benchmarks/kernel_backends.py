"""Time every hot kernel under the numba and numpy backends.

    python3 benchmarks/kernel_backends.py [--rows 3072] [--reps 50]

Shapes follow one training step at desk defaults (32 images x 96 queries,
width 64, feed-forward width 256). Outputs of the two backends are
compared before timing.
"""
import argparse
import time

import numpy as np

from itta import kernels


def cases(rows, rng):
    d = 64
    x = rng.standard_normal((rows, d))
    wide = rng.standard_normal((rows, 4 * d))
    g = rng.standard_normal((rows, d))
    gain, bias = rng.standard_normal(d), rng.standard_normal(d)
    scores = rng.random(rows * 4)
    labels = (rng.random(rows) < 0.1).astype(np.float64)
    words = [f"w{i}".encode() for i in range(rows)]
    offsets = np.zeros(rows + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(w) for w in words])
    buf = np.frombuffer(b"".join(words), dtype=np.uint8)

    def ln_bwd(be):
        _, xhat, rstd = be.layer_norm_fwd(x, gain, bias, 1e-5)
        return lambda: be.layer_norm_bwd(g, xhat, rstd, gain)

    def gelu_bwd(be):
        _, cdf = be.gelu_fwd(wide)
        return lambda: be.gelu_bwd(wide, cdf, wide)

    sm = kernels.BACKENDS["numpy"].softmax_rows(x)
    return {
        "layer_norm_fwd": lambda be: (lambda: be.layer_norm_fwd(x, gain, bias, 1e-5)),
        "layer_norm_bwd": ln_bwd,
        "gelu_fwd": lambda be: (lambda: be.gelu_fwd(wide)),
        "gelu_bwd": gelu_bwd,
        "softmax_rows": lambda be: (lambda: be.softmax_rows(x)),
        "softmax_bwd": lambda be: (lambda: be.softmax_bwd(sm, g)),
        "row_dots": lambda be: (lambda: be.row_dots(x, gain)),
        "weighted_rows": lambda be: (
            lambda: be.weighted_rows(sm[: rows // 8, :8].copy(), x[: rows // 8 * 8].reshape(rows // 8, 8, d))
        ),
        "fnv1a": lambda be: (lambda: be.fnv1a(buf, offsets)),
        "hash_uniform": lambda be: (
            lambda: be.hash_uniform(kernels.BACKENDS["numpy"].fnv1a(buf, offsets), np.uint64(7), d)
        ),
        "ap_sorted": lambda be: (lambda: be.ap_sorted(labels)),
        "histogram": lambda be: (lambda: be.histogram(scores, 64)),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(np.asarray(out, dtype=np.float64))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=3072)
    ap.add_argument("--reps", type=int, default=50)
    args = ap.parse_args()
    if "numba" not in kernels.BACKENDS:
        raise SystemExit("numba is not installed; only the numpy backend exists")

    rng = np.random.default_rng(0)
    npb, nbb = kernels.BACKENDS["numpy"], kernels.BACKENDS["numba"]
    print(f"{'kernel':16s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  max |diff|")
    for name, make in cases(args.rows, rng).items():
        f_np, f_nb = make(npb), make(nbb)
        a, b = _flat(f_np()), _flat(f_nb())  # also compiles the numba path
        diff = float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) if a.size else 0.0
        times = []
        for f in (f_np, f_nb):
            t0 = time.perf_counter()
            for _ in range(args.reps):
                f()
            times.append((time.perf_counter() - t0) / args.reps * 1e3)
        print(f"{name:16s} {times[0]:10.4f} {times[1]:10.4f} {times[0] / times[1]:8.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()
