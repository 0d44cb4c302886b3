"""Time the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Both paths run in one process: ``ECHOLAB_NO_JIT`` is read on every
kernel call, so the script flips it between measurements.  JIT
compilation is excluded by a warm-up call.  Outputs of the two paths are
compared before timing.
"""
import argparse
import os
import time

import numpy as np

from echolab import kernels


def cases(scale, rng):
    n_tok, d = int(4000 * scale), 64
    X = rng.normal(size=(n_tok, d)).astype(np.float32)
    starts = rng.integers(0, n_tok - 25, int(20000 * scale))
    ends = starts + rng.integers(1, 26, starts.size)
    pooled, arg = kernels.span_max_pool(X, starts, ends)
    dpool = rng.normal(size=pooled.shape).astype(np.float32)

    z = rng.normal(size=(n_tok, 3 * d)).astype(np.float32)
    _, idx = kernels.maxout_select(z, 3)
    dy = rng.normal(size=(n_tok, d)).astype(np.float32)

    n_par = int(2_000_000 * scale)
    p, g = rng.normal(size=n_par).astype(np.float32), rng.normal(size=n_par).astype(np.float32)

    n_words, K, V = int(200_000 * scale), 20, 5000
    doc = np.sort(rng.integers(0, 2000, n_words))
    word = rng.integers(0, V, n_words)
    z0 = rng.integers(0, K, n_words)
    u = rng.random(n_words)

    def gibbs():
        zz = z0.copy()
        ndk = np.zeros((2000, K), np.int64)
        nkw = np.zeros((K, V), np.int64)
        np.add.at(ndk, (doc, zz), 1)
        np.add.at(nkw, (zz, word), 1)
        kernels.gibbs_sweep(doc, word, zz, ndk, nkw, nkw.sum(1), 0.1, 0.01, u)
        return zz

    n_s, n_f = int(4000 * scale), 500
    nnz = rng.random((n_s, n_f)) < 0.05
    vals = np.where(nnz, rng.random((n_s, n_f)), 0.0)
    ptr, ent_s, ent_v = [0], [], []
    for f in range(n_f):
        rows = np.nonzero(vals[:, f])[0]
        rows = rows[np.argsort(vals[rows, f], kind="stable")]
        ent_s.append(rows)
        ent_v.append(vals[rows, f])
        ptr.append(ptr[-1] + rows.size)
    ptr, ent_s, ent_v = np.array(ptr), np.concatenate(ent_s), np.concatenate(ent_v)
    node_of = rng.integers(0, 8, n_s)
    gg, hh = rng.normal(size=n_s), rng.random(n_s) + 0.1

    return {
        "span_max_pool": lambda: kernels.span_max_pool(X, starts, ends),
        "span_max_pool_backward": lambda: kernels.span_max_pool_backward(dpool, arg, n_tok),
        "maxout_select": lambda: kernels.maxout_select(z, 3),
        "maxout_select_backward": lambda: kernels.maxout_select_backward(dy, idx, 3),
        "adam_update": lambda: kernels.adam_update(p.copy(), g, np.zeros_like(p),
                                                   np.zeros_like(p), 1e-3, 0.9, 0.999, 1e-8, 1),
        "gibbs_sweep": gibbs,
        "best_splits": lambda: kernels.best_splits(ptr, ent_s, ent_v, node_of, gg, hh),
    }


def flat(out):
    if out is None:
        return []
    if isinstance(out, tuple):
        return [np.asarray(o) for o in out]
    return [np.asarray(out)]


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def set_path(jit):
    if jit:
        os.environ.pop("ECHOLAB_NO_JIT", None)
    else:
        os.environ["ECHOLAB_NO_JIT"] = "1"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="problem size multiplier")
    args = ap.parse_args(argv)
    if not kernels.jit_enabled():
        print("numba path unavailable (numba missing or ECHOLAB_NO_JIT set)")
        return 1
    rng = np.random.default_rng(0)
    table = cases(args.scale, rng)
    print(f"{'kernel':26s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}  agree")
    for name, fn in table.items():
        set_path(True)
        a = flat(fn())                      # warm-up compiles the kernel
        t_jit = timed(fn, args.repeat)
        set_path(False)
        b = flat(fn())
        t_np = timed(fn, args.repeat)
        # Adam differs in the last bits (fused vs vectorised rounding)
        agree = all(x.shape == y.shape and np.allclose(x, y, rtol=1e-5, atol=1e-6)
                    for x, y in zip(a, b))
        print(f"{name:26s} {1e3 * t_jit:10.2f} {1e3 * t_np:10.2f} {t_np / t_jit:8.1f}x  "
              f"{'yes' if agree else 'NO'}")
    set_path(True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
