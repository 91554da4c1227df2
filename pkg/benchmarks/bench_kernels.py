"""Time each hot kernel under the numba and numpy implementations.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both flavours are called directly, so the env flag does not matter here.
The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from raincast import HAVE_NUMBA, kernels as K


def cases(rng):
    B, N, E, D = 96, 40, 400, 32
    src = rng.integers(0, N, E).astype(np.int64)
    dst = rng.integers(0, N, E).astype(np.int64)
    logits = rng.normal(size=(B, E))
    alpha = K.segment_softmax_numpy(logits, dst, N)
    Z = rng.normal(size=(B, N, D))
    dM = rng.normal(size=(B, N, D))
    iso = np.ones(N, dtype=np.bool_)
    iso[dst] = False
    px, py, vals = rng.uniform(0, 5, 60), rng.uniform(0, 13, 60), rng.gamma(2, 50, 60)
    gx, gy = (a.ravel() for a in np.meshgrid(np.linspace(0, 5, 41), np.linspace(0, 13, 131)))
    exc = rng.exponential(50.0, 2000)
    thetas = np.linspace(-1e-3, 1e-2, 321)
    return {
        "segment_softmax": (logits, dst, N),
        "segment_softmax_backward": (rng.normal(size=(B, E)), alpha, dst, N),
        "aggregate": (alpha, Z, src, dst, iso),
        "aggregate_backward": (dM, alpha, Z, src, dst, iso),
        "idw": (px, py, vals, gx, gy, 2.0, 1e-9),
        "gpd_profile_loglik": (exc, thetas, 1e-12),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"numba available: {HAVE_NUMBA}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, argv in cases(rng).items():
        fn_np = getattr(K, f"{name}_numpy")
        fn_nb = getattr(K, f"{name}_numba")
        a, b = fn_np(*argv), fn_nb(*argv)  # warm-up, and a sanity check
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-12)
        t_np = min(timeit.repeat(lambda: fn_np(*argv), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn_nb(*argv), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
