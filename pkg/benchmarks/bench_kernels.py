"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--subdiv 5] [--rays 2000] [--repeat 5]

Both paths are called directly, so ``LICP_DISABLE_NUMBA`` does not matter
here. The first numba call (JIT compile or cache load) is excluded. Results
are checked for agreement before timing.
"""
import argparse
import time

import numpy as np

from licp import kernels
from licp.synthetic import icosphere


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subdiv", type=int, default=5)
    ap.add_argument("--rays", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    mesh = icosphere(args.subdiv, 100.0)
    V, T = mesh.vertices, mesh.triangles
    rng = np.random.default_rng(0)
    O = rng.normal(size=(args.rays, 3)) * 10.0
    D = rng.normal(size=(args.rays, 3))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    # the ray kernel is O(rays * triangles); keep the numpy side bounded
    ray_tris = T[: min(len(T), 20000)]

    cases = [
        ("triangle_cotangents", lambda k: k(V, T), kernels.triangle_cotangents_numpy,
         kernels.triangle_cotangents_numba),
        ("vertex_normal_sums", lambda k: k(V, T, len(V)), kernels.vertex_normal_sums_numpy,
         kernels.vertex_normal_sums_numba),
        ("ray_first_hits", lambda k: k(O, D, V, ray_tris), kernels.ray_first_hits_numpy,
         kernels.ray_first_hits_numba),
    ]
    print(f"mesh: {len(V)} vertices, {len(T)} triangles; rays: {args.rays} x {len(ray_tris)} triangles")
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speed-up':>10}")
    for name, call, f_np, f_nb in cases:
        a, b = call(f_np), call(f_nb)  # also warms the JIT
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            if not np.allclose(x, y, rtol=1e-9, atol=1e-9, equal_nan=True):
                raise SystemExit(f"{name}: numba and numpy paths disagree")
        t_np = best_of(lambda: call(f_np), args.repeat)
        t_nb = best_of(lambda: call(f_nb), args.repeat)
        print(f"{name:<22}{1e3 * t_np:>12.4g}{1e3 * t_nb:>12.4g}{t_np / t_nb:>10.3g}")


if __name__ == "__main__":
    main()
