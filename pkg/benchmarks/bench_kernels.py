"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--n 64 128 256] [--repeat 5]

Each kernel is run once untimed so numba compilation is excluded, then the
best of ``--repeat`` runs is reported. Outputs are compared before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mmpg import kernels
from mmpg.geometry import random_rotation


def _inputs(n: int, rng: np.random.Generator) -> dict:
    origins = np.cumsum(rng.normal(size=(n, 3)) * 2.2, axis=0)
    bases = np.stack([random_rotation(rng) for _ in range(n)])
    ii, jj = np.triu_indices(n, k=1)
    seq = np.arange(n, dtype=np.int64)
    return {
        "pair_geometry": (origins, bases, ii.astype(np.int64), jj.astype(np.int64)),
        "bin_index": None,  # filled from pair_geometry output
        "radius_edges": (origins, 6.0),
        "scatter_add_rows": (rng.normal(size=(20 * n, 64)), rng.integers(0, n, size=20 * n), n),
        "topk_similarity": (rng.normal(size=(n, 64)), 20),
        "edge_features_all": (origins, bases, seq),
    }


def _best(fn, args, repeat: int) -> float:
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-12)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'n':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  match")
    for n in args.n:
        inputs = _inputs(n, rng)
        desc, _ = kernels.pair_geometry_numpy(*inputs["pair_geometry"])
        inputs["bin_index"] = (desc, 3.0, 16.0, 13, 2, 2, 2)
        for name, call_args in inputs.items():
            slow = getattr(kernels, f"{name}_numpy")
            fast = getattr(kernels, f"{name}_numba")
            match = _same(slow(*call_args), fast(*call_args))
            t_np = _best(slow, call_args, args.repeat)
            t_nb = _best(fast, call_args, args.repeat)
            print(f"{name:<20}{n:>6}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x  {match}")


if __name__ == "__main__":
    main()
