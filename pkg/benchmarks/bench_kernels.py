"""Backend benchmark: compiled kernels vs the pure-numpy fallback.

Times the three hot paths (tree generation, single-lineage chains, and
the field-coupled gather) under GFF_THINLAB_BACKEND=numba and =numpy,
checks that both backends produce identical observables, and prints the
speedups.

Run: python3 benchmarks/bench_kernels.py --replicas 300
"""

import argparse
import os
import time

import numpy as np

from gff_thinlab._backend import HAVE_NUMBA
from gff_thinlab.exploration import (
    BranchingSchedule,
    bbm_ensemble,
    field_ensemble,
    lineage_active_counts,
)
from gff_thinlab.green_field import LatticeDomain, build_greens


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return time.perf_counter() - t0, out


def run_backend(name, args):
    os.environ["GFF_THINLAB_BACKEND"] = name
    sched = BranchingSchedule(2, 1.0)
    results = {}

    t, bundle = timed(bbm_ensemble, sched, args.n_max, args.seed, args.replicas)
    results["bbm_ensemble"] = (t, bundle.vol, bundle.mass)

    t, alive = timed(
        lineage_active_counts, sched, args.n_max, args.seed, args.lineages
    )
    results["lineage_chain"] = (t, alive)

    op = build_greens(LatticeDomain(2, args.grid))
    t, fb = timed(field_ensemble, op, 3, args.seed, 20)
    results["field_coupled"] = (t, fb.mass, fb.box_counts)
    return results


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--replicas", type=int, default=300)
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--lineages", type=int, default=200000)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    args = p.parse_args()

    if not HAVE_NUMBA:
        print("numba not installed; timing the numpy path only")
        numpy_res = run_backend("numpy", args)
        for name, (t, *_) in numpy_res.items():
            print("%-14s numpy %8.3fs" % (name, t))
        return

    # warm-up pass so JIT compilation is not billed to the numba timings
    warm = argparse.Namespace(
        replicas=4, n_max=4, lineages=100, grid=32, seed=args.seed
    )
    run_backend("numba", warm)

    numba_res = run_backend("numba", args)
    numpy_res = run_backend("numpy", args)

    print(
        "%-14s %10s %10s %8s  %s"
        % ("kernel", "numba s", "numpy s", "speedup", "outputs")
    )
    for name in numba_res:
        t_nb = numba_res[name][0]
        t_np = numpy_res[name][0]
        same = all(
            np.array_equal(a, b)
            for a, b in zip(numba_res[name][1:], numpy_res[name][1:])
        )
        print(
            "%-14s %10.3f %10.3f %7.2fx  %s"
            % (name, t_nb, t_np, t_np / max(t_nb, 1e-9), "identical" if same else "DIFFER")
        )


if __name__ == "__main__":
    main()
