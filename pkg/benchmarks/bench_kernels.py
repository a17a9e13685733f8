"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py            # default sizes
    python benchmarks/bench_kernels.py --quick    # smoke run
    python benchmarks/bench_kernels.py --json out.json

Each kernel is timed on the same inputs with both backends; a federated
run is then timed end to end under each backend by swapping the module
that ``fedev.kernels`` dispatches to, and once more with the default
batch-size routing between the two.
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit
from contextlib import contextmanager

import numpy as np

from fedev import kernels
from fedev.model import Arch


def _inputs(dims, n, seed=0):
    r = np.random.default_rng(seed)
    p = r.normal(0, 0.3, size=Arch(*dims).param_count)
    X = r.normal(size=(n, dims[0]))
    y = r.integers(0, dims[3], size=n).astype(np.int64)
    ref_loc = r.normal(size=(n, dims[2]))
    ref_glo = r.normal(size=(n, dims[2]))
    glo = r.integers(0, 2, size=n).astype(np.uint8)
    return p, X, y, ref_loc, ref_glo, glo


def _best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def time_kernels(backends, dims, batch_sizes, repeat=5):
    rows = []
    for n in batch_sizes:
        p, X, y, rl, rg, glo = _inputs(dims, n)
        number = max(1, 2000 // n)
        calls = {
            "class_loss_grad": lambda b: b.class_loss_grad(p, dims, X, y),
            "align_loss_grad": lambda b: b.align_loss_grad(p, dims, X, rl, rg, glo, 0.5),
            "predict_batch": lambda b: b.predict_batch(p, dims, X),
        }
        for kname, call in calls.items():
            row = {"kernel": kname, "batch": n}
            for bname, mod in backends.items():
                row[bname] = _best_of(lambda: call(mod), repeat, number)
            rows.append(row)
    return rows


@contextmanager
def using_backend(mod):
    """Point the dispatch layer at one backend; ``None`` keeps the size-routed default."""
    if mod is None:
        yield
        return
    saved = {name: getattr(kernels, name) for name in kernels.KERNEL_NAMES}
    try:
        for name in kernels.KERNEL_NAMES:
            setattr(kernels, name, getattr(mod, name))
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def time_federation(backends, rounds, epochs):
    from fedev.harness import ExperimentSpec, run_seed
    spec = ExperimentSpec(name="bench").with_changes(
        federation={"rounds": rounds, "local_epochs": epochs}, fams={"subset_size": 100})
    out = {}
    runs = dict(backends)
    if "cython" in backends:
        runs["routed"] = None
    for bname, mod in runs.items():
        with using_backend(mod):
            out[bname] = _best_of(lambda: run_seed(spec, 0), 1, 1)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="tiny sizes, for smoke testing")
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not available; timing the fallback only", file=sys.stderr)
    dims = (6, 32, 16, 6)
    sizes = [10] if args.quick else [10, 100, 1000]
    rows = time_kernels(backends, dims, sizes, repeat=2 if args.quick else 5)
    names = sorted(backends)

    print(f"dims={dims}")
    print(f"{'kernel':<16} {'batch':>6} " + " ".join(f"{n + ' us':>12}" for n in names)
          + ("   speedup" if len(names) == 2 else ""))
    for row in rows:
        line = f"{row['kernel']:<16} {row['batch']:>6} " + " ".join(f"{row[n] * 1e6:12.1f}" for n in names)
        if len(names) == 2:
            line += f"   {row['python'] / row['cython']:7.1f}x"
        print(line)

    fed = time_federation(backends, rounds=2 if args.quick else 10, epochs=2 if args.quick else 10)
    print("federated run: " + ", ".join(f"{n} {t:.2f} s" for n, t in fed.items()))
    if "routed" in fed:
        print(f"routed speedup over the numpy fallback: {fed['python'] / fed['routed']:.2f}x")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"dims": dims, "kernels": rows, "federation_s": fed}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
