"""Command line entry point: ``fedev run | compare | validate``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 any other
simulator failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, kernels
from .errors import ConfigurationError, FedEVError
from .harness import compare, dumps_spec, load_spec, resolve_output_dir, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_OTHER = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedev", description="Federated active learning simulator.")
    p.add_argument("--version", action="version", version=f"fedev {__version__} ({kernels.BACKEND} kernels)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of one spec")
    r.add_argument("spec")
    r.add_argument("--output-dir", help="overrides run.output_dir and $FEDEV_OUTPUT_DIR")
    r.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of run.seeds")
    r.add_argument("--jobs", type=int, help="worker processes for seeds")

    c = sub.add_parser("compare", help="run several specs on shared seeds and tabulate deltas")
    c.add_argument("specs", nargs="+")
    c.add_argument("--seeds", type=int, help="use seeds 0..N-1 (default: first spec's run.seeds)")
    c.add_argument("--output-dir")
    c.add_argument("--jobs", type=int)

    v = sub.add_parser("validate", help="parse and check a spec, then print it with defaults filled in")
    v.add_argument("spec")
    return p


def _cmd_run(args) -> int:
    spec = load_spec(args.spec)
    seeds = range(args.seeds) if args.seeds is not None else None
    res = run_experiment(spec, args.output_dir, seeds, args.jobs)
    for s, recs in res.records.items():
        print(f"seed {s}: final accuracy {recs[-1].global_test_accuracy:.4f}")
    print(f"wrote {res.directory}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    specs = [load_spec(p) for p in args.specs]
    seeds = range(args.seeds) if args.seeds is not None else None
    cmp = compare(specs, seeds, args.output_dir, args.jobs)
    width = max(len(n) for n in cmp.names)
    print(f"{'spec':<{width}}  final_acc  mean_ev  delta_vs_{cmp.baseline}")
    for n in cmp.names:
        print(f"{n:<{width}}  {cmp.accuracy[n][-1]:9.4f}  {cmp.mean_ev[n][-1]:7.3f}  "
              f"{cmp.delta[n][-1]:+.4f}")
    print(f"wrote {cmp.path}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    spec = load_spec(args.spec)
    sys.stdout.write(dumps_spec(spec))
    print(f"# output directory: {resolve_output_dir(spec)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "compare": _cmd_compare, "validate": _cmd_validate}[args.command]
    try:
        return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedEVError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
