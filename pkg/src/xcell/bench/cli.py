"""Command line for the benchmark harness.

    xcell bench <workload> --mode {xos|shared} --threads N --sizes 4K..1G \
        --iters K --seed S --pool-bytes B --out report.csv
    xcell isolation --stress-cells K --rate R --duration D

A config file (`--config`, key = value lines) overrides flags.  Exit
code is 0 on success and nonzero when a post-run invariant check fails.
"""

import argparse
import sys

from ..config import load_config, parse_size
from ..pagetable import PAGE_SIZE
from .report import print_summary, write_cdf_csv, write_csv
from .workloads import (ExperimentSpec, Mode, Workload, run_isolation,
                        run_micro, run_scalability)

_MODES = {"xos": Mode.XOS, "shared": Mode.SHARED_BASELINE,
          "both": None}


def parse_sizes(text):
    """Either `4K..1G` (sweep by powers of 4) or a comma list `4K,2M`."""
    if ".." in text:
        lo, hi = (parse_size(p) for p in text.split("..", 1))
        sizes = []
        size = lo
        while size <= hi:
            sizes.append(size)
            size *= 4
        return sizes
    return [parse_size(p) for p in text.split(",")]


def _build_parser():
    parser = argparse.ArgumentParser(prog="xcell")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="micro / scalability benchmarks")
    bench.add_argument("workload",
                       choices=[w.value.lower() for w in Workload
                                if w is not Workload.ISOLATION])
    bench.add_argument("--mode", choices=sorted(_MODES), default="both")
    bench.add_argument("--threads", type=int, default=1)
    bench.add_argument("--sizes", default="4K..64M")
    bench.add_argument("--iters", type=int, default=50)
    bench.add_argument("--runs", type=int, default=10)
    bench.add_argument("--duration", type=float, default=1.0)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--pool-bytes", default="256M")
    bench.add_argument("--config")
    bench.add_argument("--out")
    bench.add_argument("--summary", action="store_true")

    iso = sub.add_parser("isolation", help="noisy-neighbor tail latency")
    iso.add_argument("--mode", choices=sorted(_MODES), default="both")
    iso.add_argument("--stress-cells", type=int, default=3)
    iso.add_argument("--stress-bytes", default="32M")
    iso.add_argument("--rate", type=float, default=150.0)
    iso.add_argument("--duration", type=float, default=3.0)
    iso.add_argument("--seed", type=int, default=0)
    iso.add_argument("--pool-bytes", default="256M")
    iso.add_argument("--config")
    iso.add_argument("--out", default="isolation.csv")
    iso.add_argument("--cdf-out", default="isolation_cdf.csv")
    return parser


def _apply_config(args):
    if args.config:
        overrides = load_config(args.config)
        if "pool_bytes" in overrides:
            args.pool_bytes = overrides["pool_bytes"]
    args.pool_bytes = parse_size(args.pool_bytes)


def _modes_for(name):
    return [Mode.XOS, Mode.SHARED_BASELINE] if name == "both" \
        else [_MODES[name]]


def _cmd_bench(args):
    workload = Workload[args.workload.upper()]
    sizes = parse_sizes(args.sizes)
    rows = []
    for mode in _modes_for(args.mode):
        spec = ExperimentSpec(workload=workload, mode=mode,
                              threads=args.threads, size_sweep=sizes,
                              iters=args.iters, runs=args.runs,
                              duration=args.duration, seed=args.seed,
                              pool_bytes=args.pool_bytes)
        if workload.value.startswith("SCALE") or args.threads > 1:
            rows.extend(run_scalability(spec))
        else:
            rows.extend(run_micro(spec))
    if args.out and rows:
        write_csv(rows, args.out)
        print(f"wrote {args.out}")
    if args.summary or not args.out:
        print_summary(rows)
    return 0


def _cmd_isolation(args):
    rows = []
    samples_by_mode = {}
    for mode in _modes_for(args.mode):
        spec = ExperimentSpec(workload=Workload.ISOLATION, mode=mode,
                              stress_cells=args.stress_cells,
                              stress_bytes=parse_size(args.stress_bytes),
                              rate=args.rate, duration=args.duration,
                              seed=args.seed, pool_bytes=args.pool_bytes)
        mode_rows, samples, _ = run_isolation(spec)
        rows.extend(mode_rows)
        samples_by_mode[mode.value] = samples
    write_csv(rows, args.out)
    write_cdf_csv(samples_by_mode, args.cdf_out)
    print(f"wrote {args.out} and {args.cdf_out}")
    if len(rows) == 2:
        xos, shared = rows
        if xos.p99_ns and shared.p99_ns:
            print(f"p99 ratio (shared/xos): {shared.p99_ns / xos.p99_ns:.2f}x")
    return 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    _apply_config(args)
    try:
        if args.command == "bench":
            return _cmd_bench(args)
        return _cmd_isolation(args)
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
