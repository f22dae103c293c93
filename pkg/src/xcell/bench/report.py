"""Result rows, nearest-rank percentiles, CSV and summary output."""

import csv
import math
from dataclasses import dataclass, field

CSV_HEADER = ["experiment", "mode", "threads", "size_bytes",
              "throughput_ops_s", "mean_ns", "p50_ns", "p99_ns", "max_ns",
              "vmexits", "mode_switches", "user_faults", "kernel_faults",
              "lock_acq"]


def nearest_rank_percentile(samples, pct):
    """Nearest-rank percentile: the (floor(pct/100 * n) + 1)-th smallest
    value, capped at the maximum.  p99 of 100 samples is the 100th value.
    """
    if not samples:
        raise ValueError("empty sample vector")
    ordered = sorted(samples)
    rank = min(math.floor(pct / 100.0 * len(ordered)) + 1, len(ordered))
    return ordered[rank - 1]


@dataclass
class ReportRow:
    experiment: str
    mode: str
    threads: int
    size_bytes: int
    throughput_ops_s: float
    mean_ns: float = 0.0
    p50_ns: float = 0.0
    p99_ns: float = 0.0
    max_ns: float = 0.0
    vmexits: int = 0
    mode_switches: int = 0
    user_faults: int = 0
    kernel_faults: int = 0
    lock_acq: int = 0
    skipped: bool = False

    @classmethod
    def from_samples(cls, experiment, mode, threads, size_bytes, samples_ns,
                     elapsed_s, counters=None, **extra):
        row = cls(experiment, mode, threads, size_bytes,
                  throughput_ops_s=len(samples_ns) / elapsed_s if elapsed_s else 0.0,
                  mean_ns=sum(samples_ns) / len(samples_ns),
                  p50_ns=nearest_rank_percentile(samples_ns, 50),
                  p99_ns=nearest_rank_percentile(samples_ns, 99),
                  max_ns=max(samples_ns), **extra)
        if counters is not None:
            row.vmexits = counters.vmexits
            row.mode_switches = counters.mode_switches
            row.user_faults = counters.user_faults
            row.kernel_faults = counters.kernel_faults
            row.lock_acq = counters.kernel_lock_acquisitions
        return row

    def values(self):
        if self.skipped:
            return [self.experiment, self.mode, self.threads, self.size_bytes,
                    "SKIPPED", "", "", "", "", "", "", "", "", ""]
        return [self.experiment, self.mode, self.threads, self.size_bytes,
                f"{self.throughput_ops_s:.1f}", f"{self.mean_ns:.0f}",
                f"{self.p50_ns:.0f}", f"{self.p99_ns:.0f}",
                f"{self.max_ns:.0f}", self.vmexits, self.mode_switches,
                self.user_faults, self.kernel_faults, self.lock_acq]


def write_csv(rows, path):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(row.values())
    return path


def write_cdf_csv(samples_by_mode, path):
    """Latencies normalized to the maximum over all modes, as CDF rows."""
    peak = max(max(s) for s in samples_by_mode.values() if s)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "normalized_latency", "cdf"])
        for mode, samples in samples_by_mode.items():
            ordered = sorted(samples)
            n = len(ordered)
            for i, v in enumerate(ordered, 1):
                w.writerow([mode, f"{v / peak:.6f}", f"{i / n:.6f}"])
    return path


def print_summary(rows, out=print):
    """Ratio table: XOS throughput over baseline, per experiment point."""
    by_key = {}
    for row in rows:
        if row.skipped:
            continue
        by_key.setdefault((row.experiment, row.threads, row.size_bytes),
                          {})[row.mode] = row
    out(f"{'experiment':<18} {'threads':>7} {'size':>12} "
        f"{'xos_ops/s':>12} {'shared_ops/s':>12} {'ratio':>7}")
    for (exp, threads, size), modes in sorted(by_key.items()):
        xos = modes.get("XOS")
        shared = modes.get("SHARED_BASELINE")
        ratio = (f"{xos.throughput_ops_s / shared.throughput_ops_s:7.2f}"
                 if xos and shared and shared.throughput_ops_s else "      -")
        out(f"{exp:<18} {threads:>7} {size:>12} "
            f"{xos.throughput_ops_s if xos else 0:>12.1f} "
            f"{shared.throughput_ops_s if shared else 0:>12.1f} {ratio}")
