"""Experiment runners: microbenchmarks, multi-process scalability, and
noisy-neighbor isolation, each in partitioned (XOS) and shared-kernel
baseline modes.

Workload traces are generated from the experiment seed, so the two modes
execute identical operation sequences; only the resource-management
layer underneath differs.  Multi-worker experiments use real processes
(one per cell, pinned where possible) so throughput is not serialized by
the interpreter lock.
"""

import multiprocessing as mp
import os
import random
import time
import traceback
import warnings
from dataclasses import dataclass, field
from enum import Enum

from ..kernel import CellSpec, Kernel
from ..pagetable import PAGE_SIZE
from ..runtime import PagingPolicy
from .baseline import SharedKernelBaseline
from .report import ReportRow, nearest_rank_percentile


class Mode(Enum):
    XOS = "XOS"
    SHARED_BASELINE = "SHARED_BASELINE"


class Workload(Enum):
    MICRO_SBRK = "MICRO_SBRK"
    MICRO_MMAP = "MICRO_MMAP"
    MICRO_MALLOC_FREE = "MICRO_MALLOC_FREE"
    MICRO_MALLOC = "MICRO_MALLOC"
    SCALE_BRK = "SCALE_BRK"
    SCALE_MMAP = "SCALE_MMAP"
    SCALE_PAGEFAULT = "SCALE_PAGEFAULT"
    SCALE_FUTEXLIKE = "SCALE_FUTEXLIKE"
    ISOLATION = "ISOLATION"


@dataclass
class ExperimentSpec:
    workload: Workload
    mode: Mode = Mode.XOS
    threads: int = 1
    size_sweep: list = field(default_factory=lambda: [PAGE_SIZE])
    iters: int = 100
    runs: int = 10
    duration: float = 1.0
    seed: int = 0
    pool_bytes: int = 256 * 1024 * 1024
    # isolation knobs
    stress_cells: int = 3
    stress_bytes: int = 32 * 1024 * 1024
    rate: float = 150.0
    request_bytes: int = 64 * 1024

    def __post_init__(self):
        for size in self.size_sweep:
            if size % PAGE_SIZE:
                raise ValueError(f"sweep size {size} not a page multiple")


# -- executors ---------------------------------------------------------

class XosExecutor:
    """Partitioned mode: a private kernel + one cell per worker."""

    def __init__(self, pool_bytes, grant_bytes=None, cpu=0):
        self.kernel = Kernel(pool_bytes, num_cpus=1)
        grant = grant_bytes if grant_bytes is not None \
            else min(pool_bytes // 2, 64 * 1024 * 1024)
        self.cell = self.kernel.launch_cell(CellSpec(requested_bytes=grant))
        self.counters = self.cell.descriptor.counters

    def malloc(self, nbytes, policy=None):
        return self.cell.malloc(nbytes, policy)

    def free(self, addr):
        self.cell.free(addr)

    def mmap(self, length, policy=None):
        return self.cell.mmap(length, policy)

    def sbrk(self, delta):
        return self.cell.sbrk(delta)

    def touch(self, vaddr, write=False, value=0):
        return self.cell.touch(vaddr, write, value)

    def close(self):
        self.kernel.close()


def make_executor(mode, pool_bytes, lock=None, shared_crossings=None,
                  grant_bytes=None):
    if mode is Mode.XOS:
        return XosExecutor(pool_bytes, grant_bytes)
    return SharedKernelBaseline(pool_bytes, lock, shared_crossings)


# -- micro -------------------------------------------------------------

def _touch_pages(executor, vaddr, pages, rng):
    """Randomly write one byte per page (seeded order)."""
    order = list(range(pages))
    rng.shuffle(order)
    for i in order:
        executor.touch(vaddr + i * PAGE_SIZE, write=True, value=i & 0xFF)


def _micro_cycle(executor, workload, size, rng):
    pages = size // PAGE_SIZE
    if workload is Workload.MICRO_SBRK:
        base = executor.sbrk(size)
        _touch_pages(executor, base, pages, rng)
        executor.sbrk(-size)
    elif workload is Workload.MICRO_MMAP:
        addr = executor.mmap(size)
        _touch_pages(executor, addr, pages, rng)
        executor.free(addr)
    elif workload is Workload.MICRO_MALLOC_FREE:
        addr = executor.malloc(size)
        _touch_pages(executor, addr, pages, rng)
        executor.free(addr)
    elif workload is Workload.MICRO_MALLOC:
        addr = executor.malloc(size)
        _touch_pages(executor, addr, pages, rng)
        return addr     # freed outside the timed section
    else:
        raise ValueError(workload)
    return None


def run_micro(spec):
    """Size sweep of one micro workload: size per row, >= `runs`
    repetitions of `iters` cycles, mean latency reported."""
    rows = []
    cap = spec.pool_bytes // 2
    for size in spec.size_sweep:
        malloc_like = spec.workload in (Workload.MICRO_MALLOC,
                                        Workload.MICRO_MALLOC_FREE)
        oversize = (size > 64 * 1024 * 1024 and malloc_like
                    and spec.mode is Mode.XOS)
        if size > cap or oversize:
            rows.append(ReportRow(spec.workload.value, spec.mode.value,
                                  1, size, 0.0, skipped=True))
            continue
        executor = make_executor(spec.mode, spec.pool_bytes,
                                 grant_bytes=min(2 * size + 64 * 1024 * 1024,
                                                 spec.pool_bytes // 2)
                                 if spec.mode is Mode.XOS else None)
        rng = random.Random(spec.seed ^ size)
        # warm-up cycle so steady state excludes first-grant effects
        leftover = _micro_cycle(executor, spec.workload, size, rng)
        if leftover is not None:
            executor.free(leftover)
        before = executor.counters.snapshot()
        samples = []
        elapsed = 0.0
        if spec.iters > 0:
            for _ in range(max(spec.runs, 1)):
                pending = []
                t0 = time.perf_counter_ns()
                for _ in range(spec.iters):
                    c0 = time.perf_counter_ns()
                    leftover = _micro_cycle(executor, spec.workload, size, rng)
                    samples.append(time.perf_counter_ns() - c0)
                    if leftover is not None:
                        pending.append(leftover)
                elapsed += (time.perf_counter_ns() - t0) / 1e9
                for addr in pending:
                    executor.free(addr)
        if samples:
            rows.append(ReportRow.from_samples(
                spec.workload.value, spec.mode.value, 1, size, samples,
                elapsed, executor.counters.delta(before)))
        executor.close()
    return rows


# -- scalability -------------------------------------------------------

def _pin_to_cpu(cpu):
    try:
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[cpu % len(cpus)]})
    except (AttributeError, OSError):
        pass


def _scale_worker(spec, worker_id, lock, shared_crossings, deadline_conn,
                  result_q):
    # any worker failure must reach the parent, or it would block on the
    # result queue forever
    try:
        _pin_to_cpu(worker_id)
        if spec.workload is Workload.SCALE_FUTEXLIKE:
            ops = _futexlike_loop(spec, lock, shared_crossings, deadline_conn)
            result_q.put(ops)
            return
        executor = make_executor(spec.mode, spec.pool_bytes, lock,
                                 shared_crossings)
        rng = random.Random(spec.seed ^ worker_id)
        size = spec.size_sweep[0]
        workload = {Workload.SCALE_BRK: Workload.MICRO_SBRK,
                    Workload.SCALE_MMAP: Workload.MICRO_MMAP,
                    Workload.SCALE_PAGEFAULT: Workload.MICRO_MMAP,
                    Workload.MICRO_MALLOC: Workload.MICRO_MALLOC_FREE,
                    Workload.MICRO_MALLOC_FREE: Workload.MICRO_MALLOC_FREE,
                    }[spec.workload]
        _micro_cycle(executor, workload, size, rng)   # warm-up
        deadline_conn.wait()                          # start barrier
        end = time.perf_counter() + spec.duration
        ops = 0
        while time.perf_counter() < end:
            _micro_cycle(executor, workload, size, rng)
            ops += 1
        result_q.put(ops)
        executor.close()
    except BaseException:
        result_q.put(("worker-error", traceback.format_exc()))
        raise


def _futexlike_loop(spec, lock, shared_crossings, start_evt):
    """Wake/wait ping between two strands.  XOS: fiber-local handoff.
    Baseline: every wait/wake is a kernel crossing under the shared lock.
    """
    start_evt.wait()
    end = time.perf_counter() + spec.duration
    ops = 0
    if spec.mode is Mode.XOS:
        state = [0]

        def ping():
            while True:
                state[0] += 1
                yield

        def pong():
            while True:
                state[0] += 1
                yield

        a, b = ping(), pong()
        while time.perf_counter() < end:
            next(a)
            next(b)
            ops += 1
    else:
        while time.perf_counter() < end:
            for _ in range(2):   # wait + wake
                with lock:
                    if shared_crossings is not None:
                        shared_crossings.value += 1
            ops += 1
    return ops


def run_scalability(spec):
    """Aggregate ops/s for worker counts 1..spec.threads."""
    ncpus = len(os.sched_getaffinity(0))
    if spec.threads > ncpus:
        warnings.warn(f"{spec.threads} workers on {ncpus} CPUs: "
                      "oversubscribed, results will include scheduling noise")
    ctx = mp.get_context("fork")
    rows = []
    for n in range(1, spec.threads + 1):
        lock = ctx.Lock() if spec.mode is Mode.SHARED_BASELINE else None
        crossings = ctx.Value("q", 0) \
            if spec.mode is Mode.SHARED_BASELINE else None
        start_evt = ctx.Event()
        result_q = ctx.SimpleQueue()
        workers = [ctx.Process(target=_scale_worker,
                               args=(spec, i, lock, crossings, start_evt,
                                     result_q))
                   for i in range(n)]
        for w in workers:
            w.start()
        time.sleep(0.1)     # allow warm-up
        start_evt.set()
        total_ops = 0
        for _ in range(n):
            result = result_q.get()
            if isinstance(result, tuple):
                raise RuntimeError(f"scalability worker failed:\n{result[1]}")
            total_ops += result
        for w in workers:
            w.join()
        rows.append(ReportRow(spec.workload.value, spec.mode.value, n,
                              spec.size_sweep[0],
                              throughput_ops_s=total_ops / spec.duration,
                              mode_switches=crossings.value if crossings else 0))
    return rows


# -- isolation ---------------------------------------------------------

def _victim_request(executor, io_write, request_bytes, rng):
    addr = executor.malloc(request_bytes, PagingPolicy.PRE_PAGING)
    pages = request_bytes // PAGE_SIZE
    for i in range(pages):
        executor.touch(addr + i * PAGE_SIZE, write=True, value=i & 0xFF)
    executor.free(addr)
    io_write(b"req" + bytes([rng.randrange(256)]) * 61)


def _victim_proc(spec, lock, shared_crossings, start_evt, out_conn, sandbox):
    # a victim failure must reach the parent, or it would block on the
    # pipe forever
    try:
        _victim_loop(spec, lock, shared_crossings, start_evt, out_conn,
                     sandbox)
    except BaseException:
        out_conn.send(("victim-error", traceback.format_exc(), None))
        out_conn.close()
        raise


def _victim_loop(spec, lock, shared_crossings, start_evt, out_conn, sandbox):
    _pin_to_cpu(0)
    from ..ioengine import IoEngine, Syscall
    executor = make_executor(spec.mode, spec.pool_bytes, lock,
                             shared_crossings,
                             grant_bytes=min(spec.pool_bytes // 2,
                                             4 * spec.request_bytes
                                             + 64 * 1024 * 1024))
    engine = IoEngine(sandbox, num_servers=1).start()
    port = engine.attach_cell(1)
    fd, _, _ = port.call(Syscall.OPEN, payload=b"victim.log")

    if spec.mode is Mode.XOS:
        def io_write(data):
            port.call(Syscall.WRITE, (fd,), data)
    else:
        def io_write(data):
            # shared kernel: the write also serializes on the global lock
            with lock:
                if shared_crossings is not None:
                    shared_crossings.value += 2
                port.call(Syscall.WRITE, (fd,), data)

    rng = random.Random(spec.seed)
    _victim_request(executor, io_write, spec.request_bytes, rng)   # warm-up
    before = executor.counters.snapshot()
    start_evt.wait()

    samples = []
    begin = time.perf_counter()
    next_arrival = begin
    while True:
        now = time.perf_counter()
        if now - begin >= spec.duration:
            break
        next_arrival += rng.expovariate(spec.rate)
        sleep_for = next_arrival - time.perf_counter()
        if sleep_for > 0:
            time.sleep(sleep_for)
        t0 = time.perf_counter_ns()
        _victim_request(executor, io_write, spec.request_bytes, rng)
        # service time; lock waits and crossings show up here
        samples.append(time.perf_counter_ns() - t0)
    saturated = next_arrival < time.perf_counter() - 1.0 / spec.rate
    delta = executor.counters.delta(before)
    port.call(Syscall.CLOSE, (fd,))
    engine.stop()
    executor.close()
    out_conn.send((samples, delta, saturated))
    out_conn.close()


def _stress_proc(spec, lock, shared_crossings, start_evt, stop_evt, worker_id):
    _pin_to_cpu(1 + worker_id)
    executor = make_executor(
        spec.mode, max(spec.pool_bytes, 4 * spec.stress_bytes), lock,
        shared_crossings,
        grant_bytes=min(2 * spec.stress_bytes, 64 * 1024 * 1024))
    rng = random.Random(spec.seed ^ (0xbeef + worker_id))
    start_evt.wait()
    pages = spec.stress_bytes // PAGE_SIZE
    while not stop_evt.is_set():
        addr = executor.mmap(spec.stress_bytes)
        for i in range(pages):
            executor.touch(addr + i * PAGE_SIZE, write=True, value=1)
        executor.free(addr)
    executor.close()


def run_isolation(spec, sandbox=None):
    """One latency-critical cell at a fixed arrival rate next to
    `stress_cells` allocate/touch/free stress loops.  Returns (rows,
    latency samples in ns, victim counter delta)."""
    import tempfile
    ncpus = len(os.sched_getaffinity(0))
    if ncpus < 2:
        warnings.warn("isolation experiment on < 2 CPUs: victim and stress "
                      "cells will time-share one core")
    own_sandbox = sandbox is None
    if own_sandbox:
        sandbox = tempfile.mkdtemp(prefix="xcell-iso-")
    ctx = mp.get_context("fork")
    shared = spec.mode is Mode.SHARED_BASELINE
    lock = ctx.Lock() if shared else None
    crossings = ctx.Value("q", 0) if shared else None
    start_evt = ctx.Event()
    stop_evt = ctx.Event()
    recv, send = ctx.Pipe(duplex=False)
    victim = ctx.Process(target=_victim_proc,
                         args=(spec, lock, crossings, start_evt, send, sandbox))
    stressors = [ctx.Process(target=_stress_proc,
                             args=(spec, lock, crossings, start_evt, stop_evt, i))
                 for i in range(spec.stress_cells)]
    victim.start()
    for s in stressors:
        s.start()
    time.sleep(0.2)
    start_evt.set()
    samples, delta, saturated = recv.recv()
    if samples == "victim-error":
        stop_evt.set()
        raise RuntimeError(f"isolation victim failed:\n{delta}")
    stop_evt.set()
    victim.join()
    for s in stressors:
        s.join()
    row = ReportRow.from_samples("ISOLATION", spec.mode.value,
                                 1 + spec.stress_cells, spec.request_bytes,
                                 samples, spec.duration, delta)
    if saturated:
        row.experiment = "ISOLATION(SATURATED)"
    return [row], samples, delta
