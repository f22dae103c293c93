"""End-to-end acceptance suite.

Each test verifies one headline property of the system at full scale and
prints a single PASS/FAIL/SKIP line so the suite doubles as a checklist.
Run with `pytest tests/test_acceptance.py -v`.
"""

import contextlib
import os
import random
import warnings

import pytest

from xcell import (CellSpec, Kernel, OutOfFramesError, PagingPolicy,
                   VmexitKind, VmexitRequest)
from xcell.ioengine import IoEngine
from xcell.pagetable import PAGE_SIZE
from xcell.bench.workloads import (ExperimentSpec, Mode, Workload,
                                   make_executor, run_isolation,
                                   run_scalability)
from xcell.bench.report import nearest_rank_percentile

from oracle import BitmapBuddyOracle
from test_ioengine import (_apply_via_engine, _random_trace, _run_direct,
                           _tree_digest)

MB = 1024 * 1024


@contextlib.contextmanager
def criterion(capsys, num, name):
    try:
        yield
    except BaseException as exc:
        status = "SKIP" if exc.__class__.__name__ == "Skipped" else "FAIL"
        with capsys.disabled():
            print(f"ACCEPTANCE {num} ({name}): {status}"
                  + (f" -- {exc}" if status == "SKIP" else ""))
        raise
    with capsys.disabled():
        print(f"ACCEPTANCE {num} ({name}): PASS")


def test_1_buddy_oracle_equivalence(capsys):
    """10^5 random kalloc/kfree on a 16 MB pool match a brute-force
    bitmap buddy oracle on every success/failure and free-list state."""
    with criterion(capsys, 1, "buddy-oracle equivalence"):
        frames = 16 * MB // PAGE_SIZE          # 4096 frames
        kernel = Kernel(16 * MB, 1, refill_quantum=0, refill_watermark=0,
                        backing=False)
        cell = kernel.launch_cell(CellSpec(requested_bytes=0))
        oracle = BitmapBuddyOracle(frames, 12)
        rng = random.Random(11)
        live = []
        for step in range(100_000):
            if live and rng.random() < 0.5:
                grant, order = live.pop(rng.randrange(len(live)))
                kernel.kfree(cell.cell_id, grant)
                oracle.free(grant.start_frame, order)
            else:
                order = rng.randrange(0, 13)
                expected = oracle.alloc(order)
                if expected is None:
                    with pytest.raises(OutOfFramesError):
                        kernel.kalloc(cell.cell_id, 0, (1 << order) * PAGE_SIZE)
                else:
                    grant = kernel.kalloc(cell.cell_id, 0,
                                          (1 << order) * PAGE_SIZE)
                    assert grant.start_frame == expected, f"step {step}"
                    live.append((grant, order))
            got = {o: tuple(s) for o, s in kernel.allocator.snapshot().items()}
            want = {o: tuple(s)
                    for o, s in oracle.free_block_decomposition().items()}
            assert got == want, f"free-list divergence at step {step}"
        kernel.close()


@pytest.mark.parametrize("seed", range(100))
def test_2_conservation_and_exclusivity(seed, capsys):
    """Fuzzed launch/alloc/free/crash_replace schedules across 8 cells
    reconcile every frame and never double-grant one."""
    ctx = criterion(capsys, 2, "conservation & exclusivity, 100 seeds") \
        if seed == 99 else contextlib.nullcontext()
    with ctx:
        rng = random.Random(seed)
        kernel = Kernel(64 * MB, 2, backing=False)
        cells = []
        live = {}
        for _ in range(60):
            roll = rng.random()
            try:
                if roll < 0.25 and len(cells) < 8:
                    c = kernel.launch_cell(CellSpec(
                        requested_bytes=rng.choice([0, MB, 4 * MB])))
                    cells.append(c)
                    live[c.cell_id] = []
                elif roll < 0.55 and cells:
                    c = rng.choice(cells)
                    addr = c.malloc(rng.choice([PAGE_SIZE, 64 * PAGE_SIZE, MB]))
                    live[c.cell_id].append(addr)
                elif roll < 0.8 and cells:
                    c = rng.choice(cells)
                    if live[c.cell_id]:
                        c.free(live[c.cell_id].pop())
                elif cells:
                    c = rng.choice(cells)
                    kernel.mark_crashed(c.cell_id)
                    repl = kernel.crash_replace(c.cell_id)
                    cells[cells.index(c)] = repl
                    live.pop(c.cell_id, None)
                    live[repl.cell_id] = []
            except OutOfFramesError:
                pass
            kernel.check_conservation()
            kernel.check_exclusivity()
        kernel.close()


def test_3_kernel_quiescence_counters(capsys):
    """10^5 malloc/touch/free iterations inside the initial grant never
    trap; the shared-kernel baseline crosses on every operation."""
    with criterion(capsys, 3, "kernel-quiescence counters"):
        kernel = Kernel(256 * MB, 1)
        cell = kernel.launch_cell(CellSpec(requested_bytes=64 * MB))
        cell.free(cell.malloc(PAGE_SIZE))      # warm-up
        before = cell.descriptor.counters.snapshot()
        for _ in range(100_000):
            addr = cell.malloc(PAGE_SIZE)
            cell.touch(addr, write=True, value=1)
            cell.free(addr)
        delta = cell.descriptor.counters.delta(before)
        assert delta.vmexits == 0
        assert delta.kernel_lock_acquisitions == 0
        kernel.close()

        base = make_executor(Mode.SHARED_BASELINE, 256 * MB)
        start = base.counters.snapshot()
        for _ in range(100_000):
            addr = base.malloc(PAGE_SIZE)
            base.touch(addr, write=True, value=1)
            base.free(addr)
        bdelta = base.counters.delta(start)
        assert bdelta.mode_switches >= 100_000
        base.close()


def test_4_fault_count_law(capsys):
    """Demand-paged 64 MB: 16384 faults on first traversal, 0 on the
    second; pre-paged region: 0 faults."""
    with criterion(capsys, 4, "fault-count law"):
        kernel = Kernel(512 * MB, 1)
        cell = kernel.launch_cell(CellSpec(requested_bytes=192 * MB))
        pages = 64 * MB // PAGE_SIZE
        addr = cell.mmap(64 * MB, PagingPolicy.DEMAND_PAGING)
        before = cell.descriptor.counters.snapshot()
        for i in range(pages):
            cell.touch(addr + i * PAGE_SIZE, write=True, value=i & 0xFF)
        first = cell.descriptor.counters.delta(before)
        assert first.user_faults + first.kernel_faults == 16384
        before = cell.descriptor.counters.snapshot()
        for i in range(pages):
            cell.touch(addr + i * PAGE_SIZE)
        second = cell.descriptor.counters.delta(before)
        assert second.user_faults + second.kernel_faults == 0

        pre = cell.mmap(64 * MB, PagingPolicy.PRE_PAGING)
        before = cell.descriptor.counters.snapshot()
        for i in range(pages):
            cell.touch(pre + i * PAGE_SIZE, write=True)
        delta = cell.descriptor.counters.delta(before)
        assert delta.user_faults + delta.kernel_faults == 0
        kernel.close()


def test_5_scalability_shape(capsys):
    """4-worker aggregate throughput >= 3x single worker, and the
    XOS/baseline ratio widens by >= 2x from 1 to 4 workers."""
    with criterion(capsys, 5, "scalability shape"):
        ncpus = len(os.sched_getaffinity(0))
        if ncpus < 4:
            pytest.skip(f"needs a >=4-core host, this one has {ncpus}")

        def measure(mode):
            spec = ExperimentSpec(Workload.SCALE_MMAP, mode, threads=4,
                                  size_sweep=[16 * PAGE_SIZE], duration=2.0,
                                  pool_bytes=512 * MB)
            rows = run_scalability(spec)
            by_n = {r.threads: r.throughput_ops_s for r in rows}
            return by_n[1], by_n[4]

        last_error = None
        for _ in range(3):          # rerun tolerance for scheduling noise
            xos1, xos4 = measure(Mode.XOS)
            base1, base4 = measure(Mode.SHARED_BASELINE)
            try:
                assert xos4 >= 3.0 * xos1
                assert (xos4 / base4) >= 2.0 * (xos1 / base1)
                break
            except AssertionError as exc:
                last_error = exc
        else:
            raise last_error


def test_6_isolation(capsys):
    """Victim p99 under 3 stress cells: XOS strictly better than the
    shared baseline, and the XOS victim never takes the kernel lock."""
    with criterion(capsys, 6, "isolation"):
        ncpus = len(os.sched_getaffinity(0))
        results = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for mode in (Mode.XOS, Mode.SHARED_BASELINE):
                spec = ExperimentSpec(Workload.ISOLATION, mode, duration=3.0,
                                      rate=50.0, stress_cells=3, seed=7,
                                      pool_bytes=256 * MB)
                rows, samples, delta = run_isolation(spec)
                results[mode] = (nearest_rank_percentile(samples, 99), delta)
        p99_xos, delta_xos = results[Mode.XOS]
        p99_base, _ = results[Mode.SHARED_BASELINE]
        assert delta_xos.kernel_lock_acquisitions == 0
        with capsys.disabled():
            print(f"  isolation p99: XOS {p99_xos / 1e6:.2f} ms, "
                  f"baseline {p99_base / 1e6:.2f} ms "
                  f"(ratio {p99_base / p99_xos:.2f}x)")
        if ncpus < 2:
            pytest.skip("victim lock_acq==0 verified; p99 comparison needs "
                        f">=2 CPUs so victim and stressors run in parallel, "
                        f"this host has {ncpus}")
        assert p99_xos < p99_base


def test_7_shadow_table_equality(capsys):
    """After 10^4 random map/unmap with periodic grow requests, the
    kernel's shadow copy equals the cell's table at every sync point."""
    with criterion(capsys, 7, "page-table shadow equality"):
        kernel = Kernel(1024 * MB, 1, backing=False)
        cell = kernel.launch_cell(CellSpec(requested_bytes=64 * MB))
        rng = random.Random(77)
        mapped = {}
        next_vpn = 0x9000
        syncs = 0
        for step in range(1, 10_001):
            if mapped and rng.random() < 0.45:
                vpn = rng.choice(list(mapped))
                frame = mapped.pop(vpn)
                cell.table.unmap(vpn)
                cell.heap.allocator.free(frame, 0)
            else:
                frame = cell.heap.allocator.alloc(0)
                cell.map_page(next_vpn, frame)
                mapped[next_vpn] = frame
                next_vpn += 1
            if step % 500 == 0:
                kind = VmexitKind.GROW if step % 1000 == 0 \
                    else VmexitKind.SYNC_TABLES
                req = VmexitRequest(kind, nbytes=64 * MB) \
                    if kind is VmexitKind.GROW else VmexitRequest(kind)
                resp = kernel.handle_vmexit(cell.cell_id, req)
                assert resp.ok
                assert cell.descriptor.shadow_table.equals(cell.table), \
                    f"shadow divergence at step {step}"
                syncs += 1
        assert syncs == 20
        kernel.close()


def test_8_io_trace_equivalence(capsys, tmp_path):
    """A 10^4-operation open/write/read/close trace through the engine
    produces byte-identical files to direct execution, with an audited
    status machine and conserved tickets."""
    with criterion(capsys, 8, "I/O trace equivalence"):
        rng = random.Random(808)
        trace = _random_trace(rng, 10_000, files=8)
        direct = tmp_path / "direct"
        via_engine = tmp_path / "engine"
        _run_direct(trace, str(direct))
        eng = IoEngine(str(via_engine), num_servers=1,
                       dispatcher_thread=False).start()
        try:
            from xcell.ioengine import Syscall
            port = eng.attach_cell(1)
            fds = {}
            for op in trace:
                _apply_via_engine(port, fds, op)
            for fd in list(fds.values()):
                port.call(Syscall.CLOSE, (fd,))
            assert eng.audit_status_machine(1)
            assert eng.ticket_conservation(1)
        finally:
            eng.stop()
        assert _tree_digest(str(via_engine)) == _tree_digest(str(direct))


def test_9_crash_replace_liveness(capsys):
    """A cell killed mid-workload returns every frame in one replace
    call and its replacement completes the identical workload."""
    with criterion(capsys, 9, "crash-replace liveness"):
        kernel = Kernel(256 * MB, 1)

        def workload(cell, stop_at=None):
            rng = random.Random(909)
            live = []
            for step in range(400):
                if stop_at is not None and step == stop_at:
                    return None
                if live and rng.random() < 0.4:
                    cell.free(live.pop(rng.randrange(len(live))))
                else:
                    addr = cell.malloc(rng.choice([PAGE_SIZE, 32 * PAGE_SIZE]))
                    cell.touch(addr, write=True, value=step & 0xFF)
                    live.append(addr)
            return sum(cell.touch(a) for a in live)

        victim = kernel.launch_cell(CellSpec(requested_bytes=32 * MB))
        workload(victim, stop_at=173)          # dies mid-workload
        held = victim.descriptor.granted_frames()
        assert held > 0
        free_before = kernel.free_frame_total()
        kernel.mark_crashed(victim.cell_id)
        replacement = kernel.crash_replace(victim.cell_id)
        assert victim.descriptor.granted_frames() == 0
        assert kernel.free_frame_total() + \
            replacement.descriptor.granted_frames() == free_before + held
        kernel.check_conservation()

        fresh = kernel.launch_cell(CellSpec(requested_bytes=32 * MB))
        assert workload(replacement) == workload(fresh)
        kernel.close()
