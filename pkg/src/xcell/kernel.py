"""Kernel-side emulation: reserved physical pool, per-CPU sub-pools,
cell lifecycle, resource ACL, vmexit service, and crash-replace.

The "physical" space is one anonymous mmap carved into 4 KB frames, so
frames are real addressable bytes and benchmark touches hit real memory.
Mode switches, vmexits, faults, and kernel lock acquisitions are counted
events; no cycle costs are simulated.
"""

import csv
import mmap
import threading
from dataclasses import dataclass, field
from enum import Enum

from .buddy import BuddyAllocator
from .errors import (AclViolationError, ConfigurationError, LaunchError,
                     LifecycleError, LockedPageError, OutOfFramesError,
                     OversizeError)
from .pagetable import PAGE_SIZE, EmulatedPageTable

KERNEL_OWNER = -1
KERNEL_MAX_CHUNK = 1024 * 1024 * 1024   # 1024 MB
RUNTIME_MAX_CHUNK = 64 * 1024 * 1024    # 64 MB

DEFAULT_REFILL_WATERMARK = 64
DEFAULT_REFILL_QUANTUM = 256


class Feature(Enum):
    USER_FAULT_HANDLER = "USER_FAULT_HANDLER"
    DIRECT_TIMESTAMP = "DIRECT_TIMESTAMP"


class CellState(Enum):
    NORMAL_PROCESS = "NORMAL_PROCESS"
    BOOTING = "BOOTING"
    ONLINE = "ONLINE"
    CRASHED = "CRASHED"
    REPLACED = "REPLACED"


_TRANSITIONS = {
    CellState.NORMAL_PROCESS: {CellState.BOOTING},
    CellState.BOOTING: {CellState.ONLINE, CellState.NORMAL_PROCESS},
    CellState.ONLINE: {CellState.CRASHED},
    CellState.CRASHED: {CellState.REPLACED},
    CellState.REPLACED: set(),
}


@dataclass
class PhysRange:
    start_frame: int
    order: int
    origin: int = KERNEL_OWNER  # KERNEL_OWNER or a cpu_id

    @property
    def frames(self):
        return 1 << self.order

    @property
    def nbytes(self):
        return self.frames * PAGE_SIZE

    @property
    def end_frame(self):
        return self.start_frame + self.frames

    def covers(self, frame):
        return self.start_frame <= frame < self.end_frame


@dataclass
class EventCounters:
    mode_switches: int = 0
    vmexits: int = 0
    user_faults: int = 0
    kernel_faults: int = 0
    kernel_lock_acquisitions: int = 0
    io_messages: int = 0

    def snapshot(self):
        return EventCounters(self.mode_switches, self.vmexits,
                             self.user_faults, self.kernel_faults,
                             self.kernel_lock_acquisitions, self.io_messages)

    def delta(self, earlier):
        return EventCounters(
            self.mode_switches - earlier.mode_switches,
            self.vmexits - earlier.vmexits,
            self.user_faults - earlier.user_faults,
            self.kernel_faults - earlier.kernel_faults,
            self.kernel_lock_acquisitions - earlier.kernel_lock_acquisitions,
            self.io_messages - earlier.io_messages)


@dataclass
class CellSpec:
    requested_bytes: int = 0
    privileged_features: frozenset = frozenset({Feature.USER_FAULT_HANDLER})
    home_cpu: int = 0
    paging_policy: str = "DEMAND_PAGING"
    inherited_pages: int = 0


@dataclass
class CellDescriptor:
    cell_id: int
    spec: CellSpec
    state: CellState = CellState.NORMAL_PROCESS
    home_cpu: int = 0
    grants: dict = field(default_factory=dict)   # start_frame -> PhysRange
    shadow_table: EmulatedPageTable = field(default_factory=EmulatedPageTable)
    cell_table: EmulatedPageTable = None
    counters: EventCounters = field(default_factory=EventCounters)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def transition(self, new_state):
        if new_state not in _TRANSITIONS[self.state]:
            raise LifecycleError(
                f"cell {self.cell_id}: {self.state.value} -> {new_state.value}")
        self.state = new_state

    def granted_frames(self):
        return sum(r.frames for r in self.grants.values())


class PerCpuPool:
    """Free-frame cache confined to one CPU's worker.

    Blocks are delegated from the kernel allocator; refill/spill are the
    only cross-domain transfers and happen under the global kernel lock.
    """

    def __init__(self, cpu_id, total_frames, watermark, quantum):
        self.cpu_id = cpu_id
        self.allocator = BuddyAllocator(0, total_frames, max_order=18,
                                        start_empty=True)
        self.refill_watermark = watermark
        self.refill_quantum = quantum

    @property
    def free_frames(self):
        return self.allocator.free_frames


class VmexitKind(Enum):
    GROW = "GROW"
    SHRINK = "SHRINK"
    SYNC_TABLES = "SYNC_TABLES"
    CRASH_NOTIFY = "CRASH_NOTIFY"


@dataclass
class VmexitRequest:
    kind: VmexitKind
    nbytes: int = 0
    range: PhysRange = None


@dataclass
class VmexitResponse:
    ok: bool
    range: PhysRange = None
    error: str = None
    replacement: object = None


class Kernel:
    def __init__(self, pool_bytes, num_cpus,
                 refill_watermark=DEFAULT_REFILL_WATERMARK,
                 refill_quantum=DEFAULT_REFILL_QUANTUM,
                 backing=True):
        if pool_bytes <= 0 or pool_bytes % PAGE_SIZE != 0:
            raise ConfigurationError(
                f"pool_bytes must be a positive multiple of {PAGE_SIZE}")
        if num_cpus < 1:
            raise ConfigurationError("num_cpus must be >= 1")
        self.total_frames = pool_bytes // PAGE_SIZE
        self.num_cpus = num_cpus
        self.max_chunk_bytes = min(KERNEL_MAX_CHUNK, pool_bytes)
        max_order = min(18, (self.total_frames).bit_length() - 1)
        self.allocator = BuddyAllocator(0, self.total_frames,
                                        max_order=max_order)
        self.mem = mmap.mmap(-1, pool_bytes) if backing else None
        self._global_lock = threading.Lock()
        self.cells = {}
        self._next_cell_id = 1

        # Seed per-CPU pools; degrade the seed on tiny pools so at least
        # half the frames stay in the kernel allocator.
        seed = min(refill_quantum, self.total_frames // (2 * num_cpus))
        self.cpu_pools = []
        for cpu in range(num_cpus):
            pool = PerCpuPool(cpu, self.total_frames, refill_watermark,
                              refill_quantum)
            remaining = seed
            while remaining > 0:
                order = remaining.bit_length() - 1
                start = self.allocator.alloc(order)
                pool.allocator.insert_block(start, order)
                remaining -= 1 << order
            self.cpu_pools.append(pool)

    # -- accounting ----------------------------------------------------

    def frame_owner(self, frame):
        """CellId owning the frame, or KERNEL_OWNER."""
        for cell in self.cells.values():
            for rng in cell.grants.values():
                if rng.covers(frame):
                    return cell.cell_id
        return KERNEL_OWNER

    def free_frame_total(self):
        return (self.allocator.free_frames
                + sum(p.free_frames for p in self.cpu_pools))

    def check_conservation(self):
        granted = sum(c.granted_frames() for c in self.cells.values())
        total = self.free_frame_total() + granted
        if total != self.total_frames:
            raise AssertionError(
                f"conservation violated: {total} != {self.total_frames}")

    def check_exclusivity(self):
        ranges = []
        for cell in self.cells.values():
            for rng in cell.grants.values():
                ranges.append((rng.start_frame, rng.end_frame, cell.cell_id))
        ranges.sort()
        for (s1, e1, c1), (s2, e2, c2) in zip(ranges, ranges[1:]):
            if s2 < e1:
                raise AssertionError(
                    f"grant overlap: cell {c1} [{s1},{e1}) vs cell {c2} [{s2},{e2})")

    def _kernel_lock(self, counters):
        self._global_lock.acquire()
        if counters is not None:
            counters.kernel_lock_acquisitions += 1
        return self._global_lock

    # -- allocation ----------------------------------------------------

    def kalloc(self, cell_id, cpu, nbytes):
        cell = self._cell(cell_id)
        if cell.state not in (CellState.BOOTING, CellState.ONLINE):
            raise LifecycleError(f"cell {cell_id} is {cell.state.value}")
        if nbytes <= 0:
            raise ValueError("nbytes must be positive")
        if nbytes > self.max_chunk_bytes:
            raise OversizeError(
                f"{nbytes} bytes exceeds max chunk {self.max_chunk_bytes}")
        pages = -(-nbytes // PAGE_SIZE)
        order = max((pages - 1).bit_length(), 0)
        pool = self.cpu_pools[cpu]
        origin = cpu
        try:
            start = pool.allocator.alloc(order)
        except (OutOfFramesError, OversizeError):
            origin = KERNEL_OWNER
            lock = self._kernel_lock(cell.counters)
            try:
                start = self.allocator.alloc(order)
            finally:
                lock.release()
        rng = PhysRange(start, order, origin)
        cell.grants[start] = rng
        if pool.free_frames < pool.refill_watermark:
            self._refill_pool(pool, cell.counters)
        return rng

    def _refill_pool(self, pool, counters):
        if pool.refill_quantum <= 0:
            return
        lock = self._kernel_lock(counters)
        try:
            remaining = pool.refill_quantum
            order = remaining.bit_length() - 1
            while remaining > 0 and order >= 0:
                try:
                    start = self.allocator.alloc(order)
                except OutOfFramesError:
                    order -= 1
                    continue
                pool.allocator.insert_block(start, order)
                remaining -= 1 << order
                order = min(order, max(remaining.bit_length() - 1, 0))
        finally:
            lock.release()

    def _spill_pool(self, pool, counters):
        if pool.free_frames <= 4 * pool.refill_quantum:
            return
        lock = self._kernel_lock(counters)
        try:
            while pool.free_frames > 4 * pool.refill_quantum:
                block = pool.allocator.pop_block()
                if block is None:
                    break
                self.allocator.insert_block(*block)
        finally:
            lock.release()

    def kfree(self, cell_id, rng):
        cell = self._cell(cell_id)
        owned = cell.grants.get(rng.start_frame)
        if owned is None or owned.order != rng.order:
            raise AclViolationError(
                f"cell {cell_id} does not own range "
                f"[{rng.start_frame}, +2^{rng.order})")
        del cell.grants[rng.start_frame]
        self._return_range(owned, cell.counters)

    def _return_range(self, rng, counters):
        if rng.origin == KERNEL_OWNER:
            lock = self._kernel_lock(counters)
            try:
                self.allocator.insert_block(rng.start_frame, rng.order)
            finally:
                lock.release()
        else:
            pool = self.cpu_pools[rng.origin]
            pool.allocator.insert_block(rng.start_frame, rng.order)
            self._spill_pool(pool, counters)

    def split_grant(self, cell_id, start_frame, order):
        """Re-carve a cell's grants so that the aligned sub-block
        (start_frame, order) becomes a grant of its own, e.g. ahead of an
        explicit SHRINK.  The remainder of the containing grant stays
        granted, decomposed into aligned buddy blocks.
        """
        cell = self._cell(cell_id)
        sub = PhysRange(start_frame, order)
        container = None
        for rng in cell.grants.values():
            if rng.start_frame <= start_frame and sub.end_frame <= rng.end_frame:
                container = rng
                break
        if container is None:
            raise AclViolationError(
                f"cell {cell_id} does not own frames "
                f"[{start_frame}, {sub.end_frame})")
        if container.order == order:
            return container
        del cell.grants[container.start_frame]
        for s, o in _complement_blocks(container.start_frame, container.order,
                                       start_frame, order):
            cell.grants[s] = PhysRange(s, o, container.origin)
        sub = PhysRange(start_frame, order, container.origin)
        cell.grants[start_frame] = sub
        return sub

    # -- lifecycle -----------------------------------------------------

    def launch_cell(self, spec):
        """Boot a cell: two mode switches bracketing resource grant,
        page-table upload, and fault-handler registration.  All-or-
        nothing; a failed boot leaves no partial grants.
        """
        from .runtime import Cell

        cell_id = self._next_cell_id
        self._next_cell_id += 1
        desc = CellDescriptor(cell_id=cell_id, spec=spec,
                              home_cpu=spec.home_cpu)
        self.cells[cell_id] = desc

        desc.counters.mode_switches += 1          # switch #1: enter cell setup
        desc.transition(CellState.BOOTING)
        try:
            cell = Cell(self, desc)
            if spec.requested_bytes > 0:
                cell.accept_grant(self.kalloc(cell_id, spec.home_cpu,
                                              spec.requested_bytes))
            cell.upload_initial_table(spec.inherited_pages)
            if Feature.USER_FAULT_HANDLER in spec.privileged_features:
                cell.register_fault_handler(Cell.default_fault_handler)
            desc.counters.mode_switches += 1      # switch #2: go online
            desc.transition(CellState.ONLINE)
            return cell
        except Exception as exc:
            for rng in list(desc.grants.values()):
                del desc.grants[rng.start_frame]
                self._return_range(rng, None)
            del self.cells[cell_id]
            raise LaunchError(f"launch refused: {exc}") from exc

    def handle_vmexit(self, cell_id, request):
        cell = self._cell(cell_id)
        with cell.lock:
            cell.counters.vmexits += 1
            if request.kind is VmexitKind.GROW:
                try:
                    rng = self.kalloc(cell_id, cell.home_cpu, request.nbytes)
                except (OutOfFramesError, OversizeError) as exc:
                    self._sync_tables(cell)
                    return VmexitResponse(ok=False, error=str(exc))
                self._sync_tables(cell)
                return VmexitResponse(ok=True, range=rng)
            if request.kind is VmexitKind.SHRINK:
                rng = request.range
                if cell.cell_table is not None:
                    for entry in cell.cell_table.entries.values():
                        if entry.locked and rng.covers(entry.frame):
                            return VmexitResponse(
                                ok=False, error="range covers locked frames")
                try:
                    self.kfree(cell_id, rng)
                except AclViolationError as exc:
                    return VmexitResponse(ok=False, error=str(exc))
                self._sync_tables(cell)
                return VmexitResponse(ok=True)
            if request.kind is VmexitKind.SYNC_TABLES:
                self._sync_tables(cell)
                return VmexitResponse(ok=True)
            if request.kind is VmexitKind.CRASH_NOTIFY:
                cell.transition(CellState.CRASHED)
                replacement = self.crash_replace(cell_id)
                return VmexitResponse(ok=True, replacement=replacement)
        raise ValueError(f"unknown vmexit kind {request.kind}")

    def _sync_tables(self, desc):
        if desc.cell_table is not None:
            desc.shadow_table.copy_from(desc.cell_table)

    def mark_crashed(self, cell_id):
        self._cell(cell_id).transition(CellState.CRASHED)

    def crash_replace(self, cell_id):
        """Reclaim everything the dead cell held and launch a fresh cell
        with the same spec; no reboot, other cells untouched.
        """
        dead = self._cell(cell_id)
        if dead.state is not CellState.CRASHED:
            raise LifecycleError(f"cell {cell_id} is {dead.state.value}")
        for rng in list(dead.grants.values()):
            del dead.grants[rng.start_frame]
            self._return_range(rng, dead.counters)
        dead.transition(CellState.REPLACED)
        return self.launch_cell(dead.spec)

    def _cell(self, cell_id):
        desc = self.cells.get(cell_id)
        if desc is None:
            raise LifecycleError(f"unknown cell {cell_id}")
        return desc

    # -- reporting -----------------------------------------------------

    def export_counters_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["cell_id", "mode_switches", "vmexits", "user_faults",
                        "kernel_faults", "kernel_lock_acquisitions",
                        "io_messages"])
            for cell in sorted(self.cells.values(), key=lambda c: c.cell_id):
                c = cell.counters
                w.writerow([cell.cell_id, c.mode_switches, c.vmexits,
                            c.user_faults, c.kernel_faults,
                            c.kernel_lock_acquisitions, c.io_messages])

    def close(self):
        if self.mem is not None:
            self.mem.close()
            self.mem = None


def _complement_blocks(outer_start, outer_order, inner_start, inner_order):
    """Aligned buddy blocks covering outer minus inner."""
    blocks = []
    start, order = outer_start, outer_order
    while order > inner_order:
        order -= 1
        half = start + (1 << order)
        if inner_start >= half:
            blocks.append((start, order))
            start = half
        else:
            blocks.append((half, order))
    assert start == inner_start
    return blocks


def reserve_boot_pool(total_bytes, num_cpus, **kwargs):
    """Create the boot-time reserved pool and per-CPU sub-pools."""
    return Kernel(total_bytes, num_cpus, **kwargs)
