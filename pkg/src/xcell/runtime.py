"""In-cell runtime: user-space buddy heap over granted frames, POSIX-like
allocation entry points, touch/fault machinery, and the GROW/SHRINK
refill protocol to the kernel.

A cell is confined to a single worker thread; the heap and page table
need no internal locking.  Frees recycle frames into the cell's own heap
and never reach the kernel implicitly; handing frames back is an
explicit release_to_kernel() call.
"""

import time
from bisect import bisect_right, insort
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .buddy import BuddyAllocator
from .errors import (InvalidFreeError, LifecycleError, LockedPageError,
                     OutOfFramesError, OversizeError, SegmentationFault)
from .kernel import (RUNTIME_MAX_CHUNK, CellState, Feature, PhysRange,
                     VmexitKind, VmexitRequest)
from .pagetable import (PAGE_SIZE, EmulatedPageTable, FaultKind,
                        FaultRecord, FaultResolver, check_frame_owned)

RUNTIME_MAX_ORDER = 14          # 64 MB in 4 KB frames
REFILL_CHUNK = RUNTIME_MAX_CHUNK

# Per-cell virtual layout (cells have private windows; addresses are
# never shared between cells).
INHERITED_BASE = 0x0000_1000_0000
BRK_BASE = 0x0000_4000_0000
MMAP_BASE = 0x0010_0000_0000


class PagingPolicy(Enum):
    PRE_PAGING = "PRE_PAGING"
    DEMAND_PAGING = "DEMAND_PAGING"


class RegionKind(Enum):
    INHERITED = "INHERITED"
    MALLOC = "MALLOC"
    MMAP = "MMAP"
    BRK = "BRK"


@dataclass
class VmRegion:
    vaddr: int
    length: int
    policy: PagingPolicy
    kind: RegionKind
    backing: list = field(default_factory=list)  # [(start_frame, frames)]

    @property
    def pages(self):
        return -(-self.length // PAGE_SIZE)

    @property
    def end(self):
        return self.vaddr + self.length

    def frame_for(self, page_index):
        """Backing frame for the page_index-th page of the region."""
        idx = page_index
        for start, frames in self.backing:
            if idx < frames:
                return start + idx
            idx -= frames
        raise IndexError(page_index)


class RuntimeHeap:
    """User-space buddy allocator over the frames granted to one cell."""

    def __init__(self):
        self.allocator = BuddyAllocator(0, 0, max_order=RUNTIME_MAX_ORDER,
                                        start_empty=True)
        self.backing_grants = []

    def insert_grant(self, rng):
        self.backing_grants.append(rng)
        # Grants larger than the runtime max chunk are decomposed.
        start, frames = rng.start_frame, rng.frames
        while frames > 0:
            order = min(RUNTIME_MAX_ORDER, frames.bit_length() - 1)
            while start % (1 << order) != 0:
                order -= 1
            self.allocator.insert_block(start, order)
            start += 1 << order
            frames -= 1 << order

    @property
    def free_frames(self):
        return self.allocator.free_frames

    @property
    def total_frames(self):
        return sum(r.frames for r in self.backing_grants)


class Cell:
    def __init__(self, kernel, descriptor):
        self.kernel = kernel
        self.descriptor = descriptor
        self.cell_id = descriptor.cell_id
        self.heap = RuntimeHeap()
        self.table = EmulatedPageTable()
        descriptor.cell_table = self.table
        self.fault_handler = None
        # bounded: long benchmark runs only need the counters
        self.fault_records = deque(maxlen=65536)
        self.regions = {}            # vaddr -> VmRegion
        self._region_starts = []     # sorted, for containing-address lookup
        self._brk_segments = []      # VmRegions, in growth order
        self.brk_base = BRK_BASE
        self.brk_cursor = BRK_BASE
        self._mmap_cursor = MMAP_BASE
        self.default_policy = PagingPolicy[descriptor.spec.paging_policy]

    # -- boot support (called by Kernel.launch_cell) -------------------

    def accept_grant(self, rng):
        self.heap.insert_grant(rng)

    def upload_initial_table(self, inherited_pages):
        """Populate the initial mappings inherited from the host process
        and retain the kernel-side shadow copy.  Inherited mappings are
        locked for the cell's lifetime.
        """
        if inherited_pages > 0:
            blocks = self._alloc_blocks(inherited_pages)
            region = self._make_region(INHERITED_BASE,
                                       inherited_pages * PAGE_SIZE,
                                       PagingPolicy.PRE_PAGING,
                                       RegionKind.INHERITED)
            region.backing = blocks
            self._map_region(region)
            self.lock_inherited()
        self.descriptor.shadow_table.copy_from(self.table)

    def lock_inherited(self):
        for region in self.regions.values():
            if region.kind is RegionKind.INHERITED:
                base_vpn = region.vaddr // PAGE_SIZE
                for i in range(region.pages):
                    entry = self.table.get(base_vpn + i)
                    if entry is not None:
                        entry.locked = True
        self.table.epoch += 1

    def register_fault_handler(self, handler):
        if self.descriptor.state not in (CellState.BOOTING, CellState.ONLINE):
            raise LifecycleError(
                f"cell {self.cell_id} is {self.descriptor.state.value}")
        self.fault_handler = handler

    # -- allocation entry points ---------------------------------------

    def malloc(self, nbytes, policy=None):
        self._require_online()
        if nbytes <= 0:
            raise ValueError("malloc size must be positive")
        if nbytes > RUNTIME_MAX_CHUNK:
            raise OversizeError(
                f"{nbytes} bytes exceeds runtime max chunk {RUNTIME_MAX_CHUNK}")
        policy = policy or self.default_policy
        pages = -(-nbytes // PAGE_SIZE)
        order = max((pages - 1).bit_length(), 0)
        start = self._alloc_block(order)
        region = self._make_region(self._bump_mmap(pages), nbytes, policy,
                                   RegionKind.MALLOC)
        region.backing.append((start, 1 << order))
        if policy is PagingPolicy.PRE_PAGING:
            self._map_region(region)
        return region.vaddr

    def free(self, addr):
        region = self.regions.get(addr)
        if region is None or region.kind not in (RegionKind.MALLOC,
                                                 RegionKind.MMAP):
            raise InvalidFreeError(f"{addr:#x} is not an allocated region")
        self._drop_region(region)

    def mmap(self, length, policy=None):
        self._require_online()
        if length <= 0:
            raise ValueError("mmap length must be positive")
        policy = policy or self.default_policy
        pages = -(-length // PAGE_SIZE)
        blocks = self._alloc_blocks(pages)
        region = self._make_region(self._bump_mmap(pages), length, policy,
                                   RegionKind.MMAP)
        region.backing = blocks
        if policy is PagingPolicy.PRE_PAGING:
            self._map_region(region)
        return region.vaddr

    def sbrk(self, delta):
        self._require_online()
        old_break = self.brk_cursor
        if delta == 0:
            return old_break
        pages = -(-abs(delta) // PAGE_SIZE)
        if delta > 0:
            blocks = self._alloc_blocks(pages)
            region = self._make_region(old_break, pages * PAGE_SIZE,
                                       PagingPolicy.DEMAND_PAGING,
                                       RegionKind.BRK)
            region.backing = blocks
            self._brk_segments.append(region)
            self.brk_cursor = old_break + pages * PAGE_SIZE
        else:
            new_break = old_break - pages * PAGE_SIZE
            if new_break < self.brk_base:
                raise ValueError("break would fall below heap base")
            while self._brk_segments and self._brk_segments[-1].vaddr >= new_break:
                self._drop_region(self._brk_segments.pop())
            if self._brk_segments and self._brk_segments[-1].end > new_break:
                self._shrink_region(self._brk_segments[-1], new_break)
            self.brk_cursor = new_break
        return old_break

    def release_to_kernel(self, nbytes):
        """Explicit SHRINK: hand currently free heap frames back to the
        kernel pool via a vmexit.  Returns the number of bytes released.
        """
        pages = -(-nbytes // PAGE_SIZE)
        order = min(max((pages - 1).bit_length(), 0), RUNTIME_MAX_ORDER)
        start = self.heap.allocator.alloc(order)
        rng = self.kernel.split_grant(self.cell_id, start, order)
        resp = self.kernel.handle_vmexit(
            self.cell_id, VmexitRequest(VmexitKind.SHRINK, range=rng))
        if not resp.ok:
            self.heap.allocator.insert_block(start, order)
            raise LockedPageError(resp.error)
        return rng.nbytes

    # -- paging --------------------------------------------------------

    def map_page(self, vpn, frame, locked=False):
        check_frame_owned(self.kernel, self.cell_id, frame)
        self.table.map(vpn, frame, locked=locked)

    def unmap_page(self, vpn):
        self.table.unmap(vpn)

    def touch(self, vaddr, write=False, value=0):
        """Perform a real one-byte access; synthesize a fault when the
        page is not mapped.
        """
        region = self._region_for(vaddr)
        if region is None:
            self._segfault(vaddr)
        vpn = vaddr // PAGE_SIZE
        entry = self.table.get(vpn)
        if entry is None:
            self._fault(region, vpn, vaddr)
            entry = self.table.get(vpn)
            if entry is None:
                self._segfault(vaddr)
        pos = entry.frame * PAGE_SIZE + (vaddr % PAGE_SIZE)
        mem = self.kernel.mem
        if write:
            if mem is not None:
                mem[pos] = value & 0xFF
            entry.dirty = True
            return None
        return mem[pos] if mem is not None else 0

    def default_demand_map(self, vpn):
        """Map the faulting page from the region's reserved backing."""
        region = self._region_for(vpn * PAGE_SIZE)
        page_index = (vpn * PAGE_SIZE - region.vaddr) // PAGE_SIZE
        self.map_page(vpn, region.frame_for(page_index))

    @staticmethod
    def default_fault_handler(cell, vpn):
        cell.default_demand_map(vpn)

    def _fault(self, region, vpn, vaddr):
        t0 = time.perf_counter_ns()
        counters = self.descriptor.counters
        if (self.fault_handler is not None
                and Feature.USER_FAULT_HANDLER
                in self.descriptor.spec.privileged_features):
            counters.user_faults += 1
            self.fault_handler(self, vpn)
            resolver = FaultResolver.USER_HANDLER
        else:
            counters.kernel_faults += 1
            self.default_demand_map(vpn)
            resolver = FaultResolver.KERNEL_HANDLER
        self.fault_records.append(FaultRecord(
            self.cell_id, vaddr, FaultKind.NOT_PRESENT, resolver,
            time.perf_counter_ns() - t0))

    def _segfault(self, vaddr):
        self.kernel.mark_crashed(self.cell_id)
        raise SegmentationFault(vaddr)

    # -- region bookkeeping --------------------------------------------

    def _make_region(self, vaddr, length, policy, kind):
        region = VmRegion(vaddr, length, policy, kind)
        self.regions[vaddr] = region
        insort(self._region_starts, vaddr)
        return region

    def _region_for(self, vaddr):
        i = bisect_right(self._region_starts, vaddr)
        if i == 0:
            return None
        region = self.regions[self._region_starts[i - 1]]
        return region if vaddr < region.end else None

    def _map_region(self, region):
        base_vpn = region.vaddr // PAGE_SIZE
        for i in range(region.pages):
            self.map_page(base_vpn + i, region.frame_for(i))

    def _drop_region(self, region):
        base_vpn = region.vaddr // PAGE_SIZE
        for i in range(region.pages):
            if self.table.get(base_vpn + i) is not None:
                self.table.unmap(base_vpn + i)
        del self.regions[region.vaddr]
        self._region_starts.remove(region.vaddr)
        if region in self._brk_segments:
            self._brk_segments.remove(region)
        for start, frames in region.backing:
            self._free_block_run(start, frames)

    def _shrink_region(self, region, new_end):
        """Trim a brk segment down to new_end.  Backing blocks entirely
        past the new end return to the heap; a straddling block stays
        reserved until the segment is dropped (block granularity).
        """
        keep_pages = (new_end - region.vaddr) // PAGE_SIZE
        base_vpn = region.vaddr // PAGE_SIZE
        for i in range(keep_pages, region.pages):
            if self.table.get(base_vpn + i) is not None:
                self.table.unmap(base_vpn + i)
        covered = 0
        kept = []
        for start, frames in region.backing:
            if covered >= keep_pages:
                self._free_block_run(start, frames)
            else:
                kept.append((start, frames))
            covered += frames
        region.backing = kept
        region.length = keep_pages * PAGE_SIZE

    def _free_block_run(self, start, frames):
        while frames > 0:
            order = min(RUNTIME_MAX_ORDER, frames.bit_length() - 1)
            while start % (1 << order) != 0:
                order -= 1
            self.heap.allocator.free(start, order)
            start += 1 << order
            frames -= 1 << order

    def _bump_mmap(self, pages):
        vaddr = self._mmap_cursor
        # One guard page between regions so off-by-one touches segfault.
        self._mmap_cursor += (pages + 1) * PAGE_SIZE
        return vaddr

    # -- refill protocol -----------------------------------------------

    def _alloc_block(self, order):
        try:
            return self.heap.allocator.alloc(order)
        except OutOfFramesError:
            self.refill((1 << order) * PAGE_SIZE)
            return self.heap.allocator.alloc(order)

    def _alloc_blocks(self, pages):
        """Backing blocks for a region of `pages` pages; chunks capped at
        the 64 MB runtime maximum.  All-or-nothing.
        """
        blocks = []
        remaining = pages
        try:
            while remaining > 0:
                order = min(RUNTIME_MAX_ORDER, max((remaining - 1).bit_length(), 0))
                start = self._alloc_block(order)
                blocks.append((start, 1 << order))
                remaining -= min(1 << order, remaining)
        except OutOfFramesError:
            for start, frames in blocks:
                self._free_block_run(start, frames)
            raise
        return blocks

    def refill(self, min_bytes):
        """Request frames from the kernel via GROW vmexits, in whole
        64 MB chunks so runtime max-order blocks stay aligned.
        """
        chunks = max(-(-min_bytes // REFILL_CHUNK), 1)
        for _ in range(chunks):
            resp = self.kernel.handle_vmexit(
                self.cell_id,
                VmexitRequest(VmexitKind.GROW, nbytes=REFILL_CHUNK))
            if not resp.ok:
                raise OutOfFramesError(f"kernel refill failed: {resp.error}")
            self.heap.insert_grant(resp.range)

    def crash(self):
        """Simulate a fatal fault; the kernel replaces the cell."""
        resp = self.kernel.handle_vmexit(
            self.cell_id, VmexitRequest(VmexitKind.CRASH_NOTIFY))
        return resp.replacement

    def _require_online(self):
        if self.descriptor.state not in (CellState.ONLINE, CellState.BOOTING):
            raise LifecycleError(
                f"cell {self.cell_id} is {self.descriptor.state.value}")
