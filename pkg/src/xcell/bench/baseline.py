"""Shared-kernel baseline executor.

Models a monolithic kernel the way its costs show up to applications:
every memory-management operation crosses into the kernel (two counted
boundary crossings per call) and serializes on one global allocator
lock.  The lock may be a cross-process lock so co-located workers
contend the way processes sharing one kernel do.

The workload surface mirrors the cell runtime (malloc/free/sbrk/mmap/
touch), so both modes can execute byte-identical traces.
"""

import mmap
import threading

from ..buddy import BuddyAllocator
from ..errors import InvalidFreeError, SegmentationFault
from ..kernel import EventCounters
from ..pagetable import PAGE_SIZE

_BRK_BASE = 0x4000_0000
_MMAP_BASE = 0x10_0000_0000


def _boundary():
    # Stand-in for a trap: a real call boundary, nothing more.
    return None


class SharedKernelBaseline:
    def __init__(self, pool_bytes, lock=None, shared_crossings=None,
                 backing=True):
        total_frames = pool_bytes // PAGE_SIZE
        max_order = min(18, total_frames.bit_length() - 1)
        self.allocator = BuddyAllocator(0, total_frames, max_order=max_order)
        self.mem = mmap.mmap(-1, pool_bytes) if backing else None
        self.lock = lock if lock is not None else threading.Lock()
        self.shared_crossings = shared_crossings  # multiprocessing.Value or None
        self.counters = EventCounters()
        self.page_table = {}         # vpn -> frame
        self.regions = {}            # vaddr -> (length, backing_blocks)
        self._brk = _BRK_BASE
        self._brk_stack = []
        self._cursor = _MMAP_BASE

    # -- kernel boundary ----------------------------------------------

    def _cross(self):
        self.counters.mode_switches += 1
        if self.shared_crossings is not None:
            with self.shared_crossings.get_lock():
                self.shared_crossings.value += 1
        _boundary()

    def _enter(self):
        self._cross()
        self.lock.acquire()
        self.counters.kernel_lock_acquisitions += 1

    def _exit(self):
        self.lock.release()
        self._cross()

    # -- workload surface ----------------------------------------------

    def malloc(self, nbytes, policy=None):
        pages = -(-nbytes // PAGE_SIZE)
        order = max((pages - 1).bit_length(), 0)
        self._enter()
        try:
            start = self.allocator.alloc(order)
        finally:
            self._exit()
        vaddr = self._cursor
        self._cursor += (pages + 1) * PAGE_SIZE
        self.regions[vaddr] = (nbytes, [(start, order)])
        return vaddr

    def free(self, addr):
        entry = self.regions.pop(addr, None)
        if entry is None:
            raise InvalidFreeError(f"{addr:#x}")
        length, blocks = entry
        self._enter()
        try:
            for start, order in blocks:
                self.allocator.free(start, order)
            base_vpn = addr // PAGE_SIZE
            for i in range(-(-length // PAGE_SIZE)):
                self.page_table.pop(base_vpn + i, None)
        finally:
            self._exit()

    def mmap(self, length, policy=None):
        return self.malloc(length, policy)

    def sbrk(self, delta):
        old = self._brk
        if delta == 0:
            return old
        pages = -(-abs(delta) // PAGE_SIZE)
        if delta > 0:
            order = max((pages - 1).bit_length(), 0)
            self._enter()
            try:
                start = self.allocator.alloc(order)
            finally:
                self._exit()
            self.regions[old] = (pages * PAGE_SIZE, [(start, order)])
            self._brk_stack.append(old)
            self._brk = old + pages * PAGE_SIZE
        else:
            new_brk = self._brk - pages * PAGE_SIZE
            while self._brk_stack and self._brk_stack[-1] >= new_brk:
                self.free(self._brk_stack.pop())
            self._brk = new_brk
        return old

    def touch(self, vaddr, write=False, value=0):
        vpn = vaddr // PAGE_SIZE
        frame = self.page_table.get(vpn)
        if frame is None:
            region = self._region_for(vaddr)
            if region is None:
                raise SegmentationFault(vaddr)
            base, (length, blocks) = region
            # Every fault traps into the shared kernel.
            self._enter()
            try:
                self.counters.kernel_faults += 1
                idx = (vaddr - base) // PAGE_SIZE
                for start, order in blocks:
                    if idx < (1 << order):
                        frame = start + idx
                        break
                    idx -= 1 << order
                self.page_table[vpn] = frame
            finally:
                self._exit()
        pos = frame * PAGE_SIZE + (vaddr % PAGE_SIZE)
        if self.mem is None:
            return 0
        if write:
            self.mem[pos] = value & 0xFF
            return None
        return self.mem[pos]

    def _region_for(self, vaddr):
        for base, entry in self.regions.items():
            if base <= vaddr < base + entry[0]:
                return base, entry
        return None

    def close(self):
        if self.mem is not None:
            self.mem.close()
            self.mem = None
