"""Emulated per-cell page table and fault records.

The table is a flat map from virtual page number to an entry; faults are
synthesized by explicit lookups rather than hardware traps, so fault
counts are deterministic and portable.  The kernel keeps a shadow copy
of every cell's table, refreshed on vmexit service.
"""

import csv
from dataclasses import dataclass
from enum import Enum

from .errors import AclViolationError, DoubleMapError, LockedPageError

PAGE_SIZE = 4096


class FaultKind(Enum):
    NOT_PRESENT = "NOT_PRESENT"
    PROTECTION = "PROTECTION"


class FaultResolver(Enum):
    USER_HANDLER = "USER_HANDLER"
    KERNEL_HANDLER = "KERNEL_HANDLER"


@dataclass
class PageEntry:
    frame: int
    present: bool = True
    locked: bool = False
    dirty: bool = False

    def clone(self):
        return PageEntry(self.frame, self.present, self.locked, self.dirty)


@dataclass
class FaultRecord:
    cell_id: int
    vaddr: int
    kind: FaultKind
    resolved_by: FaultResolver
    latency_ns: int


class EmulatedPageTable:
    def __init__(self):
        self.entries = {}
        self.epoch = 0

    def map(self, vpn, frame, locked=False, dirty=False):
        if vpn in self.entries:
            raise DoubleMapError(f"vpn {vpn:#x} already mapped")
        self.entries[vpn] = PageEntry(frame, locked=locked, dirty=dirty)
        self.epoch += 1

    def unmap(self, vpn):
        entry = self.entries.get(vpn)
        if entry is None:
            raise KeyError(vpn)
        if entry.locked:
            raise LockedPageError(f"vpn {vpn:#x} is locked")
        del self.entries[vpn]
        self.epoch += 1

    def get(self, vpn):
        return self.entries.get(vpn)

    def lock(self, vpn):
        self.entries[vpn].locked = True
        self.epoch += 1

    def mapped_count(self):
        return len(self.entries)

    def copy_from(self, other):
        """Make this table's entries identical to `other`'s.

        No-op when epochs already agree (the sync path checks this to
        skip redundant copies).
        """
        if self.epoch == other.epoch and self.entries.keys() == other.entries.keys():
            return
        self.entries = {vpn: e.clone() for vpn, e in other.entries.items()}
        self.epoch = other.epoch

    def equals(self, other):
        if self.entries.keys() != other.entries.keys():
            return False
        for vpn, e in self.entries.items():
            o = other.entries[vpn]
            if (e.frame, e.present, e.locked, e.dirty) != \
                    (o.frame, o.present, o.locked, o.dirty):
                return False
        return True


def check_frame_owned(kernel, cell_id, frame):
    owner = kernel.frame_owner(frame)
    if owner != cell_id:
        raise AclViolationError(
            f"frame {frame} owned by {owner}, not cell {cell_id}")


def write_fault_trace_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell_id", "vaddr", "kind", "resolved_by", "latency_ns"])
        for r in records:
            w.writerow([r.cell_id, r.vaddr, r.kind.value,
                        r.resolved_by.value, r.latency_ns])
