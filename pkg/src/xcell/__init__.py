"""xcell: a user-space re-creation of an application-defined OS runtime.

Exclusive per-cell resource grants, two-level buddy memory management,
user-level demand paging, elastic kernel/runtime pool exchange, and
message-based asynchronous I/O, plus a benchmark harness comparing the
partitioned design against a shared-kernel baseline.
"""

from .buddy import BuddyAllocator
from .errors import (AclViolationError, AttachError, ConfigurationError,
                     DoubleMapError, InvalidFreeError, LaunchError,
                     LifecycleError, LockedPageError, OutOfFramesError,
                     OversizeError, SegmentationFault, XcellError)
from .kernel import (CellDescriptor, CellSpec, CellState, EventCounters,
                     Feature, Kernel, PhysRange, VmexitKind, VmexitRequest,
                     VmexitResponse, reserve_boot_pool)
from .pagetable import PAGE_SIZE, EmulatedPageTable, FaultKind, FaultRecord
from .runtime import Cell, PagingPolicy, RuntimeHeap

__all__ = [
    "BuddyAllocator", "Cell", "CellDescriptor", "CellSpec", "CellState",
    "EmulatedPageTable", "EventCounters", "FaultKind", "FaultRecord",
    "Feature", "Kernel", "PAGE_SIZE", "PagingPolicy", "PhysRange",
    "RuntimeHeap", "VmexitKind", "VmexitRequest", "VmexitResponse",
    "reserve_boot_pool",
    "AclViolationError", "AttachError", "ConfigurationError", "DoubleMapError",
    "InvalidFreeError", "LaunchError", "LifecycleError", "LockedPageError",
    "OutOfFramesError", "OversizeError", "SegmentationFault", "XcellError",
]
