"""Exception hierarchy shared by the kernel emulation and the cell runtime."""


class XcellError(Exception):
    pass


class ConfigurationError(XcellError):
    """Bad pool geometry or config file contents."""


class OutOfFramesError(XcellError):
    """A pool (kernel, per-CPU, or runtime heap) cannot satisfy the request."""


class OversizeError(XcellError):
    """Request exceeds the allocator's maximum chunk size."""


class AclViolationError(XcellError):
    """A frame range was used by a cell that does not own it."""


class InvalidFreeError(XcellError):
    """Free of an address that is unknown, foreign, or already freed."""


class DoubleMapError(XcellError):
    """Mapping a virtual page that already has a present entry."""


class LockedPageError(XcellError):
    """Attempt to unmap or shrink away a locked (inherited) mapping."""


class SegmentationFault(XcellError):
    """Access outside any registered virtual region."""

    def __init__(self, vaddr):
        super().__init__(f"access outside registered regions: {vaddr:#x}")
        self.vaddr = vaddr


class LaunchError(XcellError):
    """Cell boot refused; no partial grants remain."""


class LifecycleError(XcellError):
    """Operation invoked in a cell state that does not permit it."""


class AttachError(XcellError):
    """I/O engine cannot bind an exclusive serving thread to the cell."""
