"""Brute-force bitmap buddy oracle.

Keeps the free-frame set as one big-int bitmap and computes placements
and free-block decompositions directly from it, independently of the
free-list implementation under test.

Placement: first fit over the bitmap, i.e. the lowest aligned position
whose 2^order frames are all free.  With eager coalescing this is the
same block the free-list allocator must pick.

Free-block decomposition: top-down recursion over the bitmap; a block is
emitted when it is entirely free and its parent is not.  That canonical
form is unique for a given free-frame set, so it can be compared against
the allocator's free lists verbatim.
"""


class BitmapBuddyOracle:
    def __init__(self, total_frames, max_order):
        self.total_frames = total_frames
        self.max_order = max_order
        self.free_bits = (1 << total_frames) - 1

    def alloc(self, order):
        """Lowest aligned all-free position of 2^order frames, or None."""
        if order > self.max_order:
            return None
        folded = self.free_bits
        # After folding, bit p is set iff frames p .. p+2^order-1 are free.
        for j in range(order):
            folded &= folded >> (1 << j)
        step = 1 << order
        pos = 0
        while pos + step <= self.total_frames:
            window = folded >> pos
            if window & 1:
                self.free_bits &= ~(((1 << step) - 1) << pos)
                return pos
            if window == 0:
                break
            pos += step
        return None

    def free(self, start, order):
        self.free_bits |= ((1 << (1 << order)) - 1) << start

    @property
    def free_frames(self):
        return bin(self.free_bits).count("1")

    def free_block_decomposition(self):
        """Canonical {order: (starts...)} decomposition of the free set."""
        blocks = {}

        def recurse(start, order):
            size = 1 << order
            mask = ((1 << size) - 1) << start
            region = self.free_bits & mask
            if region == mask:
                blocks.setdefault(order, []).append(start)
                return
            if region == 0 or order == 0:
                return
            recurse(start, order - 1)
            recurse(start + size // 2, order - 1)

        # Cover the whole space with aligned top-level regions first.
        start = 0
        remaining = self.total_frames
        while remaining > 0:
            order = self.max_order
            while order > 0 and (start % (1 << order) or (1 << order) > remaining):
                order -= 1
            recurse(start, order)
            start += 1 << order
            remaining -= 1 << order
        return {o: tuple(sorted(s)) for o, s in blocks.items()}
