"""Power-of-two buddy allocator over frame indices.

Used in two places with different geometry: the kernel reserved pool
(max block 1 GB) and the per-cell runtime heap (max block 64 MB).
Frame numbers are absolute, so buddy arithmetic is consistent when
blocks migrate between the kernel allocator and per-CPU pools.

Placement policy is deterministic: an allocation of order k takes the
lowest-addressed free block of order >= k and splits it keeping the low
half.  With eager coalescing this is equivalent to first-fit over the
free bitmap, which is what the test oracle computes independently.
"""

from bisect import insort

from .errors import OutOfFramesError, OversizeError


class BuddyAllocator:
    def __init__(self, base_frame, total_frames, min_order=0, max_order=18,
                 start_empty=False):
        if max_order < min_order:
            raise ValueError("max_order < min_order")
        self.base_frame = base_frame
        self.total_frames = total_frames
        self.min_order = min_order
        self.max_order = max_order
        self.free_lists = {order: [] for order in range(min_order, max_order + 1)}
        self.free_frames = 0
        if not start_empty:
            self._seed_region(base_frame, total_frames)

    def _seed_region(self, start, frames):
        # Greedy aligned decomposition; handles non-power-of-two totals.
        while frames > 0:
            order = self.max_order
            while order > self.min_order and (
                    start % (1 << order) != 0 or (1 << order) > frames):
                order -= 1
            if (1 << order) > frames:
                raise ValueError("region smaller than minimum block")
            self.insert_block(start, order)
            start += 1 << order
            frames -= 1 << order

    def order_for_frames(self, frames):
        """Smallest order whose block covers `frames` frames."""
        if frames <= 0:
            raise ValueError("frames must be positive")
        order = max((frames - 1).bit_length(), self.min_order)
        if order > self.max_order:
            raise OversizeError(
                f"{frames} frames exceeds max chunk of 2^{self.max_order} frames")
        return order

    def alloc(self, order):
        if order > self.max_order:
            raise OversizeError(f"order {order} > max_order {self.max_order}")
        order = max(order, self.min_order)
        chosen_order = None
        chosen_start = None
        for o in range(order, self.max_order + 1):
            lst = self.free_lists[o]
            if lst and (chosen_start is None or lst[0] < chosen_start):
                chosen_start = lst[0]
                chosen_order = o
        if chosen_start is None:
            raise OutOfFramesError(f"no free block of order {order}")
        self.free_lists[chosen_order].pop(0)
        while chosen_order > order:
            chosen_order -= 1
            # Keep the low half; the high half becomes a new free block.
            insort(self.free_lists[chosen_order],
                   chosen_start + (1 << chosen_order))
        self.free_frames -= 1 << order
        return chosen_start

    def free(self, start, order):
        self.insert_block(start, order)

    def insert_block(self, start, order):
        """Add a free block, coalescing with free buddies eagerly."""
        self.free_frames += 1 << order
        while order < self.max_order:
            buddy = start ^ (1 << order)
            lst = self.free_lists[order]
            i = self._index_of(lst, buddy)
            if i is None:
                break
            lst.pop(i)
            start = min(start, buddy)
            order += 1
        insort(self.free_lists[order], start)

    def pop_block(self, max_order=None):
        """Remove and return the largest free block (start, order).

        Used for spilling surplus frames from a per-CPU pool back to the
        kernel allocator.  Returns None when empty.
        """
        top = self.max_order if max_order is None else max_order
        for order in range(top, self.min_order - 1, -1):
            lst = self.free_lists[order]
            if lst:
                start = lst.pop(0)
                self.free_frames -= 1 << order
                return start, order
        return None

    @staticmethod
    def _index_of(sorted_list, value):
        from bisect import bisect_left
        i = bisect_left(sorted_list, value)
        if i < len(sorted_list) and sorted_list[i] == value:
            return i
        return None

    def snapshot(self):
        """Free lists as {order: tuple(starts)}, for state comparisons."""
        return {o: tuple(lst) for o, lst in self.free_lists.items() if lst}
