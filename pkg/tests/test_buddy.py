import random

import pytest

from xcell.buddy import BuddyAllocator
from xcell.errors import OutOfFramesError, OversizeError

from oracle import BitmapBuddyOracle


def test_single_block_roundtrip():
    alloc = BuddyAllocator(0, 16, max_order=4)
    start = alloc.alloc(4)
    assert start == 0
    assert alloc.free_frames == 0
    alloc.free(start, 4)
    assert alloc.snapshot() == {4: (0,)}


def test_split_keeps_low_half():
    alloc = BuddyAllocator(0, 16, max_order=4)
    assert alloc.alloc(0) == 0
    assert alloc.alloc(0) == 1
    assert alloc.alloc(1) == 2
    assert alloc.alloc(2) == 4


def test_coalesce_on_sibling_free():
    alloc = BuddyAllocator(0, 8, max_order=3)
    a = alloc.alloc(1)
    b = alloc.alloc(1)
    alloc.free(a, 1)
    assert 1 in alloc.snapshot()
    alloc.free(b, 1)
    # both halves freed -> coalesced parent, all the way back up
    assert alloc.snapshot() == {3: (0,)}


def test_no_free_sibling_pairs_after_fuzz():
    alloc = BuddyAllocator(0, 256, max_order=8)
    rng = random.Random(7)
    live = []
    for _ in range(2000):
        if live and rng.random() < 0.5:
            start, order = live.pop(rng.randrange(len(live)))
            alloc.free(start, order)
        else:
            order = rng.randrange(0, 4)
            try:
                live.append((alloc.alloc(order), order))
            except OutOfFramesError:
                pass
    for order in range(alloc.max_order):
        starts = set(alloc.free_lists[order])
        for s in starts:
            assert (s ^ (1 << order)) not in starts, \
                f"uncoalesced sibling pair at order {order}"


def test_non_power_of_two_seeding():
    alloc = BuddyAllocator(0, 6, max_order=3)
    assert alloc.free_frames == 6
    assert alloc.snapshot() == {1: (4,), 2: (0,)}


def test_max_order_cap():
    alloc = BuddyAllocator(0, 64, max_order=3)
    assert alloc.snapshot() == {3: tuple(range(0, 64, 8))}
    with pytest.raises(OversizeError):
        alloc.alloc(4)


def test_oversize_order_for_frames():
    alloc = BuddyAllocator(0, 64, max_order=3)
    assert alloc.order_for_frames(5) == 3
    with pytest.raises(OversizeError):
        alloc.order_for_frames(9)


def test_exhaustion():
    alloc = BuddyAllocator(0, 4, max_order=2)
    alloc.alloc(2)
    with pytest.raises(OutOfFramesError):
        alloc.alloc(0)


def test_conservation_under_fuzz():
    alloc = BuddyAllocator(0, 512, max_order=9)
    rng = random.Random(3)
    live = []
    held = 0
    for _ in range(3000):
        if live and rng.random() < 0.45:
            start, order = live.pop(rng.randrange(len(live)))
            alloc.free(start, order)
            held -= 1 << order
        else:
            order = rng.randrange(0, 5)
            try:
                start = alloc.alloc(order)
            except OutOfFramesError:
                continue
            live.append((start, order))
            held += 1 << order
        assert alloc.free_frames + held == 512


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_bitmap_oracle(seed):
    """Success/failure, placement, and free-list decomposition all match
    the brute-force bitmap oracle on every step."""
    frames, max_order = 1024, 10
    alloc = BuddyAllocator(0, frames, max_order=max_order)
    oracle = BitmapBuddyOracle(frames, max_order)
    rng = random.Random(seed)
    live = []
    for step in range(2000):
        if live and rng.random() < 0.48:
            start, order = live.pop(rng.randrange(len(live)))
            alloc.free(start, order)
            oracle.free(start, order)
        else:
            order = rng.randrange(0, 6)
            expected = oracle.alloc(order)
            if expected is None:
                with pytest.raises(OutOfFramesError):
                    alloc.alloc(order)
                continue
            got = alloc.alloc(order)
            assert got == expected, f"step {step}: {got} != {expected}"
            live.append((got, order))
        assert alloc.free_frames == oracle.free_frames
        assert alloc.snapshot() == oracle.free_block_decomposition(), \
            f"free-list divergence at step {step}"
