import numpy as np
import pytest

from stfusion.errors import OrderingError, ProtocolError
from stfusion.grid import FeatureGrid, Pose
from stfusion.memory import MemoryBank


def grid(seed, res=1.0, origin=None):
    return FeatureGrid(np.random.default_rng(seed).normal(size=(4, 5, 3)), res, origin)


def test_fresh_bank_misses():
    bank = MemoryBank()
    assert all(bank.get(i) is None for i in range(5))
    assert bank.get_fused() is None
    assert len(bank) == 0


def test_put_then_get_is_bit_identical():
    bank = MemoryBank()
    g, p = grid(0), Pose(1.0, 2.0, yaw=0.3)
    bank.put(3, g, p, 5)
    slot = bank.get(3)
    assert slot.grid is g and slot.grid.equals(g)
    assert slot.pose == p and slot.frame == 5


def test_overwrite_keeps_later_entry():
    bank = MemoryBank()
    bank.put(1, grid(0), Pose(), 5)
    later = grid(1)
    bank.put(1, later, Pose(3.0, 0.0), 7)
    assert bank.get(1).frame == 7 and bank.get(1).grid.equals(later)
    assert len(bank) == 1


@pytest.mark.parametrize("second", [6, 7])
def test_non_advancing_frame_is_an_ordering_error(second):
    bank = MemoryBank()
    bank.put(1, grid(0), Pose(), 7)
    with pytest.raises(OrderingError):
        bank.put(1, grid(1), Pose(), second)
    bank.put_fused(grid(2), Pose(), 7)
    with pytest.raises(OrderingError):
        bank.put_fused(grid(3), Pose(), second)


def test_distinct_ids_do_not_interfere():
    bank = MemoryBank()
    a, b = grid(0), grid(1)
    bank.put(1, a, Pose(), 7)
    bank.put(2, b, Pose(), 3)
    assert bank.get(1).grid.equals(a) and bank.get(2).grid.equals(b)
    assert bank.agent_ids() == [1, 2]
    assert bank.get_fused() is None


def test_fused_slot_overwrite():
    bank = MemoryBank()
    bank.put_fused(grid(0), Pose(), 1)
    bank.put_fused(grid(1), Pose(), 2)
    assert bank.get_fused().frame == 2
    assert len(bank) == 1


def test_snapshot_round_trip():
    bank = MemoryBank()
    bank.put(1, grid(0, 0.5, (-1.0, -0.75)), Pose(1.0, 2.0, yaw=0.5), 4)
    bank.put(4, grid(1), Pose(-3.0, 0.0), 6)
    bank.put_fused(grid(2), Pose(0.25, 0.0), 6)
    restored = MemoryBank.restore(bank.snapshot())
    assert restored.agent_ids() == [1, 4]
    for aid in (1, 4):
        a, b = bank.get(aid), restored.get(aid)
        assert b.frame == a.frame and b.pose.as_tuple() == a.pose.as_tuple()
        assert b.grid.resolution == a.grid.resolution and b.grid.origin == a.grid.origin
        assert np.array_equal(b.grid.data, a.grid.data.astype(np.float16).astype(np.float64))
    assert restored.get_fused().frame == 6
    assert restored.snapshot() == bank.snapshot()


def test_snapshot_corruption_detected():
    bank = MemoryBank()
    bank.put(1, grid(0), Pose(), 1)
    blob = bank.snapshot()
    for pos in range(0, len(blob), 7):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        with pytest.raises(ProtocolError):
            MemoryBank.restore(bytes(bad))
    with pytest.raises(ProtocolError):
        MemoryBank.restore(blob[:5])
