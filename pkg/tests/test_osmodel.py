import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from hammersim.dram import DramGeometry
from hammersim.osmodel import (CACHE, KERNEL, PAGE_TABLE_TAG, USER, FrameTable, OSModel, OutOfMemory, PageFault,
                               SystemLayout, build_system, direct_map, direct_map_frame)
from hammersim.physmem import PAGE_SIZE, PhysicalMemory
from hammersim.rng import substream

GEO = DramGeometry(channels=1, ranks=1, banks_per_rank=8, rows_per_bank=256)


class OSMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.os = build_system(GEO.n_frames, substream(0, "sm"), geometry=GEO, allocator="catt")
        self.proc = self.os.spawn()
        self.next_vpage = 0x1000
        self.files = 0

    @rule(executable=st.booleans())
    def map_file(self, executable):
        self.files += 1
        self.os.map_file(self.proc.pid, self.next_vpage, ("f", self.files), executable)
        self.next_vpage += 1

    @rule()
    def map_anon(self):
        self.os.map_anon(self.proc.pid, self.next_vpage)
        self.next_vpage += 1

    @precondition(lambda self: self.proc.regions)
    @rule(data=st.data())
    def unmap(self, data):
        vpage = data.draw(st.sampled_from(sorted(self.proc.regions)))
        self.os.unmap(self.proc.pid, vpage)

    @precondition(lambda self: self.os.cache.pages)
    @rule(data=st.data())
    def evict(self, data):
        key = data.draw(st.sampled_from(sorted(self.os.cache.pages, key=str)))
        self.os.cache.evict(key)

    @rule(count=st.integers(1, 300), executable=st.booleans())
    def fill(self, count, executable):
        self.os.cache.fill("filler", count, executable)

    @rule()
    def fork_and_write(self):
        anon = [v for v, m in self.proc.regions.items() if m.kind == "anon"]
        child = self.os.fork_cow(self.proc.pid)
        for v in anon[:3]:
            self.os.write_private(child.pid, v)
        self.os.kill(self.proc.pid)
        self.proc = child

    @invariant()
    def frames_accounted(self):
        assert self.os.check_partition()

    @invariant()
    def resident_set_is_private_only(self):
        anon = sum(m.kind == "anon" for m in self.proc.regions.values())
        assert self.proc.resident_bytes == (anon + self.proc.bulk_anon) * PAGE_SIZE

    @invariant()
    def catt_keeps_user_out_of_kernel_rows(self):
        ft = self.os.frames
        user = (ft.owner == USER) | (ft.owner == CACHE)
        assert not np.any(user & (ft.partition != 1))
        assert not np.any((ft.owner == KERNEL) & (ft.partition != 0))


TestOSMachine = OSMachine.TestCase
TestOSMachine.settings = settings(max_examples=30, stateful_step_count=25, deadline=None)


def test_build_system_layout():
    os_ = build_system(2**14, substream(1, "b"))
    counts = os_.frames.counts()
    assert counts["kernel"] == pytest.approx(0.04 * 2**14, abs=2)
    assert os_.usage_fraction() == pytest.approx(0.52, abs=0.01)
    assert os_.cache.mincore(("sudoers.so", 8))
    assert np.count_nonzero(os_.frames.tag == PAGE_TABLE_TAG) >= 1
    assert os_.check_partition()
    with pytest.raises(ValueError):
        SystemLayout(occupied=0.9, free=0.2).validate()


def test_reclaim_prefers_non_executable():
    os_ = build_system(2**12, substream(2, "r"))
    key = ("sudoers.so", 8)
    nonexec = os_.cache.reclaimable(False)
    os_.cache.fill("filler", nonexec // 2 + len(os_.frames.free_pool(CACHE)), executable=True)
    assert os_.cache.mincore(key)
    assert os_.cache.reclaimable(False) == nonexec - nonexec // 2


def test_fill_stops_at_target():
    os_ = build_system(2**12, substream(3, "s"))
    key = ("sudoers.so", 8)
    done, evicted = os_.cache.fill("filler", 2**40, executable=True, stop_key=key)
    assert evicted and not os_.cache.mincore(key)
    assert done < 2**12


def test_pinned_pages_survive_reclaim():
    os_ = build_system(2**12, substream(4, "p"))
    key = ("sudoers.so", 8)
    os_.cache.pin(key)
    os_.cache.fill("filler", 3 * 2**12, executable=True)
    assert os_.cache.mincore(key)
    os_.cache.pin(key, False)
    os_.cache.fill("filler", 3 * 2**12, executable=True)
    assert not os_.cache.mincore(key)


def test_exhausted_cache_raises():
    os_ = OSModel(FrameTable(16), substream(4, "o"))
    proc = os_.spawn()
    os_.alloc_bulk_anon(proc.pid, 16)
    with pytest.raises(OutOfMemory):
        os_.cache.fault_in(("lib", 0))


def test_page_cache_invisible_to_resident_set():
    os_ = OSModel(FrameTable(1024), substream(5, "v"))
    proc = os_.spawn()
    for i in range(50):
        os_.map_file(proc.pid, i, ("lib", i))
    assert proc.resident_bytes == 0
    os_.map_anon(proc.pid, 100)
    assert proc.resident_bytes == PAGE_SIZE


def test_copy_on_write_relocates():
    os_ = OSModel(FrameTable(1024), substream(6, "c"), PhysicalMemory(1024))
    parent = os_.spawn()
    frame = os_.map_anon(parent.pid, 7)
    os_.memory.write_page(frame, b"\xAB" * PAGE_SIZE)
    child = os_.fork_cow(parent.pid)
    assert os_.translate(child.pid, 7) == frame
    new = os_.write_private(child.pid, 7)
    assert new != frame
    assert os_.read_page(new) == b"\xAB" * PAGE_SIZE
    assert os_.translate(parent.pid, 7) == frame


def test_unmapped_access_faults():
    os_ = OSModel(FrameTable(64), substream(7, "f"))
    proc = os_.spawn()
    with pytest.raises(PageFault):
        os_.translate(proc.pid, 1)


def test_catt_rejects_cross_partition_take():
    ft = FrameTable(GEO.n_frames, GEO, "catt")
    kernel_frame = int(np.nonzero(ft.partition == 0)[0][0])
    with pytest.raises(ValueError):
        ft.take(kernel_frame, USER)
    gap_frame = int(np.nonzero(ft.partition == -1)[0][0])
    with pytest.raises(ValueError):
        ft.take(gap_frame, KERNEL)


def test_direct_map_roundtrip():
    for frame in (0, 1, 12345):
        assert direct_map_frame(direct_map(frame)) == frame


def test_flip_direction_must_match():
    os_ = build_system(2**10, substream(8, "d"), memory=PhysicalMemory(2**10, 8))
    frame = os_.cache.frame_of(("sudoers.so", 8))
    bit = 0
    current = os_.memory.get_bit(frame, bit)
    wrong = "1to0" if current == 0 else "0to1"
    assert not os_.flip_bit_in_frame(frame, bit, wrong)
    assert os_.noops
    right = "0to1" if current == 0 else "1to0"
    assert os_.flip_bit_in_frame(frame, bit, right)
    assert os_.memory.get_bit(frame, bit) == 1 - current
