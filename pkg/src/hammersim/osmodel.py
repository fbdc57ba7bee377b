"""OS model: frame ownership, allocators, page cache, processes and copy-on-write.

Bulk page-cache content (the victim workload's files and the attacker's
filler) is tracked as runs of page counts instead of individual pages. Their
frames live in one pool whose members are interchangeable, so a reclaim that
frees "a filler frame" frees a uniformly random one. Pages that matter (the
target binary page, attacker template pages) are tracked one by one.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dram import DramGeometry, frame_locations
from .physmem import PAGE_SIZE, PhysicalMemory

FREE, KERNEL, USER, CACHE, EPC = range(5)
OWNER_NAMES = ("free", "kernel", "user", "page_cache", "epc")
PAGE_TABLE_TAG = -2  # tag of kernel frames that hold page tables
DIRECT_MAP_BASE = 0xFFFF888000000000
EPC_BYTES = 128 << 20


class OutOfMemory(MemoryError):
    """No frame is left in the permitted partition."""


class PageFault(LookupError):
    """Access to an unmapped virtual page."""


class IndexedSet:
    """Set of ints in [0, capacity) with O(1) add, remove and uniform pick."""

    def __init__(self, capacity: int, items=None):
        self._pos = np.full(capacity, -1, np.int64)
        self._items = np.empty(capacity, np.int64)
        self._n = 0
        if items is not None:
            self.add_many(items)

    def __len__(self) -> int:
        return self._n

    def __contains__(self, x) -> bool:
        return 0 <= x < len(self._pos) and self._pos[x] >= 0

    @property
    def items(self) -> np.ndarray:
        return self._items[:self._n]

    def add(self, x: int) -> None:
        if self._pos[x] >= 0:
            return
        self._items[self._n] = x
        self._pos[x] = self._n
        self._n += 1

    def add_many(self, xs) -> None:
        xs = np.asarray(xs, np.int64)
        xs = xs[self._pos[xs] < 0]
        xs = np.unique(xs)
        self._items[self._n:self._n + len(xs)] = xs
        self._pos[xs] = np.arange(self._n, self._n + len(xs))
        self._n += len(xs)

    def remove(self, x: int) -> None:
        i = self._pos[x]
        if i < 0:
            raise KeyError(x)
        last = self._items[self._n - 1]
        self._items[i] = last
        self._pos[last] = i
        self._pos[x] = -1
        self._n -= 1

    def at(self, i: int) -> int:
        return int(self._items[i])

    def pop_random(self, rng: np.random.Generator) -> int:
        x = self.at(int(rng.integers(0, self._n)))
        self.remove(x)
        return x

    def remove_many(self, xs) -> None:
        xs = np.asarray(xs, np.int64)
        if len(xs) < 64:
            for x in xs.tolist():
                self.remove(x)
            return
        if (self._pos[xs] < 0).any():
            raise KeyError("not all members present")
        keep = np.ones(self._n, bool)
        keep[self._pos[xs]] = False
        rest = self._items[:self._n][keep]
        self._pos[xs] = -1
        self._n = len(rest)
        self._items[:self._n] = rest
        self._pos[rest] = np.arange(self._n)

    def pop_many(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Remove count uniformly chosen members."""
        idx = rng.choice(self._n, size=count, replace=False)
        picked = self._items[idx].copy()
        self.remove_many(picked)
        return picked


class FrameTable:
    """Owner of every frame plus the allocator partitions.

    With allocator "catt" frames are split by DRAM row index: rows below the
    kernel boundary form the kernel partition, the next gap_rows rows are never
    handed out, the rest is the user partition.
    """

    def __init__(self, n_frames: int, geometry: DramGeometry | None = None, allocator: str = "default",
                 gap_rows: int = 2, kernel_rows: int | None = None, epc: bool = False):
        if allocator not in ("default", "catt"):
            raise ValueError("allocator must be 'default' or 'catt'")
        if allocator == "catt" and geometry is None:
            raise ValueError("catt needs a DRAM geometry")
        if geometry is not None and geometry.n_frames != n_frames:
            raise ValueError("frame count disagrees with geometry")
        self.n_frames = int(n_frames)
        self.geometry = geometry
        self.allocator = allocator
        self.gap_rows = gap_rows
        self.owner = np.zeros(self.n_frames, np.int8)
        self.tag = np.zeros(self.n_frames, np.int64)
        self.partition = np.zeros(self.n_frames, np.int8)  # 0 kernel/shared, 1 user, -1 gap
        if geometry is not None:
            self.bank, self.row = frame_locations(geometry)
        else:
            self.bank = self.row = None
        if allocator == "catt":
            rows = geometry.rows_per_bank
            self.kernel_rows = kernel_rows if kernel_rows is not None else rows // 8
            if not 0 < self.kernel_rows < rows - gap_rows:
                raise ValueError("kernel partition does not fit")
            self.partition[:] = 1
            self.partition[self.row < self.kernel_rows] = 0
            self.partition[(self.row >= self.kernel_rows) & (self.row < self.kernel_rows + gap_rows)] = -1
        self.epc_range: tuple[int, int] | None = None
        if epc:
            start = self.n_frames // 2
            self.epc_range = (start, start + EPC_BYTES // PAGE_SIZE)
            if self.epc_range[1] > self.n_frames:
                raise ValueError("memory too small for a 128 MiB EPC")
            self.owner[start:self.epc_range[1]] = EPC
        free = np.nonzero((self.owner == FREE) & (self.partition >= 0))[0]
        self.pools = {p: IndexedSet(self.n_frames, free[self.partition[free] == p]) for p in (0, 1)}

    def pool_for(self, owner: int) -> int:
        if self.allocator == "default":
            return 0
        return 0 if owner == KERNEL else 1

    def free_pool(self, owner: int = USER) -> IndexedSet:
        return self.pools[self.pool_for(owner)]

    def take(self, frame: int, owner: int, tag: int = 0) -> int:
        """Claim a specific free frame."""
        if self.owner[frame] != FREE or self.partition[frame] < 0:
            raise ValueError(f"frame {frame} is not allocatable")
        pool = self.pools[int(self.partition[frame])]
        if self.allocator == "catt" and int(self.partition[frame]) != self.pool_for(owner):
            raise ValueError(f"frame {frame} lies outside the {OWNER_NAMES[owner]} partition")
        pool.remove(frame)
        self.owner[frame] = owner
        self.tag[frame] = tag
        return frame

    def alloc_frame(self, owner: int, rng: np.random.Generator, tag: int = 0) -> int:
        """Uniformly random free frame from the owner's partition."""
        pool = self.free_pool(owner)
        if not len(pool):
            raise OutOfMemory(f"no free frame for {OWNER_NAMES[owner]}")
        frame = pool.pop_random(rng)
        self.owner[frame] = owner
        self.tag[frame] = tag
        return frame

    def alloc_many(self, count: int, owner: int, rng: np.random.Generator, tag: int = 0) -> np.ndarray:
        pool = self.free_pool(owner)
        if count > len(pool):
            raise OutOfMemory(f"{count} frames requested, {len(pool)} free")
        frames = pool.pop_many(count, rng)
        self.owner[frames] = owner
        self.tag[frames] = tag
        return frames

    def release(self, frame: int) -> None:
        if self.owner[frame] in (FREE, EPC):
            raise ValueError(f"frame {frame} cannot be freed")
        self.owner[frame] = FREE
        self.tag[frame] = 0
        self.pools[int(self.partition[frame])].add(frame)

    def release_many(self, frames) -> None:
        frames = np.asarray(frames, np.int64)
        self.owner[frames] = FREE
        self.tag[frames] = 0
        for p in (0, 1):
            self.pools[p].add_many(frames[self.partition[frames] == p])

    def counts(self) -> dict:
        return {name: int(np.count_nonzero(self.owner == i)) for i, name in enumerate(OWNER_NAMES)}

    def kernel_frames(self) -> np.ndarray:
        return np.nonzero(self.owner == KERNEL)[0]

    def is_kernel(self, frame: int) -> bool:
        return self.owner[frame] == KERNEL

    def in_epc(self, frame: int) -> bool:
        return self.epc_range is not None and self.epc_range[0] <= frame < self.epc_range[1]


def direct_map(frame: int) -> int:
    """Kernel virtual address of a frame in the direct-physical map."""
    return DIRECT_MAP_BASE + frame * PAGE_SIZE


def direct_map_frame(vaddr: int) -> int:
    if vaddr < DIRECT_MAP_BASE or (vaddr - DIRECT_MAP_BASE) % PAGE_SIZE:
        raise ValueError("not a page-aligned direct-map address")
    return (vaddr - DIRECT_MAP_BASE) // PAGE_SIZE


class BackingStore:
    """In-memory file images; pages past the end read as zeros."""

    def __init__(self):
        self._files: dict[str, bytes] = {}

    def register(self, file_id: str, data: bytes) -> None:
        self._files[file_id] = bytes(data)

    def __contains__(self, file_id) -> bool:
        return file_id in self._files

    def page(self, file_id: str, index: int) -> bytes:
        data = self._files.get(file_id, b"")
        chunk = data[index * PAGE_SIZE:(index + 1) * PAGE_SIZE]
        return chunk + bytes(PAGE_SIZE - len(chunk))


@dataclass
class _Run:
    file: str
    count: int


@dataclass
class _Page:
    key: tuple
    alive: bool = True


@dataclass
class CachedPage:
    frame: int
    executable: bool
    entry: _Page
    pinned: bool = False


class PageCache:
    """File pages in otherwise free frames, with FIFO age per executable class.

    Reclaim takes the oldest non-executable page first; executable pages go
    only when no non-executable page is left. Pinned pages are never taken.
    """

    def __init__(self, frames: FrameTable, rng: np.random.Generator, memory: PhysicalMemory | None = None,
                 store: BackingStore | None = None):
        self.frames = frames
        self.rng = rng
        self.memory = memory
        self.store = store or BackingStore()
        self.pages: dict[tuple, CachedPage] = {}
        self.fifo = {True: deque(), False: deque()}
        self.bulk = IndexedSet(frames.n_frames)  # frames holding run pages
        self.run_pages = {True: 0, False: 0}
        self.singles = {True: 0, False: 0}  # unpinned single pages per class
        self.evictions = 0

    # -- inspection ----------------------------------------------------
    def mincore(self, key) -> bool:
        return key in self.pages

    def frame_of(self, key) -> int | None:
        page = self.pages.get(key)
        return None if page is None else page.frame

    @property
    def size(self) -> int:
        return len(self.pages) + len(self.bulk)

    @property
    def pool_size(self) -> int:
        """Frames a new page can land on: free frames plus bulk cache frames."""
        return len(self.frames.free_pool(USER)) + len(self.bulk)

    def reclaimable(self, executable: bool) -> int:
        return self.run_pages[executable] + self.singles[executable]

    # -- bulk content ----------------------------------------------------
    def add_run(self, file: str, frames, executable: bool) -> None:
        """Register already-claimed frames as a run of bulk pages (newest)."""
        frames = np.asarray(frames, np.int64)
        if not len(frames):
            return
        self.frames.owner[frames] = CACHE
        self.bulk.add_many(frames)
        self._push_run(file, len(frames), executable)

    def _push_run(self, file: str, count: int, executable: bool) -> None:
        q = self.fifo[executable]
        if q and isinstance(q[-1], _Run) and q[-1].file == file:
            q[-1].count += count
        else:
            q.append(_Run(file, count))
        self.run_pages[executable] += count

    def _take_from_oldest_run(self, executable: bool, count: int) -> int:
        q = self.fifo[executable]
        taken = 0
        for entry in q:
            if taken == count:
                break
            if isinstance(entry, _Run) and entry.count:
                k = min(entry.count, count - taken)
                entry.count -= k
                taken += k
        while q and ((isinstance(q[0], _Run) and q[0].count == 0) or (isinstance(q[0], _Page) and not q[0].alive)):
            q.popleft()
        self.run_pages[executable] -= taken
        return taken

    def _victim_class(self, executable: bool) -> bool:
        if self.reclaimable(False):
            return False
        if self.reclaimable(True):
            return True
        raise OutOfMemory("page cache has nothing left to reclaim")

    # -- single pages ----------------------------------------------------
    def _register(self, key, frame: int, executable: bool, content: bytes | None) -> int:
        self.frames.owner[frame] = CACHE
        entry = _Page(key)
        self.fifo[executable].append(entry)
        self.pages[key] = CachedPage(frame, executable, entry)
        self.singles[executable] += 1
        if self.memory is not None:
            if content is None:
                content = self.store.page(*key) if key[0] in self.store else None
            if content is None:
                self.memory.reset(frame)
            else:
                self.memory.write_page(frame, content)
        return frame

    def fault_in(self, key, executable: bool = True, content: bytes | None = None,
                 frame: int | None = None) -> int:
        """Bring a file page into the cache at a random frame (or the given free frame)."""
        if key in self.pages:
            return self.pages[key].frame
        if frame is None:
            frame = self.allocate(executable)
        else:
            self.frames.take(frame, CACHE)
        return self._register(key, frame, executable, content)

    def allocate(self, executable: bool, owner: int = CACHE) -> int:
        """A frame for one new page: uniform over free frames and bulk cache frames.

        Taking a bulk frame drops one page from the oldest run of the class
        the reclaim policy would evict.
        """
        free = self.frames.free_pool(owner)
        n_free, n_bulk = len(free), len(self.bulk)
        if n_free + n_bulk == 0:
            victim = self._evict_oldest(self._victim_class(executable))
            self.frames.release(victim)
            n_free = len(free)
        i = int(self.rng.integers(0, n_free + n_bulk))
        if i < n_free:
            frame = free.at(i)
            self.frames.take(frame, owner)
            return frame
        frame = self.bulk.at(i - n_free)
        victim_class = False if self.run_pages[False] else True
        if not self.run_pages[victim_class]:
            victim_class = not victim_class
        self._take_from_oldest_run(victim_class, 1)
        self.bulk.remove(frame)
        self.frames.owner[frame] = owner
        self.frames.tag[frame] = 0
        return frame

    def _evict_oldest(self, executable: bool) -> int:
        """Evict the oldest unpinned single page of a class; returns its frame."""
        for entry in self.fifo[executable]:
            if isinstance(entry, _Page) and entry.alive and not self.pages[entry.key].pinned:
                return self.evict(entry.key)
        raise OutOfMemory("no single page to evict")

    def evict(self, key) -> int:
        """Drop a page; its frame becomes free. Returns the frame."""
        page = self.pages.pop(key)
        page.entry.alive = False
        if not page.pinned:
            self.singles[page.executable] -= 1
        self.frames.release(page.frame)
        self.evictions += 1
        return page.frame

    def pin(self, key, pinned: bool = True) -> None:
        page = self.pages[key]
        if page.pinned != pinned:
            self.singles[page.executable] += -1 if pinned else 1
        page.pinned = pinned

    # -- filling ---------------------------------------------------------
    def fill(self, file: str, count: int, executable: bool = True, stop_key=None,
             owner: int = CACHE, tag: int = 0) -> tuple[int, bool]:
        """Access count new pages sequentially.

        Pages go to free frames first, then displace the reclaim victims in
        order. With owner=USER the pages are anonymous memory and leave the
        cache accounting. Stops right after stop_key is evicted. Returns the
        pages accessed and whether stop_key was evicted.
        """
        done = 0
        free = self.frames.free_pool(owner)
        new_frames: list[np.ndarray] = []
        evicted = False
        while done < count:
            if len(free):
                k = min(len(free), count - done)
                frames = free.pop_many(k, self.rng)
                self.frames.owner[frames] = owner
                if owner == CACHE:
                    self.bulk.add_many(frames)
                    self._push_run(file, k, executable)
                else:
                    new_frames.append(frames)
                done += k
                continue
            cls = self._victim_class(executable if owner == CACHE else False)
            entry = self._oldest_entry(cls)
            if isinstance(entry, _Run):
                k = min(entry.count, count - done)
                self._take_from_oldest_run(cls, k)
                if owner == CACHE:
                    self._push_run(file, k, executable)
                else:
                    frames = self.bulk.items[:k].copy()  # bulk frames are interchangeable
                    self.bulk.remove_many(frames)
                    self.frames.owner[frames] = owner
                    new_frames.append(frames)
                done += k
            else:
                frame = self.evict(entry.key)
                self.frames.take(frame, owner)
                if owner == CACHE:
                    self.bulk.add(frame)
                    self._push_run(file, 1, executable)
                else:
                    new_frames.append(np.array([frame]))
                done += 1
                if entry.key == stop_key:
                    evicted = True
                    break
        self.last_fill_frames = np.concatenate(new_frames) if new_frames else np.empty(0, np.int64)
        if owner != CACHE:
            self.frames.tag[self.last_fill_frames] = tag
        return done, evicted

    def _oldest_entry(self, executable: bool):
        q = self.fifo[executable]
        while q and ((isinstance(q[0], _Run) and q[0].count == 0) or (isinstance(q[0], _Page) and not q[0].alive)):
            q.popleft()
        for entry in q:
            if isinstance(entry, _Run) and entry.count:
                return entry
            if isinstance(entry, _Page) and entry.alive and not self.pages[entry.key].pinned:
                return entry
        raise OutOfMemory("no reclaimable page in class")


@dataclass
class Mapping:
    kind: str  # "anon" or "file"
    frame: int | None = None  # anon pages
    key: tuple | None = None  # file pages
    perms: str = "r"
    private: bool = True
    dirty: bool = False


class RegionMap(dict):
    """vpage -> Mapping that keeps a running count of anonymous mappings."""

    def __init__(self):
        super().__init__()
        self.anon = 0

    def __setitem__(self, vpage, m):
        old = super().get(vpage)
        self.anon += (m.kind == "anon") - (old is not None and old.kind == "anon")
        super().__setitem__(vpage, m)

    def __delitem__(self, vpage):
        self.pop(vpage)

    def pop(self, vpage, *default):
        if vpage not in self:
            return super().pop(vpage, *default)
        m = super().pop(vpage)
        self.anon -= m.kind == "anon"
        return m


@dataclass
class ProcessModel:
    pid: int
    enclave: bool = False
    alive: bool = True
    regions: RegionMap = field(default_factory=RegionMap)
    anon_frames: list = field(default_factory=list)  # arrays of bulk anonymous frames

    @property
    def bulk_anon(self) -> int:
        return sum(len(a) for a in self.anon_frames)

    @property
    def private_pages(self) -> int:
        return self.regions.anon + self.bulk_anon

    @property
    def resident_bytes(self) -> int:
        """Private frames only; page-cache pages never count."""
        return self.private_pages * PAGE_SIZE


class OSModel:
    """Frames, page cache and processes on one simulated machine."""

    def __init__(self, frames: FrameTable, rng: np.random.Generator, memory: PhysicalMemory | None = None,
                 store: BackingStore | None = None):
        self.frames = frames
        self.rng = rng
        self.memory = memory
        self.cache = PageCache(frames, rng, memory, store)
        self.processes: dict[int, ProcessModel] = {}
        self._refs: dict[int, int] = {}  # frame -> number of anon mappings sharing it
        self.noops: list[tuple] = []
        self._next_pid = 100

    @property
    def total_bytes(self) -> int:
        return self.frames.n_frames * PAGE_SIZE

    def usage_fraction(self) -> float:
        """Share of memory that is neither free nor page cache."""
        free = len(self.frames.pools[0]) + len(self.frames.pools[1])
        return 1.0 - (free + self.cache.size) / self.frames.n_frames

    # -- processes -------------------------------------------------------
    def spawn(self, enclave: bool = False, pid: int | None = None) -> ProcessModel:
        if pid is None:
            pid = self._next_pid
            self._next_pid += 1
        proc = ProcessModel(pid, enclave)
        self.processes[pid] = proc
        return proc

    def _proc(self, pid: int) -> ProcessModel:
        proc = self.processes.get(pid)
        if proc is None or not proc.alive:
            raise LookupError(f"no live process {pid}")
        return proc

    def map_anon(self, pid: int, vpage: int, perms: str = "rw") -> int:
        proc = self._proc(pid)
        frame = self.cache.allocate(False, owner=USER)
        self.frames.tag[frame] = pid
        if self.memory is not None:
            self.memory.reset(frame)
        proc.regions[vpage] = Mapping("anon", frame=frame, perms=perms)
        self._refs[frame] = 1
        return frame

    def map_file(self, pid: int, vpage: int, key, executable: bool = True, private: bool = False) -> int:
        proc = self._proc(pid)
        frame = self.cache.fault_in(key, executable)
        proc.regions[vpage] = Mapping("file", key=key, perms="rx" if executable else "r", private=private)
        return frame

    def unmap(self, pid: int, vpage: int) -> None:
        proc = self._proc(pid)
        m = proc.regions.pop(vpage)
        if m.kind == "anon":
            self._drop_ref(m.frame)

    def _drop_ref(self, frame: int) -> None:
        self._refs[frame] -= 1
        if self._refs[frame] == 0:
            del self._refs[frame]
            self.frames.release(frame)

    def translate(self, pid: int, vpage: int) -> int:
        """Frame backing a virtual page; file pages fault in on demand."""
        proc = self._proc(pid)
        m = proc.regions.get(vpage)
        if m is None:
            raise PageFault(f"pid {pid}: page {vpage:#x} not mapped")
        if m.kind == "anon":
            return m.frame
        frame = self.cache.frame_of(m.key)
        if frame is None:
            frame = self.cache.fault_in(m.key, "x" in m.perms)
        return frame

    def resident_frame(self, pid: int, vpage: int) -> int | None:
        """Frame if currently resident, without faulting."""
        m = self._proc(pid).regions.get(vpage)
        if m is None:
            raise PageFault(f"pid {pid}: page {vpage:#x} not mapped")
        return m.frame if m.kind == "anon" else self.cache.frame_of(m.key)

    def fork_cow(self, pid: int) -> ProcessModel:
        """Child shares every anonymous frame copy-on-write."""
        parent = self._proc(pid)
        child = self.spawn(parent.enclave)
        for vpage, m in parent.regions.items():
            child.regions[vpage] = Mapping(m.kind, m.frame, m.key, m.perms, m.private, m.dirty)
            if m.kind == "anon":
                self._refs[m.frame] += 1
        return child

    def write_private(self, pid: int, vpage: int) -> int:
        """First write to a shared private page copies it to a fresh random frame."""
        proc = self._proc(pid)
        m = proc.regions.get(vpage)
        if m is None:
            raise PageFault(f"pid {pid}: write to unmapped page {vpage:#x}")
        if not m.private:
            raise PageFault(f"pid {pid}: page {vpage:#x} is shared")
        if m.kind == "file":
            source = self.translate(pid, vpage)
        elif self._refs[m.frame] > 1:
            source = m.frame
        else:
            m.dirty = True
            return m.frame
        content = self.memory.read_page(source) if self.memory is not None else None
        frame = self.cache.allocate(False, owner=USER)
        self.frames.tag[frame] = pid
        if content is not None:
            self.memory.write_page(frame, content)
        if m.kind == "anon":
            self._drop_ref(m.frame)
        self._refs[frame] = 1
        proc.regions[vpage] = Mapping("anon", frame=frame, perms=m.perms, private=True, dirty=True)
        return frame

    def kill(self, pid: int) -> None:
        proc = self._proc(pid)
        for vpage in list(proc.regions):
            self.unmap(pid, vpage)
        if proc.anon_frames:
            self.frames.release_many(np.concatenate(proc.anon_frames))
            proc.anon_frames = []
        proc.alive = False

    def alloc_bulk_anon(self, pid: int, pages: int, stop_key=None) -> tuple[int, bool]:
        """Anonymous memory in bulk; displaces page cache once free frames run out."""
        proc = self._proc(pid)
        done, evicted = self.cache.fill("anonymous", pages, executable=False, stop_key=stop_key,
                                        owner=USER, tag=pid)
        proc.anon_frames.append(self.cache.last_fill_frames)
        return done, evicted

    # -- content ---------------------------------------------------------
    def read_page(self, frame: int) -> bytes:
        return self.memory.read_page(frame)

    def flip_bit_in_frame(self, frame: int, bit: int, direction: str) -> bool:
        """Apply one flip; a direction that disagrees with the bit is a logged no-op."""
        if self.frames.owner[frame] == FREE:
            raise ValueError(f"frame {frame} is free")
        current = self.memory.get_bit(frame, bit)
        if current != (0 if direction == "0to1" else 1):
            self.noops.append((frame, bit, direction))
            return False
        self.memory.toggle_bit(frame, bit)
        return True

    def check_partition(self) -> bool:
        """Every frame is owned exactly once and the pools hold exactly the free frames."""
        free = np.zeros(self.frames.n_frames, bool)
        for pool in self.frames.pools.values():
            free[pool.items] = True
        gap = self.frames.partition < 0
        owned_free = self.frames.owner == FREE
        cache = np.zeros(self.frames.n_frames, bool)
        cache[self.cache.bulk.items] = True
        for p in self.cache.pages.values():
            cache[p.frame] = True
        return bool(np.array_equal(free, owned_free & ~gap)
                    and np.array_equal(cache, self.frames.owner == CACHE)
                    and self.cache.run_pages[True] + self.cache.run_pages[False] == len(self.cache.bulk))


@dataclass(frozen=True)
class SystemLayout:
    """Memory occupation before the attack, as fractions of allocatable frames.

    Whatever is left after the kernel, other processes, executable cache and
    free frames is non-executable page cache.
    """
    occupied: float = 0.52  # kernel plus other processes
    kernel: float = 0.04
    executable_cache: float = 0.06
    free: float = 0.02

    def validate(self) -> None:
        parts = (self.occupied, self.kernel, self.executable_cache, self.free)
        if any(p < 0 for p in parts) or self.occupied + self.executable_cache + self.free > 1 \
                or self.kernel > self.occupied:
            raise ValueError("layout fractions must be non-negative and sum to at most 1")


TARGET_FILE = "sudoers.so"
WORKLOAD_PID = 1


def build_system(n_frames: int, rng: np.random.Generator, layout: SystemLayout | None = None,
                 geometry: DramGeometry | None = None, allocator: str = "default",
                 memory: PhysicalMemory | None = None, store: BackingStore | None = None,
                 target=(TARGET_FILE, 8), epc: bool = False) -> OSModel:
    """Machine with the victim workload loaded and the target page cached.

    The target sits at a uniformly random age among the executable pages.
    One in 64 kernel frames holds page tables.
    """
    layout = layout or SystemLayout()
    layout.validate()
    frames = FrameTable(n_frames, geometry, allocator, epc=epc)
    os_ = OSModel(frames, rng, memory, store)
    usable = len(frames.pools[0]) + len(frames.pools[1])

    def n(frac):
        return int(round(frac * usable))

    kernel = frames.alloc_many(n(layout.kernel), KERNEL, rng)
    frames.tag[kernel[:max(1, len(kernel) // 64)] if len(kernel) else kernel] = PAGE_TABLE_TAG
    frames.alloc_many(n(layout.occupied - layout.kernel), USER, rng, tag=WORKLOAD_PID)
    n_exec = n(layout.executable_cache)
    if target is not None:
        n_exec = max(n_exec, 1)
    n_nonexec = len(frames.free_pool(USER)) - n_exec - n(layout.free)
    if n_nonexec < 0:
        raise ValueError("layout leaves no room")
    cache = os_.cache
    cache.add_run("workload-data", frames.alloc_many(n_nonexec, CACHE, rng), executable=False)
    if target is None:
        cache.add_run("workload-bin", frames.alloc_many(n_exec, CACHE, rng), executable=True)
        return os_
    older = int(rng.integers(0, max(n_exec, 1)))
    cache.add_run("workload-bin", frames.alloc_many(older, CACHE, rng), executable=True)
    cache._register(tuple(target), frames.alloc_frame(CACHE, rng), True, None)
    cache.add_run("workload-lib", frames.alloc_many(max(n_exec - older - 1, 0), CACHE, rng), executable=True)
    return os_
