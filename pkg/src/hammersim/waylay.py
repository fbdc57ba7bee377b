"""Page-cache eviction, memory waylaying and memory chasing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import oracle as oracle_mod
from .oracle import OracleConfig
from .osmodel import USER, Mapping, OSModel
from .physmem import PAGE_SIZE

MIB = 2**20
CHASE_ITERATION_S = 36.7e-6
FOOTPRINT_BOUND_BYTES = 64 * MIB
WORKING_SET_BYTES = 2 * MIB
OOM_KILL_PROBABILITY = 0.0078
OOM_REGIME = 0.90
FILLER_FILE = "filler.bin"


@dataclass(frozen=True)
class EvictionProfile:
    name: str
    page_cost_s: float  # simulated cost of faulting one filler page during a fill
    abort_via_mincore: bool = True
    fixed_elapsed_s: float | None = None
    fault_cost_s: float = 50e-6  # a single page fault from backing store


# 2.68 s for 5544 MiB of filler pages
LINUX = EvictionProfile("linux", 2.68 / (5544 * MIB // PAGE_SIZE))
WINDOWS = EvictionProfile("windows", 2.68 / (5544 * MIB // PAGE_SIZE), abort_via_mincore=False,
                          fixed_elapsed_s=10.10)
PROFILES = {"linux": LINUX, "windows": WINDOWS}


@dataclass(frozen=True)
class EvictionRun:
    pages: int
    elapsed_s: float
    target_evicted: bool
    peak_rss_bytes: int
    peak_usage: float  # share of memory neither free nor page cache
    killed: bool = False

    @property
    def data_mb(self) -> float:
        return self.pages * PAGE_SIZE / MIB


@dataclass
class WaylayResult:
    iterations: int = 0
    final_frame: int | None = None
    elapsed_s: float = 0.0
    oracle_trials: int = 0
    success: bool = False
    peak_rss_bytes: int = 0
    oom_killed: bool = False
    peak_usage: float = 0.0
    pid: int | None = None  # process holding the mapping at the end
    history: list = field(default_factory=list)  # (iteration, frame, elapsed_s, rss_bytes)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "frame", "elapsed_s", "resident_bytes"])
            for it, frame, elapsed, rss in self.history:
                w.writerow([it, frame, f"{elapsed:.6f}", rss])


def ensure_working_set(os_: OSModel, pid: int, nbytes: int = WORKING_SET_BYTES) -> None:
    """Give the attacker its small private buffer (counts toward its resident set)."""
    proc = os_.processes[pid]
    pages = nbytes // PAGE_SIZE - proc.bulk_anon
    if pages > 0:
        os_.alloc_bulk_anon(pid, pages)


def evict_target(os_: OSModel, key, profile: EvictionProfile = LINUX, pid: int | None = None) -> EvictionRun:
    """Stream read-only executable filler pages until the target leaves the cache."""
    cache = os_.cache
    if not cache.mincore(key):
        raise ValueError(f"target {key} is not cached")
    rss = os_.processes[pid].resident_bytes if pid is not None else 0
    if profile.abort_via_mincore:
        pages, evicted = cache.fill(FILLER_FILE, 2**62, executable=True, stop_key=key)
    else:
        # no residency check: cycle everything that can be displaced
        budget = len(os_.frames.free_pool(USER)) + cache.reclaimable(False) + cache.reclaimable(True)
        pages, evicted = cache.fill(FILLER_FILE, budget, executable=True, stop_key=None)
        evicted = not cache.mincore(key)
    elapsed = profile.fixed_elapsed_s if profile.fixed_elapsed_s is not None else pages * profile.page_cost_s
    return EvictionRun(pages, elapsed, evicted, rss, os_.usage_fraction())


def exhaustion_evict(os_: OSModel, key, rng: np.random.Generator, profile: EvictionProfile = LINUX,
                     kill_probability: float = OOM_KILL_PROBABILITY, oom_regime: float = OOM_REGIME) -> EvictionRun:
    """Baseline: allocate anonymous memory until the target is reclaimed.

    Once usage enters the near-OOM regime the OOM killer takes the attacker
    with probability kill_probability. The attacker's memory is released at
    the end either way.
    """
    cache = os_.cache
    if not cache.mincore(key):
        raise ValueError(f"target {key} is not cached")
    proc = os_.spawn()
    pages, evicted = os_.alloc_bulk_anon(proc.pid, 2**62, stop_key=key)
    peak_rss = proc.resident_bytes
    peak_usage = os_.usage_fraction()
    killed = peak_usage >= oom_regime and rng.random() < kill_probability
    os_.kill(proc.pid)
    return EvictionRun(pages, pages * profile.page_cost_s, evicted, peak_rss, peak_usage, killed)


def waylay_until(os_: OSModel, config: OracleConfig, rng: np.random.Generator, pid: int, vpage: int,
                 target_frames, max_iterations: int, profile: EvictionProfile = LINUX,
                 record: bool = True, strategy: str = "page_cache") -> WaylayResult:
    """Evict the target page, fault it back to a fresh frame, ask the oracle; repeat.

    strategy "exhaustion" evicts with the memory-exhaustion baseline instead of
    page-cache filling; an OOM kill ends the run.
    """
    if strategy not in ("page_cache", "exhaustion"):
        raise ValueError("strategy must be 'page_cache' or 'exhaustion'")
    if len(target_frames) == 0:
        raise ValueError("target frame set is empty")
    targets = frozenset(int(f) for f in target_frames)
    proc = os_.processes[pid]
    key = proc.regions[vpage].key
    ensure_working_set(os_, pid)
    res = WaylayResult()
    frame = os_.translate(pid, vpage)
    while res.iterations < max_iterations:
        res.iterations += 1
        if res.iterations > 1 or frame not in targets:
            if strategy == "exhaustion":
                run = exhaustion_evict(os_, key, rng, profile)
                res.peak_rss_bytes = max(res.peak_rss_bytes, run.peak_rss_bytes)
            else:
                run = evict_target(os_, key, profile, pid)
            res.peak_usage = max(res.peak_usage, run.peak_usage)
            res.elapsed_s += run.elapsed_s + profile.fault_cost_s
            if run.killed:
                res.oom_killed = True
                break
            frame = os_.translate(pid, vpage)
        found, cost = oracle_mod.scan(os_, pid, vpage, targets, config, rng)
        res.elapsed_s += cost
        res.oracle_trials += 1
        res.peak_rss_bytes = max(res.peak_rss_bytes, proc.resident_bytes)
        res.peak_usage = max(res.peak_usage, os_.usage_fraction())
        if record:
            res.history.append((res.iterations, frame, res.elapsed_s, proc.resident_bytes))
        if found is not None:
            res.success, res.final_frame = True, found
            break
    if not res.success:
        res.final_frame = os_.resident_frame(pid, vpage)
    return res


def chase_until(os_: OSModel, config: OracleConfig, rng: np.random.Generator, pid: int, vpage: int,
                target_frames, max_iterations: int, profile: EvictionProfile = LINUX,
                record: bool = True) -> WaylayResult:
    """Relocate a private copy through fork and copy-on-write, then hand its frame to the cache.

    pid must have the target file page mapped private at vpage. On success the
    cached copy of the page occupies the matched frame.
    """
    if len(target_frames) == 0:
        raise ValueError("target frame set is empty")
    targets = frozenset(int(f) for f in target_frames)
    key = os_.processes[pid].regions[vpage].key
    ensure_working_set(os_, pid)
    res = WaylayResult()
    current = pid
    while res.iterations < max_iterations:
        res.iterations += 1
        child = os_.fork_cow(current)
        frame = os_.write_private(child.pid, vpage)
        parent = os_.processes[current]
        child.anon_frames, parent.anon_frames = parent.anon_frames, []  # buffer moves to the survivor
        os_.kill(current)
        current = child.pid
        res.elapsed_s += CHASE_ITERATION_S
        found, cost = oracle_mod.scan(os_, current, vpage, targets, config, rng)
        res.elapsed_s += cost
        res.oracle_trials += 1
        rss = os_.processes[current].resident_bytes
        res.peak_rss_bytes = max(res.peak_rss_bytes, rss)
        if record:
            res.history.append((res.iterations, frame, res.elapsed_s, rss))
        if found is not None:
            res.success, res.final_frame = True, found
            break
    res.pid = current
    if not res.success:
        return res
    # swap the positioned frame into the page cache
    if os_.cache.mincore(key):
        run = evict_target(os_, key, profile, current)
        res.elapsed_s += run.elapsed_s
    os_.unmap(current, vpage)
    os_.cache.fault_in(key, executable=True, frame=res.final_frame)
    os_.processes[current].regions[vpage] = Mapping("file", key=key, perms="rx", private=False)
    res.elapsed_s += profile.fault_cost_s
    return res


def expected_unique(pool: int, relocations: int) -> float:
    """Expected distinct frames after uniform relocations over a pool."""
    return pool * -math.expm1(relocations * math.log1p(-1 / pool))


def relocation_frames(os_: OSModel, key, relocations: int) -> np.ndarray:
    """Frames the page lands on over repeated evict-and-refault cycles (no fill cost)."""
    out = np.empty(relocations, np.int64)
    cache = os_.cache
    for i in range(relocations):
        cache.evict(key)
        out[i] = cache.fault_in(key)
    return out


def relocation_heatmap(frames: np.ndarray) -> list[tuple[int, int]]:
    values, counts = np.unique(frames, return_counts=True)
    return list(zip(values.tolist(), counts.tolist()))
