"""Software defense classes D1-D5 as monitors over recorded scenario data."""

from __future__ import annotations

import bisect
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .dram import DramGeometry, DramState, bank_row
from .osmodel import KERNEL, FrameTable
from .rng import substream

DEFENSES = ("D1", "D2", "D3", "D4", "D5")
DETECTED, CLEAN, PREVENTED = "detected", "clean", "prevented"
WINDOW_NS = 6_000_000
ATTACK_MARKERS = frozenset({"clflush", "hammer_loop"})


@dataclass(frozen=True)
class DefenseVerdict:
    defense: str
    outcome: str
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.outcome not in (DETECTED, CLEAN, PREVENTED):
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.outcome != CLEAN and not self.evidence:
            raise ValueError("detected and prevented verdicts need evidence")

    def to_dict(self) -> dict:
        return {"defense": self.defense, "outcome": self.outcome, "evidence": self.evidence}


@dataclass(frozen=True)
class DefenseConfig:
    enabled: tuple = DEFENSES
    window_ns: int = WINDOW_NS
    d2_miss_threshold: int = 10_000
    d3_stage1_threshold: int = 10_000
    d3_sample_size: int = 128
    d3_same_bank_rows: int = 2
    d3_access_floor: int = 1_000
    d3_min_samples: int = 3
    d5_bound: float = 0.5
    d5_oom_regime: float = 0.9

    def __post_init__(self):
        unknown = set(self.enabled) - set(DEFENSES)
        if unknown:
            raise ValueError(f"unknown defenses {sorted(unknown)}")
        for name in ("window_ns", "d2_miss_threshold", "d3_stage1_threshold", "d3_sample_size",
                     "d3_same_bank_rows", "d3_access_floor", "d3_min_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.d5_bound < 1 or not 0 < self.d5_oom_regime <= 1:
            raise ValueError("d5 bound and OOM regime must lie in (0, 1)")


# -- traces ---------------------------------------------------------------
@dataclass(frozen=True)
class Burst:
    """rounds x len(addresses) accesses; access j of round i at start + i*round + j*round/k."""
    start_ns: float
    round_ns: float
    rounds: int
    addresses: tuple
    pid: int
    enclave: bool = False
    miss: bool = True

    @property
    def end_ns(self) -> float:
        return self.start_ns + self.rounds * self.round_ns

    def counts_in(self, lo: float, hi: float) -> np.ndarray:
        """Accesses per address with timestamp in [lo, hi)."""
        k = len(self.addresses)
        s = self.start_ns + np.arange(k) * self.round_ns / k
        first = np.ceil((lo - s) / self.round_ns)
        last = np.ceil((hi - s) / self.round_ns)
        first = np.clip(first, 0, self.rounds)
        last = np.clip(last, 0, self.rounds)
        return (last - first).astype(np.int64)


class AccessTrace:
    """Time-ordered memory accesses, stored as bursts."""

    def __init__(self, bursts=()):
        self.bursts: list[Burst] = []
        self._starts: list[float] = []
        self._reach: list[float] = []  # running maximum of burst end times
        for b in bursts:
            self._append(b)

    def _append(self, burst: Burst) -> None:
        if self.bursts and burst.start_ns < self._starts[-1]:
            raise ValueError("trace timestamps must be non-decreasing")
        self.bursts.append(burst)
        self._starts.append(burst.start_ns)
        self._reach.append(max(burst.end_ns, self._reach[-1]) if self._reach else burst.end_ns)

    def add_burst(self, start_ns: float, round_ns: float, rounds: int, addresses, pid: int,
                  enclave: bool = False, miss: bool = True) -> None:
        if rounds <= 0:
            return
        self._append(Burst(float(start_ns), float(round_ns), int(rounds), tuple(int(a) for a in addresses),
                           pid, enclave, miss))

    def add_access(self, time_ns: float, pid: int, phys_addr: int, enclave: bool = False,
                   miss: bool = True) -> None:
        self.add_burst(time_ns, 1.0, 1, (phys_addr,), pid, enclave, miss)

    def __len__(self) -> int:
        return sum(b.rounds * len(b.addresses) for b in self.bursts)

    def records(self):
        """Every access as (ns, pid, enclave, addr, outcome); meant for small traces."""
        out = []
        for b in self.bursts:
            k = len(b.addresses)
            for i in range(b.rounds):
                for j, a in enumerate(b.addresses):
                    out.append((b.start_ns + i * b.round_ns + j * b.round_ns / k, b.pid, b.enclave, a,
                                "miss" if b.miss else "hit"))
        out.sort(key=lambda r: r[0])
        return out

    def with_enclave(self, enclave: bool, pids=None) -> "AccessTrace":
        return AccessTrace(replace(b, enclave=enclave) if pids is None or b.pid in pids else b
                           for b in self.bursts)

    def windows(self, window_ns: float) -> list[int]:
        """Grid windows worth inspecting: where each burst is densest.

        Interior windows of a burst see the same access counts up to one round,
        so each burst contributes the window around its midpoint, and short
        bursts the window they start in.
        """
        idx = set()
        for b in self.bursts:
            idx.add(int(((b.start_ns + b.end_ns) / 2) // window_ns))
            idx.add(int(b.start_ns // window_ns))
        return sorted(idx)

    def overlapping(self, lo: float, hi: float) -> list[Burst]:
        first = bisect.bisect_right(self._reach, lo)
        stop = bisect.bisect_left(self._starts, hi)
        return [b for b in self.bursts[first:stop] if b.end_ns > lo]

    def window_counts(self, w: int, window_ns: float):
        """(burst, per-address miss counts) for every burst active in window w."""
        lo, hi = w * window_ns, (w + 1) * window_ns
        out = []
        for b in self.overlapping(lo, hi):
            if b.miss:
                c = b.counts_in(lo, hi)
                if c.sum():
                    out.append((b, c))
        return out


# -- program descriptors (D1) --------------------------------------------
@dataclass(frozen=True)
class ProgramDescriptor:
    """What a static analyser can see of a program."""
    name: str
    visible_markers: frozenset = frozenset()
    enclave_code: bool = False


def attack_descriptor(enclave: bool) -> ProgramDescriptor:
    """Hammering code; inside an enclave none of it is visible to the host."""
    if enclave:
        return ProgramDescriptor("attacker", frozenset({"sgx_loader"}), enclave_code=True)
    return ProgramDescriptor("attacker", ATTACK_MARKERS | {"mmap", "fork"})


BENIGN = ProgramDescriptor("benign", frozenset({"mmap", "read", "write"}))


def d1_static_scan(program: ProgramDescriptor) -> DefenseVerdict:
    hits = sorted(program.visible_markers & ATTACK_MARKERS)
    if hits:
        return DefenseVerdict("D1", DETECTED, {"markers": hits, "program": program.name})
    return DefenseVerdict("D1", CLEAN, {"enclave_code": program.enclave_code} if program.enclave_code else {})


def d2_perf_counters(trace: AccessTrace, window_ns: float = WINDOW_NS, threshold: int = 10_000) -> DefenseVerdict:
    """Per-process cache misses per window; enclave activity is invisible to the counters."""
    if window_ns <= 0:
        raise ValueError("window must be positive")
    worst = (0, None, None)
    for w in trace.windows(window_ns):
        per_pid = defaultdict(int)
        for b, c in trace.window_counts(w, window_ns):
            if not b.enclave:
                per_pid[b.pid] += int(c.sum())
        for pid, misses in per_pid.items():
            if misses > worst[0]:
                worst = (misses, pid, w)
            if misses > threshold:
                return DefenseVerdict("D2", DETECTED, {"pid": pid, "window": w, "misses": misses,
                                                       "threshold": threshold})
    return DefenseVerdict("D2", CLEAN, {"max_misses": worst[0]} if worst[1] is not None else {})


def d3_anvil(trace: AccessTrace, geometry: DramGeometry, stage1_threshold: int = 10_000, sample_size: int = 128,
             same_bank_rows: int = 2, access_floor: int = 1_000, min_samples: int = 3,
             window_ns: float = WINDOW_NS, seed: int = 0, dram: DramState | None = None) -> DefenseVerdict:
    """Two-stage access-pattern analysis.

    Stage 1 flags windows with many misses. Stage 2 samples missed addresses
    in a flagged window; a row is hot when it collects at least min_samples
    samples and its estimated access count reaches access_floor. Detection
    needs same_bank_rows hot rows in one bank. On detection the rows next to
    the hot rows are refreshed in dram (when given).
    """
    for v in (stage1_threshold, sample_size, same_bank_rows, access_floor, min_samples):
        if v <= 0:
            raise ValueError("thresholds must be positive")
    flagged = 0
    for w in trace.windows(window_ns):
        active = trace.window_counts(w, window_ns)
        if not active:
            continue
        addrs = np.concatenate([np.asarray(b.addresses, np.int64) for b, _ in active])
        counts = np.concatenate([c for _, c in active])
        total = int(counts.sum())
        if total < stage1_threshold:
            continue
        flagged += 1
        rng = substream(seed, "anvil", w)
        samples = rng.multinomial(sample_size, counts / total)
        banks, rows = bank_row(addrs, geometry)
        per_row = defaultdict(int)
        for b, r, s in zip(banks.tolist(), rows.tolist(), samples.tolist()):
            per_row[(b, r)] += s
        hot = defaultdict(list)
        for (b, r), s in per_row.items():
            if s >= min_samples and s / sample_size * total >= access_floor:
                hot[b].append(r)
        for bank, hot_rows in sorted(hot.items()):
            if len(hot_rows) >= same_bank_rows:
                hot_rows = sorted(hot_rows)
                victims = sorted({v for r in hot_rows for v in (r - 1, r + 1)
                                  if 0 <= v < geometry.rows_per_bank})
                if dram is not None:
                    for v in victims:
                        dram.reset_stress(bank, v)
                return DefenseVerdict("D3", DETECTED, {"window": w, "misses": total, "bank": bank,
                                                       "rows": hot_rows, "refreshed": victims})
    return DefenseVerdict("D3", CLEAN, {"flagged_windows": flagged} if flagged else {})


def d4_catt_audit(frames: FrameTable, flips, target_kind: str = "user") -> DefenseVerdict:
    """Physical-isolation audit over committed flips.

    A flip inside a kernel frame is a violation. Otherwise a kernel-targeting
    attack counts as prevented under CATT, and a user-page target is outside
    what the defense covers.
    """
    kernel_flips = [f for f in flips if frames.owner[f.frame] == KERNEL]
    boundary = {"allocator": frames.allocator}
    if frames.allocator == "catt":
        boundary.update(kernel_rows=[0, frames.kernel_rows],
                        gap_rows=[frames.kernel_rows, frames.kernel_rows + frames.gap_rows])
    if kernel_flips:
        return DefenseVerdict("D4", DETECTED, {**boundary, "kernel_flips": len(kernel_flips),
                                               "frames": sorted({f.frame for f in kernel_flips})[:16]})
    if target_kind == "page_table" and frames.allocator == "catt":
        return DefenseVerdict("D4", PREVENTED, {**boundary, "kernel_flips": 0})
    return DefenseVerdict("D4", CLEAN, {})


def d5_footprint(timeline, total_bytes: int, bound: float = 0.5, oom_regime: float = 0.9) -> DefenseVerdict:
    """timeline: (time_s, attacker_resident_bytes, system_usage_fraction) samples."""
    if not 0 < bound < 1:
        raise ValueError("bound must lie in (0, 1)")
    for t, rss, usage in timeline:
        if rss > bound * total_bytes or usage >= oom_regime:
            return DefenseVerdict("D5", DETECTED, {"time_s": t, "resident_bytes": int(rss),
                                                   "usage": round(float(usage), 6)})
    peak = max((r for _, r, _ in timeline), default=0)
    return DefenseVerdict("D5", CLEAN, {"peak_resident_bytes": int(peak)} if timeline else {})


@dataclass
class DefenseInputs:
    """Everything a scenario recorded for the monitors."""
    geometry: DramGeometry
    trace: AccessTrace = field(default_factory=AccessTrace)
    program: ProgramDescriptor = BENIGN
    frames: FrameTable | None = None
    flips: list = field(default_factory=list)
    target_kind: str = "user"
    timeline: list = field(default_factory=list)
    total_bytes: int = 0
    seed: int = 0


def run_defense_suite(inputs: DefenseInputs, config: DefenseConfig | None = None) -> list[DefenseVerdict]:
    config = config or DefenseConfig()
    out = []
    for d in config.enabled:
        if d == "D1":
            out.append(d1_static_scan(inputs.program))
        elif d == "D2":
            out.append(d2_perf_counters(inputs.trace, config.window_ns, config.d2_miss_threshold))
        elif d == "D3":
            out.append(d3_anvil(inputs.trace, inputs.geometry, config.d3_stage1_threshold, config.d3_sample_size,
                                config.d3_same_bank_rows, config.d3_access_floor, config.d3_min_samples,
                                config.window_ns, inputs.seed))
        elif d == "D4":
            if inputs.frames is None:
                out.append(DefenseVerdict("D4", CLEAN, {}))
            else:
                out.append(d4_catt_audit(inputs.frames, inputs.flips, inputs.target_kind))
        elif d == "D5":
            out.append(d5_footprint(inputs.timeline, inputs.total_bytes or inputs.geometry.capacity,
                                    config.d5_bound, config.d5_oom_regime))
    return out


def verdict_matrix(rows: dict) -> dict:
    """Scenario name -> verdict list, laid out as scenarios x defense classes."""
    table = []
    for name in sorted(rows):
        entry = {"scenario": name}
        for v in rows[name]:
            entry[v.defense] = v.outcome
        table.append(entry)
    return {"columns": list(DEFENSES), "rows": table}


def write_verdicts(path, verdicts, matrix: dict | None = None) -> None:
    doc = {"verdicts": [v.to_dict() for v in verdicts]}
    if matrix is not None:
        doc["matrix"] = matrix
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, float) and math.isnan(obj):
        return None
    raise TypeError(f"not serializable: {type(obj)}")
