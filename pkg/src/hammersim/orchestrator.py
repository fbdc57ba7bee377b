"""Attack planning, end-to-end privilege escalation and enclave denial of service."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import profiles
from .calibration import rate_from_minutes
from .defenses import (AccessTrace, DefenseConfig, DefenseInputs, attack_descriptor, run_defense_suite,
                       verdict_matrix)
from .dram import ControllerPolicy, DramGeometry, DramState, MachineHalted, frame_locations
from .hammer import HammerTechnique, run_attempt, template_memory
from .opflip.database import load_flip_database, synthetic_image, target_page
from .oracle import OracleConfig
from .osmodel import EPC_BYTES, KERNEL, PAGE_TABLE_TAG, TARGET_FILE, BackingStore, SystemLayout, build_system
from .physmem import PAGE_SIZE, PhysicalMemory
from .rng import substream
from .waylay import CHASE_ITERATION_S, LINUX, chase_until, ensure_working_set, exhaustion_evict, waylay_until

HOUR = 3600.0
GIB = 2**30
ORACLE_TEST_S = 0.05
TRANSLATION_S_PER_GIB = 120.0
OFFSETS_PER_PAGE = 2**16  # 2^15 bit offsets x two directions
WAYLAY_W = 2.68
TEMPLATE_MINUTES = {"double_sided": 17, "single_sided": 19}
OL_FLIP_RATE = 0.67


# -- optimizer -------------------------------------------------------------
@dataclass(frozen=True)
class OptimizerInput:
    P: float = 12 * GIB
    W: float = WAYLAY_W
    F: float = OL_FLIP_RATE
    E: int = 29
    oracle_test_s: float = ORACLE_TEST_S
    translation_s_per_gib: float = TRANSLATION_S_PER_GIB
    offsets_per_page: int = OFFSETS_PER_PAGE

    def __post_init__(self):
        if min(self.P, self.F, self.E) <= 0 or self.W < 0:
            raise ValueError("P, F and E must be positive and W non-negative")
        if self.E > self.offsets_per_page:
            raise ValueError("E cannot exceed the offsets per page")

    @property
    def pages(self) -> float:
        return self.P / PAGE_SIZE

    @property
    def translation_s(self) -> float:
        return self.translation_s_per_gib * self.P / GIB


def templating_s(inp: OptimizerInput, n: int) -> float:
    return n * inp.offsets_per_page / (inp.F * inp.E) + inp.translation_s


def waylaying_s(inp: OptimizerInput, n: int) -> float:
    return inp.pages * (inp.W + n * inp.oracle_test_s) / n


def runtime(inp: OptimizerInput, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return waylaying_s(inp, n) + templating_s(inp, n)


def analytic_n(inp: OptimizerInput) -> float:
    """Minimiser of the continuous relaxation."""
    return math.sqrt(inp.pages * inp.W / (inp.offsets_per_page / (inp.F * inp.E)))


@dataclass(frozen=True)
class AttackPlan:
    n: int
    templating_s: float
    waylaying_s: float
    technique: str = ""
    method: str = "waylaying"

    @property
    def total_s(self) -> float:
        return self.templating_s + self.waylaying_s

    def hours(self) -> tuple[float, float, float]:
        return self.templating_s / HOUR, self.waylaying_s / HOUR, self.total_s / HOUR


def optimize_n(inp: OptimizerInput, bound: int = 100_000, technique: str = "", method: str = "waylaying") -> AttackPlan:
    """Exact integer minimum of the runtime by scanning n in [1, bound]."""
    if bound < 1:
        raise ValueError("bound must be >= 1")
    n = np.arange(1, bound + 1, dtype=float)
    total = inp.pages * (inp.W + n * inp.oracle_test_s) / n + n * inp.offsets_per_page / (inp.F * inp.E) \
        + inp.translation_s
    best = int(np.argmin(total)) + 1
    return AttackPlan(best, templating_s(inp, best), waylaying_s(inp, best), technique, method)


def technique_rates() -> dict[str, float]:
    rates = {k: rate_from_minutes(m) for k, m in TEMPLATE_MINUTES.items()}
    rates["one_location"] = OL_FLIP_RATE
    return rates


def chasing_w(P: float, eviction_s: float = WAYLAY_W) -> float:
    """Per-relocation cost: one fork/copy plus one eviction spread over the expected relocations."""
    return CHASE_ITERATION_S + eviction_s * PAGE_SIZE / P


def plan_table(P: float = 12 * GIB, E: int = 29, rates: dict | None = None,
               methods=("waylaying", "chasing")) -> list[AttackPlan]:
    rates = rates or technique_rates()
    rows = []
    for method in methods:
        w = WAYLAY_W if method == "waylaying" else chasing_w(P)
        for kind in ("double_sided", "single_sided", "one_location"):
            rows.append(optimize_n(OptimizerInput(P, w, rates[kind], E), technique=kind, method=method))
    return rows


def write_table_csv(plans, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["technique", "method", "n", "templating_h", "waylaying_h", "total_h"])
        for p in plans:
            w.writerow([p.technique, p.method, p.n, *(f"{h:.4f}" for h in p.hours())])


# -- scenarios -------------------------------------------------------------
@dataclass(frozen=True)
class AttackConfig:
    technique: str = "one_location"
    method: str = "waylaying"  # or "chasing"
    enclave: bool = True
    target: str = "opcode"  # opcode page of the target binary, or "page_table"
    eviction: str = "page_cache"  # or "exhaustion"
    oracle: str = "fast"
    template_fraction: float = 0.35  # share of memory the attacker maps for templating
    max_template_attempts: int = 150_000
    max_relocations: int = 1_000_000
    max_exploit_attempts: int = 4
    restore: bool = True

    def __post_init__(self):
        HammerTechnique(self.technique)
        if self.method not in ("waylaying", "chasing"):
            raise ValueError("method must be 'waylaying' or 'chasing'")
        if self.target not in ("opcode", "page_table"):
            raise ValueError("target must be 'opcode' or 'page_table'")
        if self.eviction not in ("page_cache", "exhaustion"):
            raise ValueError("eviction must be 'page_cache' or 'exhaustion'")
        OracleConfig(self.oracle)
        if not 0 < self.template_fraction < 0.5:
            raise ValueError("template_fraction must lie in (0, 0.5)")
        for name in ("max_template_attempts", "max_relocations", "max_exploit_attempts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


STEALTH = AttackConfig()
NAIVE = AttackConfig(technique="double_sided", enclave=False, target="page_table", eviction="exhaustion",
                     max_template_attempts=10_000)


@dataclass
class ScenarioOutcome:
    phases: list = field(default_factory=list)  # (phase, simulated seconds)
    privilege: str = "none"
    machine_state: str = "running"
    verdicts: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def phase(self, name: str, seconds: float) -> None:
        self.phases.append((name, float(seconds)))

    def duration(self, name: str) -> float:
        return sum(s for p, s in self.phases if p == name)

    @property
    def completed(self) -> list[str]:
        return [p for p, _ in self.phases]

    def to_dict(self) -> dict:
        out = {
            "privilege": self.privilege,
            "machine_state": self.machine_state,
            "phases": [{"phase": p, "seconds": round(s, 6)} for p, s in self.phases],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "diagnostics": self.diagnostics,
        }
        if self.verdicts:
            out["matrix"] = verdict_matrix({"scenario": self.verdicts})
        return out


@dataclass(frozen=True)
class _Candidate:
    aggressors: tuple
    frame: int
    bit: int
    direction: str


def _pristine_diff(content: bytes, pristine: bytes) -> list[tuple[int, str]]:
    a = np.frombuffer(content, np.uint8)
    b = np.frombuffer(pristine, np.uint8)
    diff = np.unpackbits(a ^ b, bitorder="little")
    bits = np.nonzero(diff)[0]
    old = np.unpackbits(b, bitorder="little")
    return [(int(i), "1to0" if old[i] else "0to1") for i in bits]


class _Machine:
    """One simulated host: DRAM, physical memory and OS sharing page contents."""

    def __init__(self, geometry: DramGeometry, policy: ControllerPolicy, cells, allocator: str, seed: int,
                 layout: SystemLayout | None = None):
        self.entries = load_flip_database()
        self.page_index, self.pristine = target_page(self.entries)
        self.key = (TARGET_FILE, self.page_index)
        self.memory = PhysicalMemory(geometry.n_frames, seed)
        store = BackingStore()
        store.register(TARGET_FILE, synthetic_image(self.entries, (self.page_index + 1) * PAGE_SIZE))
        self.os = build_system(geometry.n_frames, substream(seed, "os"), layout, geometry, allocator,
                               self.memory, store, target=self.key)
        self.dram = DramState(geometry, policy, cells, seed, memory=self.memory)
        self.pairs = {(e.page_bit, e.direction): e for e in self.entries if e.curated}

    def advance(self, seconds: float) -> None:
        self.dram.tick(seconds * 1e9)


def run_privilege_escalation(attack: AttackConfig = STEALTH, *, seed: int = 0,
                             geometry: DramGeometry = profiles.ESCALATION_GEOMETRY,
                             policy: ControllerPolicy | None = None, cells=profiles.DESKTOP_CELLS,
                             allocator: str = "catt", defenses: DefenseConfig | None = None,
                             layout: SystemLayout | None = None) -> ScenarioOutcome:
    """Templating, positioning, hammering and exploitation on one machine, then the defense suite."""
    policy = policy or ControllerPolicy()
    m = _Machine(geometry, policy, cells, allocator, seed, layout)
    os_, dram = m.os, m.dram
    out = ScenarioOutcome()
    trace = AccessTrace()
    timeline = []
    technique = HammerTechnique(attack.technique)
    attacker = os_.spawn(enclave=attack.enclave)

    # attacker buffer: file pages faulted one by one, invisible to its resident set
    n_tpl = int(attack.template_fraction * geometry.n_frames)
    owner = {}
    for i in range(n_tpl):
        key = ("attacker.bin", i)
        owner[os_.map_file(attacker.pid, 0x10000 + i, key, executable=False)] = (0x10000 + i, key)
    frames = np.array(sorted(owner), np.int64)
    timeline.append((0.0, attacker.resident_bytes, os_.usage_fraction()))

    if attack.target == "page_table":
        _page_table_attack(m, attack, technique, attacker.pid, frames, trace, out, seed)
    else:
        _opcode_attack(m, attack, technique, attacker.pid, frames, owner, trace, timeline, out, seed)
    elapsed = sum(s for _, s in out.phases)
    timeline.append((elapsed, os_.processes[attacker.pid].resident_bytes if attacker.alive else 0,
                     os_.usage_fraction()))
    timeline.extend(out.diagnostics.pop("_timeline", []))

    inputs = DefenseInputs(geometry, trace, attack_descriptor(attack.enclave), os_.frames, list(dram.flips),
                           "page_table" if attack.target == "page_table" else "user", sorted(timeline),
                           os_.total_bytes, seed)
    out.verdicts = run_defense_suite(inputs, defenses)
    out.diagnostics["partition_ok"] = os_.check_partition()
    return out


def _page_table_attack(m: _Machine, attack, technique, pid, frames, trace, out, seed) -> None:
    """Spray memory, then hammer until a page-table frame takes a flip."""
    os_, dram = m.os, m.dram
    if attack.eviction == "exhaustion":
        run = exhaustion_evict(os_, m.key, substream(seed, "spray"), LINUX)
        out.phase("spray", run.elapsed_s)
        out.diagnostics["_timeline"] = [(0.0, run.peak_rss_bytes, run.peak_usage)]
        out.diagnostics["spray_peak_usage"] = round(run.peak_usage, 6)
        if run.killed:
            out.diagnostics["failure"] = "oom_killed"
            return
    hit = []

    def page_table_flip(_flips, _addrs):
        new = [f for f in dram.flips[seen[0]:] if os_.frames.owner[f.frame] == KERNEL
               and os_.frames.tag[f.frame] == PAGE_TABLE_TAG]
        seen[0] = len(dram.flips)
        hit.extend(new)
        return bool(new)

    seen = [len(dram.flips)]
    report = template_memory(dram, technique, substream(seed, "template"), frames=frames,
                             max_attempts=attack.max_template_attempts, until=page_table_flip, trace=trace,
                             pid=pid, enclave=attack.enclave)
    out.phase("hammering", report.duration_s)
    out.diagnostics["hammer_attempts"] = report.attempts
    if hit:
        out.privilege = "root"
        out.diagnostics["page_table_flip"] = {"frame": hit[0].frame, "bit": hit[0].bit}
    else:
        out.diagnostics["failure"] = "no page-table flip within the attempt cap"


def _opcode_attack(m: _Machine, attack, technique, pid, frames, owner, trace, timeline, out, seed) -> None:
    os_, dram = m.os, m.dram
    rng = substream(seed, "template")
    oracle_rng = substream(seed, "oracle")
    oracle = OracleConfig(attack.oracle)
    attempts_left = attack.max_template_attempts
    hits: list[_Candidate] = []

    def matching(flips, addrs):
        per_frame = {}
        for f in flips:
            per_frame.setdefault(f.frame, []).append(f)
        for frame, fs in sorted(per_frame.items()):
            if len(fs) == 1 and (fs[0].bit, fs[0].direction) in m.pairs:
                hits.append(_Candidate(tuple(addrs), frame, fs[0].bit, fs[0].direction))
                return True
        return False

    target_vpage = 0x400
    os_.map_file(pid, target_vpage, m.key, executable=True, private=attack.method == "chasing")
    # allocate the private buffer up front so it cannot land on a released victim frame
    ensure_working_set(os_, pid)
    for attempt in range(attack.max_exploit_attempts):
        # templating
        report = template_memory(dram, technique, rng, frames=frames, max_attempts=attempts_left,
                                 until=matching, trace=trace, pid=pid, enclave=attack.enclave)
        attempts_left -= report.attempts
        out.phase("templating", report.duration_s)
        if len(hits) <= attempt:
            out.diagnostics["failure"] = "templating found no usable flip within the attempt cap"
            return
        cand = hits[attempt]
        out.diagnostics.setdefault("template_attempts", 0)
        out.diagnostics["template_attempts"] += report.attempts

        # keep the aggressor page, hand the victim frame back to the system
        aggressor_frames = {a // PAGE_SIZE for a in cand.aggressors}
        for frame in aggressor_frames:
            os_.cache.pin(owner[frame][1])
        vpage, key = owner[cand.frame]
        os_.unmap(pid, vpage)
        os_.cache.evict(key)
        frames = frames[frames != cand.frame]

        # positioning
        if attack.method == "chasing":
            res = chase_until(os_, oracle, oracle_rng, pid, target_vpage, [cand.frame], attack.max_relocations)
            if res.success:
                pid = res.pid
        else:
            res = waylay_until(os_, oracle, oracle_rng, pid, target_vpage, [cand.frame], attack.max_relocations,
                               strategy=attack.eviction)
        out.phase(attack.method, res.elapsed_s)
        out.diagnostics[f"{attack.method}_iterations"] = res.iterations
        timeline.append((sum(s for _, s in out.phases), res.peak_rss_bytes, res.peak_usage))
        dram.tick(res.elapsed_s * 1e9)
        if not res.success:
            out.diagnostics["failure"] = "oom_killed" if res.oom_killed else "positioning cap exceeded"
            return

        # hammering: repeat the stored attempt against the positioned page
        trace.add_burst(dram.clock_ns, 300, technique.rounds_per_attempt, cand.aggressors, pid, attack.enclave)
        run_attempt(dram, list(cand.aggressors), technique.rounds_per_attempt, technique.label,
                    profiles.ACTIVATION_SCALES[technique.kind])
        out.phase("hammering", technique.rounds_per_attempt * 300e-9)

        # exploitation
        frame = os_.cache.frame_of(m.key)
        diff = _pristine_diff(os_.read_page(frame), m.pristine)
        out.diagnostics["page_diff"] = [list(d) for d in diff]
        verified = len(diff) == 1 and diff[0] in m.pairs
        if attack.restore or not verified:
            os_.cache.evict(m.key)
            restored = os_.read_page(os_.translate(pid, target_vpage)) == m.pristine
            out.diagnostics["restored"] = restored
        if verified:
            entry = m.pairs[diff[0]]
            out.privilege = "root"
            out.phase("exploitation", 0.0)
            out.diagnostics["exploited"] = {"offset": f"0x{entry.offset:x}", "bit": entry.bit,
                                            "original": entry.original, "flipped": entry.flipped,
                                            "frame": int(frame)}
            return
        for frame in aggressor_frames:
            os_.cache.pin(owner[frame][1], False)
        # eviction pushed most of the buffer out; fault it back for the next round
        owner = {os_.translate(pid, vp): (vp, key) for vp, key in sorted(owner.values())}
        frames = np.array(sorted(owner), np.int64)
    out.diagnostics["failure"] = "no verified flip within the exploit attempt cap"


# -- denial of service -----------------------------------------------------
def epc_adjacent_frames(geometry: DramGeometry, epc_range: tuple[int, int]) -> np.ndarray:
    """Frames outside the EPC whose row neighbours an EPC row in the same bank."""
    banks, rows = frame_locations(geometry)
    start, end = epc_range
    keys = banks.astype(np.int64) * geometry.rows_per_bank + rows
    epc_keys = np.unique(keys[start:end])
    near = np.union1d(epc_keys - 1, epc_keys + 1)
    inside = np.zeros(len(keys), bool)
    inside[start:end] = True
    same_bank = np.isin(near // geometry.rows_per_bank, epc_keys // geometry.rows_per_bank)
    near = near[same_bank & (near >= 0)]
    return np.nonzero(np.isin(keys, near) & ~inside)[0]


def epc_range_for(geometry: DramGeometry) -> tuple[int, int]:
    start = geometry.n_frames // 2
    return start, start + EPC_BYTES // PAGE_SIZE


@dataclass(frozen=True)
class MachineSpec:
    name: str = "desktop"
    geometry: DramGeometry = profiles.DESKTOP_GEOMETRY
    cells: object = profiles.DESKTOP_CELLS
    policy: ControllerPolicy = ControllerPolicy()


def run_dos(machines, *, seed: int = 0, seek_cap_s: float = 8 * HOUR, destroy_cap_s: float = 60.0,
            destroy_window_factor: int = 2) -> list[ScenarioOutcome]:
    """Seek: template until any flip. Destroy: hammer rows next to the EPC until a flip halts the machine.

    Destroy attempts last destroy_window_factor refresh windows each, enough
    for a vulnerable row to commit its flip.
    """
    if not machines:
        raise ValueError("need at least one machine")
    states, outcomes, seek_end = [], [], []
    seek = HammerTechnique("one_location")
    for i, spec in enumerate(machines):
        epc = epc_range_for(spec.geometry)
        dram = DramState(spec.geometry, spec.policy, spec.cells, seed + i, integrity_frames=epc)
        report = template_memory(dram, seek, substream(seed, "seek", i), budget_s=seek_cap_s, target_flips=1,
                                 address_knowledge="none")
        out = ScenarioOutcome()
        out.phase("seek", report.duration_s)
        vulnerable = bool(report.flips) and not dram.halted
        out.diagnostics.update(machine=spec.name, vulnerable=vulnerable, epc_frames=list(epc),
                               seek_flips=len(report.flips))
        states.append((spec, dram, epc))
        outcomes.append(out)
        seek_end.append(report.duration_s)

    barrier = max(seek_end)
    for (spec, dram, epc), out in zip(states, outcomes):
        if not out.diagnostics["vulnerable"]:
            continue
        dram.tick((barrier - dram.clock_ns * 1e-9) * 1e9)  # wait for the fleet
        adjacent = epc_adjacent_frames(spec.geometry, epc)
        out.diagnostics["epc_adjacent_pages"] = int(len(adjacent))
        rng = substream(seed, "destroy", machines.index(spec))
        geo = spec.geometry
        rounds = destroy_window_factor * geo.effective_refresh_ns // 300
        start_ns = dram.clock_ns
        while dram.clock_ns - start_ns < destroy_cap_s * 1e9:
            frame = int(adjacent[rng.integers(0, len(adjacent))])
            try:
                run_attempt(dram, [frame * PAGE_SIZE + int(rng.integers(0, 64)) * 64], rounds, "ol",
                            profiles.ACTIVATION_SCALES["one_location"])
            except MachineHalted:
                pass
            if dram.halted:
                break
        if dram.halted:
            out.machine_state = "halted"
            out.phase("destroy", (dram.halt_time_ns - start_ns) * 1e-9)
            epc_flips = [f for f in dram.flips if epc[0] <= f.frame < epc[1]]
            out.diagnostics["halting_flip"] = {"frame": epc_flips[0].frame, "bit": epc_flips[0].bit}
        else:
            out.phase("destroy", (dram.clock_ns - start_ns) * 1e-9)
    return outcomes
