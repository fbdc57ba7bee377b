"""DRAM geometry, row-buffer controller, staggered refresh and the charge-drain flip model.

Time is kept internally in integer picoseconds so that per-access spacing of a
300 ns round split across k addresses stays exact; public fields report ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .physmem import PAGE_BITS, PAGE_SIZE, PhysicalMemory
from .rng import substream

ROW_HIT_NS = 50
ROW_CONFLICT_NS = 100
ROW_OPEN_NS = 100
ROUND_NS = 300  # one Flush+Reload round over all hammered addresses
TRR_THRESHOLD = 16_384  # activations of one row before its sampler refreshes neighbours

PAGE_POLICIES = ("open_page", "closed_page", "adaptive")
ROW_HIT, ROW_CONFLICT, ROW_OPEN = "row_hit", "row_conflict", "row_open"
_LATENCY = {ROW_HIT: ROW_HIT_NS, ROW_CONFLICT: ROW_CONFLICT_NS, ROW_OPEN: ROW_OPEN_NS}


class MachineHalted(RuntimeError):
    """Raised on any memory operation after an integrity-region flip."""


def _log2(value: int, name: str) -> int:
    if value < 1 or value & (value - 1):
        raise ValueError(f"{name} must be a power of two, got {value}")
    return value.bit_length() - 1


@dataclass(frozen=True)
class DramGeometry:
    channels: int = 2
    ranks: int = 2
    banks_per_rank: int = 16
    rows_per_bank: int = 32768
    row_size: int = 8192
    refresh_window_ns: int = 64_000_000
    refresh_mode: str = "normal"

    def __post_init__(self):
        for name in ("channels", "ranks", "banks_per_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        _log2(self.banks_total, "banks_total")
        _log2(self.rows_per_bank, "rows_per_bank")
        if _log2(self.row_size, "row_size") < 12:
            raise ValueError("row_size must be at least one 4 KiB page")
        if self.refresh_window_ns <= 0:
            raise ValueError("refresh_window_ns must be positive")
        if self.refresh_mode not in ("normal", "double"):
            raise ValueError("refresh_mode must be 'normal' or 'double'")

    @property
    def banks_total(self) -> int:
        return self.channels * self.ranks * self.banks_per_rank

    @property
    def capacity(self) -> int:
        return self.row_size * self.rows_per_bank * self.banks_total

    @property
    def n_frames(self) -> int:
        return self.capacity // PAGE_SIZE

    @property
    def column_bits(self) -> int:
        return self.row_size.bit_length() - 1

    @property
    def bank_bits(self) -> int:
        return self.banks_total.bit_length() - 1

    @property
    def row_bits(self) -> int:
        return self.row_size * 8

    @property
    def frames_per_row(self) -> int:
        return self.row_size // PAGE_SIZE

    @property
    def effective_refresh_ns(self) -> int:
        return self.refresh_window_ns // 2 if self.refresh_mode == "double" else self.refresh_window_ns


@dataclass(frozen=True)
class DramLocation:
    channel: int
    rank: int
    bank: int  # global bank index in [0, banks_total)
    row: int
    column: int


def _xor_shift(geometry: DramGeometry) -> int:
    return geometry.column_bits + 4


def bank_row(addrs, geometry: DramGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (bank, row) for byte addresses."""
    a = np.asarray(addrs, dtype=np.int64)
    mask = geometry.banks_total - 1
    bank = ((a >> geometry.column_bits) ^ (a >> _xor_shift(geometry))) & mask
    row = a >> (geometry.column_bits + geometry.bank_bits)
    return bank, row


def map_address(phys_addr: int, geometry: DramGeometry) -> DramLocation:
    """Bank = low bank-bit slice above the column XOR the slice four bits higher."""
    if not 0 <= phys_addr < geometry.capacity:
        raise ValueError(f"address {phys_addr:#x} outside DRAM capacity {geometry.capacity:#x}")
    bank, row = (int(x) for x in bank_row(phys_addr, geometry))
    return DramLocation(
        channel=bank % geometry.channels,
        rank=(bank // geometry.channels) % geometry.ranks,
        bank=bank,
        row=row,
        column=phys_addr & (geometry.row_size - 1),
    )


def address_of(bank: int, row: int, column: int, geometry: DramGeometry) -> int:
    """Inverse of map_address; solves the XOR from the top bank bit down."""
    if not (0 <= bank < geometry.banks_total and 0 <= row < geometry.rows_per_bank
            and 0 <= column < geometry.row_size):
        raise ValueError("location outside geometry bounds")
    cb, bb, shift = geometry.column_bits, geometry.bank_bits, _xor_shift(geometry)
    addr = (row << (cb + bb)) | column
    for i in reversed(range(bb)):
        partner = (addr >> (shift + i)) & 1
        addr |= (((bank >> i) & 1) ^ partner) << (cb + i)
    return addr


def frame_locations(geometry: DramGeometry) -> tuple[np.ndarray, np.ndarray]:
    """(bank, row) for every 4 KiB frame."""
    return bank_row(np.arange(geometry.n_frames, dtype=np.int64) * PAGE_SIZE, geometry)


def row_frames(bank: int, row: int, geometry: DramGeometry) -> list[int]:
    base = address_of(bank, row, 0, geometry) // PAGE_SIZE
    return [base + i for i in range(geometry.frames_per_row)]


@dataclass(frozen=True)
class ControllerPolicy:
    page_policy: str = "adaptive"
    close_timeout_ns: int = 200
    combine_window: int | None = None
    para_probability: float | None = None
    trr_radius: int | None = None
    mac_max_activations: int | None = None

    def __post_init__(self):
        if self.page_policy not in PAGE_POLICIES:
            raise ValueError(f"page_policy must be one of {PAGE_POLICIES}")
        if self.close_timeout_ns <= 0:
            raise ValueError("close_timeout_ns must be positive")
        if self.combine_window is not None and self.combine_window < 1:
            raise ValueError("combine_window must be >= 1")
        if self.para_probability is not None and not 0.0 <= self.para_probability <= 1.0:
            raise ValueError("para probability must be in [0, 1]")
        if self.trr_radius is not None and self.trr_radius < 1:
            raise ValueError("trr_radius must be >= 1")
        if self.mac_max_activations is not None and self.mac_max_activations <= 0:
            raise ValueError("mac max_activations must be > 0")


@dataclass(frozen=True)
class CellParams:
    """Vulnerable-cell population: density d and log-normal thresholds (mu, sigma)."""

    density: float = 0.8
    mu: float = 15.5
    sigma: float = 0.7
    anti_fraction: float = 0.525

    def __post_init__(self):
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must be in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.anti_fraction <= 1.0:
            raise ValueError("anti_fraction must be in [0, 1]")

    def cdf(self, stress) -> np.ndarray:
        """Probability that a cell flips at the given stress (density included)."""
        s = np.asarray(stress, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(s, 0.0)) - self.mu) / self.sigma
        return self.density * ndtr(z)


@dataclass(frozen=True)
class FlipRecord:
    frame: int
    bit: int  # page-relative bit offset, 0..32767
    direction: str  # "0to1" or "1to0"
    time_ns: float
    bank: int
    row: int
    technique: str | None = None


@dataclass(frozen=True)
class AccessResult:
    kind: str
    latency_ns: int
    activated: bool


class CellVulnMap:
    """Lazily generated per-row weak-cell population.

    Cells are produced in threshold tiers (T <= base, then doubling bands) so
    that rows only ever materialize the cells a trace can reach. Each tier of a
    row draws from its own (seed, bank, row, tier) substream, so the map is a
    pure function of the seed regardless of query order.
    """

    BASE_CAP = float(2**19)
    MAX_TIER = 22  # upper edge 2**40 activations: far beyond any refresh window

    def __init__(self, geometry: DramGeometry, params: CellParams, seed: int = 0, cache_rows: int = 65536):
        self.geometry = geometry
        self.params = params
        self.seed = int(seed)
        self._cache: dict[int, list] = {}
        self._cache_rows = cache_rows

    def _edge(self, tier: int) -> float:
        return 0.0 if tier == 0 else self.BASE_CAP * 2.0 ** (tier - 1)

    def _gen_tier(self, bank: int, row: int, tier: int, used: np.ndarray):
        p = self.params
        n_cells = self.geometry.row_bits
        lo, hi = self._edge(tier), self._edge(tier + 1)
        f_lo, f_hi = (float(x) for x in ndtr((np.log([max(lo, 1e-300), hi]) - p.mu) / p.sigma))
        if tier == 0:
            f_lo = 0.0
        p_lower = p.density * f_lo
        p_band = p.density * (f_hi - f_lo)
        remaining = n_cells - used.size
        empty = (np.empty(0, np.int32), np.empty(0), np.empty(0, bool))
        if p_band <= 0 or remaining <= 0:
            return empty
        rng = substream(self.seed, "cells", bank, row, tier)
        count = int(rng.binomial(remaining, min(1.0, p_band / (1.0 - p_lower))))
        if count == 0:
            return empty
        taken = set(used.tolist())
        picks: list[int] = []
        while len(picks) < count:
            for c in rng.integers(0, n_cells, size=count - len(picks)).tolist():
                if c not in taken:
                    taken.add(c)
                    picks.append(c)
        u = rng.uniform(f_lo, f_hi, size=count)
        thresholds = np.exp(p.mu + p.sigma * ndtri(np.clip(u, 1e-300, 1.0)))
        thresholds = np.clip(thresholds, max(lo, np.nextafter(lo, np.inf)) if tier else 0.0, hi)
        anti = rng.random(count) < p.anti_fraction
        order = np.argsort(thresholds, kind="stable")
        return np.asarray(picks, np.int32)[order], thresholds[order], anti[order]

    def cells(self, bank: int, row: int, max_threshold: float):
        """(bit_in_row, threshold, anti) for all cells with threshold <= max_threshold."""
        key = bank * self.geometry.rows_per_bank + row
        entry = self._cache.get(key)
        if entry is None:
            if len(self._cache) >= self._cache_rows:
                self._cache.clear()
            entry = [0, np.empty(0, np.int32), np.empty(0), np.empty(0, bool)]
            self._cache[key] = entry
        if self.params.density > 0:
            while entry[0] <= self.MAX_TIER and self._edge(entry[0]) < max_threshold:
                bits, thr, anti = self._gen_tier(bank, row, entry[0], entry[1])
                entry[1] = np.concatenate([entry[1], bits])
                entry[2] = np.concatenate([entry[2], thr])
                entry[3] = np.concatenate([entry[3], anti])
                entry[0] += 1
        n = int(np.searchsorted(entry[2], max_threshold, side="right"))
        return entry[1][:n], entry[2][:n], entry[3][:n]

    def dense_row(self, bank: int, row: int) -> tuple[np.ndarray, np.ndarray]:
        """Full per-bit view: thresholds (inf where invulnerable) and anti-cell flags."""
        bits, thr, anti = self.cells(bank, row, math.inf)
        thresholds = np.full(self.geometry.row_bits, np.inf)
        orientation = np.zeros(self.geometry.row_bits, bool)
        thresholds[bits] = thr
        orientation[bits] = anti
        return thresholds, orientation


def _count_series(first: int, period: int, count: int, lo, hi) -> np.ndarray:
    """Number of i in [0, count) with lo <= first + i*period < hi (vectorized over lo/hi)."""
    lo = np.asarray(lo, dtype=np.int64)
    hi = np.asarray(hi, dtype=np.int64)
    if count <= 0:
        return np.zeros(np.broadcast(lo, hi).shape, np.int64)
    i_lo = np.maximum(0, -((first - lo) // period))  # ceil((lo-first)/period)
    i_hi = np.minimum(count, -((first - hi) // period))
    return np.maximum(0, i_hi - i_lo)


@dataclass
class _Controller:
    open_row: np.ndarray
    last_ps: np.ndarray
    requests: int = 0
    window_id: int = -1
    window_rows: set = field(default_factory=set)

    def copy(self) -> "_Controller":
        return _Controller(self.open_row.copy(), self.last_ps.copy(), self.requests,
                           self.window_id, set(self.window_rows))


class DramState:
    """Mutable DRAM: controller registers, activation ledger, victim stress, clock and flips.

    Victim stress is the number of neighbour activations a row has absorbed
    since its own last refresh; a weak cell flips when that count reaches its
    threshold and the row is refreshed or read.
    """

    def __init__(self, geometry: DramGeometry | None = None, policy: ControllerPolicy | None = None,
                 cells: CellParams | None = None, seed: int = 0,
                 memory: PhysicalMemory | None = None,
                 integrity_frames: tuple[int, int] | None = None):
        self.geometry = geometry or DramGeometry()
        self.policy = policy or ControllerPolicy()
        self.cell_params = cells or CellParams()
        self.seed = int(seed)
        self.cell_map = CellVulnMap(self.geometry, self.cell_params, self.seed)
        self.memory = memory or PhysicalMemory(self.geometry.n_frames, self.seed)
        self.integrity_frames = integrity_frames
        self.clock_ps = 0
        self.flips: list[FlipRecord] = []
        self.halted = False
        self.halt_time_ns: float | None = None
        self.technique: str | None = None
        self.last_peaks: dict[int, float] = {}  # victim row key -> peak stress of the last bulk hammer
        banks = self.geometry.banks_total
        self._ctl = _Controller(np.full(banks, -1, np.int64), np.zeros(banks, np.int64))
        self._acts: dict[int, list] = {}  # row key -> [count, last_ps]
        self._stress: dict[int, list] = {}  # row key -> [stress, last_ps]
        self._para_rng = substream(self.seed, "para")
        self._window_ps = self.geometry.effective_refresh_ns * 1000
        self._rows = self.geometry.rows_per_bank

    # -- clock and refresh -------------------------------------------------
    @property
    def clock_ns(self) -> float:
        return self.clock_ps / 1000

    @property
    def open_rows(self) -> np.ndarray:
        return self._ctl.open_row.copy()

    def _offset(self, row: int) -> int:
        return row * self._window_ps // self._rows

    def _next_refresh(self, row: int, after_ps: int) -> int:
        """First refresh instant of row strictly after after_ps."""
        off = self._offset(row)
        return off + ((after_ps - off) // self._window_ps + 1) * self._window_ps

    def _refresh_instants(self, row: int, lo_ps: int, hi_ps: int) -> np.ndarray:
        """Refresh instants in (lo_ps, hi_ps]."""
        first = self._next_refresh(row, lo_ps)
        if first > hi_ps:
            return np.empty(0, np.int64)
        return np.arange(first, hi_ps + 1, self._window_ps, dtype=np.int64)

    def activations(self, bank: int, row: int) -> int:
        """Activation ledger: activations of the row since its last refresh."""
        entry = self._acts_entry(bank * self._rows + row, self.clock_ps, create=False)
        return 0 if entry is None else entry[0]

    def stress(self, bank: int, row: int) -> float:
        entry = self._stress_entry(bank * self._rows + row, self.clock_ps, create=False)
        return 0.0 if entry is None else entry[0]

    def _acts_entry(self, key: int, now: int, create: bool = True):
        entry = self._acts.get(key)
        if entry is not None and self._next_refresh(key % self._rows, entry[1]) <= now:
            del self._acts[key]
            entry = None
        if entry is None and create:
            entry = self._acts[key] = [0, now]
        return entry

    def _stress_entry(self, key: int, now: int, create: bool = True):
        entry = self._stress.get(key)
        if entry is not None:
            due = self._next_refresh(key % self._rows, entry[1])
            if due <= now:
                del self._stress[key]
                self._apply_flips(self._candidates(key, entry[0], due))
                entry = None
        if entry is None and create:
            entry = self._stress[key] = [0.0, now]
        return entry

    def _ensure_running(self) -> None:
        if self.halted:
            raise MachineHalted("machine halted after an integrity check failure")

    def tick(self, elapsed_ns: float) -> list[FlipRecord]:
        """Advance the clock, firing every row refresh that falls due."""
        self._ensure_running()
        if elapsed_ns < 0:
            raise ValueError("elapsed must be >= 0")
        return self.advance_to(self.clock_ps + round(elapsed_ns * 1000))

    def advance_to(self, t_ps: int) -> list[FlipRecord]:
        if t_ps < self.clock_ps:
            raise ValueError("clock cannot move backwards")
        pending = []
        for key, entry in list(self._stress.items()):
            due = self._next_refresh(key % self._rows, entry[1])
            if due <= t_ps:
                del self._stress[key]
                pending.extend(self._candidates(key, entry[0], due))
        for key, entry in list(self._acts.items()):
            if self._next_refresh(key % self._rows, entry[1]) <= t_ps:
                del self._acts[key]
        self.clock_ps = t_ps
        return self._apply_flips(pending)

    def scan(self) -> list[FlipRecord]:
        """Read back every row carrying stress: drained cells become visible now."""
        pending = []
        for key, entry in sorted(self._stress.items()):
            pending.extend(self._candidates(key, entry[0], self.clock_ps))
        self._stress.clear()
        return self._apply_flips(pending)

    # -- flip commit -------------------------------------------------------
    def _candidates(self, key: int, stress: float, time_ps: int) -> list:
        if stress <= 0:
            return []
        bank, row = divmod(key, self._rows)
        bits, _, anti = self.cell_map.cells(bank, row, stress)
        return [(time_ps, key, int(b), bool(a)) for b, a in zip(bits.tolist(), anti.tolist())]

    def _apply_flips(self, candidates: list) -> list[FlipRecord]:
        out: list[FlipRecord] = []
        if not candidates or self.halted:
            return out
        candidates.sort()
        geo = self.geometry
        i = 0
        while i < len(candidates) and not self.halted:
            time_ps, key = candidates[i][0], candidates[i][1]
            j = i
            while j < len(candidates) and candidates[j][0] == time_ps and candidates[j][1] == key:
                j += 1
            group = candidates[i:j]
            i = j
            bank, row = divmod(key, self._rows)
            base = address_of(bank, row, 0, geo) // PAGE_SIZE
            cells = np.fromiter((c[2] for c in group), np.int64, len(group))
            anti = np.fromiter((c[3] for c in group), bool, len(group))
            frames = base + cells // PAGE_BITS
            bits = cells % PAGE_BITS
            for frame in np.unique(frames).tolist():
                sel = frames == frame
                current = self.memory.get_bits(frame, bits[sel])
                ok = current == np.where(anti[sel], 0, 1)
                for bit, a in zip(bits[sel][ok].tolist(), anti[sel][ok].tolist()):
                    self.memory.toggle_bit(frame, bit)
                    rec = FlipRecord(frame, bit, "0to1" if a else "1to0", time_ps / 1000, bank, row,
                                     self.technique)
                    self.flips.append(rec)
                    out.append(rec)
                if ok.any() and self.integrity_frames and \
                        self.integrity_frames[0] <= frame < self.integrity_frames[1]:
                    self.halted = True
                    self.halt_time_ns = time_ps / 1000
                    break
        return out

    # -- controller --------------------------------------------------------
    def _request(self, ctl: _Controller, bank: int, row: int, now: int, refresh_close: bool = True):
        p = self.policy
        open_row = int(ctl.open_row[bank])
        if open_row >= 0:
            expired = p.page_policy == "adaptive" and now - ctl.last_ps[bank] >= p.close_timeout_ns * 1000
            refreshed = refresh_close and self._next_refresh(open_row, int(ctl.last_ps[bank])) <= now
            if expired or refreshed:
                open_row = -1
        if open_row == row:
            kind, activate = ROW_HIT, False
        elif open_row >= 0:
            kind, activate = ROW_CONFLICT, True
        else:
            kind, activate = ROW_OPEN, True
        if p.combine_window and p.combine_window > 1:
            wid = ctl.requests // p.combine_window
            if wid != ctl.window_id:
                ctl.window_id, ctl.window_rows = wid, set()
            key = (bank, row)
            if activate and key in ctl.window_rows:
                kind, activate = ROW_HIT, False
            elif activate:
                ctl.window_rows.add(key)
        ctl.requests += 1
        ctl.open_row[bank] = -1 if p.page_policy == "closed_page" else row
        ctl.last_ps[bank] = now
        return kind, activate

    def _neighbours(self, row: int, radius: int = 1) -> list[int]:
        return [r for d in range(1, radius + 1) for r in (row - d, row + d) if 0 <= r < self._rows]

    def _refresh_rows(self, bank: int, rows: list[int], now: int) -> list[FlipRecord]:
        pending = []
        for r in rows:
            entry = self._stress.pop(bank * self._rows + r, None)
            if entry is not None:
                pending.extend(self._candidates(bank * self._rows + r, entry[0], now))
        return self._apply_flips(pending)

    def apply_para(self, bank: int, row: int) -> list[int]:
        """PARA coin flip for one row open/close event; returns refreshed neighbour rows."""
        p = self.policy.para_probability
        if not p or self._para_rng.random() >= p:
            return []
        rows = self._neighbours(row)
        self._refresh_rows(bank, rows, self.clock_ps)
        return rows

    def _activate(self, bank: int, row: int, now: int) -> None:
        key = bank * self._rows + row
        acts = self._acts_entry(key, now)
        acts[0] += 1
        acts[1] = now
        for r in self._neighbours(row):
            entry = self._stress_entry(bank * self._rows + r, now)
            entry[0] += 1.0
            entry[1] = now
        self.apply_para(bank, row)
        p = self.policy
        if p.mac_max_activations and acts[0] >= p.mac_max_activations:
            self._refresh_rows(bank, self._neighbours(row), now)
            acts[0] = 0
        if p.trr_radius and acts[0] >= TRR_THRESHOLD:
            self._refresh_rows(bank, self._neighbours(row, p.trr_radius), now)
            acts[0] = 0

    def access(self, phys_addr: int) -> AccessResult:
        """One uncached access at the current clock."""
        self._ensure_running()
        loc = map_address(phys_addr, self.geometry)
        kind, activate = self._request(self._ctl, loc.bank, loc.row, self.clock_ps)
        if activate:
            self._activate(loc.bank, loc.row, self.clock_ps)
        return AccessResult(kind, _LATENCY[kind], activate)

    def combine_accesses(self, burst) -> int:
        """Issue a burst back to back; returns the activations it actually caused."""
        return sum(self.access(a).activated for a in burst)

    # -- hammering ---------------------------------------------------------
    def hammer(self, addresses, rounds: int, round_ns: int = ROUND_NS, scale: float = 1.0,
               exact: bool = False) -> list[FlipRecord]:
        """Hammer the addresses round-robin for the given number of rounds.

        Accesses within a round are spaced round_ns/k apart. The default path
        counts activations arithmetically from the steady-state controller
        pattern; exact=True replays every access (reference implementation).
        Flips still pending at the end stay latent until refresh or scan().
        """
        self._ensure_running()
        addresses = [int(a) for a in addresses]
        if not addresses:
            raise ValueError("addresses must be nonempty")
        if rounds <= 0:
            return []
        if exact:
            if scale != 1.0:
                raise ValueError("exact replay supports scale 1 only")
            return self._hammer_exact(addresses, rounds, round_ns)
        return self._hammer_bulk(addresses, rounds, round_ns, scale)

    def _hammer_exact(self, addresses, rounds, round_ns) -> list[FlipRecord]:
        k = len(addresses)
        period = round_ns * 1000
        spacing = [j * period // k for j in range(k)]
        t0 = self.clock_ps
        before = len(self.flips)
        for i in range(rounds):
            for j, a in enumerate(addresses):
                self.advance_to(t0 + i * period + spacing[j])
                if self.halted:
                    return self.flips[before:]
                self.access(a)
        self.advance_to(t0 + rounds * period)
        return self.flips[before:]

    def _hammer_bulk(self, addresses, rounds, round_ns, scale) -> list[FlipRecord]:
        geo = self.geometry
        k = len(addresses)
        period = round_ns * 1000
        spacing = [j * period // k for j in range(k)]
        banks, rows = bank_row(addresses, geo)
        banks, rows = banks.tolist(), rows.tolist()
        t0 = self.clock_ps
        t_end = t0 + rounds * period
        w = self.policy.combine_window or 1
        cycle = w // math.gcd(k, w) if w > 1 else 1
        warm = 2 * cycle
        explicit = min(rounds, warm)
        series: dict[int, list] = {}

        def add(key, first, step, count):
            if count > 0:
                series.setdefault(key, []).append((first, step, count))

        ctl = self._ctl
        req0 = ctl.requests
        for i in range(explicit):
            for j in range(k):
                t = t0 + i * period + spacing[j]
                _, act = self._request(ctl, banks[j], rows[j], t)
                if act:
                    add(banks[j] * self._rows + rows[j], t, period, 1)
        if rounds > explicit:
            scratch = ctl.copy()
            mask = np.zeros((cycle, k), bool)
            for l in range(cycle):
                for j in range(k):
                    t = t0 + (explicit + l) * period + spacing[j]
                    mask[l, j] = self._request(scratch, banks[j], rows[j], t, refresh_close=False)[1]
            for l in range(cycle):
                for j in range(k):
                    if mask[l, j]:
                        n = -(-(rounds - explicit - l) // cycle)
                        add(banks[j] * self._rows + rows[j], t0 + (explicit + l) * period + spacing[j],
                            cycle * period, n)
            if cycle == 1:
                # rows that stay open re-activate once after their own refresh
                by_row: dict[int, list[int]] = {}
                for j in range(k):
                    by_row.setdefault(banks[j] * self._rows + rows[j], []).append(j)
                for key, js in by_row.items():
                    if mask[0, js].any():
                        continue
                    last_explicit = t0 + (explicit - 1) * period + max(spacing[j] for j in js)
                    for tau in self._refresh_instants(key % self._rows, last_explicit, t_end - 1).tolist():
                        best = None
                        for j in js:
                            i = max(explicit, -((t0 + spacing[j] - tau) // period))
                            if i < rounds:
                                t = t0 + i * period + spacing[j]
                                best = t if best is None else min(best, t)
                        if best is not None:
                            add(key, best, period, 1)
            # controller state after the final round, with real access times
            for _ in range((rounds - explicit) % cycle):
                for j in range(k):
                    self._request(scratch, banks[j], rows[j], 0, refresh_close=False)
            last = {}
            for j in range(k):
                last[banks[j]] = t0 + (rounds - 1) * period + spacing[j]
            for b, t in last.items():
                ctl.open_row[b] = scratch.open_row[b]
                ctl.last_ps[b] = t
            ctl.requests = req0 + k * rounds
            ctl.window_id, ctl.window_rows = -1, set()

        candidates = self._bulk_flips(series, t0, t_end, scale)
        self.clock_ps = t_end
        return self._apply_flips(candidates)

    def _mitigation_cap(self, total: np.ndarray, seg_len: np.ndarray, own: dict[int, np.ndarray]) -> np.ndarray:
        """Peak stress per segment once MAC/TRR refreshes cap each neighbour's run.

        A neighbour that reaches the trigger x within its refresh window resets
        the victim every x of its own activations; the victim absorbs the
        combined neighbour rate over that interval.
        """
        p = self.policy
        caps = []
        if p.mac_max_activations:
            caps.append(p.mac_max_activations)
        if p.trr_radius:
            caps.append(TRR_THRESHOLD)
        peak = total.astype(float)
        if not caps:
            return peak
        x = min(caps)
        rate_total = total / np.maximum(seg_len, 1)
        for counts in own.values():
            capped = counts >= x
            interval = x * self._window_ps / np.maximum(counts, 1)
            peak = np.minimum(peak, np.where(capped, np.ceil(rate_total * interval), np.inf))
        return peak

    def _para_runs(self, n_acts: int, carry: float, scale: float):
        """Max stress and trailing stress for n_acts neighbour activations under PARA."""
        p = self.policy.para_probability
        if not p or n_acts == 0:
            return carry + n_acts * scale, None, carry + n_acts * scale
        rng = self._para_rng
        if p >= 1.0:
            return max(carry + scale, scale), scale, 0.0
        gaps = []
        pos = 0
        while True:
            g = rng.geometric(p, size=max(16, int(n_acts * p * 1.2) + 4))
            c = np.cumsum(g) + pos
            inside = c[c <= n_acts]
            gaps.append(inside)
            if inside.size < c.size:
                break
            pos = int(c[-1])
        resets = np.concatenate(gaps)
        if resets.size == 0:
            return carry + n_acts * scale, None, carry + n_acts * scale
        runs = np.diff(np.concatenate([[0], resets]))
        first = carry + runs[0] * scale
        committed = max(first, float(runs.max()) * scale)
        tail = (n_acts - int(resets[-1])) * scale
        return max(committed, tail), committed, tail

    def _bulk_flips(self, series: dict[int, list], t0: int, t_end: int, scale: float) -> list:
        victims = sorted({(key // self._rows) * self._rows + r
                          for key in series for r in self._neighbours(key % self._rows)})
        candidates = []
        self.last_peaks = {}
        capping = bool(self.policy.mac_max_activations or self.policy.trr_radius)
        for v in victims:
            bank, row = divmod(v, self._rows)
            taus = self._refresh_instants(row, t0, t_end).tolist()
            bounds = np.asarray([t0] + taus + [t_end], np.int64)
            lo, hi = bounds[:-1], bounds[1:]
            total = np.zeros(lo.size, np.int64)
            own: dict[int, np.ndarray] = {}
            for nb in self._neighbours(row):
                nkey = bank * self._rows + nb
                if nkey not in series:
                    continue
                counts = sum(_count_series(f, s, c, lo, hi) for f, s, c in series[nkey])
                if capping:
                    # ledger counts per neighbour window drive MAC/TRR caps
                    own[nkey] = self._neighbour_window_counts(nkey, series[nkey], lo, hi)
                total = total + counts
            entry = self._stress_entry(v, t0, create=False)
            carry = entry[0] if entry is not None else 0.0
            self._stress.pop(v, None)
            capped = self._mitigation_cap(total, hi - lo, own)
            seg_commit: list[float] = []
            tail = 0.0
            for s in range(lo.size):
                c = carry if s == 0 else 0.0
                if self.policy.para_probability:
                    peak, committed, tail = self._para_runs(int(total[s]), c, scale)
                else:
                    peak = c + float(capped[s]) * scale
                    committed = None
                    ratio = float(capped[s]) / total[s] if total[s] else 1.0
                    tail = c + float(total[s]) * scale * min(1.0, ratio)
                last = s == lo.size - 1
                if not last:
                    seg_commit.append(peak)
                elif committed is not None:
                    seg_commit.append(committed)
            self.last_peaks[v] = max(seg_commit + [tail])
            commit_times = [int(t) for t in hi[:len(seg_commit)]]
            if seg_commit and max(seg_commit) > 0:
                bits, thr, anti = self.cell_map.cells(bank, row, max(seg_commit))
                if bits.size:
                    peaks = np.asarray(seg_commit)
                    first_seg = np.argmax(peaks[None, :] >= thr[:, None], axis=1)
                    for b, a, sidx in zip(bits.tolist(), anti.tolist(), first_seg.tolist()):
                        candidates.append((commit_times[sidx], v, b, a))
            if tail > 0:
                self._stress[v] = [tail, t_end]
        for key, ss in series.items():
            row = key % self._rows
            last_refresh = self._next_refresh(row, t_end) - self._window_ps
            entry = self._acts_entry(key, t0)
            base = entry[0] if last_refresh < t0 else 0
            n = base + sum(int(_count_series(f, s, c, max(last_refresh, t0), t_end)) for f, s, c in ss)
            x = self.policy.mac_max_activations or (TRR_THRESHOLD if self.policy.trr_radius else None)
            if x:
                n %= x
            self._acts[key] = [n, t_end]
        return candidates

    def _neighbour_window_counts(self, key: int, ss: list, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Activations of an aggressor within its own refresh window, per victim segment."""
        row = key % self._rows
        starts = np.asarray([self._next_refresh(row, int(t)) - self._window_ps for t in lo], np.int64)
        ends = starts + self._window_ps
        return sum(_count_series(f, s, c, starts, ends) for f, s, c in ss)

    def reset_stress(self, bank: int, row: int) -> None:
        """Refresh one row out of band (e.g. a software mitigation)."""
        self._refresh_rows(bank, [row], self.clock_ps)
