"""Hammering techniques, attempts and templating statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import profiles
from .dram import ROUND_NS, DramState, FlipRecord, address_of, bank_row
from .physmem import PAGE_BITS, PAGE_SIZE

KINDS = ("double_sided", "single_sided", "one_location")
SHORT = {"double_sided": "ds", "single_sided": "ss", "one_location": "ol"}
DIRECTIONS = ("0to1", "1to0")


class CapabilityError(Exception):
    """The technique needs knowledge the attacker does not have."""


@dataclass(frozen=True)
class HammerTechnique:
    kind: str = "one_location"
    k: int = 8
    rounds_per_attempt: int = 5_000_000

    def __post_init__(self):
        if self.kind in SHORT.values():
            object.__setattr__(self, "kind", {v: k for k, v in SHORT.items()}[self.kind])
        if self.kind not in KINDS:
            raise ValueError(f"unknown technique {self.kind!r}; expected one of {KINDS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.rounds_per_attempt < 1:
            raise ValueError("rounds_per_attempt must be >= 1")

    @property
    def label(self) -> str:
        return SHORT[self.kind]

    @property
    def n_addresses(self) -> int:
        return {"double_sided": 2, "single_sided": self.k, "one_location": 1}[self.kind]


def same_bank_probability(k: int, banks: int) -> float:
    """Chance that at least two of k uniformly random addresses share a bank."""
    if k < 1 or banks < 1:
        raise ValueError("k and banks must be >= 1")
    if k > banks:
        return 1.0
    return 1.0 - math.prod(1 - i / banks for i in range(1, k))


def same_bank_monte_carlo(k: int, banks: int, draws: int, rng: np.random.Generator) -> float:
    picks = rng.integers(0, banks, size=(draws, k))
    picks.sort(axis=1)
    return float(np.mean((np.diff(picks, axis=1) == 0).any(axis=1)))


def _random_address(frame: int, rng: np.random.Generator) -> int:
    return frame * PAGE_SIZE + int(rng.integers(0, PAGE_SIZE // 64)) * 64


def pick_addresses(technique: HammerTechnique, state: DramState, rng: np.random.Generator,
                   address_knowledge: str = "none", frames: np.ndarray | None = None,
                   max_tries: int = 256, owned: set | None = None) -> list[int]:
    """Aggressor addresses for one attempt, optionally restricted to the given frames.

    owned may carry set(frames) precomputed by the caller.
    """
    if address_knowledge not in ("none", "full"):
        raise ValueError("address_knowledge must be 'none' or 'full'")
    geo = state.geometry
    n_frames = geo.n_frames if frames is None else len(frames)
    if n_frames == 0:
        raise ValueError("no frames available for hammering")

    def random_frame() -> int:
        i = int(rng.integers(0, n_frames))
        return i if frames is None else int(frames[i])

    if technique.kind == "one_location":
        return [_random_address(random_frame(), rng)]
    if technique.kind == "single_sided":
        return [_random_address(random_frame(), rng) for _ in range(technique.k)]
    if address_knowledge != "full":
        raise CapabilityError("double-sided hammering needs the physical address mapping")
    column = int(rng.integers(0, geo.row_size // 64)) * 64
    if frames is None:
        bank = int(rng.integers(0, geo.banks_total))
        row = int(rng.integers(1, geo.rows_per_bank - 1))
        return [address_of(bank, row - 1, column, geo), address_of(bank, row + 1, column, geo)]
    if owned is None:
        owned = set(np.asarray(frames).tolist())
    for _ in range(max_tries):
        f = random_frame()
        b, r = (int(x) for x in bank_row(f * PAGE_SIZE, geo))
        r2 = r + 2 if rng.random() < 0.5 else r - 2
        if not 0 <= r2 < geo.rows_per_bank:
            continue
        partner = address_of(b, r2, f * PAGE_SIZE % geo.row_size, geo)
        if partner // PAGE_SIZE in owned:
            return sorted([f * PAGE_SIZE + (column % PAGE_SIZE), partner + (column % PAGE_SIZE)])
    raise CapabilityError("no row pair sandwiching a victim inside the given frames")


def run_attempt(state: DramState, addresses, rounds: int, technique: str | None = None,
                scale: float = 1.0, round_ns: int = ROUND_NS) -> list[FlipRecord]:
    """Hammer, then scan: returns every flip that became visible."""
    state.technique = technique
    flips = state.hammer(addresses, rounds, round_ns=round_ns, scale=scale)
    return flips + state.scan()


def victim_frames(state: DramState, addresses) -> list[int]:
    """Frames in the rows adjacent to each aggressor (the ones an attempt can disturb)."""
    geo = state.geometry
    banks, rows = bank_row(addresses, geo)
    out = set()
    for b, r in zip(banks.tolist(), rows.tolist()):
        for v in (r - 1, r + 1):
            if 0 <= v < geo.rows_per_bank:
                base = address_of(b, v, 0, geo) // PAGE_SIZE
                out.update(range(base, base + geo.frames_per_row))
    return sorted(out)


@dataclass
class TemplateReport:
    attempts: int = 0
    flips: list[FlipRecord] = field(default_factory=list)
    histogram: np.ndarray = field(default_factory=lambda: np.zeros((PAGE_BITS, 2), np.int64))
    duration_s: float = 0.0
    technique: str | None = None

    def add(self, flips) -> None:
        for f in flips:
            self.flips.append(f)
            self.histogram[f.bit, DIRECTIONS.index(f.direction)] += 1

    @property
    def flip_rate(self) -> float:
        return len(self.flips) / self.duration_s if self.duration_s else 0.0

    @property
    def coverage(self) -> float:
        """Fraction of page bit offsets flipped at least once."""
        return float(np.mean(self.histogram.sum(axis=1) > 0))

    @property
    def zero_to_one_fraction(self) -> float:
        total = self.histogram.sum()
        return float(self.histogram[:, 0].sum() / total) if total else 0.0

    def uniformity_pvalue(self, bins: int = 256) -> float:
        """Chi-square p-value of flip offsets against a uniform spread."""
        per_offset = self.histogram.sum(axis=1)
        if per_offset.sum() == 0:
            return 1.0
        counts = per_offset.reshape(bins, -1).sum(axis=1)
        return float(stats.chisquare(counts).pvalue)

    def summary(self) -> dict:
        return {
            "technique": self.technique,
            "attempts": self.attempts,
            "flips": len(self.flips),
            "duration_s": round(self.duration_s, 6),
            "flip_rate": round(self.flip_rate, 6),
            "offset_coverage": round(self.coverage, 6),
            "zero_to_one_fraction": round(self.zero_to_one_fraction, 6),
            "uniformity_pvalue": round(self.uniformity_pvalue(), 6),
        }

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("offset,direction,count\n")
            for offset, col in zip(*np.nonzero(self.histogram)):
                fh.write(f"{offset},{DIRECTIONS[col]},{self.histogram[offset, col]}\n")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def template_memory(state: DramState, technique: HammerTechnique, rng: np.random.Generator, *,
                    budget_s: float | None = None, target_flips: int | None = None,
                    max_attempts: int | None = None, scale: float | None = None,
                    address_knowledge: str = "full", frames: np.ndarray | None = None,
                    round_ns: int = ROUND_NS, until: Callable[[list[FlipRecord], list[int]], bool] | None = None,
                    trace=None, pid: int = 0, enclave: bool = False) -> TemplateReport:
    """Repeat pick + attempt + scan until a budget is spent.

    When frames is given the attacker only hammers and observes those frames;
    it rewrites its test pattern into them before every attempt.
    """
    if budget_s is None and target_flips is None and max_attempts is None and until is None:
        raise ValueError("template_memory needs a budget")
    for value in (budget_s, target_flips, max_attempts):
        if value is not None and value <= 0:
            raise ValueError("budget must be > 0")
    if scale is None:
        scale = profiles.ACTIVATION_SCALES[technique.kind]
    owned = None if frames is None else set(np.asarray(frames).tolist())
    attempt_s = technique.rounds_per_attempt * round_ns * 1e-9
    report = TemplateReport(technique=technique.label)
    while True:
        if max_attempts is not None and report.attempts >= max_attempts:
            break
        if budget_s is not None and report.duration_s + attempt_s > budget_s + 1e-9:
            break
        addresses = pick_addresses(technique, state, rng, address_knowledge, frames, owned=owned)
        for f in victim_frames(state, addresses):
            if owned is None or f in owned:
                state.memory.reset(f)
        if trace is not None:
            trace.add_burst(state.clock_ns, round_ns, technique.rounds_per_attempt, addresses, pid, enclave)
        flips = run_attempt(state, addresses, technique.rounds_per_attempt, technique.label, scale, round_ns)
        if owned is not None:
            flips = [f for f in flips if f.frame in owned]
        report.add(flips)
        report.attempts += 1
        report.duration_s += attempt_s
        if state.halted:
            break
        if target_flips is not None and len(report.flips) >= target_flips:
            break
        if until is not None and until(flips, addresses):
            break
    return report
