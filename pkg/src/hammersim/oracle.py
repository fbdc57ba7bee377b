"""Prefetch address-translation oracle: zero false positives, random misses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .osmodel import OSModel

MODES = {"stealth": (1.0, 2 / 9), "fast": (0.05, 0.5)}  # trial cost s, true-positive probability
TRANSLATION_S_PER_GIB = 120.0
MATCH, NO_EVIDENCE = "match", "no_evidence"


class QueryError(LookupError):
    """The queried virtual page is not mapped in the querying process."""


@dataclass(frozen=True)
class OracleConfig:
    mode: str = "stealth"
    tp_probability: float | None = None
    trial_cost_s: float | None = None
    translation_s_per_gib: float = TRANSLATION_S_PER_GIB

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"oracle mode must be one of {sorted(MODES)}")
        cost, tp = MODES[self.mode]
        if self.trial_cost_s is None:
            object.__setattr__(self, "trial_cost_s", cost)
        if self.tp_probability is None:
            object.__setattr__(self, "tp_probability", tp)
        if not 0 < self.tp_probability <= 1:
            raise ValueError("true-positive probability must lie in (0, 1]")
        if self.trial_cost_s <= 0:
            raise ValueError("trial cost must be positive")

    @property
    def false_positive_probability(self) -> float:
        return 0.0

    @property
    def expected_time_to_match_s(self) -> float:
        return self.trial_cost_s / self.tp_probability


@dataclass(frozen=True)
class OracleVerdict:
    outcome: str
    elapsed_s: float

    @property
    def matched(self) -> bool:
        return self.outcome == MATCH


def _truth(os_: OSModel, pid: int, vpage: int) -> int:
    try:
        frame = os_.resident_frame(pid, vpage)
    except LookupError as exc:
        raise QueryError(str(exc)) from None
    return -1 if frame is None else frame


def check(os_: OSModel, pid: int, vpage: int, candidate: int, config: OracleConfig,
          rng: np.random.Generator) -> OracleVerdict:
    """One trial: does vpage of pid map to candidate?"""
    truth = _truth(os_, pid, vpage)
    hit = truth == candidate and rng.random() < config.tp_probability
    return OracleVerdict(MATCH if hit else NO_EVIDENCE, config.trial_cost_s)


def scan(os_: OSModel, pid: int, vpage: int, candidates, config: OracleConfig, rng: np.random.Generator,
         resolve_bytes: int = 0) -> tuple[int | None, float]:
    """One combined probe over all candidate frames.

    The cost is one trial whatever the number of candidates. resolve_bytes
    adds the surcharge for translating to a full physical address on a
    machine with that much DRAM.
    """
    if len(candidates) == 0:
        raise ValueError("candidate list is empty")
    truth = _truth(os_, pid, vpage)
    elapsed = config.trial_cost_s + config.translation_s_per_gib * resolve_bytes / 2**30
    if isinstance(candidates, (set, frozenset)):
        present = truth in candidates
    else:
        present = truth >= 0 and bool(np.any(np.asarray(candidates) == truth))
    if present and rng.random() < config.tp_probability:
        return truth, elapsed
    return None, elapsed


def translation_surcharge_s(dram_bytes: int, config: OracleConfig | None = None) -> float:
    per_gib = config.translation_s_per_gib if config else TRANSLATION_S_PER_GIB
    return per_gib * dram_bytes / 2**30
