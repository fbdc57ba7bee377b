import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hammersim.dram import CellParams, ControllerPolicy, DramGeometry, DramState, bank_row
from hammersim.hammer import (CapabilityError, HammerTechnique, pick_addresses, same_bank_probability,
                              template_memory, victim_frames)
from hammersim.physmem import PAGE_BITS, PAGE_SIZE
from hammersim.rng import substream

GEO = DramGeometry(channels=1, ranks=1, banks_per_rank=8, rows_per_bank=1024)
WEAK = CellParams(density=0.8, mu=8.0, sigma=0.5)


@given(st.integers(1, 6), st.integers(1, 6))
def test_same_bank_matches_enumeration(k, banks):
    # brute force over every assignment of k addresses to banks
    collide = sum(len(set(p)) < k for p in itertools.product(range(banks), repeat=k))
    assert same_bank_probability(k, banks) == pytest.approx(collide / banks**k)


@given(st.integers(1, 64), st.integers(1, 64))
def test_same_bank_is_a_probability(k, banks):
    p = same_bank_probability(k, banks)
    assert 0.0 <= p <= 1.0
    assert (p == 0.0) == (k == 1)


def test_technique_names():
    assert HammerTechnique("ds").kind == "double_sided"
    assert HammerTechnique("single_sided").label == "ss"
    assert HammerTechnique().n_addresses == 1
    with pytest.raises(ValueError):
        HammerTechnique("triple")


def test_double_sided_needs_mapping():
    state = DramState(GEO)
    with pytest.raises(CapabilityError):
        pick_addresses(HammerTechnique("double_sided"), state, substream(0, "x"), address_knowledge="none")


@given(st.integers(0, 10_000))
def test_double_sided_sandwiches_a_row(seed):
    state = DramState(GEO)
    a, b = pick_addresses(HammerTechnique("double_sided"), state, substream(seed, "p"), address_knowledge="full")
    banks, rows = bank_row([a, b], GEO)
    assert banks[0] == banks[1]
    assert abs(int(rows[0]) - int(rows[1])) == 2


@given(st.integers(0, 10_000))
def test_restricted_picks_stay_inside_frames(seed):
    state = DramState(GEO)
    rng = substream(seed, "frames")
    frames = np.sort(rng.choice(GEO.n_frames, 400, replace=False))
    for kind in ("one_location", "single_sided"):
        addrs = pick_addresses(HammerTechnique(kind), state, rng, frames=frames)
        assert set(a // PAGE_SIZE for a in addrs) <= set(frames.tolist())


def test_victim_frames_are_adjacent_rows():
    state = DramState(GEO)
    addr = 5 * GEO.row_size * GEO.banks_total
    bank, row = (int(x) for x in bank_row(addr, GEO))
    for f in victim_frames(state, [addr]):
        b, r = (int(x) for x in bank_row(f * PAGE_SIZE, GEO))
        assert b == bank and abs(r - row) == 1


def test_template_report_accounting():
    state = DramState(GEO, ControllerPolicy(page_policy="closed_page"), WEAK, 1)
    report = template_memory(state, HammerTechnique("one_location", rounds_per_attempt=20_000), substream(1, "t"),
                             max_attempts=30, scale=1.0)
    assert report.attempts == 30
    assert report.histogram.sum() == len(report.flips)
    assert report.histogram.shape == (PAGE_BITS, 2)
    assert report.duration_s == pytest.approx(30 * 20_000 * 300e-9)
    assert 0.0 <= report.coverage <= 1.0
    summary = report.summary()
    assert summary["flips"] == len(report.flips) and summary["technique"] == "ol"


def test_template_budget_and_until():
    state = DramState(GEO, ControllerPolicy(page_policy="closed_page"), WEAK, 1)
    tech = HammerTechnique("one_location", rounds_per_attempt=20_000)
    report = template_memory(state, tech, substream(1, "t"), until=lambda flips, addrs: bool(flips))
    assert report.flips and report.attempts >= 1
    with pytest.raises(ValueError):
        template_memory(state, tech, substream(1, "t"))
    report = template_memory(state, tech, substream(2, "t"), budget_s=0.05)
    assert report.attempts == math.floor(0.05 / (20_000 * 300e-9))


def test_template_csv(tmp_path):
    state = DramState(GEO, ControllerPolicy(page_policy="closed_page"), WEAK, 1)
    report = template_memory(state, HammerTechnique("one_location", rounds_per_attempt=20_000), substream(1, "t"),
                             max_attempts=5, scale=1.0)
    path = tmp_path / "flips.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "offset,direction,count"
    assert sum(int(line.rsplit(",", 1)[1]) for line in lines[1:]) == len(report.flips)
