import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hammersim import oracle
from hammersim.oracle import OracleConfig, QueryError
from hammersim.osmodel import TARGET_FILE, FrameTable, OSModel, build_system
from hammersim.rng import substream
from hammersim.waylay import (FOOTPRINT_BOUND_BYTES, LINUX, WINDOWS, chase_until, ensure_working_set, evict_target,
                              exhaustion_evict, expected_unique, relocation_frames, waylay_until)

KEY = (TARGET_FILE, 8)


def machine(seed, frames=2**14):
    os_ = build_system(frames, substream(seed, "machine"))
    proc = os_.spawn(enclave=True)
    os_.map_file(proc.pid, 0x400, KEY)
    return os_, proc


@given(st.integers(0, 1000), st.sampled_from(["stealth", "fast"]))
def test_oracle_never_false_positive(seed, mode):
    os_, proc = machine(seed % 7, 2**10)
    truth = os_.translate(proc.pid, 0x400)
    rng = substream(seed, "q")
    wrong = [f for f in range(2**10) if f != truth][: 50]
    found, _ = oracle.scan(os_, proc.pid, 0x400, wrong, OracleConfig(mode), rng)
    assert found is None
    verdict = oracle.check(os_, proc.pid, 0x400, wrong[0], OracleConfig(mode), rng)
    assert not verdict.matched


@pytest.mark.parametrize("mode,cost,tp", [("stealth", 1.0, 2 / 9), ("fast", 0.05, 0.5)])
def test_oracle_true_positive_rate(mode, cost, tp):
    os_, proc = machine(1, 2**10)
    truth = os_.translate(proc.pid, 0x400)
    rng = substream(2, mode)
    cfg = OracleConfig(mode)
    trials = 20_000
    hits = 0
    for _ in range(trials):
        found, elapsed = oracle.scan(os_, proc.pid, 0x400, {truth, truth + 1}, cfg, rng)
        hits += found == truth
        assert elapsed == cost
    assert hits / trials == pytest.approx(tp, abs=4 * np.sqrt(tp * (1 - tp) / trials))
    assert cfg.expected_time_to_match_s == pytest.approx(cost / tp)


def test_oracle_unmapped_page():
    os_, proc = machine(1, 2**10)
    with pytest.raises(QueryError):
        oracle.scan(os_, proc.pid, 0x999, [1], OracleConfig(), substream(0, "u"))
    with pytest.raises(ValueError):
        OracleConfig("slow")


def test_translation_surcharge():
    assert oracle.translation_surcharge_s(12 * 2**30) == pytest.approx(1440.0)


def test_evict_target_keeps_usage_flat():
    os_, proc = machine(3)
    before = os_.usage_fraction()
    run = evict_target(os_, KEY, pid=proc.pid)
    assert run.target_evicted and not os_.cache.mincore(KEY)
    assert run.peak_usage == pytest.approx(before, abs=1e-3)
    assert run.elapsed_s == pytest.approx(run.pages * LINUX.page_cost_s)


def test_windows_profile_has_fixed_cost():
    os_, proc = machine(4)
    run = evict_target(os_, KEY, WINDOWS, proc.pid)
    assert run.target_evicted and run.elapsed_s == pytest.approx(10.10)


def test_exhaustion_fills_memory_and_releases():
    os_, _ = machine(5)
    run = exhaustion_evict(os_, KEY, substream(5, "x"))
    assert run.target_evicted and run.peak_usage > 0.9
    assert run.peak_rss_bytes > 0.3 * os_.total_bytes
    assert os_.usage_fraction() < 0.6  # the attacker's memory is gone again


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_waylay_footprint_bounded(seed):
    os_, proc = machine(seed % 11)
    rng = substream(seed, "w")
    targets = rng.choice(os_.frames.n_frames, 16, replace=False)
    res = waylay_until(os_, OracleConfig("fast"), rng, proc.pid, 0x400, targets, max_iterations=25)
    assert res.peak_rss_bytes < FOOTPRINT_BOUND_BYTES
    assert not res.oom_killed
    assert res.peak_usage < 0.9
    assert res.iterations <= 25 and len(res.history) == res.iterations
    if res.success:
        assert res.final_frame in set(targets.tolist())
        assert os_.cache.frame_of(KEY) == res.final_frame


def test_waylay_reaches_a_frame():
    os_, proc = machine(6, 2**12)
    rng = substream(6, "reach")
    ensure_working_set(os_, proc.pid)  # before picking, so the buffer cannot claim the target
    target = int(os_.cache.bulk.items[-1])
    res = waylay_until(os_, OracleConfig("fast"), rng, proc.pid, 0x400, [target], max_iterations=200_000,
                       record=False)
    assert res.success and res.final_frame == target
    assert os_.translate(proc.pid, 0x400) == target


def test_waylay_exhaustion_strategy_trips_oom_regime():
    os_, proc = machine(7)
    res = waylay_until(os_, OracleConfig("fast"), substream(7, "e"), proc.pid, 0x400, [0], max_iterations=5,
                       strategy="exhaustion")
    assert res.peak_usage > 0.9 and res.peak_rss_bytes > 0.3 * os_.total_bytes


def test_chasing_hands_frame_to_cache():
    os_, _ = machine(8, 2**12)
    proc = os_.spawn()
    os_.map_file(proc.pid, 0x400, KEY, private=True)
    rng = substream(8, "chase")
    ensure_working_set(os_, proc.pid)
    res = None
    for _ in range(20):
        target = int(os_.cache.bulk.items[int(rng.integers(0, 10))])
        res = chase_until(os_, OracleConfig("fast"), rng, proc.pid, 0x400, [target], max_iterations=20_000,
                          record=False)
        proc = os_.processes[res.pid]
        if res.success:
            break
    assert res.success
    assert os_.cache.frame_of(KEY) == res.final_frame
    assert res.peak_rss_bytes < FOOTPRINT_BOUND_BYTES


@settings(max_examples=10)
@given(st.integers(100, 5000), st.integers(1, 20_000))
def test_expected_unique_matches_relocations(pool, n):
    os_ = OSModel(FrameTable(pool), substream(pool, n))
    os_.cache.fault_in(("f", 0))
    placed = relocation_frames(os_, ("f", 0), n)
    want = expected_unique(pool, n)
    sd = np.sqrt(pool * np.exp(-n / pool) * (1 - np.exp(-n / pool))) + 1
    assert abs(len(np.unique(placed)) - want) <= 5 * sd
