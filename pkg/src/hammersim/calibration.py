"""Fit the weak-cell model to per-technique templating statistics.

Targets are offset coverage (fraction of the 32768 page bit offsets seen to
flip), the share of 0->1 flips and the flip rate F of each technique, plus the
server observation of a handful of flips over a long one-location run under
doubled refresh.

Coverage after N attempts is 1 - exp(-N E rho / 32768) with E the expected
flips per attempt and rho the share of victim-row draws that hit a row not
templated before (random rows repeat, and a repeated row re-flips the same
cells). Coverage pins N E while the rate pins E alone, so the run length N and
each E are fitted jointly: every residual is normalized by its tolerance and
the worst one is minimized. Coverage residuals use half their tolerance so the
sampling noise of a finite run keeps room to spare.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .dram import ROUND_NS, CellParams, ControllerPolicy, DramGeometry, DramState
from .hammer import KINDS, HammerTechnique, pick_addresses, template_memory
from .physmem import PAGE_BITS
from .rng import substream


def rate_from_minutes(minutes: float, exploitable: int = 29) -> float:
    """Flip rate implied by an expected time per exploitable target flip."""
    return 2**16 / (exploitable * minutes * 60)


def _default_coverage():
    return {"double_sided": 0.770, "single_sided": 0.785, "one_location": 0.365}


def _default_zero_to_one():
    return {"double_sided": 0.517, "single_sided": 0.541, "one_location": 0.516}


def _default_rates():
    return {"double_sided": rate_from_minutes(17), "single_sided": rate_from_minutes(19),
            "one_location": 0.67}


@dataclass(frozen=True)
class CalibrationTargets:
    coverage: dict = field(default_factory=_default_coverage)
    zero_to_one: dict = field(default_factory=_default_zero_to_one)
    flip_rates: dict = field(default_factory=_default_rates)
    server_flips: float = 3.0
    server_hours: float = 8.0
    density: float = 0.8
    coverage_tol: float = 0.03
    rate_tol: float = 0.10
    min_attempts: int = 10_000

    def validate(self) -> None:
        for name in ("coverage", "zero_to_one", "flip_rates"):
            table = getattr(self, name)
            if set(table) != set(KINDS):
                raise ValueError(f"{name} needs exactly the techniques {KINDS}")
        for kind in KINDS:
            if not 0 < self.coverage[kind] < 1:
                raise ValueError("coverage targets must lie in (0, 1)")
            if not 0 <= self.zero_to_one[kind] <= 1:
                raise ValueError("0->1 fractions must lie in [0, 1]")
            if self.flip_rates[kind] <= 0:
                raise ValueError("flip rates must be positive")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.server_flips <= 0 or self.server_hours <= 0:
            raise ValueError("server target must be positive")


@dataclass(frozen=True)
class CalibrationRecord:
    cells: CellParams
    scales: dict
    attempts_per_run: int
    predicted: dict
    server_flips: float
    residuals: dict
    converged: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["cells"] = asdict(self.cells)
        return out


class CalibrationError(Exception):
    def __init__(self, message: str, record: CalibrationRecord | None = None):
        super().__init__(message)
        self.record = record


def stress_profile(kind: str, geometry: DramGeometry, policy: ControllerPolicy | None = None,
                   samples: int = 128, seed: int = 0, rounds: int = 5_000_000) -> list[np.ndarray]:
    """Peak victim stress for sampled attempts of a technique (no cells involved)."""
    technique = HammerTechnique(kind, rounds_per_attempt=rounds)
    rng = substream(seed, "calibration-profile", kind)
    out = []
    for _ in range(samples):
        state = DramState(geometry, policy, CellParams(density=0.0), seed=seed)
        state.tick(float(rng.integers(0, geometry.effective_refresh_ns)))
        addresses = pick_addresses(technique, state, rng, "full")
        state.hammer(addresses, rounds)
        out.append(np.asarray(sorted(state.last_peaks.values())))
    return out


def expected_flips(profile: list[np.ndarray], cells: CellParams, scale: float,
                   row_bits: int = 2 * PAGE_BITS) -> float:
    """Mean flips per attempt: every victim row contributes row_bits * cdf(stress) / 2.

    The half is the chance that a cell's stored bit matches its orientation.
    """
    stress = np.concatenate(profile) * scale
    per_row = row_bits * cells.cdf(stress) * 0.5
    return float(per_row.sum() / len(profile))


def predicted_coverage(per_attempt: float, attempts: int, victims: float, total_rows: int) -> float:
    """Expected offset coverage of a run, discounting re-templated rows."""
    lam = attempts * victims / total_rows
    rho = -math.expm1(-lam) / lam if lam > 0 else 1.0
    return -math.expm1(-attempts * per_attempt * rho / PAGE_BITS)


def _fit_run(targets: CalibrationTargets, victims: dict, total_rows: int, attempt_s: float):
    """Jointly choose the run length and per-attempt flip expectations."""
    cov_tol = targets.coverage_tol / 2

    def per_technique(n, k):
        def worst(e):
            cov = predicted_coverage(e, n, victims[k], total_rows)
            return max(abs(cov - targets.coverage[k]) / cov_tol,
                       abs(e / attempt_s / targets.flip_rates[k] - 1) / targets.rate_tol)
        hi = 20 * targets.flip_rates[k] * attempt_s
        res = minimize_scalar(worst, bounds=(1e-6, hi), method="bounded", options={"xatol": 1e-10})
        return res.fun, float(res.x)

    best = None
    for n in range(targets.min_attempts, 4 * targets.min_attempts, 25):
        score = max(per_technique(n, k)[0] for k in KINDS)
        if best is None or score < best[0] - 1e-12:
            best = (score, n)
    n_run = best[1]
    return n_run, {k: per_technique(n_run, k)[1] for k in KINDS}


def _solve_log(fn, lo: float, hi: float) -> float:
    return math.exp(brentq(lambda x: fn(math.exp(x)), math.log(lo), math.log(hi), xtol=1e-12))


def calibrate(targets: CalibrationTargets | None = None, geometry: DramGeometry | None = None,
              policy: ControllerPolicy | None = None, seed: int = 0, samples: int = 128,
              server_geometry: DramGeometry | None = None) -> CalibrationRecord:
    """Fit (d, mu, sigma, anti fraction) and per-technique activation scales.

    Double-sided is the reference technique (scale 1). For a given sigma, mu
    matches the double-sided flips per attempt and bisection finds the other
    scales; sigma itself is set by the server observation, which probes how
    steeply the threshold tail falls when refresh doubles.
    """
    targets = targets or CalibrationTargets()
    targets.validate()
    geometry = geometry or DramGeometry()
    server_geometry = server_geometry or replace(geometry, refresh_mode="double")
    attempt_s = 5_000_000 * ROUND_NS * 1e-9

    profiles = {k: stress_profile(k, geometry, policy, samples, seed) for k in KINDS}
    victims = {k: float(np.mean([len(p) for p in profiles[k]])) for k in KINDS}
    total_rows = geometry.banks_total * geometry.rows_per_bank
    n_run, per_attempt = _fit_run(targets, victims, total_rows, attempt_s)
    server_profile = stress_profile("one_location", server_geometry, policy, samples, seed)
    anti = float(np.mean([targets.zero_to_one[k] for k in KINDS]))

    def fit(sigma: float):
        def ds_gap(mu):
            cells = CellParams(targets.density, mu, sigma, anti)
            return expected_flips(profiles["double_sided"], cells, 1.0) - per_attempt["double_sided"]
        mu = brentq(ds_gap, 0.0, 60.0, xtol=1e-12)
        cells = CellParams(targets.density, mu, sigma, anti)
        scales = {"double_sided": 1.0}
        for k in ("single_sided", "one_location"):
            scales[k] = _solve_log(lambda m, k=k: expected_flips(profiles[k], cells, m) - per_attempt[k],
                                   1e-4, 1e4)
        return cells, scales

    server_attempts = targets.server_hours * 3600 / attempt_s

    def server_gap(sigma):
        cells, scales = fit(sigma)
        flips = server_attempts * expected_flips(server_profile, cells, scales["one_location"])
        return math.log(flips) - math.log(targets.server_flips)

    grid = np.linspace(0.15, 2.5, 48)
    gaps = [server_gap(s) for s in grid]
    bracket = next((i for i in range(len(grid) - 1) if gaps[i] * gaps[i + 1] <= 0), None)
    if bracket is None:
        best = grid[int(np.argmin(np.abs(gaps)))]
        cells, scales = fit(best)
        record = _record(cells, scales, n_run, targets, per_attempt, attempt_s,
                         math.exp(server_gap(best)) * targets.server_flips, False, victims, total_rows)
        raise CalibrationError(f"server target unreachable; best residual {min(np.abs(gaps)):.3f} (log)",
                               record)
    sigma = brentq(server_gap, grid[bracket], grid[bracket + 1], xtol=1e-10)
    cells, scales = fit(sigma)
    server = server_attempts * expected_flips(server_profile, cells, scales["one_location"])
    record = _record(cells, scales, n_run, targets, per_attempt, attempt_s, server, True, victims, total_rows)
    if not record.converged:
        raise CalibrationError("targets not reachable within tolerance", record)
    return record


def _record(cells, scales, n_run, targets, per_attempt, attempt_s, server, ok,
            victims, total_rows) -> CalibrationRecord:
    predicted, residuals = {}, {}
    for k in KINDS:
        cov = predicted_coverage(per_attempt[k], n_run, victims[k], total_rows)
        rate = per_attempt[k] / attempt_s
        predicted[k] = {"coverage": round(cov, 6), "flip_rate": round(rate, 6),
                        "zero_to_one": round(cells.anti_fraction, 6)}
        residuals[k] = {
            "coverage_pp": round(100 * (cov - targets.coverage[k]), 4),
            "rate_rel": round(rate / targets.flip_rates[k] - 1, 6),
            "zero_to_one_pp": round(100 * (cells.anti_fraction - targets.zero_to_one[k]), 4),
        }
        ok = ok and abs(cov - targets.coverage[k]) <= targets.coverage_tol
        ok = ok and abs(rate / targets.flip_rates[k] - 1) <= targets.rate_tol
        ok = ok and abs(cells.anti_fraction - targets.zero_to_one[k]) <= targets.coverage_tol
    scales = {k: float(v) for k, v in scales.items()}
    return CalibrationRecord(cells, scales, n_run, predicted, float(server), residuals, bool(ok))


def simulate_run(record: CalibrationRecord, kind: str, seed: int, attempts: int | None = None,
                 geometry: DramGeometry | None = None, policy: ControllerPolicy | None = None):
    """Scaled-down templating run with the calibrated model over all of DRAM."""
    state = DramState(geometry, policy, record.cells, seed=seed)
    rng = substream(seed, "templating", kind)
    return template_memory(state, HammerTechnique(kind), rng, scale=record.scales[kind],
                           max_attempts=attempts or record.attempts_per_run)
