import math

import pytest

from hammersim import profiles
from hammersim.calibration import (CalibrationError, CalibrationTargets, calibrate, predicted_coverage,
                                   rate_from_minutes)


@pytest.fixture(scope="module")
def record():
    return calibrate()


def test_frozen_profile_is_reproducible(record):
    assert record.converged
    assert record.cells == profiles.DESKTOP_CELLS
    assert record.scales == pytest.approx(profiles.ACTIVATION_SCALES, rel=1e-12)
    assert record.attempts_per_run == profiles.ATTEMPTS_PER_RUN


def test_record_meets_targets(record):
    targets = CalibrationTargets()
    for kind, res in record.residuals.items():
        assert abs(res["coverage_pp"]) <= 100 * targets.coverage_tol
        assert abs(res["rate_rel"]) <= targets.rate_tol
    assert record.server_flips == pytest.approx(targets.server_flips, rel=1e-6)
    assert set(record.to_dict()) >= {"cells", "scales", "converged"}


def test_rate_from_minutes():
    # one exploitable flip per 17 minutes over 2^16 offsets with 29 useful ones
    assert rate_from_minutes(17) == pytest.approx(2**16 / (29 * 17 * 60))


def test_coverage_saturates():
    assert predicted_coverage(0.0, 1000, 2, 1000) == 0.0
    assert predicted_coverage(50.0, 10**6, 2, 10**6) == pytest.approx(1.0, abs=1e-6)
    assert math.isfinite(predicted_coverage(3.0, 100, 2, 1000))


def test_unreachable_targets_raise():
    bad = CalibrationTargets(server_flips=1e12)
    with pytest.raises(CalibrationError) as info:
        calibrate(bad)
    assert info.value.record is not None and not info.value.record.converged
