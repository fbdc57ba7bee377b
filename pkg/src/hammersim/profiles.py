"""Machine profiles and the frozen default calibration.

The calibration numbers below are the output of calibration.calibrate() with
the default targets and master seed; tests re-derive them.
"""

from __future__ import annotations

from .dram import CellParams, DramGeometry

DESKTOP_GEOMETRY = DramGeometry()  # DDR4, 16 GiB, 2 channels x 2 ranks x 16 banks
SERVER_GEOMETRY = DramGeometry(refresh_mode="double")
DDR3_GEOMETRY = DramGeometry(banks_per_rank=8, rows_per_bank=65536 // 2)
SMALL_GEOMETRY = DramGeometry(channels=1, ranks=1, banks_per_rank=8, rows_per_bank=4096)  # 256 MiB
# 1 GiB: enough distinct weak cells for desk-scale end-to-end runs
ESCALATION_GEOMETRY = DramGeometry(channels=1, ranks=1, banks_per_rank=16, rows_per_bank=8192)

DESKTOP_CELLS = CellParams(density=0.8, mu=14.474823456064097, sigma=0.4108646775331246,
                           anti_fraction=0.5246666666666667)
ACTIVATION_SCALES = {
    "double_sided": 1.0,
    "single_sided": 1.5323836861679216,
    "one_location": 1.6603058819804621,
}
ATTEMPTS_PER_RUN = 16300

GEOMETRIES = {"desktop": DESKTOP_GEOMETRY, "server": SERVER_GEOMETRY, "small": SMALL_GEOMETRY,
              "escalation": ESCALATION_GEOMETRY}
