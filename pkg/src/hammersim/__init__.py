"""Seeded co-simulation of Rowhammer attack primitives, page-cache waylaying and software defenses."""

from .dram import CellParams, ControllerPolicy, DramGeometry, DramState, FlipRecord
from .hammer import HammerTechnique, same_bank_probability, template_memory
from .orchestrator import AttackConfig, optimize_n, run_dos, run_privilege_escalation

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "CellParams", "ControllerPolicy", "DramGeometry", "DramState", "FlipRecord",
    "HammerTechnique", "optimize_n", "run_dos", "run_privilege_escalation", "same_bank_probability",
    "template_memory",
]
