"""Single-bit opcode flips: decoder subset, flip classes and the flip database."""

from .database import (FlipDatabaseEntry, VerificationReport, load_flip_database, synthetic_image,
                       target_page, verify_database)
from .decoder import DecodeError, Instruction, canonical_mnemonic, decode, encode
from .flips import CANDIDATE_EFFECTS, EFFECTS, Candidate, InstructionFlip, classify_flip, enumerate_flips, scan_binary

__all__ = [
    "CANDIDATE_EFFECTS", "EFFECTS", "Candidate", "DecodeError", "FlipDatabaseEntry", "Instruction",
    "InstructionFlip", "VerificationReport", "canonical_mnemonic", "classify_flip", "decode", "encode",
    "enumerate_flips", "load_flip_database", "scan_binary", "synthetic_image", "target_page", "verify_database",
]
