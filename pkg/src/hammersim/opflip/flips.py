"""Single-bit flip enumeration and syntactic exploitability classes."""

from __future__ import annotations

from dataclasses import dataclass

from .decoder import PREFIXES, DecodeError, Instruction, decode

EFFECTS = ("branch_inversion", "branch_condition_change", "check_bypass", "flag_neutralizing",
           "operand_change", "control_transfer_change", "halt", "prefix_absorption", "illegal", "other")
CANDIDATE_EFFECTS = ("branch_inversion", "flag_neutralizing", "check_bypass")

_FLAG_SETTERS = {"test", "cmp", "and", "or", "xor", "sub", "add"}
_FLAG_NEUTRAL = {"xchg", "mov", "lea", "push", "pop", "nop"}


@dataclass(frozen=True)
class InstructionFlip:
    original: Instruction
    byte_index: int
    bit: int
    flipped: Instruction
    effect: str

    @property
    def flipped_byte(self) -> int:
        return self.original.raw[self.byte_index] ^ (1 << self.bit)


def _prefix_count(ins: Instruction) -> int:
    return len(ins.prefixes) + (ins.rex is not None)


def classify_flip(original: Instruction, flipped: Instruction, byte_index: int | None = None) -> str:
    """Effect class of a flip, from opcode and condition codes only."""
    if byte_index is not None and byte_index < _prefix_count(original) and original.rex is not None \
            and byte_index == len(original.prefixes):
        return "operand_change"
    if byte_index is not None and byte_index >= _prefix_count(original):
        new_byte = flipped.raw[byte_index] if byte_index < len(flipped.raw) else None
        if byte_index == _prefix_count(original) and (new_byte in PREFIXES or
                                                      (new_byte is not None and 0x40 <= new_byte <= 0x4F)):
            return "prefix_absorption"
    if not flipped.legal:
        return "illegal"
    if flipped.mnemonic == "hlt":
        return "halt"
    if original.is_jcc:
        if flipped.is_jcc:
            if flipped.condition == original.condition:
                return "control_transfer_change"
            if flipped.condition == original.condition ^ 1:
                return "branch_inversion"
            return "branch_condition_change"
        return "check_bypass"
    if original.mnemonic in _FLAG_SETTERS and flipped.mnemonic != original.mnemonic:
        if flipped.mnemonic in _FLAG_NEUTRAL:
            return "flag_neutralizing"
        if flipped.mnemonic == "add" and flipped.immediate:
            return "flag_neutralizing"
    if flipped.mnemonic == original.mnemonic:
        return "operand_change"
    return "other"


def enumerate_flips(buf: bytes, offset: int = 0) -> list[InstructionFlip]:
    """Every single-bit variant of the instruction at offset, re-decoded in place."""
    original = decode(buf, offset)
    if not original.legal:
        raise DecodeError(f"no supported instruction at offset {offset:#x}")
    out = []
    for i in range(original.length):
        for bit in range(8):
            mutated = bytearray(buf)
            mutated[offset + i] ^= 1 << bit
            try:
                flipped = decode(bytes(mutated), offset)
            except DecodeError:
                flipped = Instruction(bytes(mutated[offset:offset + 1]), "(truncated)", legal=False,
                                      opcode=mutated[offset])
            out.append(InstructionFlip(original, i, bit, flipped, classify_flip(original, flipped, i)))
    return out


@dataclass(frozen=True)
class Candidate:
    offset: int  # buffer offset of the flipped byte
    bit: int
    flip: InstructionFlip


def scan_binary(image: bytes, ranges) -> tuple[list[Candidate], list[str]]:
    """Walk instruction ranges, keep flips whose effect can skip a check.

    Returns the candidates and notes for regions that could not be decoded.
    """
    candidates, notes = [], []
    for start, end in ranges:
        if not 0 <= start <= end <= len(image):
            raise ValueError(f"range {start:#x}..{end:#x} outside image")
        pos = start
        while pos < end:
            try:
                ins = decode(image, pos)
            except DecodeError as exc:
                notes.append(f"{pos:#x}: {exc}")
                break
            if not ins.legal:
                notes.append(f"{pos:#x}: undecodable byte {image[pos]:02x} skipped")
                pos += 1
                continue
            for flip in enumerate_flips(image, pos):
                if flip.effect in CANDIDATE_EFFECTS:
                    candidates.append(Candidate(pos + flip.byte_index, flip.bit, flip))
            pos += ins.length
    return candidates, notes
