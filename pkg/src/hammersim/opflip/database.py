"""Flip database: load, verify against the decoder, and a synthetic target page.

File format, one record per line, tab separated:

    binary  offset(hex)  bit  bytes  original  flipped  exploitable(0/1)

``bytes`` is optional. When present it holds the instruction's original bytes
in hex, starting at the instruction, with the byte at ``offset`` in brackets
(``85[c0]``). Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..physmem import PAGE_SIZE
from .decoder import canonical_mnemonic, decode

FIXTURE = "sudoers_flips.tsv"
FILLER_BYTE = 0x90


class DatabaseFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FlipDatabaseEntry:
    binary: str
    offset: int
    bit: int
    original: str
    flipped: str
    exploitable: bool
    raw: bytes | None = None  # instruction bytes, None when not reconstructible
    index: int = 0  # position of the flipped byte inside raw

    @property
    def start(self) -> int:
        """File offset of the instruction containing the flipped byte."""
        return self.offset - self.index

    @property
    def curated(self) -> bool:
        return self.raw is not None

    @property
    def page(self) -> int:
        return self.offset // PAGE_SIZE

    @property
    def page_bit(self) -> int:
        """Bit offset inside the 4 KiB page (byte * 8 + bit, LSB first)."""
        return (self.offset % PAGE_SIZE) * 8 + self.bit

    @property
    def direction(self) -> str | None:
        if self.raw is None:
            return None
        return "1to0" if self.raw[self.index] >> self.bit & 1 else "0to1"

    def to_line(self) -> str:
        if self.raw is None:
            raw = ""
        else:
            h = self.raw.hex()
            raw = f"{h[:2 * self.index]}[{h[2 * self.index:2 * self.index + 2]}]{h[2 * self.index + 2:]}"
        return "\t".join([self.binary, f"0x{self.offset:x}", str(self.bit), raw, self.original,
                          self.flipped, "1" if self.exploitable else "0"])


def _parse_bytes(field: str, lineno: int) -> tuple[bytes | None, int]:
    if not field:
        return None, 0
    m = re.fullmatch(r"((?:[0-9a-fA-F]{2})*)\[([0-9a-fA-F]{2})\]((?:[0-9a-fA-F]{2})*)", field)
    if not m:
        raise DatabaseFormatError(f"line {lineno}: bad bytes field {field!r}")
    return bytes.fromhex("".join(m.groups())), len(m.group(1)) // 2


def parse_database(text: str) -> list[FlipDatabaseEntry]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DatabaseFormatError(f"line {lineno}: expected 7 tab-separated fields, got {len(parts)}")
        binary, offset, bit, raw, original, flipped, exploitable = parts
        try:
            offset_v = int(offset, 16)
            bit_v = int(bit)
        except ValueError as exc:
            raise DatabaseFormatError(f"line {lineno}: {exc}") from None
        if not 0 <= bit_v <= 7:
            raise DatabaseFormatError(f"line {lineno}: bit offset must be 0..7")
        if exploitable not in ("0", "1"):
            raise DatabaseFormatError(f"line {lineno}: exploitable must be 0 or 1")
        raw_v, index = _parse_bytes(raw, lineno)
        entries.append(FlipDatabaseEntry(binary, offset_v, bit_v, original, flipped,
                                         exploitable == "1", raw_v, index))
    return entries


def load_flip_database(path: str | Path | None = None) -> list[FlipDatabaseEntry]:
    """Load a flip database file; the bundled sudoers fixture by default."""
    if path is None:
        text = resources.files(__package__).joinpath("data", FIXTURE).read_text()
    else:
        text = Path(path).read_text()
    return parse_database(text)


def write_database(entries, path) -> None:
    with open(path, "w") as fh:
        fh.write("# binary\toffset\tbit\tbytes\toriginal\tflipped\texploitable\n")
        for e in entries:
            fh.write(e.to_line() + "\n")


def _num(m: re.Match) -> str:
    return str(int(m.group(1), 16))


def normalize_asm(text: str) -> tuple[str, list[str]]:
    """Mnemonic and operand list with IDA and 0x hex literals turned into decimal."""
    text = text.strip().lower()
    text = re.sub(r"\bshort\b|\bnear ptr\b", " ", text)
    text = re.sub(r"\b(?:loc|unk)_([0-9a-f]+)\b", _num, text)
    text = re.sub(r"\b0x([0-9a-f]+)\b", _num, text)
    text = re.sub(r"\b([0-9][0-9a-f]*)h\b", _num, text)
    text = re.sub(r"\s+", " ", text).strip()
    mnemonic, _, rest = text.partition(" ")
    operands = [op.strip().replace(" ", "") for op in rest.split(",")] if rest else []
    return canonical_mnemonic(mnemonic), operands


@dataclass(frozen=True)
class VerificationRow:
    entry: FlipDatabaseEntry
    decoded: str
    matched: bool
    note: str = ""


@dataclass(frozen=True)
class VerificationReport:
    rows: tuple[VerificationRow, ...]
    skipped: int

    @property
    def matched(self) -> int:
        return sum(r.matched for r in self.rows)

    @property
    def mismatched(self) -> list[VerificationRow]:
        return [r for r in self.rows if not r.matched]

    @property
    def ok(self) -> bool:
        return bool(self.rows) and not self.mismatched


def _compare(entry: FlipDatabaseEntry, expected: str, raw: bytes) -> tuple[bool, str, str]:
    ins = decode(raw, 0)
    if not ins.legal:
        return False, "(bad)", "flipped bytes do not decode"
    operands = list(ins.operands)
    if ins.target is not None:
        operands = [str(entry.start + ins.target)]
    got = ins.mnemonic + (" " + ", ".join(operands) if operands else "")
    want_m, want_ops = normalize_asm(expected)
    have_m, have_ops = normalize_asm(got)
    if want_m != have_m:
        return False, got, f"mnemonic {have_m} != {want_m}"
    if ins.target is not None and want_ops and not want_ops[0].isdigit():
        return True, got, "symbolic branch target, mnemonic compared"
    if want_ops != have_ops:
        return False, got, f"operands {have_ops} != {want_ops}"
    return True, got, ""


def verify_database(entries) -> VerificationReport:
    """Re-derive every byte-reconstructible entry with the decoder.

    Checks that the original bytes decode to the listed original instruction
    and that flipping the listed bit yields the listed flipped instruction.
    """
    rows, skipped = [], 0
    for e in entries:
        if not e.curated:
            skipped += 1
            continue
        ok_orig, got_orig, note = _compare(e, e.original, e.raw)
        flipped = bytearray(e.raw)
        flipped[e.index] ^= 1 << e.bit
        ok, got, note2 = _compare(e, e.flipped, bytes(flipped))
        if not ok_orig:
            rows.append(VerificationRow(e, got, False, f"original: {note}"))
        else:
            rows.append(VerificationRow(e, got, ok, note2))
    return VerificationReport(tuple(rows), skipped)


def synthetic_image(entries, size: int | None = None) -> bytes:
    """File image holding every reconstructible instruction, filler elsewhere."""
    curated = [e for e in entries if e.curated]
    end = max((e.start + len(e.raw) for e in curated), default=0)
    size = size or -(-end // PAGE_SIZE) * PAGE_SIZE
    image = bytearray([FILLER_BYTE]) * size
    for e in curated:
        image[e.start:e.start + len(e.raw)] = e.raw
    return bytes(image)


def target_page(entries) -> tuple[int, bytes]:
    """Page index and pristine content of the page carrying the curated entries."""
    pages = {e.page for e in entries if e.curated}
    if len(pages) != 1:
        raise DatabaseFormatError("curated entries must share one page")
    page = pages.pop()
    image = synthetic_image(entries, (page + 1) * PAGE_SIZE)
    return page, image[page * PAGE_SIZE:(page + 1) * PAGE_SIZE]
