"""A small x86-64 decoder covering the opcode classes that matter for single-bit flips.

Supported: Jcc short/near, push/pop r64, xor/or/add forms, test, xchg, mov,
mov from segment register, lea, nop, hlt; segment/66/67 prefixes and REX.
Anything else decodes as an illegal one-byte instruction. Mnemonics follow
IDA conventions (jz/jnz rather than je/jne).
"""

from __future__ import annotations

from dataclasses import dataclass

SEGMENT_PREFIXES = {0x26: "es", 0x2E: "cs", 0x36: "ss", 0x3E: "ds", 0x64: "fs", 0x65: "gs"}
PREFIXES = set(SEGMENT_PREFIXES) | {0x66, 0x67}
CONDITIONS = ("o", "no", "b", "nb", "z", "nz", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g")
ALIASES = {"je": "jz", "jne": "jnz", "jae": "jnb", "jc": "jb", "jnc": "jnb", "jnae": "jb",
           "jna": "jbe", "jnbe": "ja", "jpe": "jp", "jpo": "jnp", "jnge": "jl", "jnl": "jge",
           "jng": "jle", "jnle": "jg", "pushq": "push", "popq": "pop", "xorb": "xor"}
MAX_LENGTH = 15

_REG64 = ("rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
          "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
_REG32 = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
          "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d")
_REG16 = ("ax", "cx", "dx", "bx", "sp", "bp", "si", "di",
          "r8w", "r9w", "r10w", "r11w", "r12w", "r13w", "r14w", "r15w")
_REG8 = ("al", "cl", "dl", "bl", "ah", "ch", "dh", "bh")
_REG8_REX = ("al", "cl", "dl", "bl", "spl", "bpl", "sil", "dil",
             "r8b", "r9b", "r10b", "r11b", "r12b", "r13b", "r14b", "r15b")
_SREG = ("es", "cs", "ss", "ds", "fs", "gs")

# opcode -> (mnemonic, form); forms: Eb,Gb / Ev,Gv / Gb,Eb / Gv,Ev / AL,Ib / eAX,Iz
_ALU = {0x00: "add", 0x08: "or", 0x30: "xor"}
_MODRM_OPS = {0x84: ("test", "EbGb"), 0x85: ("test", "EvGv"), 0x87: ("xchg", "EvGv"),
              0x88: ("mov", "EbGb"), 0x89: ("mov", "EvGv"), 0x8A: ("mov", "GbEb"),
              0x8B: ("mov", "GvEv"), 0x8C: ("mov", "EvSw"), 0x8D: ("lea", "GvM")}
for _base, _name in _ALU.items():
    _MODRM_OPS.update({_base: (_name, "EbGb"), _base + 1: (_name, "EvGv"),
                       _base + 2: (_name, "GbEb"), _base + 3: (_name, "GvEv")})
_MODRM_OPS.pop(0x00), _MODRM_OPS.pop(0x01), _MODRM_OPS.pop(0x02), _MODRM_OPS.pop(0x03)
_IMM_OPS = {0x04: ("add", "ALIb"), 0x05: ("add", "eAXIz"), 0x0C: ("or", "ALIb"),
            0x0D: ("or", "eAXIz"), 0x34: ("xor", "ALIb"), 0x35: ("xor", "eAXIz")}


class DecodeError(ValueError):
    """The buffer ends in the middle of an instruction."""


def hex_imm(value: int) -> str:
    return f"-0x{-value:X}" if value < 0 else f"0x{value:X}"


@dataclass(frozen=True)
class Instruction:
    raw: bytes
    mnemonic: str
    operands: tuple[str, ...] = ()
    legal: bool = True
    prefixes: bytes = b""
    rex: int | None = None
    opcode: int = 0  # two-byte opcodes are 0x0Fxx
    target: int | None = None  # branch target, buffer-relative
    immediate: int | None = None

    @property
    def length(self) -> int:
        return len(self.raw)

    @property
    def text(self) -> str:
        return f"{self.mnemonic} {', '.join(self.operands)}".strip()

    @property
    def is_jcc(self) -> bool:
        return 0x70 <= self.opcode <= 0x7F or 0x0F80 <= self.opcode <= 0x0F8F

    @property
    def condition(self) -> int | None:
        return self.opcode & 0xF if self.is_jcc else None

    def __str__(self) -> str:
        return self.text


def canonical_mnemonic(name: str) -> str:
    name = name.strip().lower()
    return ALIASES.get(name, name)


def _signed(value: int, bits: int) -> int:
    return value - (1 << bits) if value >> (bits - 1) else value


class _Reader:
    def __init__(self, buf: bytes, start: int):
        self.buf, self.start, self.pos = buf, start, start

    def byte(self) -> int:
        if self.pos >= len(self.buf):
            raise DecodeError(f"truncated instruction at offset {self.start:#x}")
        if self.pos - self.start >= MAX_LENGTH:
            raise DecodeError("instruction longer than 15 bytes")
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def imm(self, size: int) -> int:
        value = 0
        for i in range(size):
            value |= self.byte() << (8 * i)
        return value


def _modrm(r: _Reader, rex: int, addr32: bool, seg: str | None):
    """Returns (mod, reg index, rm operand text builder)."""
    m = r.byte()
    mod, reg, rm = m >> 6, (m >> 3) & 7, m & 7
    reg |= 8 if rex & 4 else 0
    if mod == 3:
        return mod, reg, rm | (8 if rex & 1 else 0), None
    regs = _REG32 if addr32 else _REG64
    base = index = None
    scale = 1
    disp = 0
    if rm == 4:
        sib = r.byte()
        scale = 1 << (sib >> 6)
        idx = ((sib >> 3) & 7) | (8 if rex & 2 else 0)
        index = None if idx == 4 else regs[idx]
        b = sib & 7
        if b == 5 and mod == 0:
            disp = _signed(r.imm(4), 32)
        else:
            base = regs[b | (8 if rex & 1 else 0)]
    elif rm == 5 and mod == 0:
        base = "rip"
        disp = _signed(r.imm(4), 32)
    else:
        base = regs[rm | (8 if rex & 1 else 0)]
    if mod == 1:
        disp = _signed(r.byte(), 8)
    elif mod == 2:
        disp = _signed(r.imm(4), 32)
    parts = []
    if base:
        parts.append(base)
    if index:
        parts.append(index if scale == 1 else f"{index}*{scale}")
    text = "+".join(parts)
    if disp or not parts:
        sign = "-" if disp < 0 else ("+" if parts else "")
        text += f"{sign}{hex_imm(abs(disp))}"
    mem = f"[{text}]"
    if seg:
        mem = f"{seg}:{mem}"
    return mod, reg, None, mem


def _reg(index: int, size: int, rex: int | None) -> str:
    if size == 8:
        return (_REG8_REX if rex is not None else _REG8)[index] if index < 8 or rex is not None else _REG8_REX[index]
    return {16: _REG16, 32: _REG32, 64: _REG64}[size][index]


def _illegal(buf: bytes, offset: int) -> Instruction:
    return Instruction(bytes(buf[offset:offset + 1]), "(bad)", legal=False, opcode=buf[offset])


def decode(buf: bytes, offset: int = 0) -> Instruction:
    """Decode one instruction at offset (64-bit mode)."""
    if not 0 <= offset < len(buf):
        raise ValueError(f"offset {offset} outside buffer of length {len(buf)}")
    r = _Reader(buf, offset)
    prefixes = bytearray()
    while True:
        b = r.byte()
        if b not in PREFIXES:
            break
        prefixes.append(b)
    rex = None
    if 0x40 <= b <= 0x4F:
        rex = b
        b = r.byte()
    opsize = 64 if rex is not None and rex & 8 else (16 if 0x66 in prefixes else 32)
    addr32 = 0x67 in prefixes
    seg = next((SEGMENT_PREFIXES[p] for p in reversed(prefixes) if p in SEGMENT_PREFIXES), None)
    rexv = rex or 0

    def done(mnemonic, operands=(), **kw):
        return Instruction(bytes(buf[offset:r.pos]), mnemonic, tuple(operands), True,
                           bytes(prefixes), rex, kw.pop("opcode", b), **kw)

    if 0x70 <= b <= 0x7F:
        disp = _signed(r.byte(), 8)
        target = r.pos + disp
        return done("j" + CONDITIONS[b & 0xF], [hex_imm(target)], target=target)
    if b == 0x0F:
        b2 = r.byte()
        if 0x80 <= b2 <= 0x8F:
            disp = _signed(r.imm(4), 32)
            target = r.pos + disp
            return done("j" + CONDITIONS[b2 & 0xF], [hex_imm(target)], target=target, opcode=0x0F00 | b2)
        return _illegal(buf, offset)
    if 0x50 <= b <= 0x5F:
        reg = (b & 7) | (8 if rexv & 1 else 0)
        size = 16 if 0x66 in prefixes else 64
        return done("push" if b < 0x58 else "pop", [_reg(reg, size, rex)])
    if b == 0x90:
        return done("nop")
    if b == 0xF4:
        return done("hlt")
    if b in _IMM_OPS:
        name, form = _IMM_OPS[b]
        if form == "ALIb":
            value = r.byte()
            return done(name, ["al", hex_imm(value)], immediate=value)
        size = min(opsize, 32) // 8
        value = r.imm(size)
        if opsize == 64:
            value = _signed(value, 32) & (2**64 - 1)
        return done(name, [_reg(0, opsize, rex), hex_imm(value)], immediate=value)
    if b in _MODRM_OPS:
        name, form = _MODRM_OPS[b]
        mod, reg, rm_reg, mem = _modrm(r, rexv, addr32, seg)
        if form == "GvM":
            if mem is None:
                return _illegal(buf, offset)
            return done(name, [_reg(reg, opsize, rex), mem])
        if form == "EvSw":
            if (reg & 7) >= len(_SREG):
                return _illegal(buf, offset)
            dst = mem if mem is not None else _reg(rm_reg, 64 if opsize == 64 else 32, rex)
            return done(name, [dst, _SREG[reg & 7]])
        size = 8 if "b" in form else opsize
        reg_text = _reg(reg, size, rex)
        rm_text = mem if mem is not None else _reg(rm_reg, size, rex)
        ops = [rm_text, reg_text] if form.startswith("E") else [reg_text, rm_text]
        return done(name, ops)
    return _illegal(buf, offset)


def encode(instruction: Instruction) -> bytes:
    """Raw encoding of a decoded instruction."""
    return instruction.raw
