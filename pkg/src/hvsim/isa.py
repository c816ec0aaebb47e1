"""GISA-32 instruction set: encoding, decoding, assembler, disassembler.

Little-endian, variable-length encoding (1 to 6 bytes).  Eight general
registers r0..r7; r7 is the stack pointer, r6 the frame pointer by
convention.  Two-register instructions pack operands into one byte as
(first << 4) | second.

  opcode  mnemonic  operands              length
  0x00    NOP                             1
  0x01    HLT                             1
  0x02    MOVI      rd, imm32             6
  0x03    MOV       rd, rs                2
  0x04    LD        rd, [rs+off16]        4
  0x05    ST        [rd+off16], rs        4
  0x06    ADD       rd, rs                2
  0x07    SUB       rd, rs                2
  0x08    AND       rd, rs                2
  0x09    OR        rd, rs                2
  0x0A    XOR       rd, rs                2
  0x0B    ADDI      rd, imm16             4
  0x0C    CMP       rd, rs                2
  0x0D    JMP       addr32                5
  0x0E    JZ        addr32                5
  0x0F    JNZ       addr32                5
  0x10    CALL      addr32                5
  0x11    RET                             1
  0x12    PUSH      rs                    2
  0x13    POP       rd                    2
  0x14    IN        rd, port8             3
  0x15    OUT       port8, rs             3
  0x16    SYSCALL                         1
  0x17    IRET                            1
  0x18    MOVCR     cr, rs                2
  0x19    MOVRC     rd, cr                2
  0x1A    STI                             1
  0x1B    CLI                             1
  0xCC    BRK                             1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "Op",
    "Cr",
    "Instruction",
    "OpError",
    "DecodeError",
    "AsmError",
    "encode",
    "decode",
    "instr_length",
    "assemble",
    "disassemble",
    "AssembledImage",
    "NUM_REGS",
    "SP",
    "FP",
]

NUM_REGS = 8
SP = 7
FP = 6


class Op(IntEnum):
    NOP = 0x00
    HLT = 0x01
    MOVI = 0x02
    MOV = 0x03
    LD = 0x04
    ST = 0x05
    ADD = 0x06
    SUB = 0x07
    AND = 0x08
    OR = 0x09
    XOR = 0x0A
    ADDI = 0x0B
    CMP = 0x0C
    JMP = 0x0D
    JZ = 0x0E
    JNZ = 0x0F
    CALL = 0x10
    RET = 0x11
    PUSH = 0x12
    POP = 0x13
    IN = 0x14
    OUT = 0x15
    SYSCALL = 0x16
    IRET = 0x17
    MOVCR = 0x18
    MOVRC = 0x19
    STI = 0x1A
    CLI = 0x1B
    BRK = 0xCC


class Cr(IntEnum):
    """Control register indices for MOVCR/MOVRC."""

    PTBR = 0
    IVT = 1
    FAR = 2
    ERR = 3
    EPC = 4
    EFLAGS = 5
    EMODE = 6
    PGEN = 7


# length in bytes of the full instruction, by opcode
_LENGTHS = {
    Op.NOP: 1, Op.HLT: 1, Op.MOVI: 6, Op.MOV: 2, Op.LD: 4, Op.ST: 4,
    Op.ADD: 2, Op.SUB: 2, Op.AND: 2, Op.OR: 2, Op.XOR: 2, Op.ADDI: 4,
    Op.CMP: 2, Op.JMP: 5, Op.JZ: 5, Op.JNZ: 5, Op.CALL: 5, Op.RET: 1,
    Op.PUSH: 2, Op.POP: 2, Op.IN: 3, Op.OUT: 3, Op.SYSCALL: 1,
    Op.IRET: 1, Op.MOVCR: 2, Op.MOVRC: 2, Op.STI: 1, Op.CLI: 1, Op.BRK: 1,
}

_NO_OPERAND = {Op.NOP, Op.HLT, Op.RET, Op.SYSCALL, Op.IRET, Op.STI, Op.CLI, Op.BRK}
_TWO_REG = {Op.MOV, Op.ADD, Op.SUB, Op.AND, Op.OR, Op.XOR, Op.CMP}
_ADDR32 = {Op.JMP, Op.JZ, Op.JNZ, Op.CALL}
_ONE_REG = {Op.PUSH, Op.POP}

CALL_LEN = _LENGTHS[Op.CALL]
MAX_INSTR_LEN = max(_LENGTHS.values())


class OpError(Exception):
    pass


class DecodeError(OpError):
    """Raised for an unknown opcode or a truncated encoding."""

    def __init__(self, msg: str, offset: int = 0):
        super().__init__(msg)
        self.offset = offset


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction.  Unused operand slots stay zero.

    Operand meaning by opcode:
      MOVI            a=rd    b=imm32 (unsigned)
      MOV/ALU/CMP     a=rd    b=rs
      LD              a=rd    b=rs    c=off16 (signed)
      ST              a=rbase b=rsrc  c=off16 (signed)
      ADDI            a=rd    b=imm16 (signed)
      JMP/JZ/JNZ/CALL a=addr32
      PUSH/POP        a=r
      IN              a=rd    b=port
      OUT             a=port  b=rs
      MOVCR           a=cr    b=rs
      MOVRC           a=rd    b=cr
    """

    op: Op
    a: int = 0
    b: int = 0
    c: int = 0


def instr_length(op: Op) -> int:
    return _LENGTHS[op]


def _check_reg(r: int) -> int:
    if not 0 <= r < NUM_REGS:
        raise OpError(f"register r{r} out of range")
    return r


def encode(ins: Instruction) -> bytes:
    """Encode one instruction to bytes."""
    op = ins.op
    if op in _NO_OPERAND:
        return bytes([op])
    if op is Op.MOVI:
        _check_reg(ins.a)
        return bytes([op, ins.a]) + struct.pack("<I", ins.b & 0xFFFFFFFF)
    if op in _TWO_REG:
        _check_reg(ins.a)
        _check_reg(ins.b)
        return bytes([op, (ins.a << 4) | ins.b])
    if op in (Op.LD, Op.ST):
        _check_reg(ins.a)
        _check_reg(ins.b)
        if not -0x8000 <= ins.c <= 0x7FFF:
            raise OpError(f"offset {ins.c} out of 16-bit range")
        return bytes([op, (ins.a << 4) | ins.b]) + struct.pack("<H", ins.c & 0xFFFF)
    if op is Op.ADDI:
        _check_reg(ins.a)
        if not -0x8000 <= ins.b <= 0x7FFF:
            raise OpError(f"immediate {ins.b} out of 16-bit range")
        return bytes([op, ins.a]) + struct.pack("<H", ins.b & 0xFFFF)
    if op in _ADDR32:
        return bytes([op]) + struct.pack("<I", ins.a & 0xFFFFFFFF)
    if op in _ONE_REG:
        _check_reg(ins.a)
        return bytes([op, ins.a])
    if op is Op.IN:
        _check_reg(ins.a)
        return bytes([op, ins.a, ins.b & 0xFF])
    if op is Op.OUT:
        _check_reg(ins.b)
        return bytes([op, ins.b, ins.a & 0xFF])
    if op in (Op.MOVCR, Op.MOVRC):
        # both control register indices and general registers fit 0..7
        if not 0 <= ins.a < 8 or not 0 <= ins.b < 8:
            raise OpError(f"operand out of range for {op.name}")
        return bytes([op, (ins.a << 4) | ins.b])
    raise OpError(f"cannot encode {op!r}")


def _sext16(v: int) -> int:
    return v - 0x10000 if v & 0x8000 else v


def decode(data: bytes, offset: int = 0) -> tuple[Instruction, int]:
    """Decode one instruction at `offset`; returns (instruction, length)."""
    if offset >= len(data):
        raise DecodeError("decode past end of buffer", offset)
    byte0 = data[offset]
    try:
        op = Op(byte0)
    except ValueError:
        raise DecodeError(f"unknown opcode 0x{byte0:02X}", offset) from None
    ln = _LENGTHS[op]
    if offset + ln > len(data):
        raise DecodeError(f"truncated {op.name} at offset {offset}", offset)
    body = data[offset + 1:offset + ln]
    if op in _NO_OPERAND:
        return Instruction(op), ln
    if op is Op.MOVI:
        rd = body[0]
        if rd >= NUM_REGS:
            raise DecodeError(f"bad register {rd} in MOVI", offset)
        return Instruction(op, rd, struct.unpack("<I", body[1:5])[0]), ln
    if op in _TWO_REG or op in (Op.MOVCR, Op.MOVRC):
        a, b = body[0] >> 4, body[0] & 0xF
        if a >= 8 or b >= 8:
            raise DecodeError(f"bad operand nibble in {op.name}", offset)
        return Instruction(op, a, b), ln
    if op in (Op.LD, Op.ST):
        a, b = body[0] >> 4, body[0] & 0xF
        if a >= NUM_REGS or b >= NUM_REGS:
            raise DecodeError(f"bad register in {op.name}", offset)
        return Instruction(op, a, b, _sext16(struct.unpack("<H", body[1:3])[0])), ln
    if op is Op.ADDI:
        rd = body[0]
        if rd >= NUM_REGS:
            raise DecodeError("bad register in ADDI", offset)
        return Instruction(op, rd, _sext16(struct.unpack("<H", body[1:3])[0])), ln
    if op in _ADDR32:
        return Instruction(op, struct.unpack("<I", body)[0]), ln
    if op in _ONE_REG:
        r = body[0]
        if r >= NUM_REGS:
            raise DecodeError(f"bad register in {op.name}", offset)
        return Instruction(op, r), ln
    if op is Op.IN:
        rd, port = body[0], body[1]
        if rd >= NUM_REGS:
            raise DecodeError("bad register in IN", offset)
        return Instruction(op, rd, port), ln
    if op is Op.OUT:
        rs, port = body[0], body[1]
        if rs >= NUM_REGS:
            raise DecodeError("bad register in OUT", offset)
        return Instruction(op, port, rs), ln
    raise DecodeError(f"unhandled opcode {op!r}", offset)


# ---------------------------------------------------------------------------
# assembler

class AsmError(Exception):
    def __init__(self, msg: str, line: int = 0):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


@dataclass
class AssembledImage:
    """Sections are (load_address, bytes) pairs; symbols map label -> address."""

    sections: list[tuple[int, bytes]]
    symbols: dict[str, int]
    entry: int


_CR_NAMES = {c.name: c.value for c in Cr}


def _parse_reg(tok: str, line: int) -> int:
    t = tok.lower()
    if len(t) == 2 and t[0] == "r" and t[1].isdigit():
        n = int(t[1])
        if n < NUM_REGS:
            return n
    raise AsmError(f"bad register {tok!r}", line)


def _parse_int(tok: str, symbols: dict[str, int] | None, line: int) -> int:
    tok = tok.strip()
    if len(tok) == 3 and tok[0] == "'" and tok[2] == "'":
        return ord(tok[1])
    neg = tok.startswith("-")
    body = tok[1:] if neg else tok
    try:
        if body.lower().startswith("0x"):
            v = int(body, 16)
        elif body.isdigit():
            v = int(body)
        else:
            if symbols is None:
                return 0  # sizing pass: label value unknown, length unaffected
            if tok in symbols:
                return symbols[tok]
            raise AsmError(f"undefined symbol {tok!r}", line)
        return -v if neg else v
    except ValueError:
        raise AsmError(f"bad number {tok!r}", line) from None


def _parse_mem(tok: str, line: int) -> tuple[int, int]:
    """Parse a memory operand '[rN]', '[rN+off]' or '[rN-off]'."""
    t = tok.strip()
    if not (t.startswith("[") and t.endswith("]")):
        raise AsmError(f"bad memory operand {tok!r}", line)
    inner = t[1:-1].strip()
    for sep in ("+", "-"):
        if sep in inner:
            rpart, opart = inner.split(sep, 1)
            off = _parse_int(opart.strip(), {}, line)
            return _parse_reg(rpart.strip(), line), (-off if sep == "-" else off)
    return _parse_reg(inner, line), 0


def _split_operands(rest: str) -> list[str]:
    # split on commas not inside brackets or quotes
    parts, depth, quote, cur = [], 0, False, []
    for ch in rest:
        if ch == "'" and not quote:
            quote = True
        elif ch == "'" and quote:
            quote = False
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0 and not quote:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur).strip())
    return [p for p in parts if p]


def _encode_line(mnem: str, ops: list[str], symbols: dict[str, int] | None,
                 line: int) -> bytes:
    """Encode one statement.  With symbols=None only the length matters."""
    try:
        op = Op[mnem.upper()]
    except KeyError:
        raise AsmError(f"unknown mnemonic {mnem!r}", line) from None

    def imm(tok):
        return _parse_int(tok, symbols, line)

    try:
        if op in _NO_OPERAND:
            _expect(ops, 0, mnem, line)
            return encode(Instruction(op))
        if op is Op.MOVI:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line), imm(ops[1])))
        if op in _TWO_REG:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line),
                                      _parse_reg(ops[1], line)))
        if op is Op.LD:
            _expect(ops, 2, mnem, line)
            base, off = _parse_mem(ops[1], line)
            return encode(Instruction(op, _parse_reg(ops[0], line), base, off))
        if op is Op.ST:
            _expect(ops, 2, mnem, line)
            base, off = _parse_mem(ops[0], line)
            return encode(Instruction(op, base, _parse_reg(ops[1], line), off))
        if op is Op.ADDI:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line), imm(ops[1])))
        if op in _ADDR32:
            _expect(ops, 1, mnem, line)
            return encode(Instruction(op, imm(ops[0])))
        if op in _ONE_REG:
            _expect(ops, 1, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line)))
        if op is Op.IN:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line), imm(ops[1])))
        if op is Op.OUT:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, imm(ops[0]), _parse_reg(ops[1], line)))
        if op is Op.MOVCR:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_cr(ops[0], line),
                                      _parse_reg(ops[1], line)))
        if op is Op.MOVRC:
            _expect(ops, 2, mnem, line)
            return encode(Instruction(op, _parse_reg(ops[0], line),
                                      _parse_cr(ops[1], line)))
    except OpError as e:
        raise AsmError(str(e), line) from None
    raise AsmError(f"unhandled mnemonic {mnem!r}", line)


def _expect(ops: list[str], n: int, mnem: str, line: int) -> None:
    if len(ops) != n:
        raise AsmError(f"{mnem} takes {n} operand(s), got {len(ops)}", line)


def _parse_cr(tok: str, line: int) -> int:
    t = tok.strip().upper()
    if t in _CR_NAMES:
        return _CR_NAMES[t]
    if len(t) == 3 and t.startswith("CR") and t[2].isdigit():
        return int(t[2])
    raise AsmError(f"bad control register {tok!r}", line)


def _statements(source: str):
    """Yield (line_no, label or None, mnemonic or directive, rest)."""
    for no, raw in enumerate(source.splitlines(), start=1):
        text = raw.split(";", 1)[0].rstrip()
        if not text.strip():
            continue
        while True:
            stripped = text.strip()
            head = stripped.split(None, 1)[0] if stripped else ""
            if head.endswith(":") and len(head) > 1:
                yield no, head[:-1], None, ""
                text = stripped[len(head):]
                if not text.strip():
                    break
                continue
            parts = stripped.split(None, 1)
            yield no, None, parts[0], parts[1] if len(parts) > 1 else ""
            break


def assemble(source: str) -> AssembledImage:
    """Two-pass assembler.

    Directives: `.org ADDR` starts a section, `.word V, ...` emits 32-bit
    words, `.ascii "s"` emits bytes, `.global NAME` exports a label.
    Labels end with ':'.  Comments start with ';'.
    """
    # pass 1: addresses
    symbols: dict[str, int] = {}
    exported: set[str] = set()
    pc = 0
    section_starts: list[int] = []
    for no, label, head, rest in _statements(source):
        if label is not None:
            if label in symbols:
                raise AsmError(f"duplicate label {label!r}", no)
            symbols[label] = pc
            continue
        if head == ".org":
            pc = _parse_int(rest, {}, no)
            section_starts.append(pc)
            continue
        if head == ".word":
            pc += 4 * len(_split_operands(rest))
            continue
        if head == ".ascii":
            pc += len(_ascii_bytes(rest, no))
            continue
        if head == ".global":
            exported.add(rest.strip())
            continue
        if not section_starts:
            section_starts.append(pc)
        pc += len(_encode_line(head, _split_operands(rest), None, no))

    for name in exported:
        if name not in symbols:
            raise AsmError(f".global of undefined label {name!r}")

    # pass 2: emit
    sections: list[tuple[int, bytearray]] = []
    cur: bytearray | None = None
    base = 0

    def ensure_section(addr):
        nonlocal cur, base
        sections.append((addr, bytearray()))
        base, cur = addr, sections[-1][1]

    pc = 0
    for no, label, head, rest in _statements(source):
        if label is not None:
            continue
        if head == ".org":
            pc = _parse_int(rest, {}, no)
            ensure_section(pc)
            continue
        if cur is None:
            ensure_section(pc)
        if head == ".word":
            for tok in _split_operands(rest):
                cur += struct.pack("<I", _parse_int(tok, symbols, no) & 0xFFFFFFFF)
                pc += 4
            continue
        if head == ".ascii":
            data = _ascii_bytes(rest, no)
            cur += data
            pc += len(data)
            continue
        if head == ".global":
            continue
        data = _encode_line(head, _split_operands(rest), symbols, no)
        cur += data
        pc += len(data)

    out = [(a, bytes(b)) for a, b in sections if b]
    out.sort(key=lambda s: s[0])
    for (a1, b1), (a2, _) in zip(out, out[1:]):
        if a1 + len(b1) > a2:
            raise AsmError(f"sections overlap at 0x{a2:X}")
    entry = out[0][0] if out else 0
    return AssembledImage(out, {n: symbols[n] for n in sorted(exported)}, entry)


def _ascii_bytes(rest: str, line: int) -> bytes:
    t = rest.strip()
    if len(t) < 2 or t[0] != '"' or t[-1] != '"':
        raise AsmError(f"bad .ascii operand {rest!r}", line)
    body = t[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            esc = body[i + 1]
            out.append({"0": 0, "n": 10, "t": 9, "\\": 92, '"': 34}.get(esc, ord(esc)))
            i += 2
        else:
            out.append(ord(ch))
            i += 1
    return bytes(out)


# ---------------------------------------------------------------------------
# disassembler

def format_instruction(ins: Instruction) -> str:
    op = ins.op
    if op in _NO_OPERAND:
        return op.name
    if op is Op.MOVI:
        return f"MOVI r{ins.a}, 0x{ins.b:X}"
    if op in _TWO_REG:
        return f"{op.name} r{ins.a}, r{ins.b}"
    if op is Op.LD:
        return f"LD r{ins.a}, {_fmt_mem(ins.b, ins.c)}"
    if op is Op.ST:
        return f"ST {_fmt_mem(ins.a, ins.c)}, r{ins.b}"
    if op is Op.ADDI:
        return f"ADDI r{ins.a}, {ins.b}"
    if op in _ADDR32:
        return f"{op.name} 0x{ins.a:X}"
    if op in _ONE_REG:
        return f"{op.name} r{ins.a}"
    if op is Op.IN:
        return f"IN r{ins.a}, 0x{ins.b:X}"
    if op is Op.OUT:
        return f"OUT 0x{ins.a:X}, r{ins.b}"
    if op is Op.MOVCR:
        return f"MOVCR {Cr(ins.a).name}, r{ins.b}"
    if op is Op.MOVRC:
        return f"MOVRC r{ins.a}, {Cr(ins.b).name}"
    raise OpError(f"cannot format {op!r}")


def disassemble(data: bytes, base: int = 0,
                max_count: int | None = None) -> list[tuple[int, str]]:
    """Linear-sweep disassembly.  Unknown or truncated bytes come out as
    `DB 0xNN` and advance one byte, so the sweep is total."""
    out: list[tuple[int, str]] = []
    off = 0
    while off < len(data):
        if max_count is not None and len(out) >= max_count:
            break
        try:
            ins, ln = decode(data, off)
            out.append((base + off, format_instruction(ins)))
            off += ln
        except DecodeError:
            out.append((base + off, f"DB 0x{data[off]:02X}"))
            off += 1
    return out


def _fmt_mem(base_reg: int, off: int) -> str:
    if off == 0:
        return f"[r{base_reg}]"
    if off < 0:
        return f"[r{base_reg}-{-off}]"
    return f"[r{base_reg}+{off}]"
