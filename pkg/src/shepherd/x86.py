"""Decoder and encoder for the closed x86-32 instruction subset.

The subset (no prefixes, 32-bit operand size only):

    MOV   89 /r, 8B /r, B8+r id, C7 /0 id
    LEA   8D /r (memory form only)
    PUSH  50+r, 68 id, 6A ib, FF /6        POP  58+r, 8F /0
    ALU   ADD/OR/AND/SUB/XOR/CMP  01 03 09 0B 21 23 29 2B 31 33 39 3B, 81 /n id, 83 /n ib
    TEST  85 /r, F7 /0 id
    INC   40+r, FF /0                      DEC  48+r, FF /1
    NOP 90, INT3 CC, PUSHFD 9C, POPFD 9D
    CALL  E8 cd, FF /2                     JMP  EB cb, E9 cd, FF /4
    Jcc   70+cc cb, 0F 80+cc cd            RET  C3, C2 iw

PUSHFD/POPFD are only emitted by the rewriter's instrumentation stubs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

EAX, ECX, EDX, EBX, ESP, EBP, ESI, EDI = range(8)
REG_NAMES = ("eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi")
COND_NAMES = ("o", "no", "b", "ae", "z", "nz", "be", "a", "s", "ns", "p", "np", "l", "ge", "le", "g")
COND_CODES = {name: i for i, name in enumerate(COND_NAMES)}


class DecodeError(Exception):
    pass


class InvalidOpcode(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class Unencodable(Exception):
    pass


class Mnemonic(Enum):
    MOV = "mov"
    LEA = "lea"
    PUSH = "push"
    POP = "pop"
    ADD = "add"
    OR = "or"
    AND = "and"
    SUB = "sub"
    XOR = "xor"
    CMP = "cmp"
    TEST = "test"
    INC = "inc"
    DEC = "dec"
    NOP = "nop"
    INT3 = "int3"
    PUSHFD = "pushfd"
    POPFD = "popfd"
    CALL = "call"
    JMP = "jmp"
    JCC = "jcc"
    RET = "ret"


class XferClass(Enum):
    NONE = "none"
    CALL_REL = "call_rel"
    CALL_IND = "call_ind"
    JMP_REL = "jmp_rel"
    JMP_IND = "jmp_ind"
    JCC = "jcc"
    RET = "ret"


@dataclass(frozen=True, slots=True)
class Reg:
    num: int

    def __str__(self) -> str:
        return REG_NAMES[self.num]


@dataclass(frozen=True, slots=True)
class Imm:
    value: int  # raw unsigned field value
    size: int  # 1, 2 or 4 bytes

    @property
    def signed(self) -> int:
        bits = 8 * self.size
        v = self.value
        return v - (1 << bits) if v >> (bits - 1) else v

    def __str__(self) -> str:
        return f"{self.value:#x}"


@dataclass(frozen=True, slots=True)
class Mem:
    base: int | None = None
    index: int | None = None
    scale: int = 1
    disp: int = 0  # signed
    disp_size: int = 4  # 0, 1 or 4
    sib: bool = False

    @property
    def absolute(self) -> bool:
        return self.base is None and self.index is None

    def __str__(self) -> str:
        parts = []
        if self.base is not None:
            parts.append(REG_NAMES[self.base])
        if self.index is not None:
            parts.append(f"{REG_NAMES[self.index]}*{self.scale}")
        if self.disp or not parts:
            parts.append(f"{self.disp & 0xFFFFFFFF:#x}" if not parts else f"{self.disp:#x}")
        return "[" + "+".join(parts).replace("+-", "-") + "]"


@dataclass(frozen=True, slots=True)
class Rel:
    disp: int  # signed
    size: int  # 1 or 4


Operand = Reg | Imm | Mem | Rel


# not frozen: a frozen __init__ dominates decode time; treat instances as values
@dataclass(slots=True, unsafe_hash=True)
class Instruction:
    rva: int
    length: int
    mnemonic: Mnemonic
    operands: tuple = ()
    xfer_class: XferClass = XferClass.NONE
    reloc_sites: tuple = ()
    opcode: int = 0  # encoding form; two-byte opcodes as 0x0Fxx
    cond: int | None = None

    @property
    def end(self) -> int:
        return self.rva + self.length

    @property
    def target(self) -> int | None:
        """Absolute target RVA of a relative transfer."""
        if self.operands and isinstance(self.operands[0], Rel):
            return (self.end + self.operands[0].disp) & 0xFFFFFFFF
        return None

    @property
    def is_short(self) -> bool:
        return bool(self.operands) and isinstance(self.operands[0], Rel) and self.operands[0].size == 1

    @property
    def name(self) -> str:
        if self.mnemonic is Mnemonic.JCC:
            return "j" + COND_NAMES[self.cond]
        return self.mnemonic.value

    def __str__(self) -> str:
        ops = []
        for op in self.operands:
            if isinstance(op, Rel):
                ops.append(f"{self.target:#x}")
            else:
                ops.append(str(op))
        text = self.name
        if ops:
            text += " " + ", ".join(ops)
        return text


# --------------------------------------------------------------------------
# opcode tables

_ALU_RM_R = {0x01: Mnemonic.ADD, 0x09: Mnemonic.OR, 0x21: Mnemonic.AND, 0x29: Mnemonic.SUB,
             0x31: Mnemonic.XOR, 0x39: Mnemonic.CMP, 0x85: Mnemonic.TEST, 0x89: Mnemonic.MOV}
_ALU_R_RM = {0x03: Mnemonic.ADD, 0x0B: Mnemonic.OR, 0x23: Mnemonic.AND, 0x2B: Mnemonic.SUB,
             0x33: Mnemonic.XOR, 0x3B: Mnemonic.CMP, 0x8B: Mnemonic.MOV}
_GROUP1 = {0: Mnemonic.ADD, 1: Mnemonic.OR, 4: Mnemonic.AND, 5: Mnemonic.SUB, 6: Mnemonic.XOR, 7: Mnemonic.CMP}
_GROUP1_DIGIT = {m: d for d, m in _GROUP1.items()}
_GROUP5 = {0: Mnemonic.INC, 1: Mnemonic.DEC, 2: Mnemonic.CALL, 4: Mnemonic.JMP, 6: Mnemonic.PUSH}
_GROUP5_DIGIT = {m: d for d, m in _GROUP5.items()}
_SINGLE = {0x90: Mnemonic.NOP, 0xCC: Mnemonic.INT3, 0x9C: Mnemonic.PUSHFD, 0x9D: Mnemonic.POPFD}

_REGS = tuple(Reg(i) for i in range(8))

_u32 = struct.Struct("<I").unpack_from
_i32 = struct.Struct("<i").unpack_from
_u16 = struct.Struct("<H").unpack_from


def _modrm(buf, pos: int, end: int):
    """Decode ModRM (+SIB, disp) at buf[pos].  Returns (reg, rm_operand,
    new_pos, disp_pos or -1)."""
    if pos >= end:
        raise Truncated("missing ModRM")
    modrm = buf[pos]
    pos += 1
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    if mod == 3:
        return reg, _REGS[rm], pos, -1
    base: int | None = rm
    index = None
    scale = 1
    sib = False
    if rm == 4:
        if pos >= end:
            raise Truncated("missing SIB")
        sib_byte = buf[pos]
        pos += 1
        sib = True
        ss, idx, b = sib_byte >> 6, (sib_byte >> 3) & 7, sib_byte & 7
        if idx == 4:
            if ss:
                raise InvalidOpcode("SIB without index must use scale 1")
        else:
            index, scale = idx, 1 << ss
        base = b
        if b == 5 and mod == 0:
            base = None
            mod_disp = 4
        else:
            mod_disp = (0, 1, 4)[mod]
    elif rm == 5 and mod == 0:
        base = None
        mod_disp = 4
    else:
        mod_disp = (0, 1, 4)[mod]
    disp = 0
    disp_pos = -1
    if mod_disp == 1:
        if pos + 1 > end:
            raise Truncated("missing disp8")
        disp = buf[pos] - 256 if buf[pos] & 0x80 else buf[pos]
        pos += 1
    elif mod_disp == 4:
        if pos + 4 > end:
            raise Truncated("missing disp32")
        disp = _i32(buf, pos)[0]
        disp_pos = pos
        pos += 4
    return reg, Mem(base, index, scale, disp, mod_disp, sib), pos, disp_pos


def _imm(buf, pos: int, end: int, size: int):
    if pos + size > end:
        raise Truncated("missing immediate")
    if size == 4:
        return Imm(_u32(buf, pos)[0], 4)
    if size == 2:
        return Imm(_u16(buf, pos)[0], 2)
    return Imm(buf[pos], 1)


def decode(buffer, rva: int = 0, offset: int = 0, limit: int | None = None) -> Instruction:
    """Decode one instruction from ``buffer[offset:]``; ``rva`` is its address.

    Raises InvalidOpcode for anything outside the subset and Truncated when
    the buffer ends mid-instruction.  Never reads past the decoded length.
    """
    end = len(buffer) if limit is None else min(len(buffer), limit)
    if offset >= end:
        raise Truncated("empty buffer")
    buf = buffer
    start = offset
    op = buf[start]
    pos = start + 1

    if 0x50 <= op <= 0x5F:
        mn = Mnemonic.PUSH if op < 0x58 else Mnemonic.POP
        return Instruction(rva, 1, mn, (_REGS[op & 7],), opcode=op)
    if 0x40 <= op <= 0x4F:
        mn = Mnemonic.INC if op < 0x48 else Mnemonic.DEC
        return Instruction(rva, 1, mn, (_REGS[op & 7],), opcode=op)
    if 0xB8 <= op <= 0xBF:
        imm = _imm(buf, pos, end, 4)
        return Instruction(rva, 5, Mnemonic.MOV, (_REGS[op & 7], imm), reloc_sites=(1,), opcode=op)
    if op in _ALU_RM_R or op in _ALU_R_RM:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        ops = (rm, _REGS[reg]) if op in _ALU_RM_R else (_REGS[reg], rm)
        mn = _ALU_RM_R.get(op) or _ALU_R_RM[op]
        sites = (dpos - start,) if dpos >= 0 else ()
        return Instruction(rva, pos - start, mn, ops, reloc_sites=sites, opcode=op)
    if op == 0x8D:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        if isinstance(rm, Reg):
            raise InvalidOpcode("LEA with register operand")
        sites = (dpos - start,) if dpos >= 0 else ()
        return Instruction(rva, pos - start, Mnemonic.LEA, (_REGS[reg], rm), reloc_sites=sites, opcode=op)
    if op == 0x81 or op == 0x83:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        mn = _GROUP1.get(reg)
        if mn is None:
            raise InvalidOpcode(f"{op:02x} /{reg} not in subset")
        size = 4 if op == 0x81 else 1
        imm = _imm(buf, pos, end, size)
        sites = ((dpos - start,) if dpos >= 0 else ()) + ((pos - start,) if size == 4 else ())
        return Instruction(rva, pos + size - start, mn, (rm, imm), reloc_sites=sites, opcode=op)
    if op == 0xC7 or op == 0xF7:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        if reg != 0:
            raise InvalidOpcode(f"{op:02x} /{reg} not in subset")
        imm = _imm(buf, pos, end, 4)
        sites = ((dpos - start,) if dpos >= 0 else ()) + (pos - start,)
        mn = Mnemonic.MOV if op == 0xC7 else Mnemonic.TEST
        return Instruction(rva, pos + 4 - start, mn, (rm, imm), reloc_sites=sites, opcode=op)
    if op == 0xFF:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        mn = _GROUP5.get(reg)
        if mn is None:
            raise InvalidOpcode(f"ff /{reg} not in subset")
        sites = (dpos - start,) if dpos >= 0 else ()
        xfer = XferClass.NONE
        if mn is Mnemonic.CALL:
            xfer = XferClass.CALL_IND
        elif mn is Mnemonic.JMP:
            xfer = XferClass.JMP_IND
        return Instruction(rva, pos - start, mn, (rm,), xfer, sites, opcode=op)
    if op == 0x8F:
        reg, rm, pos, dpos = _modrm(buf, pos, end)
        if reg != 0:
            raise InvalidOpcode(f"8f /{reg} not in subset")
        sites = (dpos - start,) if dpos >= 0 else ()
        return Instruction(rva, pos - start, Mnemonic.POP, (rm,), reloc_sites=sites, opcode=op)
    if 0x70 <= op <= 0x7F:
        if pos >= end:
            raise Truncated("missing rel8")
        d = buf[pos]
        return Instruction(rva, 2, Mnemonic.JCC, (Rel(d - 256 if d & 0x80 else d, 1),), XferClass.JCC,
                           opcode=op, cond=op & 0xF)
    if op == 0x0F:
        if pos >= end:
            raise Truncated("missing second opcode byte")
        op2 = buf[pos]
        if not 0x80 <= op2 <= 0x8F:
            raise InvalidOpcode(f"0f {op2:02x} not in subset")
        if pos + 5 > end:
            raise Truncated("missing rel32")
        return Instruction(rva, 6, Mnemonic.JCC, (Rel(_i32(buf, pos + 1)[0], 4),), XferClass.JCC,
                           opcode=0x0F00 | op2, cond=op2 & 0xF)
    if op == 0xE8 or op == 0xE9:
        if pos + 4 > end:
            raise Truncated("missing rel32")
        mn, xfer = (Mnemonic.CALL, XferClass.CALL_REL) if op == 0xE8 else (Mnemonic.JMP, XferClass.JMP_REL)
        return Instruction(rva, 5, mn, (Rel(_i32(buf, pos)[0], 4),), xfer, opcode=op)
    if op == 0xEB:
        if pos >= end:
            raise Truncated("missing rel8")
        d = buf[pos]
        return Instruction(rva, 2, Mnemonic.JMP, (Rel(d - 256 if d & 0x80 else d, 1),), XferClass.JMP_REL, opcode=op)
    if op == 0xC3:
        return Instruction(rva, 1, Mnemonic.RET, (), XferClass.RET, opcode=op)
    if op == 0xC2:
        return Instruction(rva, 3, Mnemonic.RET, (_imm(buf, pos, end, 2),), XferClass.RET, opcode=op)
    if op == 0x68:
        return Instruction(rva, 5, Mnemonic.PUSH, (_imm(buf, pos, end, 4),), reloc_sites=(1,), opcode=op)
    if op == 0x6A:
        return Instruction(rva, 2, Mnemonic.PUSH, (_imm(buf, pos, end, 1),), opcode=op)
    mn = _SINGLE.get(op)
    if mn is not None:
        return Instruction(rva, 1, mn, (), opcode=op)
    raise InvalidOpcode(f"opcode {op:02x} not in subset")


# --------------------------------------------------------------------------
# encoding


def _enc_modrm(reg: int, rm) -> bytes:
    if isinstance(rm, Reg):
        return bytes([0xC0 | (reg << 3) | rm.num])
    if not isinstance(rm, Mem):
        raise Unencodable(f"bad r/m operand {rm!r}")
    if rm.scale not in (1, 2, 4, 8):
        raise Unencodable("scale must be 1, 2, 4 or 8")
    if rm.index == ESP:
        raise Unencodable("esp cannot be an index")
    ss = {1: 0, 2: 1, 4: 2, 8: 3}[rm.scale]
    if rm.index is None and rm.scale != 1:
        raise Unencodable("scale without index")
    if rm.disp_size == 0:
        disp = b""
        mod = 0
        if rm.disp:
            raise Unencodable("nonzero displacement with disp_size 0")
    elif rm.disp_size == 1:
        if not -128 <= rm.disp <= 127:
            raise Unencodable("disp8 out of range")
        disp = struct.pack("<b", rm.disp)
        mod = 1
    elif rm.disp_size == 4:
        disp = struct.pack("<I", rm.disp & 0xFFFFFFFF)
        mod = 2
    else:
        raise Unencodable("disp_size must be 0, 1 or 4")

    if rm.base is None:
        if rm.disp_size != 4:
            raise Unencodable("base-less memory operand needs disp32")
        if rm.index is None and not rm.sib:
            return bytes([(reg << 3) | 5]) + disp
        idx = 4 if rm.index is None else rm.index
        return bytes([(reg << 3) | 4, (ss << 6) | (idx << 3) | 5]) + disp
    if rm.base == EBP and mod == 0:
        raise Unencodable("[ebp] needs a displacement")
    if rm.index is not None or rm.base == ESP or rm.sib:
        idx = 4 if rm.index is None else rm.index
        return bytes([(mod << 6) | (reg << 3) | 4, (ss << 6) | (idx << 3) | rm.base]) + disp
    return bytes([(mod << 6) | (reg << 3) | rm.base]) + disp


def _imm_bytes(op) -> bytes:
    if not isinstance(op, Imm):
        raise Unencodable(f"expected immediate, got {op!r}")
    return op.value.to_bytes(op.size, "little")


def encode(instr: Instruction) -> bytes:
    """Encode ``instr`` in its recorded form.  ``decode(encode(i), i.rva) == i``."""
    op = instr.opcode
    ops = instr.operands
    mn = instr.mnemonic
    try:
        if 0x50 <= op <= 0x5F or 0x40 <= op <= 0x4F:
            return bytes([(op & 0xF8) | ops[0].num])
        if 0xB8 <= op <= 0xBF:
            return bytes([0xB8 | ops[0].num]) + _imm_bytes(ops[1])
        if op in _ALU_RM_R:
            return bytes([op]) + _enc_modrm(ops[1].num, ops[0])
        if op in _ALU_R_RM or op == 0x8D:
            if op == 0x8D and not isinstance(ops[1], Mem):
                raise Unencodable("LEA needs a memory operand")
            return bytes([op]) + _enc_modrm(ops[0].num, ops[1])
        if op in (0x81, 0x83):
            imm = ops[1]
            if imm.size != (4 if op == 0x81 else 1):
                raise Unencodable("immediate size does not match form")
            return bytes([op]) + _enc_modrm(_GROUP1_DIGIT[mn], ops[0]) + _imm_bytes(imm)
        if op in (0xC7, 0xF7):
            return bytes([op]) + _enc_modrm(0, ops[0]) + _imm_bytes(ops[1])
        if op == 0xFF:
            return bytes([op]) + _enc_modrm(_GROUP5_DIGIT[mn], ops[0])
        if op == 0x8F:
            return bytes([op]) + _enc_modrm(0, ops[0])
        if 0x70 <= op <= 0x7F or op == 0xEB:
            d = ops[0].disp
            if ops[0].size != 1 or not -128 <= d <= 127:
                raise Unencodable("rel8 out of range")
            base = 0x70 | instr.cond if op != 0xEB else 0xEB
            return bytes([base, d & 0xFF])
        if 0x0F80 <= op <= 0x0F8F:
            return bytes([0x0F, 0x80 | instr.cond]) + struct.pack("<i", ops[0].disp)
        if op in (0xE8, 0xE9):
            return bytes([op]) + struct.pack("<i", ops[0].disp)
        if op == 0xC3:
            return b"\xc3"
        if op == 0xC2:
            return b"\xc2" + _imm_bytes(ops[0])
        if op == 0x68:
            return b"\x68" + _imm_bytes(ops[0])
        if op == 0x6A:
            return b"\x6a" + _imm_bytes(ops[0])
        if op in _SINGLE:
            return bytes([op])
    except (KeyError, IndexError, AttributeError, struct.error, OverflowError) as exc:
        raise Unencodable(f"cannot encode {instr!r}: {exc}") from exc
    raise Unencodable(f"opcode form {op:#x} not in subset")


# --------------------------------------------------------------------------
# builders used by the rewriter and the corpus assembler


def make(mnemonic: Mnemonic, *operands, rva: int = 0, opcode: int | None = None, cond: int | None = None) -> Instruction:
    """Build a canonical-form instruction and run it through the decoder so
    length, class and reloc sites are filled in consistently."""
    if opcode is None:
        opcode = _canonical_opcode(mnemonic, operands, cond)
    draft = Instruction(rva, 0, mnemonic, tuple(operands), opcode=opcode, cond=cond)
    return decode(encode(draft), rva)


def _canonical_opcode(mn: Mnemonic, ops: tuple, cond: int | None) -> int:
    first = ops[0] if ops else None
    second = ops[1] if len(ops) > 1 else None
    if mn is Mnemonic.JCC:
        return (0x70 | cond) if first.size == 1 else (0x0F80 | cond)
    if mn is Mnemonic.JMP:
        if isinstance(first, Rel):
            return 0xEB if first.size == 1 else 0xE9
        return 0xFF
    if mn is Mnemonic.CALL:
        return 0xE8 if isinstance(first, Rel) else 0xFF
    if mn is Mnemonic.RET:
        return 0xC2 if ops else 0xC3
    if mn in (Mnemonic.PUSH, Mnemonic.POP):
        if isinstance(first, Reg):
            return (0x50 if mn is Mnemonic.PUSH else 0x58) | first.num
        if isinstance(first, Imm):
            return 0x68 if first.size == 4 else 0x6A
        return 0xFF if mn is Mnemonic.PUSH else 0x8F
    if mn in (Mnemonic.INC, Mnemonic.DEC):
        if isinstance(first, Reg):
            return (0x40 if mn is Mnemonic.INC else 0x48) | first.num
        return 0xFF
    if mn is Mnemonic.LEA:
        return 0x8D
    if mn is Mnemonic.MOV:
        if isinstance(second, Imm):
            return (0xB8 | first.num) if isinstance(first, Reg) else 0xC7
        return 0x89 if isinstance(second, Reg) else 0x8B
    if mn is Mnemonic.TEST:
        return 0xF7 if isinstance(second, Imm) else 0x85
    if mn in _GROUP1_DIGIT:
        if isinstance(second, Imm):
            return 0x81 if second.size == 4 else 0x83
        rm_r = {v: k for k, v in _ALU_RM_R.items()}
        r_rm = {v: k for k, v in _ALU_R_RM.items()}
        return rm_r[mn] if isinstance(second, Reg) else r_rm[mn]
    for code, m in _SINGLE.items():
        if m is mn:
            return code
    raise Unencodable(f"no canonical form for {mn}")


def with_rel(instr: Instruction, target: int, rva: int | None = None, size: int = 4) -> Instruction:
    """Re-point a relative transfer at ``target`` (absolute), placed at ``rva``."""
    rva = instr.rva if rva is None else rva
    if instr.mnemonic is Mnemonic.JCC:
        length, opcode = (2, 0x70 | instr.cond) if size == 1 else (6, 0x0F80 | instr.cond)
    elif instr.mnemonic is Mnemonic.JMP:
        length, opcode = (2, 0xEB) if size == 1 else (5, 0xE9)
    elif instr.mnemonic is Mnemonic.CALL:
        if size != 4:
            raise Unencodable("CALL has no rel8 form")
        length, opcode = 5, 0xE8
    else:
        raise Unencodable(f"{instr.name} is not a relative transfer")
    disp = target - (rva + length)
    disp = (disp + 0x80000000) % (1 << 32) - 0x80000000
    if size == 1 and not -128 <= disp <= 127:
        raise Unencodable("target out of rel8 range")
    return Instruction(rva, length, instr.mnemonic, (Rel(disp, size),), instr.xfer_class,
                       opcode=opcode, cond=instr.cond)


def expand_short(instr: Instruction) -> Instruction:
    """rel8 JMP/Jcc -> rel32 form with the same absolute target; anything else unchanged."""
    if instr.xfer_class not in (XferClass.JMP_REL, XferClass.JCC) or not instr.is_short:
        return instr
    return with_rel(instr, instr.target, size=4)


def classify_iat_indirect(instr: Instruction, image) -> bool:
    """True for ``call/jmp [abs]`` whose absolute address is an import slot."""
    if instr.xfer_class not in (XferClass.CALL_IND, XferClass.JMP_IND):
        return False
    mem = instr.operands[0]
    if not isinstance(mem, Mem) or not mem.absolute:
        return False
    address = mem.disp & 0xFFFFFFFF
    return any(address == (entry.iat_slot_rva + image.image_base) & 0xFFFFFFFF for entry in image.imports)
