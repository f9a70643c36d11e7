import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from shepherd.pe import ImportEntry, parse_pe
from shepherd.x86 import (
    EAX,
    ESP,
    Imm,
    InvalidOpcode,
    Mem,
    Mnemonic,
    Reg,
    Rel,
    Truncated,
    XferClass,
    classify_iat_indirect,
    decode,
    encode,
    expand_short,
    make,
    with_rel,
)

# Reference length table, written from the opcode map rather than from the
# decoder: 1-byte forms, fixed-size forms, and ModRM forms with their
# trailing immediate size.
ONE_BYTE = set(range(0x40, 0x60)) | {0x90, 0xCC, 0x9C, 0x9D, 0xC3}
FIXED = {**{op: 5 for op in range(0xB8, 0xC0)}, 0x68: 5, 0x6A: 2, 0xC2: 3, 0xE8: 5, 0xE9: 5, 0xEB: 2,
         **{op: 2 for op in range(0x70, 0x80)}}
MODRM = {op: 0 for op in (0x01, 0x09, 0x21, 0x29, 0x31, 0x39, 0x85, 0x89,
                          0x03, 0x0B, 0x23, 0x2B, 0x33, 0x3B, 0x8B, 0x8D, 0xFF, 0x8F)}
MODRM.update({0x81: 4, 0xC7: 4, 0xF7: 4, 0x83: 1})
# allowed /digit values for group opcodes
DIGITS = {0x81: (0, 1, 4, 5, 6, 7), 0x83: (0, 1, 4, 5, 6, 7), 0xFF: (0, 1, 2, 4, 6), 0x8F: (0,), 0xC7: (0,), 0xF7: (0,)}


def modrm_length(modrm: int, sib: int) -> int:
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return 1
    n = 1
    if rm == 4:
        n += 1
        if mod == 0 and sib & 7 == 5:
            n += 4
    elif mod == 0 and rm == 5:
        n += 4
    return n + (0, 1, 4, 0)[mod]


def reference_length(code: bytes) -> int:
    op = code[0]
    if op in ONE_BYTE:
        return 1
    if op in FIXED:
        return FIXED[op]
    if op == 0x0F:
        return 6
    return 1 + modrm_length(code[1], code[2]) + MODRM[op]


def random_encoding(rng: random.Random) -> bytes:
    """Random bytes forming one valid subset instruction."""
    forms = sorted(ONE_BYTE | set(FIXED) | set(MODRM)) + [0x0F]
    op = rng.choice(forms)
    tail = bytearray(rng.getrandbits(8) for _ in range(14))
    if op == 0x0F:
        return bytes([0x0F, 0x80 | rng.randrange(16)]) + bytes(tail[:4])
    if op in MODRM:
        mod = rng.randrange(3) if op == 0x8D else rng.randrange(4)
        reg = rng.choice(DIGITS.get(op, range(8)))
        tail[0] = (mod << 6) | (reg << 3) | rng.randrange(8)
        if tail[1] >> 3 & 7 == 4:
            tail[1] &= 0x3F  # no index => scale must be 1
    code = bytes([op]) + bytes(tail)
    return code[: reference_length(code)]


def test_call_rel_zero_targets_next_instruction():
    insn = decode(bytes.fromhex("e800000000"), 0x1000)
    assert insn.xfer_class is XferClass.CALL_REL
    assert insn.length == 5
    assert insn.target == 0x1005
    assert insn.reloc_sites == ()


def test_call_register_is_indirect():
    insn = decode(b"\xff\xd0")
    assert insn.xfer_class is XferClass.CALL_IND
    assert insn.length == 2
    assert insn.operands == (Reg(EAX),)


def test_ret_forms():
    assert decode(b"\xc3").xfer_class is XferClass.RET
    assert decode(b"\xc3").length == 1
    ret16 = decode(b"\xc2\x08\x00")
    assert ret16.xfer_class is XferClass.RET and ret16.operands == (Imm(8, 2),)


@pytest.mark.parametrize(
    "hexcode, mnemonic, xfer, sites",
    [
        ("8b0500300100", Mnemonic.MOV, XferClass.NONE, (2,)),
        ("b844332211", Mnemonic.MOV, XferClass.NONE, (1,)),
        ("c7050010010078563412", Mnemonic.MOV, XferClass.NONE, (2, 6)),
        ("ff1500200100", Mnemonic.CALL, XferClass.CALL_IND, (2,)),
        ("ff248d00200100", Mnemonic.JMP, XferClass.JMP_IND, (3,)),
        ("ff6004", Mnemonic.JMP, XferClass.JMP_IND, ()),
        ("8d4c2404", Mnemonic.LEA, XferClass.NONE, ()),
        ("83c001", Mnemonic.ADD, XferClass.NONE, ()),
        ("6800100100", Mnemonic.PUSH, XferClass.NONE, (1,)),
        ("0f8410000000", Mnemonic.JCC, XferClass.JCC, ()),
        ("7405", Mnemonic.JCC, XferClass.JCC, ()),
        ("ebfe", Mnemonic.JMP, XferClass.JMP_REL, ()),
        ("9c", Mnemonic.PUSHFD, XferClass.NONE, ()),
    ],
)
def test_opcode_table(hexcode, mnemonic, xfer, sites):
    code = bytes.fromhex(hexcode)
    insn = decode(code, 0x1000)
    assert insn.length == len(code) == reference_length(code + b"\0" * 8)
    assert insn.mnemonic is mnemonic
    assert insn.xfer_class is xfer
    assert insn.reloc_sites == sites
    assert encode(insn) == code


def test_encode_examples():
    assert encode(make(Mnemonic.RET)) == b"\xc3"
    jz = make(Mnemonic.JCC, Rel(0x10, 4), cond=4)
    assert encode(jz) == bytes.fromhex("0f8410000000")
    call = make(Mnemonic.CALL, Rel(0, 4), rva=0x4000)
    assert encode(call) == bytes.fromhex("e800000000") and call.target == 0x4005


@pytest.mark.parametrize("hexcode", ["66b80100", "f0ff00", "0f05", "cd2e", "e4", "8fc8", "ff38"])
def test_outside_subset(hexcode):
    with pytest.raises(InvalidOpcode):
        decode(bytes.fromhex(hexcode))


def test_truncated():
    with pytest.raises(Truncated):
        decode(b"")
    with pytest.raises(Truncated):
        decode(b"\xe8\x00\x00")
    with pytest.raises(Truncated):
        decode(b"\x8b\x05\x00")


def test_random_encodings_round_trip():
    """Decode/encode identity on 10^5 random subset encodings, checked
    against the reference length table; exact-length buffers must decode
    and one byte less must not."""
    rng = random.Random(2024)
    for _ in range(100_000):
        code = random_encoding(rng)
        rva = rng.randrange(0x1000, 0x100000)
        insn = decode(code, rva)
        assert insn.length == len(code), code.hex()
        assert encode(insn) == code, code.hex()
        assert decode(encode(insn), rva) == insn
        for off in insn.reloc_sites:
            assert 0 <= off <= insn.length - 4
        if insn.xfer_class is XferClass.RET:
            assert insn.operands == () or insn.operands[0].size == 2


def test_exact_length_buffers():
    rng = random.Random(7)
    for _ in range(3000):
        code = random_encoding(rng)
        assert decode(code + b"\xcc" * 4).length == len(code)
        if len(code) > 1:
            with pytest.raises(Truncated):
                decode(code[:-1])


def test_expand_short_examples():
    jz = decode(b"\x74\x05", 0x2000)
    wide = expand_short(jz)
    assert wide.target == 0x2007 and wide.length == 6 and not wide.is_short
    loop = decode(b"\xeb\xfe", 0x3000)
    assert expand_short(loop).target == 0x3000
    call = decode(bytes.fromhex("e810000000"), 0x1000)
    assert expand_short(call) is call


@given(st.integers(min_value=0, max_value=15), st.integers(min_value=-128, max_value=127), st.integers(0x1000, 0x7FFF0000))
def test_expand_short_preserves_target(cond, disp, rva):
    short = decode(bytes([0x70 | cond, disp & 0xFF]), rva)
    assert expand_short(short).target == short.target
    jmp = decode(bytes([0xEB, disp & 0xFF]), rva)
    assert expand_short(jmp).target == jmp.target


@given(st.integers(0x1000, 0x100000), st.integers(0x1000, 0x100000))
def test_with_rel_hits_target(rva, target):
    insn = with_rel(decode(bytes.fromhex("e900000000")), target, rva)
    assert insn.target == target
    assert decode(encode(insn), rva).target == target


def test_classify_iat_indirect(corpus):
    g = next(corpus(i) for i in range(20) if corpus(i).ground_truth["imports"])
    img = parse_pe(g.image)
    slot = img.imports[0].iat_slot_rva
    call_iat = make(Mnemonic.CALL, Mem(None, None, 1, img.image_base + slot, 4))
    assert classify_iat_indirect(call_iat, img)
    assert not classify_iat_indirect(make(Mnemonic.CALL, Mem(EAX, None, 1, 0, 0)), img)
    slots = {e.iat_slot_rva for e in img.imports}
    assert 0xF00 not in slots
    assert not classify_iat_indirect(make(Mnemonic.CALL, Mem(None, None, 1, img.image_base + 0xF00, 4)), img)
    # the same slot address reached through a base register is not IAT-direct
    assert not classify_iat_indirect(make(Mnemonic.JMP, Mem(ESP, None, 1, img.image_base + slot, 4)), img)
    img.imports = [ImportEntry("x.sys", 0xF00, "Other")]
    assert not classify_iat_indirect(call_iat, img)
