import struct

import pytest

from shepherd.analyzer import Origin, analyze
from shepherd.corpus.image import IMAGE_BASE, build_pe
from shepherd.pe import emit_pe, parse_pe
from shepherd.rewriter import (
    LINKAGE_MAGIC,
    LINKAGE_SIZE,
    DanglingTarget,
    RewriteOptions,
    RewriteReport,
    build_stub,
    find_linkage,
    phase_calculate,
    phase_instrument,
    phase_repair,
    rewrite_image,
)
from shepherd.x86 import Mem, Mnemonic, XferClass, decode

# push ebp; mov ebp,esp; mov eax,[ebp+8]; test eax,eax; jz +2; inc eax; inc eax; pop ebp; ret
SMALL = bytes.fromhex("55 8bec 8b4508 85c0 7402 40 40 5d c3".replace(" ", ""))


def small_image(text=SMALL):
    sections = [(b".text\0\0\0", 0x1000, text, 0x60000020), (b".data\0\0\0", 0x2000, b"\0" * 16, 0xC0000040)]
    return parse_pe(build_pe(sections, 0x1000, {}))


def walk(code: bytes, start: int):
    """Linear decode of emitted code, skipping the INT3 filler between functions."""
    out, off = [], 0
    while off < len(code):
        if code[off] == 0xCC:
            off += 1
            continue
        insn = decode(code[off:], start + off)
        out.append(insn)
        off += insn.length
    return out


def test_small_function_layout():
    res = rewrite_image(small_image())
    plan = res.plan
    assert plan.patches == [(0x1000, plan.function_layout[0x1000])]
    emitted = plan.emitted
    assert emitted[:8] == LINKAGE_MAGIC and emitted[8:16] == bytes(8)
    # prologue is now JMP rel32 into the copy
    head = res.image.read(0x1000, 5)
    assert head[0] == 0xE9
    assert 0x1005 + struct.unpack("<i", head[1:])[0] == plan.function_layout[0x1000]
    # bytes after the patch are untouched
    assert res.image.read(0x1005, len(SMALL) - 5) == SMALL[5:]


def test_linkage_record_is_found():
    res = rewrite_image(small_image())
    gate, slot = find_linkage(res.image)
    assert (gate, slot) == (res.plan.gate_slot, res.plan.filter_entry_slot)
    assert res.image.read(res.plan.code_start, 8) == LINKAGE_MAGIC
    assert find_linkage(small_image()) is None


def test_every_ret_has_a_stub_and_no_short_jumps():
    res = rewrite_image(small_image())
    code = res.plan.emitted[LINKAGE_SIZE:]
    insns = walk(code, res.plan.code_start + LINKAGE_SIZE)
    rets = [i for i in insns if i.xfer_class is XferClass.RET]
    assert len(rets) == 1
    assert len(res.plan.stubs) == 1
    stub_start, stub_end = res.plan.stubs[0]
    assert stub_end == rets[0].rva
    assert insns[[i.rva for i in insns].index(stub_start)].mnemonic is Mnemonic.PUSHFD
    assert not any(i.is_short for i in insns if i.xfer_class in (XferClass.JCC, XferClass.JMP_REL))


def test_intra_function_jump_lands_on_copy():
    res = rewrite_image(small_image())
    layout = res.plan.block_layout
    insns = walk(res.plan.emitted[LINKAGE_SIZE:], res.plan.code_start + LINKAGE_SIZE)
    # the original jz skips both INCs to the POP at 0x100C; the gate check
    # inside the stub is the other JCC
    stubs = [range(a, b) for a, b in res.plan.stubs]
    jccs = [i for i in insns if i.xfer_class is XferClass.JCC and not any(i.rva in s for s in stubs)]
    assert len(jccs) == 1
    assert jccs[0].target == layout[(0x1000, 0x100C)]


def test_stub_encoding():
    ret = decode(b"\xc3", 0x1234)
    code, sites = build_stub(ret, IMAGE_BASE + 0x1234, IMAGE_BASE + 0x5008, IMAGE_BASE + 0x500C, IMAGE_BASE, set())
    insns = walk(code, 0)
    assert [i.mnemonic for i in insns] == [
        Mnemonic.PUSHFD, Mnemonic.CMP, Mnemonic.JCC, Mnemonic.PUSH, Mnemonic.MOV,
        Mnemonic.PUSH, Mnemonic.PUSH, Mnemonic.PUSH, Mnemonic.CALL, Mnemonic.POP, Mnemonic.POPFD,
    ]
    # the gate skip lands on POPFD
    assert insns[2].target == insns[-1].rva
    # absolute fields: gate, source, slot
    values = {struct.unpack_from("<I", code, s)[0] for s in sites}
    assert values == {IMAGE_BASE + 0x5008, IMAGE_BASE + 0x1234, IMAGE_BASE + 0x500C}


def test_iat_calls_are_not_instrumented(corpus, rewritten):
    for i in range(10):
        img = parse_pe(corpus(i).image)
        if not img.imports:
            continue
        res = rewritten(i)
        guarded = {rva for _, rva in _stub_guards(res)}
        slots = {img.image_base + e.iat_slot_rva for e in img.imports}
        iat_calls = [
            insn.rva
            for fn in res.graph.functions.values() if fn.patchable
            for b in fn.blocks for insn in b.instructions
            if insn.xfer_class is XferClass.CALL_IND and _is_iat(insn.operands[0], slots)
        ]
        assert iat_calls
        assert not guarded & set(iat_calls)
        return
    pytest.fail("no corpus item with imports")


def _is_iat(op, slots) -> bool:
    return isinstance(op, Mem) and op.base is None and op.index is None and op.disp & 0xFFFFFFFF in slots


def _stub_guards(res):
    """(stub rva, guarded original rva) pairs recovered from the emitted code."""
    out = []
    for start, end in res.plan.stubs:
        code = res.image.read(start, end - start)
        push_source = walk(code, start)[-4]
        out.append((start, push_source.operands[0].value - res.image.image_base))
    return out


def test_stubs_guard_exactly_the_indirect_transfers(corpus, rewritten):
    for i in range(8):
        res = rewritten(i)
        img = parse_pe(corpus(i).image)
        slots = {img.image_base + e.iat_slot_rva for e in img.imports}
        expected = set()
        for fn in res.graph.functions.values():
            if not fn.patchable:
                continue
            for b in fn.blocks:
                for insn in b.instructions:
                    if insn.xfer_class is XferClass.RET:
                        expected.add(insn.rva)
                    elif insn.xfer_class in (XferClass.CALL_IND, XferClass.JMP_IND):
                        if not _is_iat(insn.operands[0], slots):
                            expected.add(insn.rva)
        assert {rva for _, rva in _stub_guards(res)} == expected
        assert len(res.plan.stubs) == res.report.stubs_emitted


def test_direct_call_flag_adds_stubs(corpus):
    img = parse_pe(corpus(0).image)
    plain = rewrite_image(img)
    wide = rewrite_image(img, RewriteOptions(instrument_direct_calls=True))
    calls = sum(
        1 for fn in plain.graph.functions.values() if fn.patchable
        for b in fn.blocks for insn in b.instructions if insn.xfer_class is XferClass.CALL_REL
    )
    assert calls > 0
    assert wide.report.stubs_emitted == plain.report.stubs_emitted + calls


def test_only_patchable_functions_are_patched(rewritten):
    for i in range(8):
        res = rewritten(i)
        patched = {e for e, _ in res.plan.patches}
        assert patched == {e for e, fn in res.graph.functions.items() if fn.patchable}
        assert res.report.functions_patched == len(patched)
        assert res.report.functions_total == len(res.graph.functions)


def test_original_bytes_outside_patches_preserved(corpus, rewritten):
    for i in range(8):
        raw = corpus(i).image
        before = parse_pe(raw)
        res = rewritten(i)
        patched = {rva for entry, _ in res.plan.patches for rva in range(entry, entry + 5)}
        for sec, after in zip(before.sections, res.image.sections):
            if sec.display_name == ".reloc":
                continue
            for off, (a, b) in enumerate(zip(sec.raw_data, after.raw_data)):
                if a != b:
                    assert sec.rva + off in patched, (corpus(i).name, hex(sec.rva + off))
        # section placement is stable
        for old, new in zip(before.sections, res.image.sections):
            assert (old.rva, old.raw_offset) == (new.rva, new.raw_offset)


def test_relocations_under_patches_erased(corpus, rewritten):
    """Interval brute force: no surviving HIGHLOW field overlaps any patch,
    and every original field outside the patches survives."""
    for i in range(12):
        before = {r.rva for r in parse_pe(corpus(i).image).relocations}
        res = rewritten(i)
        after = {r.rva for r in res.image.relocations}
        patched = set()
        for entry, _ in res.plan.patches:
            patched |= set(range(entry, entry + 5))
        for rva in after:
            assert not set(range(rva, rva + 4)) & patched
        survivors = {r for r in before if not set(range(r, r + 4)) & patched}
        assert survivors <= after
        assert before - survivors == before - after


def test_new_relocations_live_in_host_and_point_at_image(rewritten):
    for i in range(8):
        res = rewritten(i)
        plan = res.plan
        emitted = parse_pe(emit_pe(res.image))
        rvas = {r.rva for r in emitted.relocations}
        size = emitted.size_of_image
        for r in plan.new_relocations:
            assert plan.code_start <= r.rva < plan.code_end
            assert r.rva in rvas
            value = emitted.read_u32(r.rva) - emitted.image_base
            assert 0 <= value < size, hex(r.rva)


def test_no_duplicate_relocations(rewritten):
    for i in range(8):
        rvas = [r.rva for r in rewritten(i).image.relocations]
        assert rvas == sorted(set(rvas))


def test_dangling_target_raises():
    img = small_image()
    graph = analyze(img)
    fn = graph.functions[0x1000]
    # drop the jz target block so the repaired branch has nowhere to go
    fn.blocks = [b for b in fn.blocks if b.start != 0x100C]
    instrumented = phase_instrument(graph, img)
    plan = phase_calculate(instrumented, img)
    with pytest.raises(DanglingTarget):
        phase_repair(plan, instrumented)


def test_growth_envelope(rewritten):
    for i in range(12):
        assert 1.3 <= rewritten(i).plan.growth <= 3.0


def test_report_fields(rewritten):
    report = rewritten(0).report
    assert len(report.row()) == len(RewriteReport.FIELDS) == 11
    assert report.size_int > report.size_org
    assert report.instructions > 0 and report.basic_blocks > 0
    assert report.memory_peak > 0


def test_rewriting_is_deterministic(corpus):
    img = parse_pe(corpus(2).image)
    assert emit_pe(rewrite_image(img).image) == emit_pe(rewrite_image(img).image)


def test_rewrite_of_input_does_not_mutate_it(corpus):
    raw = corpus(1).image
    img = parse_pe(raw)
    rewrite_image(img)
    assert emit_pe(img) == raw


def test_symbol_sidecar_functions_are_solid(corpus):
    from shepherd.analyzer import parse_symbols

    g = corpus(0)
    symbols = parse_symbols(g.symbols)
    res = rewrite_image(parse_pe(g.image), RewriteOptions(symbols=symbols))
    named = {s.rva for s in symbols if s.kind != "data"}
    assert named
    for rva in named:
        assert res.graph.functions[rva].origin is Origin.SOLID
