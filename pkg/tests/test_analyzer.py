import struct

from hypothesis import given
from hypothesis import strategies as st

from shepherd.analyzer import (
    BasicBlock,
    FunctionRecord,
    Origin,
    RejectReason,
    Symbol,
    Terminator,
    analyze,
    decide_patchability,
    is_all_text,
    parse_symbols,
    recursive_disassemble,
    seed_entries,
)
from shepherd.corpus.generator import TEXT_BLOB
from shepherd.corpus.image import IMAGE_BASE, build_pe, serialize_relocs
from shepherd.pe import parse_pe
from shepherd.x86 import decode


def image(text: bytes, data: bytes = b"\0" * 16, relocs=()):
    sections = [(b".text\0\0\0", 0x1000, text, 0x60000020), (b".data\0\0\0", 0x4000, data, 0xC0000040)]
    dirs = {}
    if relocs:
        blob = serialize_relocs(list(relocs))
        sections.append((b".reloc\0\0", 0x5000, blob, 0x42000040))
        dirs[5] = (0x5000, len(blob))
    return parse_pe(build_pe(sections, 0x1000, dirs))


def fn_with(blocks, origin=Origin.SOLID):
    """FunctionRecord over synthetic blocks given as (start, [lengths]); a
    length of 1 is a NOP and 5 is MOV EAX, imm32."""
    encodings = {1: b"\x90", 5: b"\xb8\0\0\0\0"}
    out = []
    for start, lengths in blocks:
        insns, rva = [], start
        for n in lengths:
            insns.append(decode(encodings[n], rva))
            rva += n
        out.append(BasicBlock(start, insns, Terminator.FALLTHROUGH))
    return FunctionRecord(blocks[0][0], out, origin)


# -- seeds --------------------------------------------------------------------


def test_single_seed():
    img = image(b"\x55\x8b\xec\x5d\xc3")
    assert seed_entries(img) == [(0x1000, Origin.SOLID)]


def test_relocation_target_in_text_is_prospect():
    text = b"\xc3" + b"\xcc" * 0x0FFF + b"\x55\x8b\xec\x5d\xc3"
    data = struct.pack("<I", IMAGE_BASE + 0x2000) + b"\0" * 12
    img = image(text, data, relocs=[0x4000])
    assert (0x2000, Origin.PROSPECT) in seed_entries(img)


def test_symbol_sidecar_is_solid():
    text = b"\xc3" + b"\xcc" * 0x1FFF + b"\x55\x8b\xec\x5d\xc3"
    img = image(text)
    seeds = seed_entries(img, [Symbol(0x3000, "func", "helper")])
    assert (0x3000, Origin.SOLID) in seeds
    assert len(seeds) == len(set(seeds))


def test_symbol_file_format():
    syms = parse_symbols("# comment\n00001000 func main\n00002000 noreturn panic\n00004000 data buf\n")
    assert [s.kind for s in syms] == ["func", "noreturn", "data"]
    assert syms[1].rva == 0x2000


# -- traversal ----------------------------------------------------------------


def test_straight_line_function():
    img = image(b"\x55\x8b\xec\x5d\xc3")
    graph = recursive_disassemble(img, seed_entries(img))
    (fn,) = graph.functions.values()
    assert len(fn.blocks) == 1
    assert [i.mnemonic.value for i in fn.blocks[0].instructions] == ["push", "mov", "pop", "ret"]
    assert fn.blocks[0].terminator is Terminator.RET


def test_diamond():
    # 1000: test eax,eax ; jz 1008 ; inc eax ; jmp 1009 ; 1008: dec eax ; 1009: ret
    text = bytes.fromhex("85c0" "7403" "40" "eb01" "48" "c3")
    graph = recursive_disassemble(image(text), [(0x1000, Origin.SOLID)])
    fn = graph.functions[0x1000]
    edges = {(b.start, s) for b in fn.blocks for s in b.successors}
    assert {b.start for b in fn.blocks} == {0x1000, 0x1004, 0x1007, 0x1008}
    assert edges == {(0x1000, 0x1007), (0x1000, 0x1004), (0x1004, 0x1008), (0x1007, 0x1008)}


def test_mid_instruction_seed_is_discarded():
    # mov eax, imm32 whose immediate is also a relocation target
    text = b"\xb8\x78\x56\x34\x12\xc3"
    data = struct.pack("<I", IMAGE_BASE + 0x1002) + b"\0" * 12
    img = image(text, data, relocs=[0x4000])
    graph = analyze(img)
    assert 0x1002 in graph.conflicts
    assert (0x1002, "mid_instruction") in graph.discarded
    assert list(graph.functions) == [0x1000]


def test_prospect_into_data_gives_up_after_one_decode():
    text = b"\xc3" + b"\xcc" * 15 + b"\x0f\x0b\x00\x00"  # ud2 is outside the subset
    data = struct.pack("<I", IMAGE_BASE + 0x1010) + b"\0" * 12
    graph = analyze(image(text, data, relocs=[0x4000]))
    assert (0x1010, "decode_failure") in graph.discarded
    assert 0x1010 not in graph.functions


# -- text heuristics ------------------------------------------------------------


def test_is_all_text_examples():
    assert is_all_text(b"Hello, kernel!")
    assert not is_all_text(b"\x55\x8b\xec")
    assert is_all_text("ABC".encode("utf-16-le"))


@given(st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1))
def test_printable_ascii_is_text(s):
    assert is_all_text(s.encode("ascii"))
    assert is_all_text(s.encode("utf-16-le"))


@given(st.binary(min_size=1).filter(lambda b: any(x >= 0x80 for x in b[::2])))
def test_high_bytes_are_not_text(b):
    # a high byte in an even position rules out both readings
    assert not is_all_text(b)


# -- patchability -----------------------------------------------------------------


def test_patchability_rules():
    small = decide_patchability(fn_with([(0x1000, [1, 1, 1]), (0x1003, [5])]))
    assert not small.patchable and small.patch_reject_reason is RejectReason.ENTRY_BLOCK_TOO_SMALL
    single = decide_patchability(fn_with([(0x1000, [5, 1, 1, 1])], Origin.PROSPECT))
    assert not single.patchable and single.patch_reject_reason is RejectReason.PROSPECT_SINGLE_BLOCK
    ok = decide_patchability(fn_with([(0x1000, [5, 1, 1, 1]), (0x1008, [1]), (0x1009, [1])]))
    assert ok.patchable and ok.patch_reject_reason is None


def _prospect_at_0x1010(body: bytes):
    text = b"\xc3" * 16 + body
    data = struct.pack("<I", IMAGE_BASE + 0x1010) + b"\0" * 12
    graph = analyze(image(text, data, relocs=[0x4000]))
    return graph.functions[0x1010]


def test_prospect_all_text_rejected():
    # push ecx x4; jz +0x24; inc ecx ... : decodes into several blocks, all printable
    fn = _prospect_at_0x1010(TEXT_BLOB)
    assert fn.origin is Origin.PROSPECT and len(fn.blocks) > 1
    assert fn.patch_reject_reason is RejectReason.PROSPECT_ALL_TEXT


def test_prospect_with_code_bytes_is_patchable():
    fn = _prospect_at_0x1010(b"QQQQt\x01A\xc3")
    assert len(fn.blocks) > 1
    assert fn.patchable and fn.patch_reject_reason is None


# -- corpus ground truth ------------------------------------------------------------


def test_cfg_matches_ground_truth(corpus):
    for i in range(12):
        g = corpus(i)
        graph = analyze(parse_pe(g.image))
        for truth in g.ground_truth["functions"]:
            fn = graph.functions[truth["entry"]]
            assert fn.origin.value == truth["origin"], truth["name"]
            if truth["origin"] != "solid":
                continue
            blocks = {(b.start, b.end) for b in fn.blocks}
            edges = {(b.start, s) for b in fn.blocks for s in b.successors}
            assert blocks == {tuple(b) for b in truth["blocks"]}, (g.name, truth["name"])
            assert edges == {tuple(e) for e in truth["edges"]}, (g.name, truth["name"])


def test_planted_reject_reasons(corpus):
    expected = {
        "tiny": RejectReason.ENTRY_BLOCK_TOO_SMALL,
        "table_single": RejectReason.PROSPECT_SINGLE_BLOCK,
    }
    seen = set()
    for i in range(12):
        g = corpus(i)
        graph = analyze(parse_pe(g.image))
        for truth in g.ground_truth["functions"]:
            fn = graph.functions[truth["entry"]]
            want = expected.get(truth["kind"])
            assert fn.patch_reject_reason is want, (g.name, truth["name"])
            seen.add(truth["kind"])
        for trap in g.ground_truth["traps"]:
            seen.add(trap["kind"])
            if trap["kind"] == "all_text":
                fn = graph.functions[trap["rva"]]
                assert fn.patch_reject_reason is RejectReason.PROSPECT_ALL_TEXT
            elif trap["kind"] == "mid_instruction":
                assert (trap["rva"], "mid_instruction") in graph.discarded
                assert trap["rva"] in graph.conflicts
            else:
                assert (trap["rva"], "decode_failure") in graph.discarded
    assert {"tiny", "table_single", "all_text", "mid_instruction", "decode_failure"} <= seen


def test_graph_invariants(corpus):
    for i in range(12):
        img = parse_pe(corpus(i).image)
        graph = analyze(img)
        ranges = img.executable_ranges()
        block_ids = set()
        for fn in graph.functions.values():
            assert fn.blocks[0].start == fn.entry
            if fn.patchable:
                assert fn.entry_block.size >= 5
            for block in fn.blocks:
                assert id(block) not in block_ids
                block_ids.add(id(block))
                rva = block.start
                for k, insn in enumerate(block.instructions):
                    assert insn.rva == rva
                    rva = insn.end
                    if k < len(block.instructions) - 1:
                        assert insn.xfer_class.value == "none"
                    # re-decoding from raw bytes is deterministic
                    assert decode(img.read(insn.rva, insn.length), insn.rva) == insn
        for rva in graph.coverage:
            assert any(lo <= rva < hi for lo, hi in ranges)


def test_shared_tail_is_duplicated(corpus):
    """A tail reached from two functions appears in both, as separate blocks."""
    for i in range(12):
        g = corpus(i)
        if "shared_blocks" not in g.ground_truth["features"]:
            continue
        graph = analyze(parse_pe(g.image))
        owners = {}
        for fn in graph.functions.values():
            for b in fn.blocks:
                for insn in b.instructions:
                    owners.setdefault(insn.rva, []).append((fn.entry, b))
        shared = {rva: v for rva, v in owners.items() if len({e for e, _ in v}) > 1}
        assert shared, g.name
        for copies in shared.values():
            blocks = [b for _, b in copies]
            assert len({id(b) for b in blocks}) == len(blocks)
        return
    raise AssertionError("no corpus item with shared blocks")


def test_symbols_never_reduce_solid_coverage(corpus):
    for i in range(6):
        g = corpus(i)
        img = parse_pe(g.image)
        plain = analyze(img)
        with_syms = analyze(img, parse_symbols(g.symbols))
        solid = lambda gr: {e for e, f in gr.functions.items() if f.origin is Origin.SOLID}  # noqa: E731
        assert solid(plain) <= solid(with_syms)
        assert len(solid(with_syms)) >= len(solid(plain))
