import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shepherd.corpus import CorpusSpec, generate
from shepherd.corpus.image import FILE_ALIGN, IMAGE_BASE, build_pe, pe_checksum, serialize_relocs
from shepherd.pe import (
    DIR_BASERELOC,
    SCN_MEM_EXECUTE,
    SCN_MEM_NOT_PAGED,
    SCN_MEM_WRITE,
    LayoutOverflow,
    MalformedHeader,
    RelocationEntry,
    Unsupported,
    emit_pe,
    erase_relocation,
    expand_host_section,
    host_free_rva,
    parse_pe,
    parse_relocations,
    serialize_relocations,
)

TEXT = 0x60000020
DATA = 0xC0000040


def two_sections(relocs=(), text=b"\x55\x8b\xec\xc3"):
    sections = [(b".text\0\0\0", 0x1000, text, TEXT), (b".data\0\0\0", 0x2000, b"\0" * 16, DATA)]
    dirs = {}
    if relocs:
        blob = serialize_relocs(list(relocs))
        sections.append((b".reloc\0\0", 0x3000, blob, 0x42000040))
        dirs[DIR_BASERELOC] = (0x3000, len(blob))
    return build_pe(sections, 0x1000, dirs)


def test_minimal_two_section_image():
    img = parse_pe(two_sections())
    assert len(img.sections) == 2
    assert img.relocations == []
    assert img.entry_point == 0x1000
    assert img.image_base == IMAGE_BASE
    assert img.sections[0].executable and not img.sections[0].writable
    assert img.sections[1].writable and not img.sections[1].executable


def test_identity_round_trip_on_minimal_image():
    raw = two_sections(relocs=[0x2000, 0x2008])
    img = parse_pe(raw)
    assert [r.rva for r in img.relocations] == [0x2000, 0x2008]
    assert emit_pe(img) == raw


def test_round_trip_over_corpus(corpus):
    for i in range(20):
        raw = corpus(i).image
        assert emit_pe(parse_pe(raw)) == raw, corpus(i).name


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=2**64 - 1))
def test_round_trip_arbitrary_seed(seed):
    raw = generate(CorpusSpec(seed, function_count=3, max_blocks_per_function=4)).image
    assert emit_pe(parse_pe(raw)) == raw


def test_pe32_plus_is_unsupported():
    raw = bytearray(two_sections())
    opt = struct.unpack_from("<I", raw, 0x3C)[0] + 24
    struct.pack_into("<H", raw, opt, 0x20B)
    with pytest.raises(Unsupported):
        parse_pe(bytes(raw))


@pytest.mark.parametrize(
    "mangle",
    [
        lambda b: b"ZM" + b[2:],
        lambda b: b[:0x80] + b"XX\0\0" + b[0x84:],
        lambda b: b[:0x90],
    ],
    ids=["dos_magic", "pe_magic", "truncated"],
)
def test_malformed_headers(mangle):
    with pytest.raises(MalformedHeader):
        parse_pe(mangle(two_sections()))


def test_non_highlow_relocation_rejected():
    raw = bytearray(two_sections(relocs=[0x2000, 0x2008]))
    img = parse_pe(bytes(raw))
    reloc = img.sections[2]
    # first entry word of the first block: switch its type to DIR64 (10)
    off = reloc.raw_offset + 8
    struct.pack_into("<H", raw, off, 0xA000)
    with pytest.raises(MalformedHeader):
        parse_pe(bytes(raw))


def test_relocation_serialization_is_canonical():
    rvas = [0x1000, 0x1004, 0x2FFC, 0x3000]
    blob = serialize_relocations([RelocationEntry(r) for r in rvas])
    assert blob == serialize_relocs(rvas)
    assert [r.rva for r in parse_relocations(blob)] == rvas


@given(st.sets(st.integers(min_value=0x1000, max_value=0x40000).map(lambda v: v & ~1), max_size=60))
def test_relocation_blob_round_trip(rvas):
    entries = [RelocationEntry(r) for r in sorted(rvas)]
    assert parse_relocations(serialize_relocations(entries)) == entries


def test_expand_last_reloc_section(corpus):
    g = corpus(0)  # seed 1: .reloc is the last section
    img = parse_pe(g.image)
    assert img.sections[-1].display_name == ".reloc"
    before = [(s.rva, s.raw_offset, bytes(s.raw_data)) for s in img.sections]
    free = host_free_rva(img)
    host = expand_host_section(img, 4096)
    assert host is img.sections[-1]
    assert host.virtual_size >= free - host.rva + 4096
    assert host.characteristics & SCN_MEM_EXECUTE
    assert host.characteristics & SCN_MEM_NOT_PAGED
    assert not host.characteristics & SCN_MEM_WRITE
    for (rva, raw, data), sec in zip(before, img.sections):
        assert (sec.rva, sec.raw_offset) == (rva, raw)
        assert bytes(sec.raw_data[: len(data)]) == data


def test_expand_appends_when_reloc_not_last(corpus):
    g = corpus(3)  # seed 4 carries a trailing .rsrc
    raw = g.image
    img = parse_pe(raw)
    assert img.sections[-1].display_name == ".rsrc"
    count = len(img.sections)
    host = expand_host_section(img, 100)
    out = emit_pe(img)
    again = parse_pe(out)
    assert len(again.sections) == count + 1
    assert again.sections[-1].display_name == ".shep"
    assert again.sections[-1].rva == host.rva
    assert again.sections[-1].rva % again.section_alignment == 0
    assert again.sections[-1].raw_offset % FILE_ALIGN == 0
    assert again.size_of_image >= host.rva + host.virtual_size
    # header fields read independently of the parser
    pe = struct.unpack_from("<I", out, 0x3C)[0]
    assert struct.unpack_from("<H", out, pe + 6)[0] == count + 1
    assert struct.unpack_from("<I", out, pe + 24 + 56)[0] == again.size_of_image
    # every pre-existing section byte is where it was
    for sec in parse_pe(raw).sections:
        assert out[sec.raw_offset : sec.raw_offset + len(sec.raw_data)] == bytes(sec.raw_data)


def test_expand_rejects_zero():
    img = parse_pe(two_sections())
    with pytest.raises(ValueError):
        expand_host_section(img, 0)


def test_overlapping_sections_rejected():
    img = parse_pe(two_sections())
    img.sections[1].rva = 0x1000
    with pytest.raises(LayoutOverflow):
        emit_pe(img)


def test_checksum_recomputed_when_present(corpus):
    g = corpus(0)  # odd seed: checksum set
    img = parse_pe(g.image)
    assert img.checksum != 0
    img.write(0x1000, b"\x90")
    out = bytearray(emit_pe(img))
    off = img.optional_header_offset + 64
    assert struct.unpack_from("<I", out, off)[0] == pe_checksum(out, off)


def test_checksum_left_zero_when_absent(corpus):
    img = parse_pe(corpus(1).image)  # even seed
    assert img.checksum == 0
    out = emit_pe(img)
    assert struct.unpack_from("<I", out, img.optional_header_offset + 64)[0] == 0


def test_imports_match_ground_truth(corpus):
    for i in range(10):
        g = corpus(i)
        img = parse_pe(g.image)
        truth = {(e["library"], int(e["iat_slot_rva"]), e["symbol"]) for e in g.ground_truth["imports"]}
        assert {(e.library_name, e.iat_slot_rva, e.symbol_name) for e in img.imports} == truth
        slots = [e.iat_slot_rva for e in img.imports]
        assert len(slots) == len(set(slots))


def test_relocations_match_ground_truth(corpus):
    for i in range(10):
        g = corpus(i)
        img = parse_pe(g.image)
        assert sorted(r.rva for r in img.relocations) == sorted(g.ground_truth["relocations"])
        for r in img.relocations:
            assert img.section_for(r.rva, 4) is not None


# -- erase_relocation ---------------------------------------------------------


def _image_with(rvas):
    img = parse_pe(two_sections())
    img.relocations = [RelocationEntry(r) for r in sorted(set(rvas))]
    return img


def test_erase_entry_under_patch():
    img = _image_with([0x1002, 0x1010])
    assert erase_relocation(img, 0x1000, 0x1005) == 1
    assert [r.rva for r in img.relocations] == [0x1010]


def test_erase_nothing_when_disjoint():
    img = _image_with([0x1010])
    assert erase_relocation(img, 0x1000, 0x1005) == 0


def test_erase_field_overlapping_from_below():
    img = _image_with([0x0FFD])
    assert erase_relocation(img, 0x1000, 0x1005) == 1


@given(
    st.sets(st.integers(min_value=0xFF0, max_value=0x1030), max_size=20),
    st.integers(min_value=0xFF0, max_value=0x1030),
    st.integers(min_value=1, max_value=16),
)
def test_erase_matches_interval_brute_force(rvas, start, length):
    img = _image_with(rvas)
    end = start + length
    doomed = {r for r in rvas if set(range(r, r + 4)) & set(range(start, end))}
    assert erase_relocation(img, start, end) == len(doomed)
    left = {r.rva for r in img.relocations}
    assert left == set(rvas) - doomed
    for r in left:
        assert not set(range(r, r + 4)) & set(range(start, end))
