"""Bit-exact PE32 image model: parse, mutate, emit.

Only what the rewriting pipeline needs is modelled structurally (sections,
HIGHLOW base relocations, imports, exports, the handful of header fields that
change when code is appended).  Everything else is carried through the raw
header blob untouched so that ``emit_pe(parse_pe(b)) == b``.
"""

from __future__ import annotations

import copy
import dataclasses
import struct
from dataclasses import dataclass, field

IMAGE_FILE_MACHINE_I386 = 0x014C
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

DIR_EXPORT = 0
DIR_IMPORT = 1
DIR_BASERELOC = 5

REL_BASED_ABSOLUTE = 0
REL_BASED_HIGHLOW = 3

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_DISCARDABLE = 0x02000000
SCN_MEM_NOT_PAGED = 0x08000000
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

HOST_SECTION_NAME = b".shep"

# offsets relative to the start of the optional header
_OPT_SIZE_OF_CODE = 4
_OPT_ENTRY = 16
_OPT_IMAGE_BASE = 28
_OPT_SECTION_ALIGN = 32
_OPT_FILE_ALIGN = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_CHECKSUM = 64
_OPT_NUM_DIRS = 92
_OPT_DIRS = 96

_SECTION_HEADER = struct.Struct("<8sIIIIIIHHI")


class PeError(Exception):
    pass


class MalformedHeader(PeError):
    pass


class Unsupported(PeError):
    pass


class LayoutOverflow(PeError):
    pass


def align_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return (value + alignment - 1) // alignment * alignment


@dataclass
class Section:
    name: bytes
    rva: int
    virtual_size: int
    raw_data: bytearray
    characteristics: int
    raw_offset: int = 0
    # PointerToRelocations, PointerToLinenumbers, NumberOfRelocations,
    # NumberOfLinenumbers: meaningless in images but preserved verbatim.
    coff_extra: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def readable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_READ)

    @property
    def writable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_WRITE)

    @property
    def executable(self) -> bool:
        return bool(self.characteristics & SCN_MEM_EXECUTE)

    @property
    def pageable(self) -> bool:
        return not self.characteristics & SCN_MEM_NOT_PAGED

    @property
    def end(self) -> int:
        return self.rva + self.virtual_size

    def contains(self, rva: int, size: int = 1) -> bool:
        return self.rva <= rva and rva + size <= self.end

    def mapped_bytes(self) -> bytes:
        """Bytes as seen in memory: raw data clipped or zero-padded to virtual_size."""
        data = bytes(self.raw_data[: self.virtual_size])
        return data + b"\0" * (self.virtual_size - len(data))


@dataclass(frozen=True)
class RelocationEntry:
    rva: int
    kind: int = REL_BASED_HIGHLOW


@dataclass(frozen=True)
class ImportEntry:
    library_name: str
    iat_slot_rva: int
    symbol_name: str


@dataclass(frozen=True)
class ExportEntry:
    rva: int
    name: str | None


@dataclass
class PeImage:
    header_blob: bytearray
    pe_offset: int
    image_base: int
    entry_point: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    size_of_code: int
    checksum: int
    data_directories: list[tuple[int, int]]
    sections: list[Section]
    relocations: list[RelocationEntry] = field(default_factory=list)
    imports: list[ImportEntry] = field(default_factory=list)
    exports: list[ExportEntry] = field(default_factory=list)
    overlay: bytes = b""
    gaps: dict[int, bytes] = field(default_factory=dict)

    @property
    def optional_header_offset(self) -> int:
        return self.pe_offset + 24

    @property
    def section_table_offset(self) -> int:
        opt_size = struct.unpack_from("<H", self.header_blob, self.pe_offset + 20)[0]
        return self.optional_header_offset + opt_size

    def copy(self) -> PeImage:
        # entries are immutable, so only containers and byte buffers are duplicated
        dup = copy.copy(self)
        dup.header_blob = bytearray(self.header_blob)
        dup.data_directories = list(self.data_directories)
        dup.sections = [dataclasses.replace(s, raw_data=bytearray(s.raw_data)) for s in self.sections]
        dup.relocations = list(self.relocations)
        dup.imports = list(self.imports)
        dup.exports = list(self.exports)
        dup.gaps = dict(self.gaps)
        return dup

    def section_for(self, rva: int, size: int = 1) -> Section | None:
        for sec in self.sections:
            if sec.contains(rva, size):
                return sec
        return None

    def section_named(self, name: bytes) -> Section | None:
        for sec in self.sections:
            if sec.name.rstrip(b"\0") == name.rstrip(b"\0"):
                return sec
        return None

    def executable_ranges(self) -> list[tuple[int, int]]:
        return [(s.rva, s.end) for s in self.sections if s.executable]

    def is_executable_rva(self, rva: int) -> bool:
        sec = self.section_for(rva)
        return sec is not None and sec.executable

    def read(self, rva: int, size: int) -> bytes:
        sec = self.section_for(rva, size)
        if sec is None:
            raise MalformedHeader(f"rva range {rva:#x}+{size:#x} not mapped by any section")
        off = rva - sec.rva
        chunk = bytes(sec.raw_data[off : off + size])
        return chunk + b"\0" * (size - len(chunk))

    def read_u32(self, rva: int) -> int:
        return struct.unpack("<I", self.read(rva, 4))[0]

    def write(self, rva: int, data: bytes) -> None:
        sec = self.section_for(rva, len(data))
        if sec is None:
            raise LayoutOverflow(f"write at {rva:#x}+{len(data):#x} outside every section")
        off = rva - sec.rva
        if off + len(data) > len(sec.raw_data):
            sec.raw_data.extend(b"\0" * (off + len(data) - len(sec.raw_data)))
        sec.raw_data[off : off + len(data)] = data

    def relocation_rvas(self) -> set[int]:
        return {r.rva for r in self.relocations}


# --------------------------------------------------------------------------
# parsing


def _cstring(image: PeImage, rva: int, limit: int = 512) -> str:
    sec = image.section_for(rva)
    if sec is None:
        raise MalformedHeader(f"string at {rva:#x} outside sections")
    off = rva - sec.rva
    raw = bytes(sec.raw_data[off : off + limit])
    end = raw.find(b"\0")
    if end < 0:
        raise MalformedHeader(f"unterminated string at {rva:#x}")
    return raw[:end].decode("latin-1")


def parse_relocations(blob: bytes) -> list[RelocationEntry]:
    entries: list[RelocationEntry] = []
    seen: set[int] = set()
    pos = 0
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise MalformedHeader("truncated relocation block header")
        page, size = struct.unpack_from("<II", blob, pos)
        if size < 8 or size % 2 or pos + size > len(blob):
            raise MalformedHeader(f"bad relocation block size {size:#x} at {pos:#x}")
        for (word,) in struct.iter_unpack("<H", blob[pos + 8 : pos + size]):
            kind, offset = word >> 12, word & 0xFFF
            if kind == REL_BASED_ABSOLUTE:
                continue
            if kind != REL_BASED_HIGHLOW:
                raise MalformedHeader(f"unsupported relocation type {kind}")
            rva = page + offset
            if rva in seen:
                raise MalformedHeader(f"duplicate relocation at {rva:#x}")
            seen.add(rva)
            entries.append(RelocationEntry(rva))
        pos += size
    return entries


def serialize_relocations(entries: list[RelocationEntry]) -> bytes:
    """Canonical block layout: one block per run of same-page entries, padded
    with an ABSOLUTE entry to a 4-byte boundary (what MS linkers emit)."""
    out = bytearray()
    i = 0
    while i < len(entries):
        page = entries[i].rva & ~0xFFF
        words = []
        while i < len(entries) and entries[i].rva & ~0xFFF == page:
            words.append((REL_BASED_HIGHLOW << 12) | (entries[i].rva & 0xFFF))
            i += 1
        if len(words) % 2:
            words.append(0)
        out += struct.pack("<II", page, 8 + 2 * len(words))
        out += struct.pack(f"<{len(words)}H", *words)
    return bytes(out)


def _parse_imports(image: PeImage) -> list[ImportEntry]:
    rva, size = image.data_directories[DIR_IMPORT]
    if not rva:
        return []
    entries: list[ImportEntry] = []
    slots: set[int] = set()
    pos = rva
    while True:
        desc = image.read(pos, 20)
        oft, _, _, name_rva, ft = struct.unpack("<IIIII", desc)
        if not any(desc):
            break
        library = _cstring(image, name_rva)
        thunk = oft or ft
        index = 0
        while True:
            value = image.read_u32(thunk + 4 * index)
            if value == 0:
                break
            if value & 0x80000000:
                symbol = f"#{value & 0xFFFF}"
            else:
                symbol = _cstring(image, value + 2)
            slot = ft + 4 * index
            if slot in slots:
                raise MalformedHeader(f"duplicate IAT slot {slot:#x}")
            slots.add(slot)
            entries.append(ImportEntry(library, slot, symbol))
            index += 1
        pos += 20
    return entries


def _parse_exports(image: PeImage) -> list[ExportEntry]:
    rva, size = image.data_directories[DIR_EXPORT]
    if not rva:
        return []
    fields = struct.unpack("<IIHHIIIIIII", image.read(rva, 40))
    _, _, _, _, _, base, n_funcs, n_names, a_funcs, a_names, a_ords = fields
    names: dict[int, str] = {}
    for i in range(n_names):
        name_rva = image.read_u32(a_names + 4 * i)
        ordinal = struct.unpack("<H", image.read(a_ords + 2 * i, 2))[0]
        names[ordinal] = _cstring(image, name_rva)
    exports = []
    for i in range(n_funcs):
        func_rva = image.read_u32(a_funcs + 4 * i)
        if func_rva == 0 or rva <= func_rva < rva + size:
            continue  # unused slot or forwarder string
        exports.append(ExportEntry(func_rva, names.get(i)))
    return exports


def parse_pe(data: bytes) -> PeImage:
    data = bytes(data)
    if len(data) < 64 or data[:2] != b"MZ":
        raise MalformedHeader("missing MZ signature")
    pe_offset = struct.unpack_from("<I", data, 0x3C)[0]
    if pe_offset + 24 > len(data) or data[pe_offset : pe_offset + 4] != b"PE\0\0":
        raise MalformedHeader("missing PE signature")
    machine, n_sections, _, _, _, opt_size, _ = struct.unpack_from("<HHIIIHH", data, pe_offset + 4)
    opt = pe_offset + 24
    if opt + 2 > len(data):
        raise MalformedHeader("truncated optional header")
    magic = struct.unpack_from("<H", data, opt)[0]
    if magic == PE32PLUS_MAGIC:
        raise Unsupported("PE32+ images are not supported")
    if magic != PE32_MAGIC:
        raise MalformedHeader(f"bad optional header magic {magic:#x}")
    if machine != IMAGE_FILE_MACHINE_I386:
        raise Unsupported(f"machine type {machine:#x} is not i386")
    if opt_size < _OPT_DIRS or opt + opt_size > len(data):
        raise MalformedHeader("truncated optional header")

    def opt_u32(off: int) -> int:
        return struct.unpack_from("<I", data, opt + off)[0]

    n_dirs = min(opt_u32(_OPT_NUM_DIRS), (opt_size - _OPT_DIRS) // 8)
    dirs = [struct.unpack_from("<II", data, opt + _OPT_DIRS + 8 * i) for i in range(n_dirs)]
    dirs += [(0, 0)] * (16 - len(dirs))
    size_of_headers = opt_u32(_OPT_SIZE_OF_HEADERS)
    table = opt + opt_size
    if table + 40 * n_sections > min(size_of_headers, len(data)):
        raise MalformedHeader("section table does not fit in headers")

    sections = []
    for i in range(n_sections):
        name, vsize, rva, raw_size, raw_ptr, p_rel, p_line, n_rel, n_line, chars = _SECTION_HEADER.unpack_from(
            data, table + 40 * i
        )
        if raw_size and raw_ptr + raw_size > len(data):
            raise MalformedHeader(f"section {name!r} raw data truncated")
        raw = bytearray(data[raw_ptr : raw_ptr + raw_size]) if raw_size else bytearray()
        sections.append(Section(name, rva, vsize, raw, chars, raw_ptr, (p_rel, p_line, n_rel, n_line)))

    image = PeImage(
        header_blob=bytearray(data[:size_of_headers]),
        pe_offset=pe_offset,
        image_base=opt_u32(_OPT_IMAGE_BASE),
        entry_point=opt_u32(_OPT_ENTRY),
        section_alignment=opt_u32(_OPT_SECTION_ALIGN),
        file_alignment=opt_u32(_OPT_FILE_ALIGN),
        size_of_image=opt_u32(_OPT_SIZE_OF_IMAGE),
        size_of_headers=size_of_headers,
        size_of_code=opt_u32(_OPT_SIZE_OF_CODE),
        checksum=opt_u32(_OPT_CHECKSUM),
        data_directories=[tuple(d) for d in dirs],
        sections=sections,
    )

    covered = [(0, size_of_headers)] + sorted(
        (s.raw_offset, s.raw_offset + len(s.raw_data)) for s in sections if s.raw_data
    )
    cursor = 0
    for start, end in covered:
        if start > cursor:
            image.gaps[cursor] = data[cursor:start]
        cursor = max(cursor, end)
    image.overlay = data[cursor:]

    rel_rva, rel_size = image.data_directories[DIR_BASERELOC]
    if rel_rva and rel_size:
        try:
            blob = image.read(rel_rva, rel_size)
        except MalformedHeader:
            raise MalformedHeader("relocation directory outside sections") from None
        image.relocations = parse_relocations(blob)
    image.imports = _parse_imports(image)
    image.exports = _parse_exports(image)
    return image


# --------------------------------------------------------------------------
# emission


def pe_checksum(data: bytes, checksum_offset: int) -> int:
    buf = bytearray(data)
    buf[checksum_offset : checksum_offset + 4] = b"\0\0\0\0"
    if len(buf) % 2:
        buf.append(0)
    total = sum(memoryview(buf).cast("H"))
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def check_layout(image: PeImage) -> None:
    prev_end = 0
    for sec in image.sections:
        if sec.rva < prev_end:
            raise LayoutOverflow(f"section {sec.display_name} at {sec.rva:#x} overlaps its predecessor")
        if image.section_alignment and sec.rva % image.section_alignment:
            raise LayoutOverflow(f"section {sec.display_name} misaligned")
        prev_end = sec.rva + max(sec.virtual_size, 1)
    spans = sorted((s.raw_offset, s.raw_offset + len(s.raw_data)) for s in image.sections if s.raw_data)
    cursor = image.size_of_headers
    for start, end in spans:
        if start < cursor:
            raise LayoutOverflow("section raw data ranges collide")
        cursor = end
    for rel in image.relocations:
        if image.section_for(rel.rva, 4) is None:
            raise LayoutOverflow(f"relocation at {rel.rva:#x} outside every section")


def emit_pe(image: PeImage) -> bytes:
    check_layout(image)
    table = image.section_table_offset
    header = bytearray(image.header_blob)
    if table + 40 * len(image.sections) > len(header):
        raise LayoutOverflow("section table no longer fits in the header area")
    opt = image.optional_header_offset
    struct.pack_into("<H", header, image.pe_offset + 6, len(image.sections))
    for off, value in (
        (_OPT_SIZE_OF_CODE, image.size_of_code),
        (_OPT_ENTRY, image.entry_point),
        (_OPT_IMAGE_BASE, image.image_base),
        (_OPT_SIZE_OF_IMAGE, image.size_of_image),
    ):
        struct.pack_into("<I", header, opt + off, value)
    n_dirs = struct.unpack_from("<I", header, opt + _OPT_NUM_DIRS)[0]
    for i in range(min(n_dirs, 16)):
        struct.pack_into("<II", header, opt + _OPT_DIRS + 8 * i, *image.data_directories[i])
    for i, sec in enumerate(image.sections):
        _SECTION_HEADER.pack_into(
            header,
            table + 40 * i,
            sec.name,
            sec.virtual_size,
            sec.rva,
            len(sec.raw_data),
            sec.raw_offset,
            *sec.coff_extra,
            sec.characteristics,
        )

    # base relocations are re-serialized into the directory's location
    sections = image.sections
    rel_rva, rel_size = image.data_directories[DIR_BASERELOC]
    if rel_rva and (rel_size or image.relocations):
        blob = serialize_relocations(image.relocations)
        sec = image.section_for(rel_rva, max(len(blob), 1))
        if sec is None or rel_rva - sec.rva + len(blob) > len(sec.raw_data):
            raise LayoutOverflow("relocation table does not fit its section")
        sections = [dataclasses.replace(s, raw_data=bytearray(s.raw_data)) for s in image.sections]
        sec = next(s for s in sections if s.rva == sec.rva)
        off = rel_rva - sec.rva
        span = max(len(blob), min(rel_size, len(sec.raw_data) - off))
        sec.raw_data[off : off + span] = blob + b"\0" * (span - len(blob))
        dir_off = opt + _OPT_DIRS + 8 * DIR_BASERELOC
        struct.pack_into("<I", header, dir_off + 4, len(blob))

    end = max([len(header)] + [s.raw_offset + len(s.raw_data) for s in sections if s.raw_data])
    out = bytearray(end)
    out[: len(header)] = header
    for off, chunk in image.gaps.items():
        out[off : off + len(chunk)] = chunk
    for sec in sections:
        if sec.raw_data:
            out[sec.raw_offset : sec.raw_offset + len(sec.raw_data)] = sec.raw_data
    out += image.overlay
    checksum_off = opt + _OPT_CHECKSUM
    checksum = pe_checksum(out, checksum_off) if image.checksum else 0
    struct.pack_into("<I", out, checksum_off, checksum)
    return bytes(out)


# --------------------------------------------------------------------------
# mutation


def relocation_host(image: PeImage) -> Section | None:
    rel_rva, _ = image.data_directories[DIR_BASERELOC]
    if rel_rva:
        sec = image.section_for(rel_rva)
        if sec is not None:
            return sec
    return image.section_named(b".reloc")


def host_free_rva(image: PeImage) -> int:
    """First RVA handed out by the next expand_host_section call."""
    host = relocation_host(image)
    if host is not None and host is image.sections[-1]:
        return host.end
    last = image.sections[-1]
    return align_up(last.end, image.section_alignment)


def expand_host_section(image: PeImage, needed: int) -> Section:
    """Grow the relocation section in place when it is last, else append
    ``.shep``.  Free space starts at ``host_free_rva(image)`` as computed
    before the call.  No pre-existing byte moves in RVA or file offset."""
    if needed <= 0:
        raise ValueError("needed must be positive")
    if image.overlay:
        raise LayoutOverflow("cannot grow an image that carries overlay data")
    host = relocation_host(image)
    last = image.sections[-1]
    if host is not None and host is last:
        host.virtual_size += needed
    else:
        table_end = image.section_table_offset + 40 * (len(image.sections) + 1)
        first_raw = min((s.raw_offset for s in image.sections if s.raw_data), default=image.size_of_headers)
        if table_end > min(image.size_of_headers, first_raw):
            raise LayoutOverflow("no room for another section header")
        slot = image.header_blob[table_end - 40 : table_end]
        if any(slot):
            raise LayoutOverflow("header slack for a new section header is not empty")
        raw_end = max(s.raw_offset + len(s.raw_data) for s in image.sections if s.raw_data)
        host = Section(
            name=HOST_SECTION_NAME.ljust(8, b"\0"),
            rva=align_up(last.end, image.section_alignment),
            virtual_size=needed,
            raw_data=bytearray(),
            characteristics=0,
            raw_offset=align_up(raw_end, image.file_alignment),
        )
        image.sections.append(host)
    raw_len = align_up(host.virtual_size, image.file_alignment)
    host.raw_data.extend(b"\0" * (raw_len - len(host.raw_data)))
    host.characteristics = (
        host.characteristics
        | SCN_CNT_CODE
        | SCN_MEM_EXECUTE
        | SCN_MEM_READ
        | SCN_MEM_NOT_PAGED
    ) & ~(SCN_MEM_WRITE | SCN_MEM_DISCARDABLE)
    image.size_of_image = align_up(host.end, image.section_alignment)
    image.size_of_code = sum(len(s.raw_data) for s in image.sections if s.characteristics & SCN_CNT_CODE)
    return host


def erase_relocation(image: PeImage, start: int, end: int) -> int:
    """Drop every HIGHLOW entry whose 4-byte field intersects [start, end)."""
    if end - start < 1:
        raise ValueError("empty range")
    kept = [r for r in image.relocations if r.rva + 4 <= start or r.rva >= end]
    erased = len(image.relocations) - len(kept)
    image.relocations = kept
    return erased
