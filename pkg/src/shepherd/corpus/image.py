"""Minimal PE32 writer used to build test drivers.

Written independently of the parser/emitter in ``shepherd.pe`` so that
round-trip tests compare two separate implementations.
"""

from __future__ import annotations

import struct

MASK = 0xFFFFFFFF
IMAGE_BASE = 0x10000
SECTION_ALIGN = 0x1000
FILE_ALIGN = 0x200
HEADERS_SIZE = 0x400
TEXT_RVA = 0x1000


def align(v: int, a: int) -> int:
    return (v + a - 1) // a * a


def serialize_relocs(rvas: list[int]) -> bytes:
    out = bytearray()
    pages: dict[int, list[int]] = {}
    for r in sorted(rvas):
        pages.setdefault(r & ~0xFFF, []).append(r & 0xFFF)
    for page, offs in pages.items():
        words = [0x3000 | o for o in offs]
        if len(words) % 2:
            words.append(0)
        out += struct.pack("<II", page, 8 + 2 * len(words)) + struct.pack(f"<{len(words)}H", *words)
    return bytes(out)


def pe_checksum(image: bytearray, offset: int) -> int:
    total = 0
    for i in range(0, len(image) - 1, 2):
        if offset <= i < offset + 4:
            continue
        total += image[i] | image[i + 1] << 8
        total = (total & 0xFFFF) + (total >> 16)
    if len(image) % 2:
        total += image[-1]
        total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return (total + len(image)) & MASK


def build_pe(
    sections: list[tuple[bytes, int, bytes, int]],
    entry: int,
    dirs: dict[int, tuple[int, int]],
    *,
    stamp: int = 0,
    checksum: bool = False,
    image_base: int = IMAGE_BASE,
) -> bytes:
    """sections: (name, rva, data, flags); virtual size is len(data)."""
    e_lfanew = 0x80
    n = len(sections)
    raw = HEADERS_SIZE
    table = []
    for name, rva, data, flags in sections:
        size = align(len(data), FILE_ALIGN)
        table.append((name, len(data), rva, size, raw, flags))
        raw += size
    out = bytearray(raw)
    out[:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, e_lfanew)
    out[0x40:0x40 + 39] = b"This program cannot be run in DOS mode."
    out[e_lfanew:e_lfanew + 4] = b"PE\0\0"
    struct.pack_into("<HHIIIHH", out, e_lfanew + 4, 0x14C, n, (0x4A000000 + stamp) & MASK, 0, 0, 0xE0, 0x0102)
    opt = e_lfanew + 24
    last = sections[-1]
    size_of_image = align(last[1] + len(last[2]), SECTION_ALIGN)
    code = sum(t[3] for t in table if t[5] & 0x20)
    init = sum(t[3] for t in table if t[5] & 0x40)
    struct.pack_into(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", out, opt,
        0x10B, 9, 0, code, init, 0, entry, TEXT_RVA, sections[1][1] if n > 1 else 0,
        image_base, SECTION_ALIGN, FILE_ALIGN, 6, 1, 0, 0, 6, 1, 0,
        size_of_image, HEADERS_SIZE, 0, 1, 0x0400,
        0x40000, 0x1000, 0x100000, 0x1000, 0, 16,
    )
    for idx, (d_rva, d_size) in dirs.items():
        struct.pack_into("<II", out, opt + 96 + 8 * idx, d_rva, d_size)
    for i, (name, vsize, rva, size, ptr, flags) in enumerate(table):
        struct.pack_into("<8sIIIIIIHHI", out, opt + 0xE0 + 40 * i, name, vsize, rva, size, ptr, 0, 0, 0, 0, flags)
        data = sections[i][2]
        out[ptr:ptr + len(data)] = data
    if checksum:
        struct.pack_into("<I", out, opt + 64, pe_checksum(out, opt + 64))
    return bytes(out)
