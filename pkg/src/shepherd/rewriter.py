"""Static rewriting: instrument, lay out, repair, patch prologues, emit.

Rewritten functions are appended to the image in a host section (the grown
relocation section, or a fresh ``.shep`` section).  Original code and data
keep their offsets; each patchable function's first five bytes become a
``JMP rel32`` into its rewritten copy.

Every indirect CALL/JMP and every RET in rewritten code is preceded by a stub:

    pushfd
    cmp dword [gate], 0          ; monitor not up yet -> skip
    je  skip
    push eax
    <eax := dynamic target>
    push kind
    push eax
    push source_va
    call [filter_slot]           ; stdcall filter(source, target, kind)
    pop eax
  skip:
    popfd

The host region starts with a 16-byte linkage record, ``SHEPHERD`` followed by
the gate flag and the filter slot, which the monitor fills in at configure time.
"""

from __future__ import annotations

import resource
import struct
import time
from dataclasses import dataclass, field

from .analyzer import CodeGraph, FunctionRecord, Symbol, Terminator, analyze
from .pe import (
    DIR_BASERELOC,
    PeImage,
    RelocationEntry,
    align_up,
    emit_pe,
    erase_relocation,
    expand_host_section,
    host_free_rva,
    serialize_relocations,
)
from .x86 import (
    EAX,
    ESP,
    Imm,
    Instruction,
    Mem,
    Mnemonic,
    Reg,
    Rel,
    XferClass,
    classify_iat_indirect,
    encode,
    expand_short,
    make,
    with_rel,
)

LINKAGE_MAGIC = b"SHEPHERD"
LINKAGE_SIZE = 16
FUNCTION_ALIGN = 16

KIND_CODES = {XferClass.CALL_IND: 1, XferClass.JMP_IND: 2, XferClass.RET: 3, XferClass.CALL_REL: 4}
KIND_NAMES = {v: k.value for k, v in KIND_CODES.items()}

INSTRUMENTED = (XferClass.CALL_IND, XferClass.JMP_IND, XferClass.RET)


class RewriteError(Exception):
    pass


class DanglingTarget(RewriteError):
    pass


@dataclass
class RewriteOptions:
    instrument_direct_calls: bool = False
    symbols: list[Symbol] | None = None


@dataclass
class Piece:
    kind: str  # "insn", "rel", "stub" or "link"
    insn: Instruction  # for stubs: the guarded instruction
    size: int
    rva: int = 0
    data: bytes = b""
    target: int | None = None  # original target rva of rel/link pieces


@dataclass
class InstrumentedBlock:
    start: int
    pieces: list[Piece]
    fallthrough: int | None


@dataclass
class InstrumentedFunction:
    entry: int
    blocks: list[InstrumentedBlock]
    original_bytes: int


@dataclass
class InstrumentedGraph:
    functions: list[InstrumentedFunction]
    image_base: int
    relocations: frozenset[int]


@dataclass
class RewritePlan:
    host_rva: int
    code_start: int
    gate_slot: int
    filter_entry_slot: int
    block_layout: dict[tuple[int, int], int] = field(default_factory=dict)
    function_layout: dict[int, int] = field(default_factory=dict)
    new_relocations: list[RelocationEntry] = field(default_factory=list)
    patches: list[tuple[int, int]] = field(default_factory=list)
    emitted: bytes = b""
    code_end: int = 0
    stubs: list[tuple[int, int]] = field(default_factory=list)  # (stub rva, guarded insn rva)
    repaired_sites: list[tuple[int, int]] = field(default_factory=list)  # (rel32 field rva, original insn rva)
    original_code_bytes: int = 0

    @property
    def code_size(self) -> int:
        return self.code_end - self.code_start

    @property
    def growth(self) -> float:
        """Rewritten code bytes (without the linkage record) per original
        byte of the functions that were rewritten."""
        if not self.original_code_bytes:
            return 0.0
        return (self.code_size - LINKAGE_SIZE) / self.original_code_bytes


@dataclass
class RewriteReport:
    size_org: int
    size_int: int
    t_disasm: float
    t_basicblock: float
    instructions: int
    basic_blocks: int
    memory_peak: int
    t_int: float
    functions_total: int
    functions_patched: int
    stubs_emitted: int

    FIELDS = (
        "size_org", "size_int", "t_disasm", "t_basicblock", "instructions", "basic_blocks",
        "memory_peak", "t_int", "functions_total", "functions_patched", "stubs_emitted",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class RewriteResult:
    image: PeImage
    report: RewriteReport
    plan: RewritePlan
    graph: CodeGraph


# --------------------------------------------------------------------------
# stubs


def _signed32(value: int) -> int:
    value &= 0xFFFFFFFF
    return value - (1 << 32) if value & 0x80000000 else value


def _load_target(insn: Instruction, image_base: int, relocated: set[int]) -> tuple[list[Instruction], list[int]]:
    """Instructions leaving the transfer target in EAX (EAX and the flags are
    already saved on the stack, 8 bytes below the original ESP)."""
    xfer = insn.xfer_class
    if xfer is XferClass.RET:
        return [make(Mnemonic.MOV, Reg(EAX), Mem(ESP, None, 1, 8, 1))], []
    if xfer is XferClass.CALL_REL:
        load = make(Mnemonic.MOV, Reg(EAX), Imm((image_base + insn.target) & 0xFFFFFFFF, 4))
        return [load], [load.reloc_sites[0]]
    operand = insn.operands[0]
    if isinstance(operand, Reg):
        if operand.num == EAX:
            return [], []
        if operand.num == ESP:
            return [make(Mnemonic.LEA, Reg(EAX), Mem(ESP, None, 1, 8, 1))], []
        return [make(Mnemonic.MOV, Reg(EAX), operand)], []
    mem = operand
    if mem.base == ESP:
        disp = mem.disp + 8
        size = mem.disp_size if mem.disp_size == 4 or -128 <= disp <= 127 else 4
        mem = Mem(mem.base, mem.index, mem.scale, disp, size or 1, mem.sib)
    load = make(Mnemonic.MOV, Reg(EAX), mem)
    sites = []
    if mem.disp_size == 4 and any(insn.rva + off in relocated for off in insn.reloc_sites):
        sites.append(load.reloc_sites[0])
    return [load], sites


def build_stub(
    insn: Instruction,
    source_va: int,
    gate_va: int,
    slot_va: int,
    image_base: int,
    relocated: set[int],
) -> tuple[bytes, list[int]]:
    """Encode the filter stub guarding ``insn``.  Returns the bytes and the
    offsets of the absolute fields that need HIGHLOW relocations."""
    load, load_sites = _load_target(insn, image_base, relocated)
    head = [
        make(Mnemonic.PUSHFD),
        make(Mnemonic.CMP, Mem(disp=_signed32(gate_va)), Imm(0, 1)),
    ]
    body = [make(Mnemonic.PUSH, Reg(EAX))] + load + [
        make(Mnemonic.PUSH, Imm(KIND_CODES[insn.xfer_class], 4)),
        make(Mnemonic.PUSH, Reg(EAX)),
        make(Mnemonic.PUSH, Imm(source_va & 0xFFFFFFFF, 4)),
        make(Mnemonic.CALL, Mem(disp=_signed32(slot_va))),
        make(Mnemonic.POP, Reg(EAX)),
    ]
    body_len = sum(i.length for i in body)
    skip = make(Mnemonic.JCC, Rel(body_len, 4), cond=4)
    sequence = head + [skip] + body + [make(Mnemonic.POPFD)]
    absolute = {id(head[1]): head[1].reloc_sites, id(body[-2]): body[-2].reloc_sites}
    absolute[id(body[-3])] = (1,)
    if load:
        absolute[id(load[0])] = load_sites
    out = bytearray()
    sites: list[int] = []
    for i in sequence:
        sites.extend(len(out) + s for s in absolute.get(id(i), ()))
        out += encode(i)
    return bytes(out), sites


def stub_size(insn: Instruction, image_base: int, relocated: set[int]) -> int:
    return len(build_stub(insn, 0, 0, 0, image_base, relocated)[0])


# --------------------------------------------------------------------------
# phases


def phase_instrument(graph: CodeGraph, image: PeImage, *, instrument_direct_calls: bool = False) -> InstrumentedGraph:
    relocated = image.relocation_rvas()
    functions = []
    for entry, fn in sorted(graph.functions.items()):
        if not fn.patchable:
            continue
        blocks = []
        # entry block first so the function's new address is its entry
        for block in sorted(fn.blocks, key=lambda b: (b.start != entry, b.start)):
            pieces = []
            for insn in block.instructions:
                xfer = insn.xfer_class
                guard = xfer in INSTRUMENTED and not (xfer is not XferClass.RET and classify_iat_indirect(insn, image))
                if xfer is XferClass.CALL_REL and instrument_direct_calls:
                    guard = True
                if guard:
                    pieces.append(Piece("stub", insn, stub_size(insn, image.image_base, relocated)))
                if xfer in (XferClass.JMP_REL, XferClass.JCC, XferClass.CALL_REL):
                    wide = expand_short(insn)
                    pieces.append(Piece("rel", wide, wide.length, target=insn.target))
                else:
                    pieces.append(Piece("insn", insn, insn.length))
            falls = block.terminator in (Terminator.FALLTHROUGH, Terminator.JCC, Terminator.CALL_FALLTHROUGH)
            fallthrough = block.end if falls and block.end in block.successors else None
            blocks.append(InstrumentedBlock(block.start, pieces, fallthrough))
        covered = {b for blk in fn.blocks for b in range(blk.start, blk.end)}
        functions.append(InstrumentedFunction(entry, blocks, len(covered)))
    return InstrumentedGraph(functions, image.image_base, frozenset(relocated))


def phase_calculate(instrumented: InstrumentedGraph, image: PeImage, host_rva: int | None = None) -> RewritePlan:
    if host_rva is None:
        host_rva = host_free_rva(image)
    code_start = align_up(host_rva, FUNCTION_ALIGN)
    plan = RewritePlan(
        host_rva=host_rva,
        code_start=code_start,
        gate_slot=code_start + 8,
        filter_entry_slot=code_start + 12,
    )
    base = instrumented.image_base
    relocated = set(instrumented.relocations)
    gate_va = base + plan.gate_slot
    slot_va = base + plan.filter_entry_slot
    new_relocs: list[int] = []
    cursor = code_start + LINKAGE_SIZE
    for fn in instrumented.functions:
        cursor = align_up(cursor, FUNCTION_ALIGN)
        plan.function_layout[fn.entry] = cursor
        plan.original_code_bytes += fn.original_bytes
        order = [b.start for b in fn.blocks]
        for i, block in enumerate(fn.blocks):
            plan.block_layout[(fn.entry, block.start)] = cursor
            for piece in block.pieces:
                piece.rva = cursor
                insn = piece.insn
                if piece.kind == "stub":
                    piece.data, sites = build_stub(insn, base + insn.rva, gate_va, slot_va, base, relocated)
                    new_relocs.extend(cursor + s for s in sites)
                    plan.stubs.append((cursor, cursor + piece.size))
                elif piece.kind == "insn":
                    piece.data = encode(insn)
                    new_relocs.extend(cursor + off for off in insn.reloc_sites if insn.rva + off in relocated)
                cursor += piece.size
            nxt = order[i + 1] if i + 1 < len(order) else None
            if block.fallthrough is not None and block.fallthrough != nxt:
                link = make(Mnemonic.JMP, Rel(0, 4))
                block.pieces.append(Piece("link", link, link.length, rva=cursor, target=block.fallthrough))
                cursor += link.length
        plan.patches.append((fn.entry, plan.block_layout[(fn.entry, fn.entry)]))
    plan.code_end = cursor
    plan.new_relocations = [RelocationEntry(r) for r in sorted(new_relocs)]
    return plan


def phase_repair(plan: RewritePlan, instrumented: InstrumentedGraph) -> RewritePlan:
    """Point every rel32 at its destination and assemble the emitted bytes.

    Intra-function JMP/Jcc go to the target block's new copy; CALL rel32 goes
    back to the callee's original entry, whose prologue patch forwards it.
    """
    out = bytearray(b"\xcc" * (plan.code_end - plan.code_start))
    out[:LINKAGE_SIZE] = LINKAGE_MAGIC + bytes(LINKAGE_SIZE - len(LINKAGE_MAGIC))
    plan.repaired_sites = []
    for fn in instrumented.functions:
        for block in fn.blocks:
            for piece in block.pieces:
                if piece.kind in ("rel", "link"):
                    insn = piece.insn
                    if insn.xfer_class is XferClass.CALL_REL:
                        target = piece.target
                    else:
                        target = plan.block_layout.get((fn.entry, piece.target))
                        if target is None:
                            raise DanglingTarget(
                                f"{insn.name} at {insn.rva:#x} targets {piece.target:#x}, "
                                f"not a block of function {fn.entry:#x}"
                            )
                    fixed = with_rel(insn, target, rva=piece.rva, size=4)
                    piece.data = encode(fixed)
                    plan.repaired_sites.append((piece.rva + fixed.length - 4, insn.rva))
                off = piece.rva - plan.code_start
                out[off : off + len(piece.data)] = piece.data
    plan.emitted = bytes(out)
    return plan


def patch_prologues(plan: RewritePlan, image: PeImage) -> PeImage:
    image = image.copy()
    for entry, new_rva in plan.patches:
        jmp = struct.pack("<Bi", 0xE9, _signed32(new_rva - (entry + 5)))
        image.write(entry, jmp)
        erase_relocation(image, entry, entry + 5)
    return image


def find_linkage(image: PeImage) -> tuple[int, int] | None:
    """(gate rva, filter slot rva) of a rewritten image, or None."""
    for sec in image.sections:
        if not sec.executable:
            continue
        raw = bytes(sec.raw_data)
        pos = raw.find(LINKAGE_MAGIC)
        while pos >= 0:
            if (sec.rva + pos) % FUNCTION_ALIGN == 0:
                rva = sec.rva + pos
                return rva + 8, rva + 12
            pos = raw.find(LINKAGE_MAGIC, pos + 1)
    return None


def rewrite_image(image: PeImage, options: RewriteOptions | None = None) -> RewriteResult:
    options = options or RewriteOptions()
    size_org = len(emit_pe(image))
    img = image.copy()
    graph = analyze(img, options.symbols)

    t0 = time.perf_counter()
    instrumented = phase_instrument(graph, img, instrument_direct_calls=options.instrument_direct_calls)
    free = host_free_rva(img)
    plan = phase_calculate(instrumented, img, free)
    plan = phase_repair(plan, instrumented)
    t_int = time.perf_counter() - t0

    img = patch_prologues(plan, img)
    relocs = sorted(img.relocations + plan.new_relocations, key=lambda r: r.rva)
    table_rva = align_up(plan.code_end, 4)
    table_size = len(serialize_relocations(relocs))
    expand_host_section(img, table_rva + max(table_size, 4) - free)
    img.write(plan.code_start, plan.emitted)
    img.relocations = relocs
    img.data_directories[DIR_BASERELOC] = (table_rva, table_size)
    size_int = len(emit_pe(img))

    report = RewriteReport(
        size_org=size_org,
        size_int=size_int,
        t_disasm=graph.t_disasm,
        t_basicblock=graph.t_basicblock,
        instructions=graph.instruction_count,
        basic_blocks=graph.block_count,
        memory_peak=resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
        t_int=t_int,
        functions_total=len(graph.functions),
        functions_patched=len(plan.patches),
        stubs_emitted=len(plan.stubs),
    )
    return RewriteResult(img, report, plan, graph)
