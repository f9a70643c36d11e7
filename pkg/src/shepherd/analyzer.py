"""Recursive-traversal code discovery, basic blocks and patchability.

Code reached from trusted entry points (image entry, exports, symbol sidecar)
is *solid*; code reached only through weaker evidence (relocated pointers,
absolute operands of solid instructions) is *prospect* and is accepted only
when it decodes cleanly and never contradicts solid code.  When in doubt a
prospect seed is dropped: treating code as data is the safe mistake.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .pe import PeImage
from .x86 import DecodeError, Instruction, XferClass, decode


class Origin(Enum):
    SOLID = "solid"
    PROSPECT = "prospect"


class Terminator(Enum):
    FALLTHROUGH = "fallthrough"
    JMP = "jmp"
    JCC = "jcc"
    CALL_FALLTHROUGH = "call_fallthrough"
    RET = "ret"
    INDIRECT = "indirect"


class RejectReason(Enum):
    ENTRY_BLOCK_TOO_SMALL = "entry_block_too_small"
    PROSPECT_SINGLE_BLOCK = "prospect_single_block"
    PROSPECT_ALL_TEXT = "prospect_all_text"
    DECODE_FAILURE = "decode_failure"


PATCH_SIZE = 5


@dataclass
class BasicBlock:
    start: int
    instructions: list[Instruction]
    terminator: Terminator
    successors: list[int] = field(default_factory=list)

    @property
    def end(self) -> int:
        return self.instructions[-1].end

    @property
    def size(self) -> int:
        return self.end - self.start


@dataclass
class FunctionRecord:
    entry: int
    blocks: list[BasicBlock]
    origin: Origin
    patchable: bool = False
    patch_reject_reason: RejectReason | None = None
    # set when traversal had to stop on something it could not decode
    incomplete: bool = False

    @property
    def entry_block(self) -> BasicBlock:
        return self.blocks[0]

    def block_at(self, rva: int) -> BasicBlock | None:
        for block in self.blocks:
            if block.start == rva:
                return block
        return None

    def byte_span(self, image: PeImage) -> bytes:
        return b"".join(image.read(b.start, b.size) for b in sorted(self.blocks, key=lambda b: b.start))


@dataclass
class CodeGraph:
    functions: dict[int, FunctionRecord] = field(default_factory=dict)
    coverage: set[int] = field(default_factory=set)
    conflicts: list[int] = field(default_factory=list)
    discarded: list[tuple[int, str]] = field(default_factory=list)
    t_disasm: float = 0.0
    t_basicblock: float = 0.0

    @property
    def instruction_count(self) -> int:
        return sum(len(b.instructions) for f in self.functions.values() for b in f.blocks)

    @property
    def block_count(self) -> int:
        return sum(len(f.blocks) for f in self.functions.values())

    def to_json(self) -> dict:
        def hx(v: int) -> str:
            return f"{v:#x}"

        return {
            "functions": [
                {
                    "entry": hx(fn.entry),
                    "origin": fn.origin.value,
                    "patchable": fn.patchable,
                    "reject_reason": fn.patch_reject_reason.value if fn.patch_reject_reason else None,
                    "blocks": [
                        {
                            "start": hx(b.start),
                            "end": hx(b.end),
                            "terminator": b.terminator.value,
                            "successors": [hx(s) for s in b.successors],
                            "instructions": [str(i) for i in b.instructions],
                        }
                        for b in fn.blocks
                    ],
                }
                for _, fn in sorted(self.functions.items())
            ],
            "coverage_bytes": len(self.coverage),
            "conflicts": [hx(c) for c in self.conflicts],
            "discarded": [{"rva": hx(r), "reason": why} for r, why in self.discarded],
        }


# --------------------------------------------------------------------------
# symbol sidecar


@dataclass(frozen=True)
class Symbol:
    rva: int
    kind: str  # "func", "noreturn" or "data"
    name: str


def parse_symbols(text: str) -> list[Symbol]:
    """``hex_rva kind name`` per line; ``#`` starts a comment."""
    symbols = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise ValueError(f"symbol line {lineno}: expected 'rva kind name'")
        rva, kind, name = parts
        if kind not in ("func", "noreturn", "data"):
            raise ValueError(f"symbol line {lineno}: unknown kind {kind!r}")
        symbols.append(Symbol(int(rva, 16), kind, name))
    return symbols


def load_symbols(path: str | Path) -> list[Symbol]:
    return parse_symbols(Path(path).read_text())


def format_symbols(symbols: list[Symbol]) -> str:
    return "".join(f"{s.rva:08x} {s.kind} {s.name}\n" for s in symbols)


# --------------------------------------------------------------------------
# seeds


def seed_entries(image: PeImage, symbols: list[Symbol] | None = None) -> list[tuple[int, Origin]]:
    seeds: dict[int, Origin] = {}

    def add(rva: int, origin: Origin) -> None:
        if rva not in seeds or origin is Origin.SOLID:
            seeds[rva] = origin

    if image.entry_point:
        add(image.entry_point, Origin.SOLID)
    for export in image.exports:
        if image.is_executable_rva(export.rva):
            add(export.rva, Origin.SOLID)
    for sym in symbols or ():
        if sym.kind != "data" and image.is_executable_rva(sym.rva):
            add(sym.rva, Origin.SOLID)
    for rel in image.relocations:
        target = (image.read_u32(rel.rva) - image.image_base) & 0xFFFFFFFF
        if image.is_executable_rva(target) and target not in seeds:
            add(target, Origin.PROSPECT)
    return sorted(seeds.items(), key=lambda s: (s[1] is Origin.PROSPECT, s[0]))


# --------------------------------------------------------------------------
# traversal


class _Explorer:
    """Per-image traversal state: a decode cache plus byte ownership."""

    def __init__(self, image: PeImage):
        self.image = image
        self.ranges = [(s.rva, s.end, s.mapped_bytes()) for s in image.sections if s.executable]
        self.cache: dict[int, Instruction | DecodeError] = {}
        # byte rva -> start rva of the committed instruction covering it
        self.owner: dict[int, int] = {}

    def decode_at(self, rva: int) -> Instruction:
        return self.decode_span(rva)[0]

    def decode_span(self, rva: int) -> tuple[Instruction, int]:
        """The instruction at ``rva`` and the end of its section."""
        hit = self.cache.get(rva)
        if hit is None:
            for lo, hi, data in self.ranges:
                if lo <= rva < hi:
                    try:
                        hit = (decode(data, rva, rva - lo), hi)
                    except DecodeError as exc:
                        hit = exc
                    break
            else:
                hit = DecodeError(f"{rva:#x} outside executable sections")
            self.cache[rva] = hit
        if isinstance(hit, DecodeError):
            raise hit
        return hit

    def read_u32(self, rva: int) -> int:
        for lo, hi, data in self.ranges:
            if lo <= rva and rva + 4 <= hi:
                return int.from_bytes(data[rva - lo : rva - lo + 4], "little")
        return self.image.read_u32(rva)

    def section_end(self, rva: int) -> int | None:
        for lo, hi, _ in self.ranges:
            if lo <= rva < hi:
                return hi
        return None

    def commit(self, instructions) -> None:
        owner = self.owner
        for insn in instructions:
            for b in range(insn.rva, insn.end):
                owner[b] = insn.rva


@dataclass
class _Walk:
    insns: dict[int, Instruction]
    leaders: set[int]
    calls: list[int]
    failed: bool = False
    runoff: bool = False
    conflict: int | None = None


def _explore(ex: _Explorer, entry: int, noreturn: set[int], claimed: dict[int, int] | None) -> _Walk:
    """Collect every instruction intra-procedurally reachable from ``entry``.

    ``claimed`` is the solid byte-ownership map a prospect walk must respect;
    a framing that disagrees with it is reported as a conflict.
    """
    walk = _Walk({}, {entry}, [])
    insns, leaders = walk.insns, walk.leaders
    local_owner: dict[int, int] = {}
    work = [entry]

    while work:
        rva = work.pop()
        while rva not in insns:
            if rva in local_owner or (claimed is not None and claimed.get(rva, rva) != rva):
                walk.conflict, walk.failed = rva, True
                break
            try:
                insn, sec_end = ex.decode_span(rva)
            except DecodeError:
                walk.failed = True
                break
            end = rva + insn.length
            span = range(rva, end)
            clash = any(b in local_owner for b in span)
            if not clash and claimed is not None:
                clash = claimed[rva] != rva if rva in claimed else any(b in claimed for b in span)
            if clash:
                walk.conflict, walk.failed = rva, True
                break
            insns[rva] = insn
            for b in span:
                local_owner[b] = rva
            xfer = insn.xfer_class
            if xfer is XferClass.NONE:
                if end >= sec_end:
                    walk.runoff = True
                    break
                rva = end
            elif xfer is XferClass.RET or xfer is XferClass.JMP_IND:
                break
            elif xfer is XferClass.JMP_REL or xfer is XferClass.JCC:
                tgt = insn.target
                if ex.section_end(tgt) is None:
                    walk.failed = True
                    break
                leaders.add(tgt)
                if xfer is XferClass.JMP_REL:
                    rva = tgt
                else:
                    leaders.add(end)
                    work.append(tgt)
                    rva = end
            else:
                # calls: a direct callee starts its own function
                if xfer is XferClass.CALL_REL:
                    tgt = insn.target
                    if ex.section_end(tgt) is not None:
                        walk.calls.append(tgt)
                    if tgt in noreturn:
                        break
                leaders.add(end)
                rva = end
    return walk


def _form_blocks(walk: _Walk, entry: int, noreturn: set[int]) -> list[BasicBlock]:
    blocks: list[BasicBlock] = []
    current: list[Instruction] = []
    ordered = sorted(walk.insns)
    starts = set(walk.leaders) & set(walk.insns)

    def close(term: Terminator, succs: list[int]) -> None:
        blocks.append(BasicBlock(current[0].rva, list(current), term, succs))
        current.clear()

    for rva in ordered:
        insn = walk.insns[rva]
        if current and (rva in starts or current[-1].end != rva):
            prev = current[-1]
            close(Terminator.FALLTHROUGH, [prev.end] if prev.end == rva else [])
        current.append(insn)
        xfer = insn.xfer_class
        if xfer is XferClass.NONE:
            continue
        if xfer is XferClass.RET:
            close(Terminator.RET, [])
        elif xfer is XferClass.JMP_IND:
            close(Terminator.INDIRECT, [])
        elif xfer is XferClass.JMP_REL:
            close(Terminator.JMP, [insn.target])
        elif xfer is XferClass.JCC:
            close(Terminator.JCC, [insn.target, insn.end])
        else:
            returns = not (xfer is XferClass.CALL_REL and insn.target in noreturn)
            close(Terminator.CALL_FALLTHROUGH, [insn.end] if returns and insn.end in walk.insns else [])
    if current:
        prev = current[-1]
        close(Terminator.FALLTHROUGH, [prev.end] if prev.end in walk.insns else [])
    # successors must name blocks that exist in this function
    present = {b.start for b in blocks}
    for b in blocks:
        b.successors = [s for s in b.successors if s in present]
    blocks.sort(key=lambda b: (b.start != entry, b.start))
    return blocks


def recursive_disassemble(
    image: PeImage, seeds: list[tuple[int, Origin]], symbols: list[Symbol] | None = None
) -> CodeGraph:
    if not seeds:
        raise ValueError("no seeds")
    graph = CodeGraph()
    ex = _Explorer(image)
    noreturn = {s.rva for s in symbols or () if s.kind == "noreturn"}
    walks: dict[int, tuple[_Walk, Origin]] = {}
    t0 = time.perf_counter()

    # solid pass: seeds plus every direct call target found on the way
    pending = [rva for rva, origin in seeds if origin is Origin.SOLID]
    while pending:
        entry = pending.pop()
        if entry in walks or ex.section_end(entry) is None:
            continue
        walk = _explore(ex, entry, noreturn, None)
        if entry not in walk.insns:
            graph.conflicts.append(entry)
            continue
        walks[entry] = (walk, Origin.SOLID)
        ex.commit(walk.insns.values())
        if walk.conflict is not None:
            graph.conflicts.append(walk.conflict)
        pending.extend(t for t in walk.calls if t not in walks)

    solid_owner = dict(ex.owner)

    # prospect candidates: relocation targets plus absolute operands of solid code
    candidates = [rva for rva, origin in seeds if origin is Origin.PROSPECT]
    rel_rvas = image.relocation_rvas()
    for walk, _ in list(walks.values()):
        for insn in walk.insns.values():
            for off in insn.reloc_sites:
                if insn.rva + off in rel_rvas:
                    target = (ex.read_u32(insn.rva + off) - image.image_base) & 0xFFFFFFFF
                    if ex.section_end(target) is not None:
                        candidates.append(target)
    seen: set[int] = set()
    queue = sorted(set(candidates))
    while queue:
        entry = queue.pop(0)
        if entry in seen or entry in walks:
            continue
        seen.add(entry)
        if entry in solid_owner:
            if solid_owner[entry] != entry:
                graph.conflicts.append(entry)
                graph.discarded.append((entry, "mid_instruction"))
            else:
                graph.discarded.append((entry, "inside_solid_code"))
            continue
        walk = _explore(ex, entry, noreturn, solid_owner)
        if walk.conflict is not None:
            graph.conflicts.append(walk.conflict)
            graph.discarded.append((entry, "conflict"))
            continue
        if walk.failed or not walk.insns:
            graph.discarded.append((entry, "decode_failure"))
            continue
        walks[entry] = (walk, Origin.PROSPECT)
        ex.commit(walk.insns.values())
        for t in walk.calls:
            if t not in walks and t not in seen:
                queue.append(t)
    t1 = time.perf_counter()

    for entry, (walk, origin) in sorted(walks.items()):
        blocks = _form_blocks(walk, entry, noreturn)
        graph.functions[entry] = FunctionRecord(entry, blocks, origin, incomplete=walk.failed or walk.runoff)
    graph.coverage = set(ex.owner)
    graph.t_disasm = t1 - t0
    graph.t_basicblock = time.perf_counter() - t1
    return graph


# --------------------------------------------------------------------------
# patchability

_TEXT_BYTES = frozenset(range(0x20, 0x7F)) | {0x09, 0x0A, 0x0D}


def is_all_text(data: bytes) -> bool:
    if not data:
        raise ValueError("empty buffer")
    if all(b in _TEXT_BYTES for b in data):
        return True
    if len(data) % 2:
        return False
    units = struct.unpack(f"<{len(data) // 2}H", data)
    return all(u < 0x80 and u in _TEXT_BYTES for u in units)


def decide_patchability(fn: FunctionRecord, image: PeImage | None = None) -> FunctionRecord:
    reason = None
    if fn.entry_block.size < PATCH_SIZE:
        reason = RejectReason.ENTRY_BLOCK_TOO_SMALL
    elif fn.origin is Origin.PROSPECT and len(fn.blocks) == 1:
        reason = RejectReason.PROSPECT_SINGLE_BLOCK
    elif fn.origin is Origin.PROSPECT and image is not None and is_all_text(fn.byte_span(image)):
        reason = RejectReason.PROSPECT_ALL_TEXT
    elif fn.incomplete:
        reason = RejectReason.DECODE_FAILURE
    fn.patchable = reason is None
    fn.patch_reject_reason = reason
    return fn


def analyze(image: PeImage, symbols: list[Symbol] | None = None) -> CodeGraph:
    graph = recursive_disassemble(image, seed_entries(image, symbols), symbols)
    for fn in graph.functions.values():
        decide_patchability(fn, image)
    return graph


def graph_json(graph: CodeGraph) -> str:
    return json.dumps(graph.to_json(), indent=2)
