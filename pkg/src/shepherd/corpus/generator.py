"""Deterministic synthetic PE32 driver generator.

Each program is a small call DAG of functions built from a handful of
operation templates.  The generator keeps the high-level form of every
function, which gives three oracles for free: the expected CFG (from the
assembled instruction stream), the expected output buffer (by evaluating the
operations in Python), and the expected analyzer verdict for each planted
trap.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field

from .. import kabi
from ..x86 import EAX, EBP, EBX, ECX, EDI, EDX, ESI, ESP, Imm, Mem, Mnemonic, Reg, XferClass
from .asm import Addr, Assembled, Assembler, Label, MemRef
from .image import FILE_ALIGN, HEADERS_SIZE, IMAGE_BASE, SECTION_ALIGN, TEXT_RVA, align, build_pe, serialize_relocs

MASK = 0xFFFFFFFF

FEATURES = frozenset(
    {
        "indirect_calls",
        "function_pointer_table",
        "shared_blocks",
        "data_reloc_trap",
        "iat_calls",
        "unicode_blob",
        "tiny_entry_block",
    }
)

INPUT_WORDS = 8

TEXT_FLAGS = 0x68000020  # code, not paged, execute, read
RDATA_FLAGS = 0x48000040
DATA_FLAGS = 0xC8000040
RELOC_FLAGS = 0x42000040
RSRC_FLAGS = 0x40000040

# ASCII text that decodes as push ecx x4; jz +0x24; inc ecx ...
TEXT_BLOB = b"QQQQt$" + b"A" * 40
TRAP_BLOB = b"\x0f\x0b\x0f\x0b"  # ud2 pairs, outside the decoder subset

_ALU = {"add": Mnemonic.ADD, "sub": Mnemonic.SUB, "xor": Mnemonic.XOR, "or": Mnemonic.OR, "and": Mnemonic.AND}


class SpecInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    seed: int
    function_count: int = 6
    max_blocks_per_function: int = 8
    features: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "features", frozenset(self.features))


@dataclass
class FunctionPlan:
    name: str
    kind: str  # regular, table_single, table_multi, tiny
    ops: list[tuple] = field(default_factory=list)
    terminal: tuple = ("ret",)
    prologue: str = "plain"  # plain | early_load
    origin: str = "solid"
    exported: bool = False


@dataclass
class Generated:
    spec: CorpusSpec
    image: bytes
    ground_truth: dict
    symbols: str
    vectors: list[list[int]]
    expected: list[list[int]]

    @property
    def name(self) -> str:
        return f"toy{self.spec.seed:02d}"

    def ground_truth_json(self) -> str:
        return json.dumps(self.ground_truth, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# planning


def _alu_op(rng: random.Random) -> tuple:
    kind = rng.choice(["alu", "alu", "alu_in", "lea"])
    if kind == "alu":
        return ("alu", rng.choice(["add", "sub", "xor", "or"]), rng.getrandbits(32) if rng.random() < 0.5 else rng.randrange(1, 100))
    if kind == "alu_in":
        return ("alu_in", rng.choice(["add", "sub", "xor"]), rng.randrange(INPUT_WORDS))
    return ("lea", rng.randrange(-100, 100))


def _branch(rng: random.Random) -> tuple:
    then_ops = [_alu_op(rng) for _ in range(rng.randint(1, 3))]
    else_ops = [_alu_op(rng) for _ in range(rng.randint(1, 3))]
    then_ops = [o for o in then_ops if o[0] != "lea"] or [("alu", "add", 1)]
    else_ops = [o for o in else_ops if o[0] != "lea"] or [("alu", "xor", 0x5A)]
    return ("branch", rng.randrange(INPUT_WORDS), 1 << rng.randrange(32), then_ops, else_ops)


def _loop(rng: random.Random) -> tuple:
    # at least two iterations so the back edge is taken
    return ("loop", rng.randint(2, 5), [_alu_op(rng) for _ in range(rng.randint(1, 3))])


def plan_program(spec: CorpusSpec) -> tuple[list[FunctionPlan], int]:
    unknown = spec.features - FEATURES
    if unknown:
        raise SpecInfeasible(f"unknown features {sorted(unknown)}")
    if spec.function_count < 1:
        raise SpecInfeasible("need at least one function")
    feats = spec.features
    if "shared_blocks" in feats and spec.function_count < 3:
        raise SpecInfeasible("shared_blocks needs at least three functions")
    if "indirect_calls" in feats and spec.function_count < 2:
        raise SpecInfeasible("indirect_calls needs at least two functions")
    if spec.max_blocks_per_function < 4:
        raise SpecInfeasible("max_blocks_per_function must be at least 4")

    rng = random.Random(spec.seed)
    n = spec.function_count
    regular = [FunctionPlan("main" if i == 0 else f"f{i}", "regular") for i in range(n)]
    ptr_target = regular[-1] if "indirect_calls" in feats else None
    if ptr_target is not None:
        ptr_target.origin = "prospect"
    slots = iter(range(10_000))
    imports = list(kabi.KERNEL_IMPORTS[: rng.randint(2, len(kabi.KERNEL_IMPORTS))]) if "iat_calls" in feats else []
    has_table = "function_pointer_table" in feats

    # callees of each regular function: every non-main direct function is
    # called by main, some also by a lower-index function
    for i, fn in enumerate(regular):
        fn.prologue = "early_load" if rng.random() < 0.3 else "plain"
        budget = spec.max_blocks_per_function - 1
        ops: list[tuple] = [("load", rng.randrange(INPUT_WORDS))]
        if fn is ptr_target:
            ops.append(_branch(rng))
            budget -= 3
        while budget > 0 and len(ops) < 7:
            roll = rng.random()
            if roll < 0.25 and budget >= 3:
                ops.append(_branch(rng))
                budget -= 3
            elif roll < 0.4 and budget >= 2:
                ops.append(_loop(rng))
                budget -= 2
            elif roll < 0.55 and i > 0 and i + 1 < n - (ptr_target is not None):
                ops.append(("call", f"f{rng.randrange(i + 1, n - (ptr_target is not None))}"))
                budget -= 1
            elif roll < 0.65 and imports:
                ops.append(("iat", rng.choice(imports)))
                budget -= 1
            elif roll < 0.72 and has_table and i > 0:
                ops.append(("call_table", rng.randrange(INPUT_WORDS)))
                budget -= 1
            else:
                ops.append(_alu_op(rng))
            if rng.random() < 0.3:
                ops.append(("store", next(slots)))
        while len(ops) < 4:
            ops.append(_alu_op(rng))
        ops.append(("store", next(slots)))
        fn.ops = ops

    main = regular[0]
    extra: list[FunctionPlan] = []
    for fn in regular[1:]:
        if fn is not ptr_target:
            main.ops += [("call", fn.name), ("store", next(slots))]
    if ptr_target is not None:
        main.ops += [("call_ptr", ptr_target.name), ("store", next(slots))]
    if has_table:
        for k in range(3):
            extra.append(FunctionPlan(f"t{k}", "table_single", [("alu", "add", rng.getrandbits(32))], origin="prospect"))
        extra.append(
            FunctionPlan(
                "t3", "table_multi",
                [("alu", "xor", rng.getrandbits(32)), ("alu", "add", rng.getrandbits(32))],
                origin="prospect",
            )
        )
        main.ops += [("call_table", rng.randrange(INPUT_WORDS)), ("store", next(slots))]
        tail_candidates = [f for f in regular[1:] if f is not ptr_target]
        if tail_candidates:
            rng.choice(tail_candidates).terminal = ("tail_table", rng.randrange(INPUT_WORDS))
    if imports:
        main.ops += [("iat", imports[0]), ("store", next(slots))]
    if "tiny_entry_block" in feats:
        extra.append(FunctionPlan("tiny", "tiny", [("alu", "add", rng.randrange(1, 100)), ("alu", "sub", rng.randrange(1, 100))]))
        main.ops += [("tiny", "tiny", rng.randrange(INPUT_WORDS)), ("store", next(slots))]
    if "shared_blocks" in feats:
        pool = [f for f in regular[1:] if f.terminal == ("ret",) and f is not ptr_target]
        if len(pool) < 2:
            pool = [f for f in regular[1:] if f.terminal == ("ret",)]
        if len(pool) < 2:
            raise SpecInfeasible("not enough functions to share an epilogue")
        a, b = rng.sample(pool, 2)
        a.terminal = ("shared_tail", b.name)
    if n > 1 and regular[1] is not ptr_target:
        regular[1].exported = True
    return regular + extra, next(slots)


# --------------------------------------------------------------------------
# evaluation (the expected-output oracle)


def _alu(op: str, a: int, b: int) -> int:
    if op == "add":
        return (a + b) & MASK
    if op == "sub":
        return (a - b) & MASK
    if op == "xor":
        return a ^ b
    if op == "or":
        return a | b
    if op == "and":
        return a & b
    raise ValueError(op)


def evaluate(functions: list[FunctionPlan], inputs: list[int], n_out: int) -> tuple[int, list[int]]:
    """Run the program at the operation level; returns (final eax, outputs)."""
    by_name = {f.name: f for f in functions}
    out = [0] * n_out
    table = [f for f in functions if f.kind.startswith("table")]

    def simple(ops, eax):
        for op in ops:
            if op[0] == "alu":
                eax = _alu(op[1], eax, op[2] & MASK)
            elif op[0] == "alu_in":
                eax = _alu(op[1], eax, inputs[op[2]])
            elif op[0] == "lea":
                eax = (eax * 3 + op[1]) & MASK
            else:
                raise ValueError(op)
        return eax

    def call(name: str, eax: int) -> int:
        fn = by_name[name]
        if fn.kind == "table_single":
            return simple(fn.ops, eax)
        if fn.kind == "table_multi":
            eax = simple(fn.ops[:1], eax)
            return simple(fn.ops[1:], eax) if eax & 1 else eax
        if fn.kind == "tiny":
            return simple(fn.ops[:1] if eax else fn.ops[1:], eax)
        for op in fn.ops:
            kind = op[0]
            if kind == "load":
                eax = inputs[op[1]]
            elif kind in ("alu", "alu_in", "lea"):
                eax = simple([op], eax)
            elif kind == "branch":
                eax = simple(op[3] if inputs[op[1]] & op[2] else op[4], eax)
            elif kind == "loop":
                for _ in range(op[1]):
                    eax = simple(op[2], eax)
            elif kind in ("call", "call_ptr"):
                eax = (eax + call(op[1], eax)) & MASK
            elif kind == "call_table":
                eax = call(table[inputs[op[1]] & 3].name, eax)
            elif kind == "iat":
                eax = (eax + kabi.import_addend(op[1])) & MASK
            elif kind == "tiny":
                eax = (eax + call(op[1], inputs[op[2]])) & MASK
            elif kind == "store":
                out[op[1]] = eax
            else:
                raise ValueError(op)
        if fn.terminal[0] == "tail_table":
            eax = call(table[inputs[fn.terminal[1]] & 3].name, eax)
        return eax

    eax = call("main", 0)
    return eax, out


# --------------------------------------------------------------------------
# emission


def _emit_simple(asm: Assembler, op: tuple) -> None:
    if op[0] == "alu":
        value = op[2] & MASK
        imm = Imm(value, 1) if value < 0x80 and op[1] != "and" else Imm(value, 4)
        asm.emit(_ALU[op[1]], Reg(EAX), imm)
    elif op[0] == "alu_in":
        asm.emit(_ALU[op[1]], Reg(EAX), MemRef("input", 4 * op[2]))
    elif op[0] == "lea":
        disp = op[1]
        asm.emit(Mnemonic.LEA, Reg(EAX), Mem(EAX, EAX, 2, disp, 1 if -128 <= disp <= 127 else 4, True))
    else:
        raise ValueError(op)


def _emit_epilogue(asm: Assembler) -> None:
    for r in (EDI, ESI, EBX, EBP):
        asm.emit(Mnemonic.POP, Reg(r))


def _emit_function(asm: Assembler, fn: FunctionPlan, counter) -> None:
    name = fn.name
    asm.align(16)
    asm.label(name)
    if fn.kind == "table_single":
        # imm32 form keeps the entry block at least one patch wide
        asm.emit(_ALU[fn.ops[0][1]], Reg(EAX), Imm(fn.ops[0][2] & MASK, 4))
        asm.emit(Mnemonic.RET)
    elif fn.kind == "table_multi":
        skip = f"{name}_skip"
        asm.emit(Mnemonic.XOR, Reg(EAX), Imm(fn.ops[0][2] & MASK, 4))
        asm.emit(Mnemonic.TEST, Reg(EAX), Imm(1, 4))
        asm.emit(Mnemonic.JCC, Label(skip), cond=4)
        asm.emit(Mnemonic.ADD, Reg(EAX), Imm(fn.ops[1][2] & MASK, 4))
        asm.label(skip)
        asm.emit(Mnemonic.RET)
    elif fn.kind == "tiny":
        zero = f"{name}_zero"
        asm.emit(Mnemonic.TEST, Reg(EAX), Reg(EAX))
        asm.emit(Mnemonic.JCC, Label(zero), cond=4)
        _emit_simple(asm, fn.ops[0])
        asm.emit(Mnemonic.RET)
        asm.label(zero)
        _emit_simple(asm, fn.ops[1])
        asm.emit(Mnemonic.RET)
    else:
        ops = list(fn.ops)
        asm.emit(Mnemonic.PUSH, Reg(EBP))
        if fn.prologue == "early_load":
            asm.emit(Mnemonic.MOV, Reg(EAX), MemRef("input", 4 * ops.pop(0)[1]))
        asm.emit(Mnemonic.MOV, Reg(EBP), Reg(ESP))
        for r in (EBX, ESI, EDI):
            asm.emit(Mnemonic.PUSH, Reg(r))
        for op in ops:
            kind = op[0]
            if kind == "load":
                asm.emit(Mnemonic.MOV, Reg(EAX), MemRef("input", 4 * op[1]))
            elif kind in ("alu", "alu_in", "lea"):
                _emit_simple(asm, op)
            elif kind == "branch":
                k = next(counter)
                other, done = f"{name}_else{k}", f"{name}_end{k}"
                asm.emit(Mnemonic.MOV, Reg(EDX), MemRef("input", 4 * op[1]))
                asm.emit(Mnemonic.TEST, Reg(EDX), Imm(op[2], 4))
                asm.emit(Mnemonic.JCC, Label(other), cond=4)
                for sub in op[3]:
                    _emit_simple(asm, sub)
                asm.emit(Mnemonic.JMP, Label(done))
                asm.label(other)
                for sub in op[4]:
                    _emit_simple(asm, sub)
                asm.label(done)
            elif kind == "loop":
                top = f"{name}_loop{next(counter)}"
                asm.emit(Mnemonic.MOV, Reg(ESI), Imm(op[1], 4))
                asm.label(top)
                for sub in op[2]:
                    _emit_simple(asm, sub)
                asm.emit(Mnemonic.DEC, Reg(ESI))
                asm.emit(Mnemonic.JCC, Label(top), cond=5)
            elif kind in ("call", "call_ptr"):
                asm.emit(Mnemonic.PUSH, Reg(EAX))
                if kind == "call":
                    asm.emit(Mnemonic.CALL, Label(op[1]))
                else:
                    asm.emit(Mnemonic.MOV, Reg(EBX), Addr(op[1]))
                    asm.emit(Mnemonic.CALL, Reg(EBX))
                asm.emit(Mnemonic.POP, Reg(ECX))
                asm.emit(Mnemonic.ADD, Reg(EAX), Reg(ECX))
            elif kind == "call_table":
                asm.emit(Mnemonic.MOV, Reg(EDX), MemRef("input", 4 * op[1]))
                asm.emit(Mnemonic.AND, Reg(EDX), Imm(3, 1))
                asm.emit(Mnemonic.CALL, MemRef("table", 0, None, EDX, 4))
            elif kind == "iat":
                asm.emit(Mnemonic.CALL, MemRef(f"iat_{op[1]}"))
            elif kind == "tiny":
                # argument straight from the input so both paths get exercised
                asm.emit(Mnemonic.PUSH, Reg(EAX))
                asm.emit(Mnemonic.MOV, Reg(EAX), MemRef("input", 4 * op[2]))
                asm.emit(Mnemonic.CALL, Label(op[1]))
                asm.emit(Mnemonic.POP, Reg(ECX))
                asm.emit(Mnemonic.ADD, Reg(EAX), Reg(ECX))
            elif kind == "store":
                asm.emit(Mnemonic.MOV, MemRef("output", 4 * op[1]), Reg(EAX))
            else:
                raise ValueError(op)
        term = fn.terminal
        if term[0] == "ret":
            asm.label(f"{name}_epi")
            _emit_epilogue(asm)
            asm.emit(Mnemonic.RET)
        elif term[0] == "shared_tail":
            asm.emit(Mnemonic.JMP, Label(f"{term[1]}_epi"))
        elif term[0] == "tail_table":
            asm.emit(Mnemonic.MOV, Reg(EDX), MemRef("input", 4 * term[1]))
            asm.emit(Mnemonic.AND, Reg(EDX), Imm(3, 1))
            _emit_epilogue(asm)
            asm.emit(Mnemonic.JMP, MemRef("table", 0, None, EDX, 4))
    asm.label(f"{name}_end")


def _assemble_text(functions: list[FunctionPlan], feats: frozenset[str], externals: dict[str, int]) -> Assembled:
    import itertools

    asm = Assembler()
    counter = itertools.count()
    for fn in functions:
        _emit_function(asm, fn, counter)
    if "data_reloc_trap" in feats:
        asm.align(16)
        asm.label("trap_blob")
        asm.raw(TRAP_BLOB)
    if "unicode_blob" in feats:
        asm.label("text_blob")
        asm.raw(TEXT_BLOB)
    return asm.assemble(TEXT_RVA, IMAGE_BASE, externals)


class _Blob:
    """Append-only section builder with named offsets."""

    def __init__(self, rva: int):
        self.rva = rva
        self.data = bytearray()
        self.labels: dict[str, int] = {}
        self.relocs: list[int] = []

    def here(self) -> int:
        return self.rva + len(self.data)

    def mark(self, name: str) -> int:
        self.labels[name] = self.here()
        return self.labels[name]

    def u32(self, value: int, reloc: bool = False) -> None:
        if reloc:
            self.relocs.append(self.here())
        self.data += struct.pack("<I", value & MASK)

    def cstr(self, text: str) -> int:
        at = self.here()
        self.data += text.encode("ascii") + b"\0"
        return at

    def pad(self, boundary: int) -> None:
        self.data += b"\0" * ((-len(self.data)) % boundary)


def _build_rdata(rva: int, functions: list[FunctionPlan], text_labels: dict[str, int], imports: list[str], dll: str) -> _Blob:
    blob = _Blob(rva)
    if "t0" in text_labels:
        blob.mark("table")
        for k in range(4):
            blob.u32(IMAGE_BASE + text_labels.get(f"t{k}", 0), reloc=True)
    import_dir = (0, 0)
    iat_dir = (0, 0)
    if imports:
        iat = blob.mark("iat")
        for name in imports:
            blob.labels[f"iat_{name}"] = blob.here()
            blob.u32(0)  # filled below
        blob.u32(0)
        iat_dir = (iat, 4 * (len(imports) + 1))
        lookup = blob.here()
        blob.data += b"\0" * (4 * (len(imports) + 1))
        desc = blob.here()
        blob.data += b"\0" * 40
        hints = []
        for name in imports:
            blob.pad(2)
            hints.append(blob.here())
            blob.data += b"\0\0"
            blob.cstr(name)
        lib = blob.cstr(kabi.KERNEL_LIBRARY)
        for i, h in enumerate(hints):
            struct.pack_into("<I", blob.data, iat - rva + 4 * i, h)
            struct.pack_into("<I", blob.data, lookup - rva + 4 * i, h)
        struct.pack_into("<IIIII", blob.data, desc - rva, lookup, 0, 0, lib, iat)
        import_dir = (desc, 40)
    blob.pad(4)
    exported = [f for f in functions if f.exported]
    export_dir = (0, 0)
    if exported:
        start = blob.mark("exports")
        blob.data += b"\0" * 40
        funcs = blob.here()
        for f in exported:
            blob.u32(text_labels[f.name])
        names = blob.here()
        blob.data += b"\0" * (4 * len(exported))
        ords = blob.here()
        for i in range(len(exported)):
            blob.data += struct.pack("<H", i)
        name_rvas = [blob.cstr(f"Shep_{f.name}") for f in exported]
        dll_rva = blob.cstr(dll)
        for i, n in enumerate(name_rvas):
            struct.pack_into("<I", blob.data, names - rva + 4 * i, n)
        struct.pack_into(
            "<IIHHIIIIIII", blob.data, start - rva,
            0, 0, 0, 0, dll_rva, 1, len(exported), len(exported), funcs, names, ords,
        )
        export_dir = (start, blob.here() - start)
    blob.pad(4)
    blob.dirs = {0: export_dir, 1: import_dir, 12: iat_dir}
    return blob


def _build_data(rva: int, n_out: int, feats: frozenset[str], text_labels: dict[str, int], mid_target: int | None) -> _Blob:
    blob = _Blob(rva)
    blob.mark("input")
    blob.data += b"\0" * (4 * INPUT_WORDS)
    blob.mark("output")
    blob.data += b"\0" * (4 * max(n_out, 1))
    if "data_reloc_trap" in feats:
        blob.mark("trap_ptr")
        blob.u32(IMAGE_BASE + text_labels.get("trap_blob", 0), reloc=True)
        blob.mark("mid_ptr")
        blob.u32(IMAGE_BASE + (mid_target or 0), reloc=True)
    if "unicode_blob" in feats:
        blob.mark("text_ptr")
        blob.u32(IMAGE_BASE + text_labels.get("text_blob", 0), reloc=True)
    blob.pad(16)
    return blob


# --------------------------------------------------------------------------
# ground truth


def _function_cfg(asm: Assembled, fn: FunctionPlan, functions: dict[str, FunctionPlan]) -> dict:
    labels = asm.labels
    spans = [(labels[fn.name], labels[f"{fn.name}_end"])]
    if fn.terminal[0] == "shared_tail":
        other = fn.terminal[1]
        spans.append((labels[f"{other}_epi"], labels[f"{other}_end"]))
    insns = {i.rva: i for i in asm.instructions if any(lo <= i.rva < hi for lo, hi in spans)}
    entry = labels[fn.name]
    leaders = {entry}
    for i in insns.values():
        if i.xfer_class in (XferClass.JCC, XferClass.JMP_REL):
            leaders.add(i.target)
        if i.xfer_class is not XferClass.NONE and i.end in insns:
            leaders.add(i.end)
    blocks = []
    current: list = []
    for rva in sorted(insns):
        if current and (rva in leaders or current[-1].end != rva):
            blocks.append(current)
            current = []
        current.append(insns[rva])
        if insns[rva].xfer_class is not XferClass.NONE:
            blocks.append(current)
            current = []
    if current:
        blocks.append(current)
    edges = []
    for blk in blocks:
        last = blk[-1]
        x = last.xfer_class
        succ = []
        if x is XferClass.JCC:
            succ = [last.target, last.end]
        elif x is XferClass.JMP_REL:
            succ = [last.target]
        elif x in (XferClass.NONE, XferClass.CALL_REL, XferClass.CALL_IND):
            succ = [last.end] if last.end in insns else []
        edges += [(blk[0].rva, s) for s in succ]
    return {
        "name": fn.name,
        "entry": entry,
        "kind": fn.kind,
        "origin": fn.origin,
        "blocks": [[b[0].rva, b[-1].end] for b in blocks],
        "edges": [list(e) for e in edges],
        "entry_block_size": blocks[0][-1].end - blocks[0][0].rva,
        "stubs_expected": sum(
            1 for i in insns.values()
            if i.xfer_class is XferClass.RET
            or (i.xfer_class in (XferClass.CALL_IND, XferClass.JMP_IND) and not _is_iat(i, asm))
        ),
    }


def _is_iat(insn, asm: Assembled) -> bool:
    mem = insn.operands[0]
    return isinstance(mem, Mem) and mem.base is None and mem.index is None and any(
        name.startswith("iat_") and (mem.disp & MASK) == IMAGE_BASE + rva for name, rva in asm.externals.items()
    )


# --------------------------------------------------------------------------


def generate(spec: CorpusSpec, vector_count: int = 6) -> Generated:
    functions, n_out = plan_program(spec)
    feats = spec.features
    rng = random.Random(spec.seed * 7919 + 17)
    imports = sorted({op[1] for f in functions for op in f.ops if op[0] == "iat"}, key=kabi.KERNEL_IMPORTS.index)
    dll = f"toy{spec.seed:02d}.sys"
    trailing_section = spec.seed % 4 == 0

    # pass 1 fixes .text size (absolute fields are always 32-bit)
    placeholder = {"input": 0, "output": 0, "table": 0}
    placeholder.update({f"iat_{name}": 0 for name in imports})
    text = _assemble_text(functions, feats, placeholder)
    rdata_rva = align(TEXT_RVA + len(text.code), SECTION_ALIGN)
    rdata = _build_rdata(rdata_rva, functions, text.labels, imports, dll)
    data_rva = align(rdata_rva + max(len(rdata.data), 1), SECTION_ALIGN)
    mid_target = None
    if "data_reloc_trap" in feats:
        # second byte of main's first instruction longer than two bytes
        main_end = text.labels["main_end"]
        first = next(i for i in text.instructions if text.labels["main"] <= i.rva < main_end and i.length > 2)
        mid_target = first.rva + 2
    data = _build_data(data_rva, n_out, feats, text.labels, mid_target)
    externals = {**rdata.labels, **data.labels}
    text = _assemble_text(functions, feats, externals)
    if TEXT_RVA + len(text.code) > rdata_rva:
        raise SpecInfeasible("text grew between passes")
    # pointers into code embedded in .rdata/.data depend on the final labels
    rdata = _build_rdata(rdata_rva, functions, text.labels, imports, dll)
    data = _build_data(data_rva, n_out, feats, text.labels, mid_target)

    reloc_rva = align(data_rva + len(data.data), SECTION_ALIGN)
    relocs = text.relocations + rdata.relocs + data.relocs
    reloc_blob = serialize_relocs(relocs)
    sections = [
        (b".text\0\0\0", TEXT_RVA, text.code, TEXT_FLAGS),
        (b".rdata\0\0", rdata_rva, bytes(rdata.data) or b"\0" * 4, RDATA_FLAGS),
        (b".data\0\0\0", data_rva, bytes(data.data), DATA_FLAGS),
        (b".reloc\0\0", reloc_rva, reloc_blob, RELOC_FLAGS),
    ]
    if trailing_section:
        rsrc_rva = align(reloc_rva + len(reloc_blob), SECTION_ALIGN)
        sections.append((b".rsrc\0\0\0", rsrc_rva, b"SHEPRSRC" * 4, RSRC_FLAGS))
    dirs = dict(rdata.dirs)
    dirs[5] = (reloc_rva, len(reloc_blob))
    image = build_pe(sections, text.labels["main"], dirs, stamp=spec.seed, checksum=spec.seed % 2 == 1)

    vectors = [[0] * INPUT_WORDS, [MASK] * INPUT_WORDS, [0x55555555] * INPUT_WORDS, [0xAAAAAAAA] * INPUT_WORDS]
    while len(vectors) < vector_count:
        vectors.append([rng.getrandbits(32) for _ in range(INPUT_WORDS)])
    vectors = vectors[:max(vector_count, 1)]
    expected = [evaluate(functions, v, n_out)[1] for v in vectors]
    expected_eax = [evaluate(functions, v, n_out)[0] for v in vectors]

    by_name = {f.name: f for f in functions}
    cfgs = [_function_cfg(text, f, by_name) for f in functions]
    traps = []
    if "data_reloc_trap" in feats:
        traps.append({"rva": text.labels["trap_blob"], "kind": "decode_failure", "pointer_rva": data.labels["trap_ptr"]})
        traps.append({"rva": mid_target, "kind": "mid_instruction", "pointer_rva": data.labels["mid_ptr"]})
    if "unicode_blob" in feats:
        traps.append({"rva": text.labels["text_blob"], "kind": "all_text", "pointer_rva": data.labels["text_ptr"]})

    truth = {
        "seed": spec.seed,
        "features": sorted(feats),
        "image_base": IMAGE_BASE,
        "entry": text.labels["main"],
        "functions": cfgs,
        "traps": traps,
        "relocations": sorted(relocs),
        "input_rva": data.labels["input"],
        "input_words": INPUT_WORDS,
        "output_rva": data.labels["output"],
        "output_words": n_out,
        "vectors": vectors,
        "expected_outputs": expected,
        "expected_eax": expected_eax,
        "imports": [
            {"library": kabi.KERNEL_LIBRARY, "symbol": name, "iat_slot_rva": rdata.labels[f"iat_{name}"]} for name in imports
        ],
        "text_end": TEXT_RVA + len(text.code),
    }
    sym_lines = [f"{c['entry']:08x} func {c['name']}" for c in cfgs]
    sym_lines += [f"{data.labels['input']:08x} data input", f"{data.labels['output']:08x} data output"]
    return Generated(spec, image, truth, "\n".join(sym_lines) + "\n", vectors, expected)


def spec_for_index(index: int, function_count: int | None = None) -> CorpusSpec:
    """The default corpus: seeds 1.. with a rotating feature mix."""
    seed = index + 1
    rng = random.Random(seed * 104729)
    feats = {f for f in sorted(FEATURES) if rng.random() < 0.5}
    if seed % 3 == 0:
        feats = set(FEATURES)
    count = function_count if function_count is not None else rng.randint(8, 14)
    return CorpusSpec(seed, count, 8, frozenset(feats))


def default_corpus(count: int, function_count: int | None = None) -> list[Generated]:
    return [generate(spec_for_index(i, function_count)) for i in range(count)]
