"""Small label-aware assembler over the decoder's instruction subset.

Relative JMP/Jcc to labels start in their short form and are widened until
every displacement fits.  Absolute references to labels (``Addr`` immediates,
``MemRef`` displacements) are always 32-bit and produce a HIGHLOW relocation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..x86 import Imm, Instruction, Mem, Mnemonic, Rel, Unencodable, encode, make


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class Addr:
    """32-bit absolute address of ``label + addend`` as an immediate."""

    label: str
    addend: int = 0


@dataclass(frozen=True)
class MemRef:
    """Memory operand whose disp32 is the absolute address of ``label + addend``."""

    label: str
    addend: int = 0
    base: int | None = None
    index: int | None = None
    scale: int = 1


@dataclass
class _Insn:
    mnemonic: Mnemonic
    operands: tuple
    cond: int | None
    long: bool = False


@dataclass
class _Raw:
    data: bytes


@dataclass
class _Align:
    boundary: int
    fill: int


@dataclass
class _Mark:
    name: str


@dataclass
class Assembled:
    code: bytes
    origin: int
    labels: dict[str, int]
    relocations: list[int]
    instructions: list[Instruction] = field(default_factory=list)
    externals: dict[str, int] = field(default_factory=dict)


class Assembler:
    def __init__(self):
        self.items: list = []
        self._names: set[str] = set()

    def label(self, name: str) -> None:
        if name in self._names:
            raise ValueError(f"duplicate label {name}")
        self._names.add(name)
        self.items.append(_Mark(name))

    def emit(self, mnemonic: Mnemonic, *operands, cond: int | None = None) -> None:
        self.items.append(_Insn(mnemonic, tuple(operands), cond))

    def raw(self, data: bytes) -> None:
        self.items.append(_Raw(bytes(data)))

    def align(self, boundary: int, fill: int = 0xCC) -> None:
        self.items.append(_Align(boundary, fill))

    # ------------------------------------------------------------------

    def _concrete(self, item: _Insn, rva: int, symbols: dict[str, int], image_base: int):
        """Instruction for ``item`` at ``rva`` plus which absolute fields need
        relocations ("mem" -> first reloc site, "imm" -> last)."""
        ops = []
        wants = []
        for op in item.operands:
            if isinstance(op, Label):
                target = symbols.get(op.name, rva)
                ops.append(("rel", target))
            elif isinstance(op, Addr):
                ops.append(Imm((image_base + symbols.get(op.label, 0) + op.addend) & 0xFFFFFFFF, 4))
                wants.append("imm")
            elif isinstance(op, MemRef):
                va = (image_base + symbols.get(op.label, 0) + op.addend) & 0xFFFFFFFF
                disp = va - (1 << 32) if va & 0x80000000 else va
                ops.append(Mem(op.base, op.index, op.scale, disp, 4, False))
                wants.append("mem")
            else:
                ops.append(op)
        if ops and isinstance(ops[0], tuple):
            size = 4 if item.long or item.mnemonic is Mnemonic.CALL else 1
            length = {Mnemonic.CALL: 5, Mnemonic.JMP: 5 if size == 4 else 2}.get(
                item.mnemonic, 6 if size == 4 else 2
            )
            disp = ops[0][1] - (rva + length)
            insn = make(item.mnemonic, Rel(disp, size), rva=rva, cond=item.cond)
        else:
            insn = make(item.mnemonic, *ops, rva=rva, cond=item.cond)
        return insn, wants

    def _layout(self, origin: int, symbols: dict[str, int], image_base: int):
        labels: dict[str, int] = {}
        rva = origin
        sizes = []
        for item in self.items:
            if isinstance(item, _Mark):
                labels[item.name] = rva
                sizes.append(0)
            elif isinstance(item, _Raw):
                sizes.append(len(item.data))
            elif isinstance(item, _Align):
                pad = (-rva) % item.boundary
                sizes.append(pad)
            else:
                if item.operands and isinstance(item.operands[0], Label):
                    size = 5 if item.mnemonic in (Mnemonic.CALL, Mnemonic.JMP) else 6
                    if not item.long and item.mnemonic is not Mnemonic.CALL:
                        size = 2
                else:
                    size = self._concrete(item, rva, {**symbols, **labels}, image_base)[0].length
                sizes.append(size)
            rva += sizes[-1]
        return labels, sizes

    def assemble(self, origin: int, image_base: int, externals: dict[str, int] | None = None) -> Assembled:
        externals = dict(externals or {})
        while True:
            labels, _ = self._layout(origin, externals, image_base)
            symbols = {**externals, **labels}
            widened = False
            rva = origin
            for item, size in zip(self.items, self._layout(origin, externals, image_base)[1]):
                if isinstance(item, _Insn) and item.operands and isinstance(item.operands[0], Label) and not item.long:
                    if item.mnemonic is not Mnemonic.CALL:
                        target = symbols[item.operands[0].name]
                        if not -128 <= target - (rva + 2) <= 127:
                            item.long = True
                            widened = True
                rva += size
            if not widened:
                break

        out = bytearray()
        relocs: list[int] = []
        insns: list[Instruction] = []
        rva = origin
        for item in self.items:
            if isinstance(item, _Mark):
                continue
            if isinstance(item, _Raw):
                out += item.data
            elif isinstance(item, _Align):
                out += bytes([item.fill]) * ((-rva) % item.boundary)
            else:
                for op in item.operands:
                    name = getattr(op, "name", None) or getattr(op, "label", None)
                    if name is not None and name not in symbols:
                        raise Unencodable(f"undefined label {name}")
                insn, wants = self._concrete(item, rva, symbols, image_base)
                if "mem" in wants:
                    relocs.append(rva + insn.reloc_sites[0])
                if "imm" in wants:
                    relocs.append(rva + insn.reloc_sites[-1])
                insns.append(insn)
                out += encode(insn)
            rva = origin + len(out)
        return Assembled(bytes(out), origin, labels, sorted(relocs), insns, externals)
