"""Attack scenarios: small drivers with an exploitable control transfer.

Two driver templates are built on demand with the corpus assembler:

``trampoline``
    ``Dispatch`` loads a function pointer from writable data and runs
    ``call eax``.  The attack overwrites the pointer with an address in the
    unregistered RWX low region where shellcode has been staged.

``forged_index``
    ``Dispatch`` reads an index from its request and runs
    ``call [table + ecx*4]``.  The handler table is directly followed by a
    request buffer, so an out-of-range index makes the call go through
    attacker data.

A scenario is a JSON document naming the modules to load, memory to map and
poke, register presets, the reaction mode and the expected outcome.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

from .. import kabi
from ..corpus.asm import Assembler, MemRef
from ..corpus.image import IMAGE_BASE, TEXT_RVA, build_pe, serialize_relocs
from ..monitor import Monitor, PolicyConfig, Reaction
from ..pe import PeImage, emit_pe, parse_pe
from ..rewriter import rewrite_image
from ..x86 import EAX, ECX, REG_NAMES, Imm, Mnemonic, Reg
from .machine import Fault, HaltCause, MapCollision
from .sandbox import RunResult, Sandbox, shared_monitor

DATA_RVA = 0x2000
RELOC_RVA = 0x3000
TEXT_FLAGS = 0x68000020
DATA_FLAGS = 0xC8000040
RELOC_FLAGS = 0x42000040

# .data layout shared by both templates
_DATA_SYMBOLS = {"callback": 0x00, "table": 0x10, "request": 0x18, "input": 0x20, "result": 0x24}
_DATA_SIZE = 0x40


class ScenarioSetupError(Exception):
    pass


class Outcome(Enum):
    DETECTED = "detected_at_first_bad_transfer"
    CLEAN = "clean_run"
    MISSED = "missed"
    FALSE_POSITIVE = "false_positive"


@dataclass(frozen=True)
class DriverTemplate:
    name: str
    image: bytes
    symbols: dict[str, int]


def _trampoline_text(asm: Assembler) -> list[tuple[str, str]]:
    asm.label("Dispatch")
    asm.emit(Mnemonic.MOV, Reg(EAX), MemRef("callback"))
    asm.emit(Mnemonic.CALL, Reg(EAX))
    asm.emit(Mnemonic.MOV, MemRef("result"), Reg(EAX))
    asm.emit(Mnemonic.RET)
    asm.align(16)
    asm.label("Callback")
    asm.emit(Mnemonic.MOV, Reg(EAX), Imm(0x00C0FFEE, 4))
    asm.emit(Mnemonic.ADD, Reg(EAX), MemRef("input"))
    asm.emit(Mnemonic.RET)
    return [("callback", "Callback")]


def _forged_index_text(asm: Assembler) -> list[tuple[str, str]]:
    asm.label("Dispatch")
    asm.emit(Mnemonic.MOV, Reg(ECX), MemRef("input"))
    asm.emit(Mnemonic.CALL, MemRef("table", 0, None, ECX, 4))
    asm.emit(Mnemonic.MOV, MemRef("result"), Reg(EAX))
    asm.emit(Mnemonic.RET)
    for k, value in enumerate((0x1111, 0x2222)):
        asm.align(16)
        asm.label(f"Handler{k}")
        asm.emit(Mnemonic.MOV, Reg(EAX), Imm(value, 4))
        asm.emit(Mnemonic.ADD, Reg(EAX), Reg(ECX))
        asm.emit(Mnemonic.RET)
    return [("table", "Handler0"), ("table+4", "Handler1")]


_TEMPLATES = {"trampoline": _trampoline_text, "forged_index": _forged_index_text}


@lru_cache(maxsize=None)
def driver_template(name: str) -> DriverTemplate:
    try:
        body = _TEMPLATES[name]
    except KeyError:
        raise ScenarioSetupError(f"unknown driver template {name!r}") from None
    asm = Assembler()
    pointers = body(asm)
    externals = {sym: DATA_RVA + off for sym, off in _DATA_SYMBOLS.items()}
    text = asm.assemble(TEXT_RVA, IMAGE_BASE, externals)

    data = bytearray(_DATA_SIZE)
    relocs = list(text.relocations)
    for slot, label in pointers:
        sym, _, extra = slot.partition("+")
        at = _DATA_SYMBOLS[sym] + int(extra or 0)
        struct.pack_into("<I", data, at, IMAGE_BASE + text.labels[label])
        relocs.append(DATA_RVA + at)
    reloc_blob = serialize_relocs(sorted(relocs))
    sections = [
        (b".text\0\0\0", TEXT_RVA, text.code, TEXT_FLAGS),
        (b".data\0\0\0", DATA_RVA, bytes(data), DATA_FLAGS),
        (b".reloc\0\0", RELOC_RVA, reloc_blob, RELOC_FLAGS),
    ]
    image = build_pe(sections, text.labels["Dispatch"], {5: (RELOC_RVA, len(reloc_blob))})
    return DriverTemplate(name, image, {**text.labels, **externals})


@lru_cache(maxsize=None)
def _rewritten_bytes(name: str) -> bytes:
    return emit_pe(rewrite_image(parse_pe(driver_template(name).image)).image)


def rewritten_driver(name: str) -> PeImage:
    return parse_pe(_rewritten_bytes(name))


# -- scenario documents --------------------------------------------------------


def _num(value, what: str) -> int:
    try:
        return int(value, 0) if isinstance(value, str) else int(value)
    except (TypeError, ValueError):
        raise ScenarioSetupError(f"{what}: not a number: {value!r}") from None


@dataclass
class Poke:
    data: bytes
    address: int | None = None
    symbol: str | None = None
    module: int = 0


@dataclass
class Scenario:
    name: str
    modules: list[str]
    reaction: Reaction
    expected: Outcome
    entry: str = "Dispatch"
    maps: list[tuple[int, int, str]] = field(default_factory=list)
    pokes: list[Poke] = field(default_factory=list)
    registers: dict[int, int] = field(default_factory=dict)
    staged: int | None = None
    bad_target: int | None = None
    description: str = ""

    @classmethod
    def from_dict(cls, doc: dict) -> Scenario:
        if not isinstance(doc, dict):
            raise ScenarioSetupError("scenario must be a JSON object")
        try:
            return cls._from_dict(doc)
        except (KeyError, TypeError, AttributeError) as exc:
            raise ScenarioSetupError(f"malformed scenario: {exc!r}") from None

    @classmethod
    def _from_dict(cls, doc: dict) -> Scenario:
        try:
            name = doc["name"]
            modules = list(doc["modules"])
            expected = Outcome(doc["expected"])
            reaction = Reaction(doc.get("reaction", Reaction.LOG_HALT.value))
        except KeyError as exc:
            raise ScenarioSetupError(f"missing field {exc.args[0]}") from None
        except ValueError as exc:
            raise ScenarioSetupError(str(exc)) from None
        if not modules:
            raise ScenarioSetupError("scenario loads no modules")
        for m in modules:
            if m not in _TEMPLATES:
                raise ScenarioSetupError(f"unknown driver template {m!r}")
        maps = [
            (_num(m["address"], "map address"), _num(m.get("size", kabi.PAGE), "map size"), m.get("perms", "rwx"))
            for m in doc.get("maps", [])
        ]
        pokes = []
        for p in doc.get("pokes", []):
            if "hex" in p:
                try:
                    data = bytes.fromhex(p["hex"])
                except ValueError:
                    raise ScenarioSetupError(f"bad hex in poke {p!r}") from None
            elif "u32" in p:
                data = struct.pack("<I", _num(p["u32"], "poke value") & 0xFFFFFFFF)
            else:
                raise ScenarioSetupError(f"poke without data: {p!r}")
            if "address" in p:
                pokes.append(Poke(data, address=_num(p["address"], "poke address")))
            elif "symbol" in p:
                pokes.append(Poke(data, symbol=p["symbol"], module=int(p.get("module", 0))))
            else:
                raise ScenarioSetupError(f"poke without destination: {p!r}")
        registers = {}
        for reg, value in doc.get("registers", {}).items():
            if reg.lower() not in REG_NAMES:
                raise ScenarioSetupError(f"unknown register {reg!r}")
            registers[REG_NAMES.index(reg.lower())] = _num(value, reg)
        staged = doc.get("staged")
        bad = doc.get("bad_target")
        if expected is Outcome.DETECTED and bad is None:
            raise ScenarioSetupError("a detection scenario needs bad_target")
        return cls(
            name=name,
            modules=modules,
            reaction=reaction,
            expected=expected,
            entry=doc.get("entry", "Dispatch"),
            maps=maps,
            pokes=pokes,
            registers=registers,
            staged=None if staged is None else _num(staged, "staged"),
            bad_target=None if bad is None else _num(bad, "bad_target"),
            description=doc.get("description", ""),
        )


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioSetupError(f"{path}: {exc}") from None
    return Scenario.from_dict(doc)


def builtin_scenario_paths() -> list[Path]:
    root = resources.files("shepherd.emulator") / "data"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def builtin_scenarios() -> list[Scenario]:
    return [load_scenario(p) for p in builtin_scenario_paths()]


# -- running -------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: str
    expected: Outcome
    outcome: Outcome
    denial_targets: list[int]
    staged_executed: bool
    run: RunResult
    detail: str = ""

    @property
    def matches(self) -> bool:
        return self.outcome is self.expected

    def line(self) -> str:
        if self.outcome is Outcome.DETECTED:
            return f"DETECTED {self.denial_targets[0]:#010x}"
        if self.outcome is Outcome.CLEAN:
            return "CLEAN"
        return f"{self.outcome.name} {self.detail}".rstrip()


def _classify(scenario: Scenario, run: RunResult) -> tuple[Outcome, str]:
    targets = [e.target for e in run.denials]
    executed = run.watch_hit is not None
    if not targets:
        if executed:
            return Outcome.MISSED, f"staged code at {scenario.staged:#010x} ran undetected"
        if run.cause is not HaltCause.NORMAL_EXIT:
            return Outcome.MISSED, f"run ended with {run.cause.value}: {run.fault}"
        return Outcome.CLEAN, ""
    if scenario.bad_target is None:
        return Outcome.FALSE_POSITIVE, f"denied {targets[0]:#010x}"
    if targets[0] != scenario.bad_target:
        return Outcome.MISSED, f"first denial at {targets[0]:#010x}, expected {scenario.bad_target:#010x}"
    if executed and run.watch_hit < run.denial_steps[0]:
        return Outcome.MISSED, "staged code ran before the denial"
    if scenario.reaction is Reaction.LOG_HALT and (executed or run.cause is not HaltCause.POLICY_HALT):
        return Outcome.MISSED, "halting reaction did not stop execution"
    return Outcome.DETECTED, ""


def run_scenario(
    scenario: Scenario,
    modules: dict[str, PeImage] | None = None,
    monitor: Monitor | None = None,
    *,
    base: int = kabi.DRIVER_BASE,
    log_path: str | None = None,
    strict_writable_deny: bool = False,
    max_steps: int = 100_000,
) -> ScenarioResult:
    """Load the (rewritten) modules, stage the scenario and call the entry.

    ``modules`` maps template names to images; missing ones are rewritten
    from their template.  A shared ``monitor`` must already be configured
    with the scenario's reaction; otherwise a fresh one is created.
    """
    modules = modules or {}
    if monitor is not None and monitor.configured and monitor.config.reaction is not scenario.reaction:
        raise ScenarioSetupError(
            f"shared monitor reacts with {monitor.config.reaction.value}, scenario needs {scenario.reaction.value}"
        )
    config = PolicyConfig(reaction=scenario.reaction, log_path=log_path, strict_writable_deny=strict_writable_deny)
    sandbox = Sandbox(monitor, config)
    try:
        loaded = []
        for k, name in enumerate(scenario.modules):
            image = modules.get(name) or rewritten_driver(name)
            loaded.append(sandbox.load_driver(image, base + k * kabi.DRIVER_STRIDE, name))
        mem = sandbox.state.memory
        for address, size, perms in scenario.maps:
            mem.map(address, size, perms, "staged")
        for poke in scenario.pokes:
            if poke.address is not None:
                mem.poke(poke.address, poke.data)
                continue
            if not 0 <= poke.module < len(loaded):
                raise ScenarioSetupError(f"poke names module {poke.module}")
            symbols = driver_template(scenario.modules[poke.module]).symbols
            if poke.symbol not in symbols:
                raise ScenarioSetupError(f"unknown symbol {poke.symbol!r}")
            mem.poke(loaded[poke.module].base + symbols[poke.symbol], poke.data)
        entry_symbols = driver_template(scenario.modules[0]).symbols
        if scenario.entry not in entry_symbols:
            raise ScenarioSetupError(f"unknown entry {scenario.entry!r}")
        sandbox.start_monitor()
    except (Fault, MapCollision) as exc:
        sandbox.release()
        raise ScenarioSetupError(str(exc)) from None

    watch = None
    if scenario.staged is not None:
        page = scenario.staged & ~(kabi.PAGE - 1)
        watch = (page, page + kabi.PAGE)
    try:
        run = sandbox.call(
            loaded[0].base + entry_symbols[scenario.entry],
            registers=scenario.registers,
            max_steps=max_steps,
            watch=watch,
        )
    finally:
        sandbox.release()
    outcome, detail = _classify(scenario, run)
    return ScenarioResult(
        scenario.name, scenario.expected, outcome, [e.target for e in run.denials], run.watch_hit is not None, run, detail
    )


def run_scenarios(scenarios: list[Scenario], jobs: int = 4) -> list[ScenarioResult]:
    """Run scenarios on worker threads; all scenarios with the same reaction
    share one monitor and get disjoint driver bases."""
    monitors: dict[Reaction, Monitor] = {}
    for sc in scenarios:
        if sc.reaction not in monitors:
            monitors[sc.reaction] = shared_monitor(PolicyConfig(reaction=sc.reaction))
    bases = []
    cursor = kabi.DRIVER_BASE
    for sc in scenarios:
        bases.append(cursor)
        cursor += kabi.DRIVER_STRIDE * len(sc.modules)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [
            pool.submit(run_scenario, sc, None, monitors[sc.reaction], base=b) for sc, b in zip(scenarios, bases)
        ]
        return [f.result() for f in futures]
