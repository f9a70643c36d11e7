"""Emulated kernel: loader, monitor linkage, and equivalence runs.

Address space of every sandbox:

* ``[0x1000, 0x20000)``   RWX, never registered as a module
* loader module          exit trap and import thunks
* monitor module         the filter routine (intercepted by a hook)
* stack                  RW
* drivers                mapped from ``DRIVER_BASE`` upwards
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .. import kabi
from ..monitor import (
    Decision,
    ModuleDescriptor,
    Monitor,
    PolicyConfig,
    Reaction,
    SectionSpan,
    TransferEvent,
    Verdict,
)
from ..pe import PeImage
from ..rewriter import KIND_NAMES, find_linkage
from ..x86 import EAX, ESP
from .machine import (
    DEFAULT_STEP_LIMIT,
    HaltCause,
    Machine,
    MachineState,
    load_image,
)

MASK = 0xFFFFFFFF


def _loader_page() -> bytes:
    page = bytearray(b"\xcc" * kabi.LOADER_SIZE)
    for k, name in enumerate(kabi.KERNEL_IMPORTS):
        at = kabi.IMPORT_STUB_BASE - kabi.LOADER_BASE + kabi.IMPORT_STUB_SIZE * k
        page[at : at + 7] = b"\x81\xc0" + struct.pack("<I", kabi.import_addend(name)) + b"\xc3"
    return bytes(page)


def _filter_page() -> bytes:
    page = bytearray(b"\xcc" * kabi.PAGE)
    off = kabi.FILTER_VA - kabi.FILTER_BASE
    page[off : off + 3] = b"\xc2\x0c\x00"  # ret 12: a filter that allows everything
    return bytes(page)


def base_modules() -> list[ModuleDescriptor]:
    return [
        ModuleDescriptor(kabi.LOADER_BASE, [SectionSpan(0, kabi.LOADER_SIZE, "rx")], "loader"),
        ModuleDescriptor(kabi.FILTER_BASE, [SectionSpan(0, kabi.PAGE, "rx")], "monitor"),
    ]


def image_descriptor(image: PeImage, base: int, name: str = "driver") -> ModuleDescriptor:
    spans = []
    for sec in image.sections:
        flags = "r" + ("w" if sec.writable else "") + ("x" if sec.executable else "")
        spans.append(SectionSpan(sec.rva, max(sec.virtual_size, 1), flags))
    return ModuleDescriptor(base, spans, name)


def shared_monitor(config: PolicyConfig) -> Monitor:
    """A monitor configured with the fixed kernel modules, ready to be shared
    by several sandboxes (each registers its own drivers)."""
    monitor = Monitor()
    monitor.configure(base_modules(), config)
    return monitor


@dataclass
class LoadedDriver:
    image: PeImage
    base: int
    name: str
    module_id: int | None = None


@dataclass
class RunResult:
    cause: HaltCause
    fault: str
    gpr: list[int]
    flags: dict[str, int]
    output: bytes
    steps: int
    trace_hash: str
    denials: list[TransferEvent]
    filter_calls: int
    writes: list[tuple[int, int, int]]
    denial_steps: list[int] = field(default_factory=list)
    watch_hit: int | None = None

    @property
    def eax(self) -> int:
        return self.gpr[EAX]


class Sandbox:
    def __init__(self, monitor: Monitor | None = None, config: PolicyConfig | None = None):
        state = MachineState()
        mem = state.memory
        mem.map(kabi.HAL_BASE, kabi.HAL_END - kabi.HAL_BASE, "rwx", "hal")
        mem.map(kabi.LOADER_BASE, kabi.LOADER_SIZE, "rx", "loader", _loader_page())
        mem.map(kabi.FILTER_BASE, kabi.PAGE, "rx", "monitor", _filter_page())
        mem.map(kabi.STACK_BASE, kabi.STACK_SIZE, "rw", "stack")
        self.state = state
        self.machine = Machine(state, kabi.EXIT_VA)
        self.machine.hooks[kabi.FILTER_VA] = self._filter
        self.machine.ignore_writes.append((kabi.STACK_BASE, kabi.STACK_BASE + kabi.STACK_SIZE))
        self.monitor = monitor if monitor is not None else Monitor()
        self.config = config if config is not None else PolicyConfig(reaction=Reaction.LOG_CONTINUE)
        self.drivers: list[LoadedDriver] = []
        self.denials: list[TransferEvent] = []
        self.denial_steps: list[int] = []
        self.filter_calls = 0

    # -- setup ---------------------------------------------------------------

    def load_driver(self, image: PeImage, base: int | None = None, name: str = "driver") -> LoadedDriver:
        if base is None:
            base = kabi.DRIVER_BASE + kabi.DRIVER_STRIDE * len(self.drivers)
        load_image(image, base, self.state, name)
        mem = self.state.memory
        unknown = kabi.IMPORT_STUB_BASE + kabi.IMPORT_STUB_SIZE * len(kabi.KERNEL_IMPORTS)
        for entry in image.imports:
            try:
                stub = kabi.IMPORT_STUB_BASE + kabi.IMPORT_STUB_SIZE * kabi.KERNEL_IMPORTS.index(entry.symbol_name)
            except ValueError:
                stub = unknown
            mem.poke(base + entry.iat_slot_rva, struct.pack("<I", stub))
        driver = LoadedDriver(image, base, name)
        self.drivers.append(driver)
        return driver

    def start_monitor(self) -> None:
        """Configure (or join) the monitor, register drivers, then open the
        gate of every rewritten driver by filling in its linkage record."""
        pending = [d for d in self.drivers if d.module_id is None]
        if not self.monitor.configured:
            self.monitor.configure(base_modules() + [image_descriptor(d.image, d.base, d.name) for d in pending], self.config)
            for d in pending:
                d.module_id = -1  # part of the initial map
        else:
            for d in pending:
                desc = image_descriptor(d.image, d.base, d.name)
                d.module_id = self.monitor.register_module(desc.base, desc.sections)
        for d in self.drivers:
            linkage = find_linkage(d.image)
            if linkage is not None:
                gate, slot = linkage
                self.state.memory.poke(d.base + slot, struct.pack("<I", kabi.FILTER_VA))
                self.state.memory.poke(d.base + gate, struct.pack("<I", 1))

    def release(self) -> None:
        """Unregister drivers added to a shared monitor."""
        for d in self.drivers:
            if d.module_id is not None and d.module_id > 0:
                self.monitor.unregister_module(d.module_id)
                d.module_id = None

    # -- filter --------------------------------------------------------------

    def _filter(self, machine: Machine) -> None:
        st = machine.state
        esp = st.gpr[ESP]
        mem = st.memory
        ret, source, target, kind = (mem.read_u32(esp + 4 * i) for i in range(4))
        self.filter_calls += 1
        name = KIND_NAMES.get(kind)
        if name is None:
            machine.halt(HaltCause.FAULT, f"filter called with unknown kind {kind}")
            return
        event = self.monitor.inspect_transfer(source, target, name)
        if event.verdict is Verdict.DENIED:
            self.denials.append(event)
            self.denial_steps.append(st.steps)
            if self.monitor.react(event) is Decision.HALT:
                machine.halt(HaltCause.POLICY_HALT, f"denied {name} {source:#010x}->{target:#010x}")
                return
        st.gpr[ESP] = (esp + 16) & MASK
        st.eip = ret

    # -- running -------------------------------------------------------------

    def call(
        self,
        entry_va: int,
        *,
        registers: dict[int, int] | None = None,
        max_steps: int = DEFAULT_STEP_LIMIT,
        output: tuple[int, int] | None = None,
        watch: tuple[int, int] | None = None,
    ) -> RunResult:
        st = self.state
        st.gpr = [0] * 8
        for reg, value in (registers or {}).items():
            st.gpr[reg] = value & MASK
        st.gpr[ESP] = kabi.STACK_TOP
        self.machine.push(kabi.EXIT_VA)
        self.machine.writes.clear()
        st.eip = entry_va
        self.machine.watch = watch
        self.machine.run(max_steps)
        out = st.memory.read(*output) if output else b""
        return RunResult(
            cause=st.halt_cause,
            fault=st.fault_reason,
            gpr=list(st.gpr),
            flags=dict(st.flags),
            output=out,
            steps=st.steps,
            trace_hash=self.machine.trace_hash,
            denials=list(self.denials),
            filter_calls=self.filter_calls,
            writes=list(self.machine.writes),
            denial_steps=list(self.denial_steps),
            watch_hit=self.machine.watch_hit,
        )


@dataclass
class ProgramInputs:
    """Where a corpus program reads its input words and writes its outputs."""

    input_rva: int
    output_rva: int
    output_words: int
    vectors: list[list[int]]

    @classmethod
    def from_json(cls, doc: dict) -> ProgramInputs:
        def num(v):
            return int(v, 0) if isinstance(v, str) else int(v)

        return cls(
            num(doc["input_rva"]),
            num(doc["output_rva"]),
            num(doc["output_words"]),
            [[num(w) for w in vec] for vec in doc["vectors"]],
        )


def run_program(
    image: PeImage,
    vector: list[int],
    inputs: ProgramInputs,
    *,
    base: int = kabi.DRIVER_BASE,
    monitor: Monitor | None = None,
    config: PolicyConfig | None = None,
    max_steps: int = DEFAULT_STEP_LIMIT,
) -> RunResult:
    sandbox = Sandbox(monitor, config)
    driver = sandbox.load_driver(image, base)
    sandbox.start_monitor()
    words = b"".join(struct.pack("<I", w & MASK) for w in vector)
    sandbox.state.memory.poke(base + inputs.input_rva, words)
    try:
        return sandbox.call(
            driver.base + image.entry_point,
            max_steps=max_steps,
            output=(base + inputs.output_rva, 4 * inputs.output_words),
        )
    finally:
        sandbox.release()


@dataclass
class Divergence:
    vector_index: int
    step: int
    reason: str


@dataclass
class EquivalenceReport:
    runs: int = 0
    divergences: list[Divergence] = field(default_factory=list)
    denials: int = 0
    filter_calls: int = 0

    @property
    def ok(self) -> bool:
        return not self.divergences


SLOWDOWN_BUDGET = 8


def _first_write_divergence(a: RunResult, b: RunResult, base: int) -> int | None:
    """Step (in run ``b``) of the first non-stack write that differs."""
    for (_, addr_a, val_a), (step_b, addr_b, val_b) in zip(a.writes, b.writes):
        if addr_a != addr_b or val_a != val_b:
            return step_b
    if len(a.writes) != len(b.writes):
        shorter = min(len(a.writes), len(b.writes))
        return b.writes[shorter][0] if shorter < len(b.writes) else b.steps
    return None


def run_equivalence(
    original: PeImage,
    rewritten: PeImage,
    inputs: ProgramInputs,
    *,
    max_steps: int = DEFAULT_STEP_LIMIT,
    baseline: list[RunResult] | None = None,
    stop_at_first: bool = False,
    config: PolicyConfig | None = None,
) -> EquivalenceReport:
    """Run both images on every input vector and compare final registers,
    modelled flags and the output buffer.  ``baseline`` may carry the
    original's results from an earlier call; ``config`` applies to the
    monitor watching the rewritten runs."""
    report = EquivalenceReport()
    for i, vector in enumerate(inputs.vectors):
        a = baseline[i] if baseline else run_program(original, vector, inputs, max_steps=max_steps)
        # instrumentation adds a bounded number of steps per transfer, so a
        # rewritten run far beyond the original's length is a runaway
        budget = min(max_steps, SLOWDOWN_BUDGET * a.steps + 1000)
        b = run_program(rewritten, vector, inputs, config=config, max_steps=budget)
        report.runs += 1
        report.denials += len(b.denials)
        report.filter_calls += b.filter_calls
        reasons = []
        if a.cause is not HaltCause.NORMAL_EXIT:
            reasons.append(f"original ended with {a.cause.value}: {a.fault}")
        if b.cause is not HaltCause.NORMAL_EXIT:
            reasons.append(f"rewritten ended with {b.cause.value}: {b.fault}")
        if a.gpr != b.gpr:
            reasons.append("registers differ")
        if a.flags != b.flags:
            reasons.append("flags differ")
        if a.output != b.output:
            reasons.append("output buffer differs")
        if reasons:
            step = _first_write_divergence(a, b, kabi.DRIVER_BASE)
            report.divergences.append(Divergence(i, b.steps if step is None else step, "; ".join(reasons)))
            if stop_at_first:
                break
    return report


def baseline_runs(original: PeImage, inputs: ProgramInputs, max_steps: int = DEFAULT_STEP_LIMIT) -> list[RunResult]:
    return [run_program(original, v, inputs, max_steps=max_steps) for v in inputs.vectors]
