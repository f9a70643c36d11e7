"""Runtime shepherding policy over a page-granular map of loaded modules.

A transfer is denied when its target page is unmapped, not executable, not
part of a registered module, or below the kernel boundary.  Configuration is
accepted exactly once.  The map is guarded by a reader-writer lock so
transfer checks can run concurrently while module (un)registration is
exclusive.
"""

from __future__ import annotations

import itertools
import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

log = logging.getLogger(__name__)

PAGE_SIZE = 4096
DEFAULT_KERNEL_BOUNDARY = 0x80000000
SYSTEM_MODULE_INFORMATION = 11

FLAG_EXECUTE = "x"
FLAG_WRITE = "w"
FLAG_READ = "r"


class MonitorError(Exception):
    pass


class AlreadyConfigured(MonitorError):
    pass


class Overlap(MonitorError):
    pass


class UnknownModule(MonitorError):
    pass


class LogIoFailure(MonitorError):
    pass


class Reaction(Enum):
    LOG_CONTINUE = "log_continue"
    LOG_HALT = "log_halt"


class Decision(Enum):
    CONTINUE = "continue"
    HALT = "halt"


class Verdict(Enum):
    ALLOWED = "allowed"
    DENIED = "denied"


class TransferKind(Enum):
    CALL_IND = "call_ind"
    JMP_IND = "jmp_ind"
    RET = "ret"
    CALL_REL = "call_rel"


@dataclass(frozen=True)
class PageEntry:
    executable: bool
    writable: bool
    module_id: int | None = None
    kernel_space: bool = True

    @property
    def module_member(self) -> bool:
        return self.module_id is not None


@dataclass(frozen=True)
class SectionSpan:
    offset: int
    size: int
    flags: str  # any of "rwx"

    @property
    def executable(self) -> bool:
        return FLAG_EXECUTE in self.flags

    @property
    def writable(self) -> bool:
        return FLAG_WRITE in self.flags


@dataclass
class ModuleDescriptor:
    base: int
    sections: list[SectionSpan]
    name: str = ""


@dataclass
class PolicyConfig:
    reaction: Reaction = Reaction.LOG_HALT
    log_path: str | None = None
    kernel_boundary: int = DEFAULT_KERNEL_BOUNDARY
    strict_writable_deny: bool = False
    verbose: bool = False


@dataclass(frozen=True)
class TransferEvent:
    source: int
    target: int
    kind: TransferKind
    verdict: Verdict
    timestamp: int

    def log_line(self) -> str:
        return f"{self.timestamp} {self.kind.value} {self.source:#010x}→{self.target:#010x} {self.verdict.value}"


class _RWLock:
    """Writer-preferring reader-writer lock."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()


def module_pages(base: int, sections: list[SectionSpan]) -> dict[int, tuple[bool, bool]]:
    """page index -> (executable, writable); pages shared by two sections
    get the union of their permissions."""
    pages: dict[int, tuple[bool, bool]] = {}
    for span in sections:
        if span.size <= 0:
            continue
        first = (base + span.offset) // PAGE_SIZE
        last = (base + span.offset + span.size - 1) // PAGE_SIZE
        for page in range(first, last + 1):
            x, w = pages.get(page, (False, False))
            pages[page] = (x or span.executable, w or span.writable)
    return pages


def parse_flags(value) -> str:
    if isinstance(value, str):
        return "".join(c for c in value.lower() if c in "rwx")
    return "".join(c for c, on in zip("rwx", value) if on)


def load_config(text: str) -> tuple[list[ModuleDescriptor], PolicyConfig]:
    """Decode the JSON configuration document::

        {"reaction": "log_halt", "log_path": "...", "kernel_boundary": "0x80000000",
         "modules": [{"name": "drv", "base": "0x90100000",
                      "sections": [{"offset": "0x1000", "size": 4096, "flags": "rx"}]}]}
    """
    doc = json.loads(text)

    def num(v):
        return int(v, 0) if isinstance(v, str) else int(v)

    modules = [
        ModuleDescriptor(
            num(m["base"]),
            [SectionSpan(num(s["offset"]), num(s["size"]), parse_flags(s.get("flags", "r"))) for s in m["sections"]],
            m.get("name", ""),
        )
        for m in doc.get("modules", [])
    ]
    config = PolicyConfig(
        reaction=Reaction(doc.get("reaction", "log_halt")),
        log_path=doc.get("log_path"),
        kernel_boundary=num(doc.get("kernel_boundary", DEFAULT_KERNEL_BOUNDARY)),
        strict_writable_deny=bool(doc.get("strict_writable_deny", False)),
        verbose=bool(doc.get("verbose", False)),
    )
    return modules, config


class Monitor:
    def __init__(self):
        self._lock = _RWLock()
        self._config_lock = threading.Lock()
        self._events_lock = threading.Lock()
        self._pages: dict[int, PageEntry] = {}
        self._modules: dict[int, tuple[int, int]] = {}  # id -> (first page, last page)
        self._ids = itertools.count(1)
        self._clock = itertools.count(1)
        self.config: PolicyConfig | None = None
        self.events: list[TransferEvent] = []
        self.log_failures: list[LogIoFailure] = []

    # -- configuration -----------------------------------------------------

    @property
    def configured(self) -> bool:
        return self.config is not None

    def configure(self, map_seed: list[ModuleDescriptor], config: PolicyConfig) -> None:
        with self._config_lock:
            if self.config is not None:
                raise AlreadyConfigured("monitor accepts a single configuration")
            self._lock.acquire_write()
            try:
                for desc in map_seed:
                    self._register_locked(desc.base, desc.sections)
                self.config = config
            finally:
                self._lock.release_write()

    # -- map maintenance ---------------------------------------------------

    def _register_locked(self, base: int, sections: list[SectionSpan]) -> int:
        pages = module_pages(base, sections)
        if not pages:
            raise ValueError("module has no mapped sections")
        first, last = min(pages), max(pages)
        for lo, hi in self._modules.values():
            if first <= hi and lo <= last:
                raise Overlap(f"module at {base:#x} overlaps an existing module")
        module_id = next(self._ids)
        boundary = self.config.kernel_boundary if self.config else DEFAULT_KERNEL_BOUNDARY
        for page, (x, w) in pages.items():
            self._pages[page] = PageEntry(x, w, module_id, page * PAGE_SIZE >= boundary)
        self._modules[module_id] = (first, last)
        return module_id

    def register_module(self, base: int, sections: list[SectionSpan]) -> int:
        self._lock.acquire_write()
        try:
            return self._register_locked(base, sections)
        finally:
            self._lock.release_write()

    def unregister_module(self, module_id: int) -> None:
        self._lock.acquire_write()
        try:
            if module_id not in self._modules:
                raise UnknownModule(f"no module with id {module_id}")
            first, last = self._modules.pop(module_id)
            for page in range(first, last + 1):
                entry = self._pages.get(page)
                if entry is not None and entry.module_id == module_id:
                    del self._pages[page]
        finally:
            self._lock.release_write()

    def page_entry(self, address: int) -> PageEntry | None:
        self._lock.acquire_read()
        try:
            return self._pages.get((address & 0xFFFFFFFF) // PAGE_SIZE)
        finally:
            self._lock.release_read()

    # -- policy ------------------------------------------------------------

    def _verdict(self, target: int) -> Verdict:
        config = self.config
        if config is None:
            return Verdict.ALLOWED
        target &= 0xFFFFFFFF
        entry = self._pages.get(target // PAGE_SIZE)
        if (
            entry is None
            or not entry.executable
            or not entry.module_member
            or target < config.kernel_boundary
            or (config.strict_writable_deny and entry.writable)
        ):
            return Verdict.DENIED
        return Verdict.ALLOWED

    def check_transfer(self, source: int, target: int, kind: TransferKind | str) -> Verdict:
        return self.inspect_transfer(source, target, kind).verdict

    def inspect_transfer(self, source: int, target: int, kind: TransferKind | str) -> TransferEvent:
        kind = TransferKind(kind)
        self._lock.acquire_read()
        try:
            verdict = self._verdict(target)
        finally:
            self._lock.release_read()
        event = TransferEvent(source & 0xFFFFFFFF, target & 0xFFFFFFFF, kind, verdict, next(self._clock))
        if verdict is Verdict.DENIED or (self.config is not None and self.config.verbose):
            with self._events_lock:
                self.events.append(event)
        return event

    @property
    def denials(self) -> list[TransferEvent]:
        with self._events_lock:
            return [e for e in self.events if e.verdict is Verdict.DENIED]

    def react(self, event: TransferEvent) -> Decision:
        config = self.config or PolicyConfig()
        decision = Decision.HALT if config.reaction is Reaction.LOG_HALT else Decision.CONTINUE
        if config.log_path:
            try:
                with self._events_lock, open(config.log_path, "a", encoding="utf-8") as fh:
                    fh.write(event.log_line() + "\n")
            except OSError as exc:
                failure = LogIoFailure(f"cannot write {config.log_path}: {exc}")
                self.log_failures.append(failure)
                log.error("%s; event %s", failure, event.log_line())
        return decision

    def filter_module_query(self, requestor_privileged: bool, info_class: int) -> bool:
        """True when the module-information query may proceed."""
        return requestor_privileged or info_class != SYSTEM_MODULE_INFORMATION


def read_log(path: str | Path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()
