"""Address-space conventions of the emulated kernel.

Shared by the corpus generator (which needs to know what imported routines
do) and the emulator (which provides them).
"""

from __future__ import annotations

import zlib

PAGE = 0x1000

# fixed low region mapped RWX but never registered as a module
HAL_BASE = 0x1000
HAL_END = 0x20000

# loader module: exit trap at +0, import thunks from +0x100
LOADER_BASE = 0xBFC00000
LOADER_SIZE = 0x1000
EXIT_VA = LOADER_BASE
IMPORT_STUB_BASE = LOADER_BASE + 0x100
IMPORT_STUB_SIZE = 8

# monitor module: the filter routine the rewritten code calls into
FILTER_BASE = 0xBFD00000
FILTER_VA = FILTER_BASE + 0x10

STACK_BASE = 0xBFE00000
STACK_SIZE = 0x10000
STACK_TOP = STACK_BASE + STACK_SIZE - 0x100

DRIVER_BASE = 0x90100000
DRIVER_STRIDE = 0x100000

KERNEL_IMPORTS = (
    "ExAllocatePoolWithTag",
    "KeQuerySystemTime",
    "RtlCompareMemory",
    "IoCreateDevice",
    "KeGetCurrentIrql",
    "ObReferenceObjectByHandle",
)
KERNEL_LIBRARY = "ntoskrnl.exe"


def import_addend(name: str) -> int:
    """Every imported routine behaves as ``eax += import_addend(name); ret``."""
    return zlib.crc32(name.encode("ascii")) & 0xFFFF
