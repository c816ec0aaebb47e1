"""Guest OS awareness built on raw memory reads.

Symbol tables give addresses names, and the kernel inspector walks the
process list that cooperating guests publish at a fixed physical
location.  Neither side executes guest code or needs the guest paused
in any particular state, so both work against a live supervised
machine, a bare one, or a post-mortem snapshot.  Readers are
duck-typed: anything with ``read_physical(pa, n)`` or
``read_phys(pa, n)`` serves.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass

from .guestos import INFO_BLOCK, INFO_MAGIC

__all__ = [
    "SymbolTable",
    "SymbolNotFound",
    "Process",
    "KernelInfo",
    "UnsupportedGuest",
    "CorruptList",
    "STATE_NAMES",
    "MAX_PROCS",
    "read_kernel_info",
    "read_process",
    "process_list",
    "current_process",
    "process_by_ptbr",
]


class SymbolNotFound(KeyError):
    pass


class UnsupportedGuest(Exception):
    """Info block unreadable or its magic wrong: nothing to introspect."""


class CorruptList(Exception):
    """Process list walk hit a cycle, a bad pointer, or never ended."""


class SymbolTable:
    """Name <-> address map parsed from "HEXADDR NAME" lines.

    Blank lines and ``#`` comments are tolerated.  Reverse lookups
    resolve to the nearest symbol at or below the address, the usual
    convention for naming code in the middle of a function.
    """

    def __init__(self, entries: dict[str, int] | None = None):
        self._by_name: dict[str, int] = dict(entries or {})
        pairs = sorted((a, n) for n, a in self._by_name.items())
        self._addrs = [a for a, _ in pairs]
        self._names = [n for _, n in pairs]

    @classmethod
    def parse(cls, text: str) -> "SymbolTable":
        entries: dict[str, int] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'HEXADDR NAME'")
            entries[parts[1]] = int(parts[0], 16)
        return cls(entries)

    @classmethod
    def load(cls, path) -> "SymbolTable":
        with open(path, "r", encoding="ascii") as f:
            return cls.parse(f.read())

    def __len__(self) -> int:
        return len(self._by_name)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def addr_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise SymbolNotFound(name) from None

    def lookup(self, addr: int) -> tuple[str, int]:
        """Nearest symbol at or below addr, as (name, offset)."""
        i = bisect.bisect_right(self._addrs, addr) - 1
        if i < 0:
            raise SymbolNotFound(hex(addr))
        return self._names[i], addr - self._addrs[i]

    def name_of(self, addr: int) -> str:
        name, off = self.lookup(addr)
        return name if off == 0 else f"{name}+0x{off:x}"

    def format(self, addr: int) -> str:
        """name_of with a plain hex fallback, for UI output."""
        try:
            return self.name_of(addr)
        except SymbolNotFound:
            return f"0x{addr:x}"

    def resolve(self, token: str) -> int:
        """Accept a number in any base int() understands, or a name."""
        try:
            return int(token, 0)
        except ValueError:
            return self.addr_of(token)


# Descriptor layout: pid, 16-byte NUL-padded name, ptbr, state, stack
# top, heap base, physical address of the next descriptor (0 ends).
_DESC_FMT = "<I16s5I"
DESC_LEN = struct.calcsize(_DESC_FMT)

STATE_NAMES = {0: "ready", 1: "running", 2: "done"}
MAX_PROCS = 64


@dataclass(frozen=True)
class Process:
    addr: int
    pid: int
    name: str
    ptbr: int
    state: int
    stack: int
    heap: int
    next: int

    @property
    def state_name(self) -> str:
        return STATE_NAMES.get(self.state, f"state{self.state}")


@dataclass(frozen=True)
class KernelInfo:
    head: int
    current: int


def _read_fn(reader):
    for attr in ("read_physical", "read_phys"):
        fn = getattr(reader, attr, None)
        if fn is not None:
            return fn
    if callable(reader):
        return reader
    raise TypeError("reader needs read_physical(pa, n) or read_phys(pa, n)")


def read_kernel_info(reader) -> KernelInfo:
    read = _read_fn(reader)
    try:
        magic, head, current = struct.unpack("<III", read(INFO_BLOCK, 12))
    except Exception as e:
        raise UnsupportedGuest(f"info block unreadable: {e}") from e
    if magic != INFO_MAGIC:
        raise UnsupportedGuest(f"bad info block magic 0x{magic:08X}")
    return KernelInfo(head, current)


def read_process(reader, addr: int) -> Process:
    read = _read_fn(reader)
    if addr <= 0 or addr % 4:
        raise CorruptList(f"bad descriptor address 0x{addr:X}")
    try:
        raw = read(addr, DESC_LEN)
    except Exception as e:
        raise CorruptList(f"descriptor at 0x{addr:X} unreadable") from e
    pid, name, ptbr, state, stack, heap, nxt = struct.unpack(_DESC_FMT, raw)
    text = name.split(b"\0", 1)[0].decode("ascii", "replace")
    return Process(addr, pid, text, ptbr, state, stack, heap, nxt)


def process_list(reader) -> list[Process]:
    info = read_kernel_info(reader)
    procs: list[Process] = []
    seen: set[int] = set()
    addr = info.head
    while addr:
        if addr in seen:
            raise CorruptList(f"next pointers loop back to 0x{addr:X}")
        if len(procs) >= MAX_PROCS:
            raise CorruptList("process list does not terminate")
        seen.add(addr)
        p = read_process(reader, addr)
        procs.append(p)
        addr = p.next
    return procs


def current_process(reader) -> Process | None:
    info = read_kernel_info(reader)
    if not info.current:
        return None
    return read_process(reader, info.current)


def process_by_ptbr(reader, ptbr: int) -> Process | None:
    """Name the address space the hardware is currently using."""
    for p in process_list(reader):
        if p.ptbr == ptbr:
            return p
    return None
