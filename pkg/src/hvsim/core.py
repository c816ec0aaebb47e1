"""Analysis framework: turns raw VM exits into debugger-grade events.

The framework owns a virtualization context over one machine and routes
every exit through a small amount of machinery:

  * breakpoints, soft (a trap byte swapped into guest code, the original
    kept in hidden storage) and transparent (the page's present bit is
    cleared so the guest text is never modified),
  * watchpoints over virtual ranges, with framebuffer ranges surfacing
    as memory-mapped IO events,
  * function and system-call tracing built from the same primitives,
  * page-table supervision and reserved-frame concealment (memguard),
  * an event bus with per-tool budgets, so one broken tool is evicted
    without disturbing the guest or the other tools.

Everything the framework does is reversible: unload() restores guest
bytes, page-table bits and hidden frames, after which the machine runs
on exactly as if it had never been supervised.

Routing summary per exit kind: a trap-byte hit is looked up by physical
site and dispatched by purpose (user breakpoint, function entry,
function return, syscall return) or reinjected when the guest planted
it; a page fault is classified as protection-induced (emulate one
instruction with protections lifted, emitting precise hit events) or
genuine (reinject); an intercepted syscall emits an entry event and is
re-delivered with the gate's one-tick cost preserved; port exits go to
subscribers who may consume the operation; PTBR writes rebuild the
supervision state and become process-switch events; external interrupts
are announced and re-delivered unless consumed.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from enum import Enum

from . import isa, trace
from .isa import Cr, Op
from .machine import (
    ERR_WRITE,
    FB_BASE,
    PAGE_SIZE,
    PTE_P,
    Fault,
    Halted,
    Machine,
)
from .memguard import MemGuard, walk_page_table
from .vmx import (
    BoundaryStop,
    ExceptionExit,
    ExecutionControls,
    ExternalInterruptExit,
    HltExit,
    IoPortExit,
    PtbrWriteExit,
    TripleFaultExit,
    Vmcs,
)

__all__ = [
    "EventKind",
    "Event",
    "Condition",
    "Consume",
    "Framework",
    "ToolApi",
    "FrameworkError",
    "AlreadyLoaded",
    "NotLoaded",
    "UnsupportedCondition",
    "WriteAccessDenied",
    "PortAccessDenied",
    "GuestMemoryFault",
    "BreakpointExists",
    "UnknownId",
    "ToolEvicted",
    "BudgetExceeded",
]

FB_SIZE = 80 * 25 * 2
FB_FRAMES = set(range(FB_BASE >> 12, ((FB_BASE + FB_SIZE - 1) >> 12) + 1))

CALL_BUDGET = 100_000
TIME_BUDGET = 0.25  # seconds of wall time per handler invocation


class EventKind(Enum):
    PROCESS_SWITCH = "ProcessSwitch"
    EXCEPTION = "Exception"
    INTERRUPT = "Interrupt"
    BREAKPOINT_HIT = "BreakpointHit"
    WATCHPOINT_HIT = "WatchpointHit"
    FUNCTION_ENTRY = "FunctionEntry"
    FUNCTION_EXIT = "FunctionExit"
    SYSCALL_ENTRY = "SyscallEntry"
    SYSCALL_EXIT = "SyscallExit"
    IO_PORT = "IOOperationPort"
    IO_MMAP = "IOOperationMmap"


@dataclass(frozen=True)
class Event:
    kind: EventKind
    retired: int
    pc: int
    process: int  # address-space root of the interrupted context
    fields: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "retired": self.retired,
                "pc": self.pc, "process": self.process, **self.fields}


@dataclass(frozen=True)
class Condition:
    """Optional subscription filter.  Which fields are honored depends
    on the event kind; kinds with no filterable fields reject any
    condition outright."""

    port: int | None = None
    access: str | None = None  # "read" / "write"
    vector: int | None = None


_CONDITION_FIELDS = {
    EventKind.IO_PORT: ("port", "access"),
    EventKind.EXCEPTION: ("vector",),
    EventKind.INTERRUPT: ("vector",),
}


@dataclass(frozen=True)
class Consume:
    """Handler verdict: the framework must not perform the default
    action.  For port reads `replacement` is what the guest receives."""

    replacement: int = 0


class FrameworkError(Exception):
    pass


class AlreadyLoaded(FrameworkError):
    pass


class NotLoaded(FrameworkError):
    pass


class UnsupportedCondition(FrameworkError):
    pass


class WriteAccessDenied(FrameworkError):
    pass


class PortAccessDenied(FrameworkError):
    pass


class GuestMemoryFault(FrameworkError):
    def __init__(self, va: int, err: int):
        super().__init__(f"guest va {va:#x} unmapped (err {err:#x})")
        self.va = va
        self.err = err


class BreakpointExists(FrameworkError):
    pass


class UnknownId(FrameworkError):
    pass


class ToolEvicted(FrameworkError):
    pass


class BudgetExceeded(FrameworkError):
    pass


# -- page presence traps ----------------------------------------------------


class PageProtector:
    """Hides pages from the MMU by clearing P bits on their leaf slots.

    Protections are registered by (address space, virtual page) with a
    wildcard space, or by physical frame; apply() projects them onto the
    current address space through the supervision leaf index.  Restores
    are value guarded: a slot the guest rewrote stays guest-owned.
    """

    def __init__(self, m: Machine, mg: MemGuard):
        self.m = m
        self.mg = mg
        self.refs: dict[tuple[int | None, int], int] = {}
        self.frame_refs: dict[int, int] = {}
        self.applied: dict[int, int] = {}  # slot pa -> value before the clear
        self.applied_pages: set[int] = set()

    def protect(self, space: int | None, vpage: int) -> None:
        k = (space, vpage)
        self.refs[k] = self.refs.get(k, 0) + 1

    def unprotect(self, space: int | None, vpage: int) -> None:
        k = (space, vpage)
        n = self.refs.get(k, 0) - 1
        if n <= 0:
            self.refs.pop(k, None)
        else:
            self.refs[k] = n

    def protect_frame(self, frame: int) -> None:
        self.frame_refs[frame] = self.frame_refs.get(frame, 0) + 1

    def unprotect_frame(self, frame: int) -> None:
        n = self.frame_refs.get(frame, 0) - 1
        if n <= 0:
            self.frame_refs.pop(frame, None)
        else:
            self.frame_refs[frame] = n

    def covers(self, vpage: int) -> bool:
        return vpage in self.applied_pages

    def apply(self) -> None:
        m = self.m
        space = m.cr[Cr.PTBR]
        wanted: set[int] = set()
        for (s, vpage), n in self.refs.items():
            if n > 0 and (s is None or s == space):
                wanted.add(vpage)
        if self.frame_refs:
            for vpage, (_, guest) in self.mg.leaf_map.items():
                if (guest >> 12) in self.frame_refs:
                    wanted.add(vpage)
        for vpage in wanted:
            entry = self.mg.leaf_map.get(vpage)
            if entry is None:
                continue  # unmapped here; a genuine fault serves as the trap
            slot, _ = entry
            raw = m.read_phys_u32(slot)
            if not raw & PTE_P:
                continue
            self.applied[slot] = raw
            self.applied_pages.add(vpage)
            m.write_phys_u32(slot, raw & ~PTE_P)

    def unapply(self) -> None:
        m = self.m
        for slot, saved in self.applied.items():
            if m.read_phys_u32(slot) == saved & ~PTE_P:
                m.write_phys_u32(slot, saved)
        self.applied = {}
        self.applied_pages = set()


# -- instrumentation records ------------------------------------------------


@dataclass
class _Breakpoint:
    id: int
    va: int
    style: str                  # "soft" / "transparent"
    process: int | None
    one_shot: bool
    purpose: str                # "user"/"func_entry"/"func_ret"/"syscall_ret"
    tool: "_ToolHandle | None"
    pa: int | None = None       # soft: armed site
    pool_pa: int | None = None  # soft: hidden slot holding the original byte
    armed: bool = False
    hits: int = 0
    trace_id: int | None = None


@dataclass
class _Watchpoint:
    id: int
    va: int
    length: int
    access: str                 # "r" / "w" / "rw"
    process: int | None
    tool: "_ToolHandle | None"
    hits: int = 0

    def pages(self) -> range:
        return range(self.va >> 12, ((self.va + self.length - 1) >> 12) + 1)


@dataclass
class _FuncTrace:
    id: int
    addr: int
    process: int | None
    tool: "_ToolHandle | None"
    entry_bp: int = 0
    # return site va -> stack of (sp expected at the return, entry retired)
    pending: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    ret_bps: dict[int, int] = field(default_factory=dict)


@dataclass
class _Subscription:
    id: int
    kind: EventKind
    condition: Condition | None
    handler: object
    tool: "_ToolHandle | None"


@dataclass
class _ToolHandle:
    name: str
    can_write: bool
    ports: frozenset
    interactive: bool
    evicted: bool = False
    eviction_reason: str = ""
    calls_total: int = 0
    _win_calls: int = 0
    _win_start: float | None = None

    def begin_window(self) -> None:
        self._win_calls = 0
        self._win_start = time.monotonic()

    def end_window(self) -> None:
        self._win_start = None

    def count(self) -> None:
        if self.evicted:
            raise ToolEvicted(f"tool {self.name!r}: {self.eviction_reason}")
        self.calls_total += 1
        if self._win_start is None:
            return
        self._win_calls += 1
        if self._win_calls > CALL_BUDGET:
            raise BudgetExceeded(
                f"{self._win_calls} api calls in one handler invocation")
        if not self.interactive \
                and time.monotonic() - self._win_start > TIME_BUDGET:
            raise BudgetExceeded("handler wall-time budget exhausted")


class ToolApi:
    """Per-tool facade over the framework.  Every method is metered, so
    a handler stuck in a loop runs out of budget and is evicted instead
    of wedging the analysis."""

    def __init__(self, fw: "Framework", handle: _ToolHandle):
        self._fw = fw
        self._h = handle

    @property
    def name(self) -> str:
        return self._h.name

    def guest_read(self, va: int, n: int) -> bytes:
        self._h.count()
        return self._fw.guest_read(va, n)

    def guest_write(self, va: int, data: bytes) -> None:
        self._h.count()
        self._check_write()
        self._fw.guest_write(va, data)

    def read_physical(self, pa: int, n: int) -> bytes:
        self._h.count()
        return self._fw.read_physical(pa, n)

    def write_physical(self, pa: int, data: bytes) -> None:
        self._h.count()
        self._check_write()
        self._fw.write_physical(pa, data)

    def read_guest_regs(self) -> dict:
        self._h.count()
        return self._fw.read_guest_regs()

    def write_guest_regs(self, **updates) -> None:
        self._h.count()
        self._check_write()
        self._fw.write_guest_regs(**updates)

    def disassemble_guest(self, va: int, count: int = 8) -> list:
        self._h.count()
        return self._fw.disassemble_guest(va, count)

    def port_read(self, port: int) -> int:
        self._h.count()
        if port not in self._h.ports:
            raise PortAccessDenied(
                f"tool {self._h.name!r} lacks port {port:#x}")
        return self._fw.machine.port_read(port)

    def subscribe(self, kind: EventKind, handler,
                  condition: Condition | None = None) -> int:
        self._h.count()
        return self._fw.subscribe(kind, handler, condition, tool=self)

    def unsubscribe(self, sub_id: int) -> None:
        self._h.count()
        self._fw.unsubscribe(sub_id)

    def add_breakpoint(self, va: int, process: int | None = None,
                       style: str = "soft", one_shot: bool = False) -> int:
        self._h.count()
        return self._fw.add_breakpoint(va, process, style, one_shot,
                                       tool=self)

    def remove_breakpoint(self, bp_id: int) -> None:
        self._h.count()
        self._fw.remove_breakpoint(bp_id)

    def add_watchpoint(self, va: int, length: int = 4, access: str = "w",
                       process: int | None = None) -> int:
        self._h.count()
        return self._fw.add_watchpoint(va, length, access, process, tool=self)

    def remove_watchpoint(self, wp_id: int) -> None:
        self._h.count()
        self._fw.remove_watchpoint(wp_id)

    def trace_function(self, addr: int, process: int | None = None) -> int:
        self._h.count()
        return self._fw.trace_function(addr, process, tool=self)

    def untrace_function(self, trace_id: int) -> None:
        self._h.count()
        self._fw.untrace_function(trace_id)

    def single_step(self) -> dict:
        self._h.count()
        return self._fw.single_step()

    def request_stop(self, reason: str = "tool") -> None:
        self._h.count()
        self._fw.request_stop(reason)

    def machine_state(self) -> dict:
        self._h.count()
        m = self._fw.machine
        return {"retired": m.retired, "pc": m.pc,
                "process": m.cr[Cr.PTBR], "halted": m.halted}

    def _check_write(self) -> None:
        if not self._h.can_write:
            raise WriteAccessDenied(f"tool {self._h.name!r} is read-only")


# -- the framework ----------------------------------------------------------


class Framework:
    TRAP_BYTE = 0xCC

    def __init__(self, machine: Machine):
        self.machine = machine
        self.memguard: MemGuard | None = None
        self.protector: PageProtector | None = None
        self.vmcs: Vmcs | None = None
        self.loaded = False
        self._ids = iter(range(1, 1 << 30)).__next__
        self.subs: list[_Subscription] = []
        self.breakpoints: dict[int, _Breakpoint] = {}
        self._soft_by_pa: dict[int, _Breakpoint] = {}
        self.watchpoints: dict[int, _Watchpoint] = {}
        self.traces: dict[int, _FuncTrace] = {}
        self.tools: dict[str, _ToolHandle] = {}
        self.evictions: list[tuple[str, str]] = []
        # (space, return va) -> stack of in-flight syscall numbers
        self._syscall_pending: dict[tuple[int, int], list[int]] = {}
        self._syscall_ret_bps: dict[tuple[int, int], int] = {}
        self.ledger = {"total": 0, "abstracted": 0, "internal": 0,
                       "reinjected": 0, "by_kind": {}}
        self._stop_requested: str | None = None
        self._halt_pending = False
        self._cur_events = 0
        self._cur_injected = False
        self._in_emulation = False
        self._tables_dirty = False

    # -- lifecycle ----------------------------------------------------------

    def load(self) -> None:
        """Reserve hidden frames, attach the virtualization context and
        bring all pre-registered instrumentation live."""
        if self.loaded:
            raise AlreadyLoaded("framework already attached")
        m = self.machine
        self.memguard = MemGuard(m)
        self.memguard.reserve()
        self.protector = PageProtector(m, self.memguard)
        self.vmcs = Vmcs.late_launch(m, self._controls())
        self.loaded = True
        self.memguard.rebuild()
        self._sync()  # projects protections registered before attach
        for bp in self.breakpoints.values():
            if bp.style == "soft" and not bp.armed:
                self._arm_soft(bp)

    def unload(self) -> Machine:
        """Withdraw completely.  Guest bytes, page tables and hidden
        frames are restored; the machine keeps running natively from the
        exact boundary state."""
        self._require_loaded()
        for bp in self.breakpoints.values():
            self._disarm_soft(bp)
        self.protector.unapply()
        self.memguard.unload_restore()
        self.vmcs.unload()
        self.loaded = False
        self.vmcs = None
        return self.machine

    def _require_loaded(self) -> None:
        if not self.loaded:
            raise NotLoaded("framework not attached")

    # -- configuration ------------------------------------------------------

    def register_tool(self, name: str, guest_write: bool = False,
                      ports=(), interactive: bool = False) -> ToolApi:
        if name in self.tools:
            raise FrameworkError(f"tool {name!r} already registered")
        h = _ToolHandle(name, guest_write, frozenset(ports), interactive)
        self.tools[name] = h
        return ToolApi(self, h)

    def subscribe(self, kind: EventKind, handler,
                  condition: Condition | None = None,
                  tool: ToolApi | None = None) -> int:
        if condition is not None:
            allowed = _CONDITION_FIELDS.get(kind, ())
            for f in ("port", "access", "vector"):
                if getattr(condition, f) is not None and f not in allowed:
                    raise UnsupportedCondition(
                        f"{kind.value} cannot filter on {f!r}")
        sub = _Subscription(self._ids(), kind, condition, handler,
                            tool._h if tool else None)
        self.subs.append(sub)
        self._sync()
        return sub.id

    def unsubscribe(self, sub_id: int) -> None:
        self.subs = [s for s in self.subs if s.id != sub_id]
        self._sync()

    def add_breakpoint(self, va: int, process: int | None = None,
                       style: str = "soft", one_shot: bool = False,
                       tool: ToolApi | None = None) -> int:
        if style not in ("soft", "transparent"):
            raise FrameworkError(f"unknown breakpoint style {style!r}")
        if style == "transparent":
            self._require_loaded()
        for bp in self.breakpoints.values():
            if bp.va == va and bp.process == process and bp.purpose == "user":
                raise BreakpointExists(f"breakpoint at {va:#x} exists")
        bp = _Breakpoint(self._ids(), va, style, process, one_shot, "user",
                         tool._h if tool else None)
        if style == "soft":
            if self.loaded:
                self._arm_soft(bp)  # may raise; nothing recorded yet
        else:
            self.protector.protect(process, va >> 12)
        self.breakpoints[bp.id] = bp
        self._sync()
        return bp.id

    def remove_breakpoint(self, bp_id: int) -> None:
        bp = self.breakpoints.pop(bp_id, None)
        if bp is None:
            raise UnknownId(f"no breakpoint {bp_id}")
        if bp.style == "soft":
            self._disarm_soft(bp)
        elif self.protector is not None:
            self.protector.unprotect(bp.process, bp.va >> 12)
        self._sync()

    def add_watchpoint(self, va: int, length: int = 4, access: str = "w",
                       process: int | None = None,
                       tool: ToolApi | None = None) -> int:
        self._require_loaded()
        if access not in ("r", "w", "rw"):
            raise FrameworkError(f"bad watch access {access!r}")
        wp = _Watchpoint(self._ids(), va, length, access, process,
                         tool._h if tool else None)
        self.watchpoints[wp.id] = wp
        for page in wp.pages():
            self.protector.protect(process, page)
        self._sync()
        return wp.id

    def remove_watchpoint(self, wp_id: int) -> None:
        wp = self.watchpoints.pop(wp_id, None)
        if wp is None:
            raise UnknownId(f"no watchpoint {wp_id}")
        for page in wp.pages():
            self.protector.unprotect(wp.process, page)
        self._sync()

    def trace_function(self, addr: int, process: int | None = None,
                       tool: ToolApi | None = None) -> int:
        self._require_loaded()
        tr = _FuncTrace(self._ids(), addr, process, tool._h if tool else None)
        bp = _Breakpoint(self._ids(), addr, "soft", process, False,
                         "func_entry", tool._h if tool else None,
                         trace_id=tr.id)
        self._arm_soft(bp)
        self.breakpoints[bp.id] = bp
        tr.entry_bp = bp.id
        self.traces[tr.id] = tr
        self._sync()
        return tr.id

    def untrace_function(self, trace_id: int) -> None:
        tr = self.traces.pop(trace_id, None)
        if tr is None:
            raise UnknownId(f"no function trace {trace_id}")
        for bp_id in [tr.entry_bp, *tr.ret_bps.values()]:
            bp = self.breakpoints.pop(bp_id, None)
            if bp is not None:
                self._disarm_soft(bp)
        self._sync()

    def request_stop(self, reason: str = "requested") -> None:
        """Ask the drive loop to return "stopped" at the next clean
        boundary.  Safe to call from inside any handler."""
        self._stop_requested = reason

    # -- soft breakpoint plumbing -------------------------------------------

    def _arm_soft(self, bp: _Breakpoint) -> None:
        self._require_loaded()
        w = self.walk_guest(bp.va, execute=True)
        if not w.ok:
            raise GuestMemoryFault(bp.va, w.err)
        if w.pa in self._soft_by_pa:
            raise BreakpointExists(f"site {w.pa:#x} already trapped")
        bp.pa = w.pa
        if bp.pool_pa is None:
            bp.pool_pa = self.memguard.pool_alloc(1, align=1)
        m = self.machine
        m.write_phys(bp.pool_pa, m.read_phys(w.pa, 1))
        bp.armed = True
        self._soft_by_pa[w.pa] = bp
        # mid-emulation every site holds its live original byte; the
        # re-arm pass at the end of the emulation plants the trap
        if not self._in_emulation:
            m.write_phys(w.pa, bytes([self.TRAP_BYTE]))

    def _disarm_soft(self, bp: _Breakpoint) -> None:
        if not bp.armed:
            return
        m = self.machine
        m.write_phys(bp.pa, m.read_phys(bp.pool_pa, 1))
        self._soft_by_pa.pop(bp.pa, None)
        bp.armed = False

    # -- execution controls -------------------------------------------------

    def _controls(self) -> ExecutionControls:
        bm = (1 << 3) | (1 << 14)  # trap bytes and page protections
        io = 0
        ext = False
        syscall = False
        for sub in self.subs:
            if sub.tool and sub.tool.evicted:
                continue
            k = sub.kind
            if k is EventKind.EXCEPTION:
                if sub.condition and sub.condition.vector is not None:
                    bm |= 1 << sub.condition.vector
                else:
                    bm |= (1 << 64) - 1
            elif k is EventKind.IO_PORT:
                if sub.condition and sub.condition.port is not None:
                    io |= 1 << sub.condition.port
                else:
                    io |= (1 << 256) - 1
            elif k is EventKind.INTERRUPT:
                ext = True
            elif k in (EventKind.SYSCALL_ENTRY, EventKind.SYSCALL_EXIT):
                syscall = True
        if syscall:
            bm |= 1 << 8
        return ExecutionControls(exception_bitmap=bm, io_bitmap=io,
                                 ptbr_write_exit=True,
                                 external_interrupt_exit=ext)

    def _sync(self) -> None:
        """Refresh controls and projected protections after any change
        to subscriptions or instrumentation."""
        if not self.loaded:
            return
        self.vmcs.set_controls(self._controls())
        frames_wanted = any(s.kind is EventKind.IO_MMAP for s in self.subs
                            if not (s.tool and s.tool.evicted))
        have = bool(self.protector.frame_refs)
        if frames_wanted and not have:
            for f in sorted(FB_FRAMES):
                self.protector.protect_frame(f)
        elif not frames_wanted and have:
            for f in sorted(FB_FRAMES):
                self.protector.unprotect_frame(f)
        if not self._in_emulation:
            self.protector.unapply()
            self.protector.apply()

    # -- event dispatch -----------------------------------------------------

    def _matches(self, sub: _Subscription, ev: Event) -> bool:
        if sub.kind is not ev.kind:
            return False
        c = sub.condition
        if c is None:
            return True
        for f in _CONDITION_FIELDS.get(ev.kind, ()):
            want = getattr(c, f)
            if want is not None and ev.fields.get(f) != want:
                return False
        return True

    def _emit(self, kind: EventKind, fields: dict) -> Consume | None:
        m = self.machine
        ev = Event(kind, m.retired, m.pc, m.cr[Cr.PTBR], fields)
        for sub in list(self.subs):
            if sub.tool and sub.tool.evicted:
                continue
            if not self._matches(sub, ev):
                continue
            self._cur_events += 1
            if sub.tool is None:
                r = sub.handler(ev)
            else:
                sub.tool.begin_window()
                try:
                    r = sub.handler(ev)
                except Exception as e:
                    self._evict(sub.tool, f"{type(e).__name__}: {e}")
                    continue
                finally:
                    sub.tool.end_window()
            if isinstance(r, Consume):
                return r
        return None

    def _evict(self, handle: _ToolHandle, reason: str) -> None:
        """Remove a misbehaving tool and everything it installed; the
        guest and the remaining tools continue undisturbed."""
        handle.evicted = True
        handle.eviction_reason = reason
        self.evictions.append((handle.name, reason))
        self.subs = [s for s in self.subs if s.tool is not handle]
        for bp_id in [i for i, b in self.breakpoints.items()
                      if b.tool is handle]:
            bp = self.breakpoints.pop(bp_id)
            if bp.style == "soft":
                self._disarm_soft(bp)
            else:
                self.protector.unprotect(bp.process, bp.va >> 12)
        for wp_id in [i for i, w in self.watchpoints.items()
                      if w.tool is handle]:
            wp = self.watchpoints.pop(wp_id)
            for page in wp.pages():
                self.protector.unprotect(wp.process, page)
        for tr_id in [i for i, t in self.traces.items()
                      if t.tool is handle]:
            tr = self.traces.pop(tr_id)
            for bp_id in [tr.entry_bp, *tr.ret_bps.values()]:
                bp = self.breakpoints.pop(bp_id, None)
                if bp is not None:
                    self._disarm_soft(bp)
        self._sync()

    # -- guest-truthful memory access ---------------------------------------

    def _guest_u32(self, pa: int) -> int:
        v = self.memguard.masquerade_u32(pa)
        # the protector only clears P on slots that had it set, and the
        # supervision overlays already carry P, so restoring the bit
        # reproduces the guest view exactly
        if pa in self.protector.applied:
            v |= PTE_P
        return v

    def walk_guest(self, va: int, *, write: bool = False,
                   execute: bool = False, user: bool = False):
        m = self.machine
        return walk_page_table(self._guest_u32, m.ram_size, m.cr[Cr.PTBR],
                               m.cr[Cr.PGEN], va, write=write,
                               execute=execute, user=user)

    def read_physical(self, pa: int, n: int) -> bytes:
        """Physical read as the guest would see it: hidden frames,
        protected slots and trap bytes are all presented undone."""
        self._require_loaded()
        out = bytearray(self.memguard.masquerade_read(pa, n))
        for slot in self.protector.applied:
            if pa <= slot < pa + n:  # P lives in the slot's first byte
                out[slot - pa] |= PTE_P
        for bp in self._soft_by_pa.values():
            if pa <= bp.pa < pa + n:
                out[bp.pa - pa] = self.machine.read_phys(bp.pool_pa, 1)[0]
        return bytes(out)

    def write_physical(self, pa: int, data: bytes) -> None:
        self._require_loaded()
        m = self.machine
        for i, b in enumerate(data):
            site = self._soft_by_pa.get(pa + i)
            if site is not None and not self._in_emulation:
                m.write_phys(site.pool_pa, bytes([b]))
                data = data[:i] + bytes([self.TRAP_BYTE]) + data[i + 1:]
        touched = range(pa >> 12, ((pa + max(len(data), 1) - 1) >> 12) + 1)
        if any(p in self.memguard.pt_pages for p in touched):
            if self._in_emulation:
                m.write_phys(pa, data)
                self._tables_dirty = True
            else:
                self.protector.unapply()
                m.write_phys(pa, data)
                self.memguard.rebuild()
                self.protector.apply()
        elif any(p in self.memguard.reserved for p in touched):
            self._write_reserved(pa, data)
        else:
            m.write_phys(pa, data)

    def _write_reserved(self, pa: int, data: bytes) -> None:
        # route each byte range to where the guest-level content lives:
        # the bound substitute frame, or the reserve-time snapshot
        mg = self.memguard
        m = self.machine
        off = 0
        while off < len(data):
            a = pa + off
            page = a >> 12
            chunk = min(len(data) - off, PAGE_SIZE - (a & 0xFFF))
            piece = data[off:off + chunk]
            if page in mg.reserved and mg.snapshot:
                sub = mg.substitute_for.get(page)
                if sub is not None:
                    m.write_phys((sub << 12) | (a & 0xFFF), piece)
                else:
                    buf = bytearray(mg.snapshot[page])
                    buf[a & 0xFFF:(a & 0xFFF) + chunk] = piece
                    mg.snapshot[page] = bytes(buf)
            else:
                m.write_phys(a, piece)
            off += chunk

    def guest_digest(self) -> str:
        """State digest as an unsupervised machine would report it.

        Mirrors Machine.digest() field for field, but hashes the
        masqueraded view of RAM, so hidden frames, substitutions and
        planted trap bytes do not show.  While the instrumentation is
        transparent this equals the digest of a native run stopped at
        the same boundary."""
        self._require_loaded()
        m = self.machine
        h = hashlib.sha256()
        h.update(struct.pack("<8I", *m.regs))
        h.update(struct.pack("<IBBBB", m.pc, m.flag_z, m.flag_n,
                             1 if m.user_mode else 0,
                             1 if m.if_enabled else 0))
        h.update(struct.pack("<8I", *m.cr))
        h.update(struct.pack("<QBI", m.retired, 1 if m.halted else 0,
                             m.timer_divisor))
        fifo = bytes(m.kbd_fifo)
        h.update(struct.pack("<I", len(fifo)))
        h.update(fifo)
        h.update(struct.pack("<I", len(m.debug_out)))
        h.update(bytes(m.debug_out))
        lines = sorted(m.irq_pending)
        h.update(struct.pack(f"<I{len(lines)}I", len(lines), *lines))
        h.update(self.read_physical(0, m.ram_size))
        return h.hexdigest()

    def guest_read(self, va: int, n: int) -> bytes:
        self._require_loaded()
        out = bytearray()
        off = 0
        while off < n:
            w = self.walk_guest(va + off)
            if not w.ok:
                raise GuestMemoryFault(va + off, w.err)
            chunk = min(n - off, PAGE_SIZE - ((va + off) & 0xFFF))
            out += self.read_physical(w.pa, chunk)
            off += chunk
        return bytes(out)

    def guest_read_u32(self, va: int) -> int:
        return int.from_bytes(self.guest_read(va, 4), "little")

    def guest_write(self, va: int, data: bytes) -> None:
        self._require_loaded()
        off = 0
        while off < len(data):
            w = self.walk_guest(va + off)
            if not w.ok:
                raise GuestMemoryFault(va + off, w.err)
            chunk = min(len(data) - off, PAGE_SIZE - ((va + off) & 0xFFF))
            self.write_physical(w.pa, data[off:off + chunk])
            off += chunk

    def read_guest_regs(self) -> dict:
        m = self.machine
        return {"regs": list(m.regs), "pc": m.pc,
                "flag_z": m.flag_z, "flag_n": m.flag_n,
                "user_mode": m.user_mode, "if_enabled": m.if_enabled,
                "cr": list(m.cr), "retired": m.retired,
                "halted": m.halted}

    def write_guest_regs(self, regs: dict | None = None,
                         pc: int | None = None) -> None:
        m = self.machine
        if regs:
            for idx, v in regs.items():
                m.regs[int(idx)] = v & 0xFFFFFFFF
        if pc is not None:
            m.pc = pc & 0xFFFFFFFF

    def disassemble_guest(self, va: int, count: int = 8) -> list:
        raw = self.guest_read(va, count * isa.MAX_INSTR_LEN)
        return isa.disassemble(raw, base=va, max_count=count)

    # -- the one-instruction emulation primitive ----------------------------

    def _store_value(self, ins) -> int | None:
        m = self.machine
        if ins.op is Op.ST:
            return m.regs[ins.b]
        if ins.op is Op.PUSH:
            return m.regs[ins.a]
        if ins.op is Op.CALL:
            return (m.pc + isa.CALL_LEN) & 0xFFFFFFFF
        return None

    def _emulate_one(self, emit_bp: bool = True):
        """Lift every protection, execute exactly one guest instruction
        natively, emit the precise events it deserves, re-arm.

        Returns the machine step outcome; a Fault means the instruction
        faulted on guest-owned grounds and must be delivered."""
        m = self.machine
        mg = self.memguard
        ptbr_before = m.cr[Cr.PTBR]
        for bp in self._soft_by_pa.values():
            m.write_phys(bp.pa, m.read_phys(bp.pool_pa, 1))
        self.protector.unapply()
        lifted = mg.lift()
        self._in_emulation = True
        self._tables_dirty = False

        stores_pa: list[tuple[int, int]] = []
        try:
            pk = m.peek_instruction()
            if pk.fault is not None:
                outcome = Fault(*pk.fault)
            else:
                ins = pk.instr
                if emit_bp:
                    self._transparent_hits(ptbr_before)
                    # a soft site here will execute its original byte now
                    # and never trap for this pass; dispatch it directly
                    wf = mg.walk_raw(m.pc, execute=True)
                    site = self._soft_by_pa.get(wf.pa) if wf.ok else None
                    if site is not None:
                        if site.process is None \
                                or site.process == ptbr_before:
                            site.hits += 1
                            self._dispatch_trap_purpose(site)
                        if site.one_shot and site.id in self.breakpoints:
                            self.breakpoints.pop(site.id, None)
                            self._disarm_soft(site)
                if ins.op is Op.HLT and not m.user_mode:
                    # never executed while watched, same as the exit
                    # path; the boundary stays in front of it
                    outcome = Halted()
                else:
                    loads, stores = trace.footprint(m, ins)
                    self._footprint_events(ins, loads, stores)
                    for a, size in stores:
                        w = mg.walk_guest(a, write=True)
                        if w.ok:
                            stores_pa.append((w.pa, size))
                    outcome = m.step(peeked=pk, deliver_irqs=False)
        finally:
            self._in_emulation = False

        ptbr_now = m.cr[Cr.PTBR]
        tables_touched = self._tables_dirty or any(
            p in mg.pt_pages
            for pa, sz in stores_pa
            for p in range(pa >> 12, ((pa + sz - 1) >> 12) + 1))
        if ptbr_now != ptbr_before or tables_touched:
            mg.rebuild()
        else:
            mg.relock(lifted)
        self.protector.apply()
        for bp in list(self._soft_by_pa.values()):
            m.write_phys(bp.pool_pa, m.read_phys(bp.pa, 1))
            m.write_phys(bp.pa, bytes([self.TRAP_BYTE]))
        if ptbr_now != ptbr_before:
            self._emit(EventKind.PROCESS_SWITCH,
                       {"old": ptbr_before, "new": ptbr_now})
        return outcome

    def _transparent_hits(self, space: int) -> None:
        m = self.machine
        for bp in list(self.breakpoints.values()):
            if bp.style != "transparent" or bp.va != m.pc:
                continue
            if bp.process is not None and bp.process != space:
                continue
            bp.hits += 1
            self._emit(EventKind.BREAKPOINT_HIT,
                       {"id": bp.id, "va": bp.va, "style": "transparent"})
            if bp.one_shot:
                self.breakpoints.pop(bp.id, None)
                self.protector.unprotect(bp.process, bp.va >> 12)

    def _footprint_events(self, ins, loads, stores) -> None:
        mg = self.memguard
        space = self.machine.cr[Cr.PTBR]
        sval = self._store_value(ins)
        mmap_subs = any(s.kind is EventKind.IO_MMAP for s in self.subs
                        if not (s.tool and s.tool.evicted))
        for ranges, acc in ((loads, "r"), (stores, "w")):
            for a, size in ranges:
                for wp in list(self.watchpoints.values()):
                    if wp.process is not None and wp.process != space:
                        continue
                    if acc not in wp.access:
                        continue
                    if a < wp.va + wp.length and wp.va < a + size:
                        wp.hits += 1
                        self._emit(EventKind.WATCHPOINT_HIT,
                                   {"id": wp.id, "va": a, "size": size,
                                    "access": "read" if acc == "r"
                                    else "write",
                                    "value": sval if acc == "w" else None})
                if not mmap_subs:
                    continue
                w = mg.walk_guest(a, write=(acc == "w"))
                if w.ok and FB_BASE <= w.pa < FB_BASE + FB_SIZE:
                    self._emit(EventKind.IO_MMAP,
                               {"va": a, "pa": w.pa, "size": size,
                                "access": "read" if acc == "r" else "write",
                                "value": sval if acc == "w" else None})

    # -- exit handling ------------------------------------------------------

    def run(self, until_retired: int | None = None,
            max_exits: int = 1_000_000) -> str:
        """Drive the guest.  Returns "halt", "triple", "boundary" (the
        retired target was reached), "stopped" (a handler asked), or
        "exit-budget"."""
        self._require_loaded()
        if self._stop_requested:
            self._stop_requested = None
            return "stopped"
        if self.vmcs.exited:
            self.vmcs.resume()
        for _ in range(max_exits):
            ex = self.vmcs.run(until_retired)
            if isinstance(ex, BoundaryStop):
                return "boundary"
            if isinstance(ex, TripleFaultExit):
                return "triple"
            if isinstance(ex, HltExit):
                return "halt"
            self._handle_exit(ex)
            if self._halt_pending:
                self._halt_pending = False
                return "halt"
            if self._stop_requested:
                self._stop_requested = None
                return "stopped"
        return "exit-budget"

    def run_to_halt(self) -> str:
        r = self.run()
        while r in ("stopped", "boundary"):
            r = self.run()
        return r

    def _handle_exit(self, ex) -> None:
        self._cur_events = 0
        self._cur_injected = False
        led = self.ledger
        led["total"] += 1
        kind = type(ex).__name__
        led["by_kind"][kind] = led["by_kind"].get(kind, 0) + 1
        if isinstance(ex, ExceptionExit):
            if ex.vector == 3:
                self._on_trap(ex)
            elif ex.vector == 8:
                self._on_syscall(ex)
            elif ex.vector == 14:
                self._on_page_fault(ex)
            else:
                self._genuine_fault(ex.vector, ex.error_code, ex.fault_va)
                self.vmcs.resume()
        elif isinstance(ex, IoPortExit):
            self._on_io(ex)
        elif isinstance(ex, PtbrWriteExit):
            self._on_ptbr(ex)
        elif isinstance(ex, ExternalInterruptExit):
            self._on_interrupt(ex)
        if self._cur_events:
            led["abstracted"] += 1
        elif self._cur_injected:
            led["reinjected"] += 1
        else:
            led["internal"] += 1

    def _genuine_fault(self, vector: int, err: int, va: int) -> None:
        """Announce, then deliver to the guest through its own table."""
        self._emit(EventKind.EXCEPTION,
                   {"vector": vector, "error_code": err, "fault_va": va})
        self.machine.inject_exception(vector, err, va)
        self._cur_injected = True

    def _finish_emulation(self, outcome) -> None:
        if isinstance(outcome, Fault):
            self._genuine_fault(outcome.vector, outcome.error_code,
                                outcome.fault_va)
        elif isinstance(outcome, Halted):
            self._halt_pending = True
        self.vmcs.resume()

    def _on_trap(self, ex: ExceptionExit) -> None:
        m = self.machine
        w = self.memguard.walk_raw(m.pc, execute=True)
        bp = self._soft_by_pa.get(w.pa) if w.ok else None
        if bp is None:
            # a trap instruction the guest itself planted
            self._genuine_fault(3, ex.error_code, ex.fault_va)
            self.vmcs.resume()
            return
        if bp.process is None or bp.process == m.cr[Cr.PTBR]:
            bp.hits += 1
            self._dispatch_trap_purpose(bp)
        if bp.one_shot and bp.id in self.breakpoints:
            self.breakpoints.pop(bp.id, None)
            self._disarm_soft(bp)
        outcome = self._emulate_one(emit_bp=False)
        self._finish_emulation(outcome)

    def _dispatch_trap_purpose(self, bp: _Breakpoint) -> None:
        if bp.purpose == "user":
            self._emit(EventKind.BREAKPOINT_HIT,
                       {"id": bp.id, "va": bp.va, "style": "soft"})
        elif bp.purpose == "func_entry":
            self._on_func_entry(bp)
        elif bp.purpose == "func_ret":
            self._on_func_ret(bp)
        elif bp.purpose == "syscall_ret":
            self._on_syscall_ret(bp)

    def _on_func_entry(self, bp: _Breakpoint) -> None:
        m = self.machine
        tr = self.traces.get(bp.trace_id)
        if tr is None:
            return
        sp = m.regs[isa.SP]
        try:
            ret = self.guest_read_u32(sp)
        except GuestMemoryFault:
            return
        self._emit(EventKind.FUNCTION_ENTRY,
                   {"addr": tr.addr,
                    "caller": (ret - isa.CALL_LEN) & 0xFFFFFFFF,
                    "ret_va": ret, "sp": sp})
        # the return site sees sp popped by one slot; match on that
        tr.pending.setdefault(ret, []).append(((sp + 4) & 0xFFFFFFFF,
                                               m.retired))
        if ret not in tr.ret_bps:
            rbp = _Breakpoint(self._ids(), ret, "soft", bp.process, False,
                              "func_ret", bp.tool, trace_id=tr.id)
            try:
                self._arm_soft(rbp)
            except (GuestMemoryFault, BreakpointExists):
                tr.pending[ret].pop()
                return
            self.breakpoints[rbp.id] = rbp
            tr.ret_bps[ret] = rbp.id

    def _on_func_ret(self, bp: _Breakpoint) -> None:
        m = self.machine
        tr = self.traces.get(bp.trace_id)
        if tr is None:
            return
        pending = tr.pending.get(bp.va, [])
        sp = m.regs[isa.SP]
        for i in range(len(pending) - 1, -1, -1):
            if pending[i][0] == sp:
                pending.pop(i)
                self._emit(EventKind.FUNCTION_EXIT,
                           {"addr": tr.addr, "retval": m.regs[0]})
                break
        if not pending:
            tr.pending.pop(bp.va, None)
            rbp_id = tr.ret_bps.pop(bp.va, None)
            if rbp_id is not None:
                dead = self.breakpoints.pop(rbp_id, None)
                if dead is not None:
                    self._disarm_soft(dead)

    def _on_syscall(self, ex: ExceptionExit) -> None:
        m = self.machine
        number = m.regs[0]
        self._emit(EventKind.SYSCALL_ENTRY,
                   {"number": number,
                    "args": [m.regs[1], m.regs[2], m.regs[3]]})
        if any(s.kind is EventKind.SYSCALL_EXIT for s in self.subs
               if not (s.tool and s.tool.evicted)):
            space = m.cr[Cr.PTBR]
            ret_va = (m.pc + 1) & 0xFFFFFFFF
            key = (space, ret_va)
            self._syscall_pending.setdefault(key, []).append(number)
            if key not in self._syscall_ret_bps:
                rbp = _Breakpoint(self._ids(), ret_va, "soft", space, False,
                                  "syscall_ret", None)
                try:
                    self._arm_soft(rbp)
                    self.breakpoints[rbp.id] = rbp
                    self._syscall_ret_bps[key] = rbp.id
                except (GuestMemoryFault, BreakpointExists):
                    self._syscall_pending[key].pop()
        # the gate would have retired natively: account its tick, then
        # deliver through the guest table with the saved pc past the gate
        m.retire_one()
        m.inject_exception(8, 0, 0)
        self._cur_injected = True
        self.vmcs.resume()

    def _on_syscall_ret(self, bp: _Breakpoint) -> None:
        m = self.machine
        key = (m.cr[Cr.PTBR], bp.va)
        stack = self._syscall_pending.get(key, [])
        if stack:
            number = stack.pop()
            self._emit(EventKind.SYSCALL_EXIT,
                       {"number": number, "retval": m.regs[0]})
        if not stack:
            self._syscall_pending.pop(key, None)
            rbp_id = self._syscall_ret_bps.pop(key, None)
            if rbp_id is not None:
                dead = self.breakpoints.pop(rbp_id, None)
                if dead is not None:
                    self._disarm_soft(dead)

    def _on_page_fault(self, ex: ExceptionExit) -> None:
        m = self.machine
        va = ex.fault_va
        if self.protector.covers(va >> 12):
            self._finish_emulation(self._emulate_one())
            return
        if ex.error_code & ERR_WRITE:
            gw = self.walk_guest(va, write=True, user=m.user_mode)
            if gw.ok:
                # the guest walk says this write is legal; the fault is
                # ours (cleared W or P on a supervised slot)
                self._finish_emulation(self._emulate_one())
                return
        self._genuine_fault(14, ex.error_code, va)
        self.vmcs.resume()

    def _on_io(self, ex: IoPortExit) -> None:
        m = self.machine
        if ex.access == "read":
            value = m.port_read(ex.port)  # device first; reads may pop state
            verdict = self._emit(EventKind.IO_PORT,
                                 {"port": ex.port, "access": "read",
                                  "value": value})
            m.regs[ex.reg] = (verdict.replacement if verdict else value) \
                & 0xFFFFFFFF
        else:
            verdict = self._emit(EventKind.IO_PORT,
                                 {"port": ex.port, "access": "write",
                                  "value": ex.value})
            if verdict is None:
                m.port_write(ex.port, ex.value)
        self.vmcs.resume(skip=isa.instr_length(Op.IN))

    def _on_ptbr(self, ex: PtbrWriteExit) -> None:
        self.protector.unapply()
        self.machine.cr_write(Cr.PTBR, ex.new_value)
        self.memguard.rebuild()
        self.protector.apply()
        if ex.new_value != ex.old_value:
            self._emit(EventKind.PROCESS_SWITCH,
                       {"old": ex.old_value, "new": ex.new_value})
        self.vmcs.resume(skip=isa.instr_length(Op.MOVCR))

    def _on_interrupt(self, ex: ExternalInterruptExit) -> None:
        verdict = self._emit(EventKind.INTERRUPT, {"vector": ex.line})
        if verdict is None:
            self.machine.inject_exception(ex.line, 0, 0)
            self._cur_injected = True
        self.vmcs.resume()

    # -- stepping -----------------------------------------------------------

    def single_step(self) -> dict:
        """One guest instruction from the current boundary.  A pending
        deliverable interrupt is folded in: delivery plus the first
        handler instruction count as the one step.  At the guest's HLT
        the result reports halted but the instruction stays unexecuted,
        matching the run() verdict."""
        self._require_loaded()
        m = self.machine
        if m.halted:
            raise FrameworkError("guest already halted")
        m.poll_inputs()
        line = m.deliverable_irq()
        if line is not None:
            m.irq_pending.discard(line)
            self._emit(EventKind.INTERRUPT, {"vector": line})
            m.inject_exception(line, 0, 0)
        outcome = self._emulate_one()
        if isinstance(outcome, Fault):
            self._genuine_fault(outcome.vector, outcome.error_code,
                                outcome.fault_va)
        return {"retired": m.retired, "pc": m.pc,
                "process": m.cr[Cr.PTBR],
                "halted": m.halted or isinstance(outcome, Halted)}

    # -- bookkeeping --------------------------------------------------------

    def ledger_balanced(self) -> bool:
        led = self.ledger
        return led["total"] == (led["abstracted"] + led["internal"]
                                + led["reinjected"])
