"""Interactive kernel debugger that lives outside the guest.

HyperDbg registers as a supervision tool, breaks in on a hotkey
scancode, on its own breakpoints and watchpoints, or at any clean
instruction boundary the embedder picks.  While broken in it paints
panels straight into the guest's text framebuffer and undoes every
byte before execution resumes, so a debugged run retires exactly the
instruction stream an unsupervised one would.

Command input and output are pluggable callables, which is how the
same debugger serves a terminal, a scripted test, and a remote
console.  ``read_line()`` returns the next command or None on end of
input; ``write_line(s)`` takes one line of response text.
"""

from __future__ import annotations

from . import osdep
from .core import (
    BreakpointExists,
    Condition,
    Consume,
    EventKind,
    FB_SIZE,
    FrameworkError,
    GuestMemoryFault,
)
from .machine import FB_BASE, PORT_KBD_DATA, PORT_KBD_STATUS
from .osdep import SymbolNotFound, SymbolTable

__all__ = ["HyperDbg", "HOTKEY_SCANCODE"]

# scancode reserved for the debugger; swallowed before the guest sees it
HOTKEY_SCANCODE = 0xFF

COLS = 80
ROWS = 25
_DISASM_ROWS = 8

_HELP = """\
commands:
  c            continue guest execution
  s [n]        single-step n instructions (default 1)
  r            show registers and flags
  b <a> [p]    soft breakpoint at address or symbol, optional process
  w <a> [m]    watchpoint at address, mode r, w or rw (default w)
  d <id>       delete breakpoint, watchpoint or function trace by id
  m <a> <len>  dump guest virtual memory
  e <a> <hex>  write hex bytes to guest virtual memory
  bt           backtrace via the frame-pointer chain
  ps           guest process table
  trace <a>    report entries and returns of the function at a
  sys on|off   report syscall entries and exits
  q            detach the debugger, guest keeps running
  h            this text"""


def _u32(b: bytes) -> int:
    return int.from_bytes(b, "little")


class HyperDbg:
    """One debugger instance bound to one framework."""

    TOOL_NAME = "hyperdbg"

    def __init__(self, fw, symbols: SymbolTable | None = None,
                 read_line=None, write_line=None, draw_ui: bool = True):
        self.fw = fw
        self.symbols = symbols if symbols is not None else SymbolTable()
        self._read_line = read_line if read_line is not None \
            else self._stdin_line
        self._write_line = write_line if write_line is not None \
            else self._stdout_line
        self.draw_ui = draw_ui
        self.api = None
        self.detached = False
        self._subs: list[int] = []
        self._banner: str | None = None
        self._bps: dict[int, int] = {}      # id -> va
        self._wps: dict[int, int] = {}
        self._traces: dict[int, int] = {}
        self._trace_subs: list[int] = []
        self._sys_subs: list[int] = []
        self._fb_backup: bytes | None = None

    # -- wiring -------------------------------------------------------------

    def attach(self) -> "HyperDbg":
        self.api = self.fw.register_tool(
            self.TOOL_NAME, guest_write=True,
            ports={PORT_KBD_DATA, PORT_KBD_STATUS}, interactive=True)
        self._subs = [
            self.api.subscribe(EventKind.IO_PORT, self._on_key,
                               Condition(port=PORT_KBD_DATA, access="read")),
            self.api.subscribe(EventKind.BREAKPOINT_HIT, self._on_break),
            self.api.subscribe(EventKind.WATCHPOINT_HIT, self._on_watch),
        ]
        return self

    def detach(self) -> None:
        """Remove every trace of the debugger; the guest runs on."""
        if self.api is None or self.detached:
            return
        for sid in self._subs + self._trace_subs + self._sys_subs:
            self.api.unsubscribe(sid)
        self._subs, self._trace_subs, self._sys_subs = [], [], []
        for bp in list(self._bps):
            self.api.remove_breakpoint(bp)
        for wp in list(self._wps):
            self.api.remove_watchpoint(wp)
        for tr in list(self._traces):
            self.api.untrace_function(tr)
        self._bps.clear()
        self._wps.clear()
        self._traces.clear()
        self.detached = True

    def run(self, until_retired: int | None = None) -> str:
        """Drive the guest, breaking into the command loop whenever a
        debugger handler asks for a stop.  Returns the final framework
        verdict ("halt", "boundary", "triple", "exit-budget")."""
        while True:
            r = self.fw.run(until_retired=until_retired)
            if r != "stopped":
                return r
            if self.interact() == "detach":
                self.detach()

    # -- event handlers (run inside dispatch, keep them short) --------------

    def _on_key(self, ev):
        if ev.fields.get("value") == HOTKEY_SCANCODE:
            self._banner = f"break: hotkey at retired {ev.retired}"
            self.api.request_stop("hotkey")
            return Consume(replacement=0)
        return None

    def _on_break(self, ev):
        bid = ev.fields.get("id")
        if bid not in self._bps:
            return None  # someone else's breakpoint
        self._banner = (f"break: breakpoint #{bid} at "
                        f"{self.symbols.format(ev.fields['va'])}")
        self.api.request_stop("breakpoint")
        return None

    def _on_watch(self, ev):
        wid = ev.fields.get("id")
        if wid not in self._wps:
            return None
        f = ev.fields
        self._banner = (f"break: watchpoint #{wid} {f['access']} at "
                        f"{self.symbols.format(f['va'])}"
                        + (f" value={f['value']:#x}"
                           if f.get("value") is not None else ""))
        self.api.request_stop("watchpoint")
        return None

    def _on_trace_event(self, ev):
        f = ev.fields
        if ev.kind is EventKind.FUNCTION_ENTRY:
            self._say(f"[trace] enter {self.symbols.format(f['addr'])} "
                      f"from {self.symbols.format(f['caller'])}")
        else:
            self._say(f"[trace] leave {self.symbols.format(f['addr'])} "
                      f"-> {f['retval']:#x}")
        return None

    def _on_sys_event(self, ev):
        f = ev.fields
        if ev.kind is EventKind.SYSCALL_ENTRY:
            args = ", ".join(f"{a:#x}" for a in f["args"])
            self._say(f"[sys] enter #{f['number']} ({args})")
        else:
            self._say(f"[sys] leave #{f['number']} -> {f['retval']:#x}")
        return None

    # -- the command loop ---------------------------------------------------

    def interact(self) -> str:
        """Command loop at a clean instruction boundary.  Returns
        "continue" or "detach"."""
        if self.api is None:
            raise FrameworkError("debugger not attached")
        banner = self._banner or \
            f"break: boundary at retired {self.api.machine_state()['retired']}"
        self._banner = None
        self._paint()
        try:
            self._say(banner)
            self._say(self._where_line())
            while True:
                line = self._read_line()
                if line is None:
                    return "detach"  # end of input: let the guest go
                verdict = self._dispatch(line.strip())
                if verdict is not None:
                    return verdict
        finally:
            self._unpaint()

    def _dispatch(self, line: str) -> str | None:
        if not line:
            return None
        parts = line.split()
        cmd, args = parts[0], parts[1:]
        try:
            if cmd == "c":
                return "continue"
            if cmd == "q":
                return "detach"
            if cmd == "h":
                self._say(_HELP)
            elif cmd == "s":
                self._cmd_step(args)
            elif cmd == "r":
                self._cmd_regs()
            elif cmd == "b":
                self._cmd_break(args)
            elif cmd == "w":
                self._cmd_watch(args)
            elif cmd == "d":
                self._cmd_delete(args)
            elif cmd == "m":
                self._cmd_dump(args)
            elif cmd == "e":
                self._cmd_edit(args)
            elif cmd == "bt":
                self._cmd_backtrace()
            elif cmd == "ps":
                self._cmd_ps()
            elif cmd == "trace":
                self._cmd_trace(args)
            elif cmd == "sys":
                self._cmd_sys(args)
            else:
                self._say(f"unknown command {cmd!r} (h for help)")
        except (ValueError, IndexError):
            self._say("usage error (h for help)")
        except SymbolNotFound as e:
            self._say(f"no such symbol: {e.args[0]}")
        except GuestMemoryFault as e:
            self._say(f"guest memory fault at {e.va:#x}")
        except FrameworkError as e:
            self._say(str(e))
        return None

    # -- commands -----------------------------------------------------------

    def _cmd_step(self, args) -> None:
        n = int(args[0], 0) if args else 1
        st = None
        self._unpaint()
        try:
            for _ in range(max(n, 1)):
                st = self.api.single_step()
                if st["halted"]:
                    break
        finally:
            self._paint()
        if st and st["halted"]:
            self._say("guest halted")
        self._say(self._where_line())

    def _cmd_regs(self) -> None:
        g = self.fw.read_guest_regs()
        r = g["regs"]
        self._say("  ".join(f"r{i}={r[i]:08x}" for i in range(4)))
        self._say("  ".join(f"r{i}={r[i]:08x}" for i in range(4, 8)))
        self._say(f"pc={g['pc']:08x}  z={int(g['flag_z'])} "
                  f"n={int(g['flag_n'])} if={int(g['if_enabled'])} "
                  f"{'user' if g['user_mode'] else 'kernel'}")

    def _cmd_break(self, args) -> None:
        va = self.symbols.resolve(args[0])
        proc = self._resolve_process(args[1]) if len(args) > 1 else None
        try:
            bid = self.api.add_breakpoint(va, process=proc)
        except BreakpointExists:
            self._say(f"breakpoint already present at {va:#x}")
            return
        self._bps[bid] = va
        self._say(f"breakpoint #{bid} at {self.symbols.format(va)}"
                  + (f" (process {proc:#x})" if proc is not None else ""))

    def _cmd_watch(self, args) -> None:
        va = self.symbols.resolve(args[0])
        mode = args[1] if len(args) > 1 else "w"
        if mode not in ("r", "w", "rw"):
            raise ValueError(mode)
        wid = self.api.add_watchpoint(va, length=1, access=mode)
        self._wps[wid] = va
        self._say(f"watchpoint #{wid} ({mode}) at {self.symbols.format(va)}")

    def _cmd_delete(self, args) -> None:
        ident = int(args[0], 0)
        if ident in self._bps:
            self.api.remove_breakpoint(ident)
            del self._bps[ident]
        elif ident in self._wps:
            self.api.remove_watchpoint(ident)
            del self._wps[ident]
        elif ident in self._traces:
            self.api.untrace_function(ident)
            del self._traces[ident]
        else:
            self._say(f"no breakpoint, watchpoint or trace #{ident}")
            return
        self._say(f"deleted #{ident}")

    def _cmd_dump(self, args) -> None:
        va = self.symbols.resolve(args[0])
        n = int(args[1], 0) if len(args) > 1 else 64
        data = self.api.guest_read(va, min(n, 4096))
        for off in range(0, len(data), 16):
            row = data[off:off + 16]
            hexpart = " ".join(f"{b:02x}" for b in row)
            text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in row)
            self._say(f"{va + off:08x}  {hexpart:<47}  {text}")

    def _cmd_edit(self, args) -> None:
        va = self.symbols.resolve(args[0])
        data = bytes.fromhex("".join(args[1:]))
        if not data:
            raise ValueError("no bytes")
        self.api.guest_write(va, data)
        self._say(f"wrote {len(data)} bytes at {self.symbols.format(va)}")

    def _cmd_backtrace(self) -> None:
        g = self.fw.read_guest_regs()
        pc, sp, fp = g["pc"], g["regs"][7], g["regs"][6]
        frames = [pc]
        try:
            name, off = self.symbols.lookup(pc)
        except SymbolNotFound:
            off = -1
        if off == 0:
            # at a function's first instruction the prologue has not
            # run yet; the return address still sits on top of the stack
            try:
                frames.append(_u32(self.api.guest_read(sp, 4)))
            except GuestMemoryFault:
                pass
        for _ in range(64):
            if fp == 0:
                break
            try:
                saved = _u32(self.api.guest_read(fp, 4))
                ret = _u32(self.api.guest_read(fp + 4, 4))
            except GuestMemoryFault:
                break
            frames.append(ret)
            if saved <= fp:  # chain must grow toward higher addresses
                break
            fp = saved
        for i, addr in enumerate(frames):
            self._say(f"#{i}  {addr:08x}  {self.symbols.format(addr)}")

    def _cmd_ps(self) -> None:
        try:
            procs = osdep.process_list(self.api)
        except osdep.UnsupportedGuest:
            self._say("guest publishes no process table")
            return
        except osdep.CorruptList as e:
            self._say(f"process table corrupt: {e}")
            return
        cur = self.api.machine_state()["process"]
        self._say("  pid  name              ptbr      state")
        for p in procs:
            mark = "*" if p.ptbr == cur else " "
            self._say(f"{mark} {p.pid:<4} {p.name:<16}  {p.ptbr:08x}"
                      f"  {p.state_name}")

    def _cmd_trace(self, args) -> None:
        va = self.symbols.resolve(args[0])
        tid = self.api.trace_function(va)
        self._traces[tid] = va
        if not self._trace_subs:
            self._trace_subs = [
                self.api.subscribe(EventKind.FUNCTION_ENTRY,
                                   self._on_trace_event),
                self.api.subscribe(EventKind.FUNCTION_EXIT,
                                   self._on_trace_event),
            ]
        self._say(f"trace #{tid} on {self.symbols.format(va)}")

    def _cmd_sys(self, args) -> None:
        want = args[0] if args else "on"
        if want == "on" and not self._sys_subs:
            self._sys_subs = [
                self.api.subscribe(EventKind.SYSCALL_ENTRY,
                                   self._on_sys_event),
                self.api.subscribe(EventKind.SYSCALL_EXIT,
                                   self._on_sys_event),
            ]
        elif want == "off":
            for sid in self._sys_subs:
                self.api.unsubscribe(sid)
            self._sys_subs = []
        self._say(f"syscall reporting {want}")

    # -- status helpers -----------------------------------------------------

    def _where_line(self) -> str:
        st = self.api.machine_state()
        rows = self.fw.disassemble_guest(st["pc"], 1)
        text = rows[0][1] if rows else "??"
        return (f"retired {st['retired']}  proc {self._proc_name()}  "
                f"pc {self.symbols.format(st['pc'])}: {text}")

    def _proc_name(self) -> str:
        ptbr = self.api.machine_state()["process"]
        try:
            p = osdep.process_by_ptbr(self.api, ptbr)
        except (osdep.UnsupportedGuest, osdep.CorruptList):
            p = None
        return p.name if p else f"{ptbr:#x}"

    def _resolve_process(self, token: str):
        try:
            return int(token, 0)
        except ValueError:
            p = None
            try:
                procs = osdep.process_list(self.api)
                p = next((q for q in procs if q.name == token), None)
            except (osdep.UnsupportedGuest, osdep.CorruptList):
                pass
            if p is None:
                raise ValueError(token)
            return p.ptbr

    # -- framebuffer panels -------------------------------------------------

    def _paint(self) -> None:
        if not self.draw_ui:
            return
        self._fb_backup = self.fw.read_physical(FB_BASE, FB_SIZE)
        st = self.api.machine_state()
        title = (f" HyperDbg  retired {st['retired']}  "
                 f"proc {self._proc_name()}  pc "
                 f"{self.symbols.format(st['pc'])}")
        self._text_row(0, title, 0x70)
        g = self.fw.read_guest_regs()
        r = g["regs"]
        self._text_row(1, "  " + "  ".join(
            f"r{i} {r[i]:08x}" for i in range(4)), 0x1F)
        self._text_row(2, "  " + "  ".join(
            f"r{i} {r[i]:08x}" for i in range(4, 8)), 0x1F)
        try:
            rows = self.fw.disassemble_guest(st["pc"], _DISASM_ROWS)
        except GuestMemoryFault:
            rows = []
        for i in range(_DISASM_ROWS):
            if i < len(rows):
                addr, text = rows[i]
                line = f"  {addr:08x}  {text}"
            else:
                line = ""
            attr = 0x70 if i == 0 else 0x17
            self._text_row(3 + i, line, attr)
        self._text_row(ROWS - 1,
                       " c cont  s step  b break  w watch  bt  ps  m dump"
                       "  q detach  h help", 0x70)

    def _unpaint(self) -> None:
        if self._fb_backup is not None:
            self.fw.write_physical(FB_BASE, self._fb_backup)
            self._fb_backup = None

    def _text_row(self, row: int, text: str, attr: int) -> None:
        cells = bytearray()
        padded = text[:COLS].ljust(COLS)
        for ch in padded:
            cells += bytes((ord(ch) & 0xFF, attr))
        self.fw.write_physical(FB_BASE + row * COLS * 2, bytes(cells))

    # -- default terminal binding -------------------------------------------

    def _stdin_line(self):
        try:
            return input("hdb> ")
        except EOFError:
            return None

    def _stdout_line(self, s: str) -> None:
        print(s)

    def _say(self, s: str) -> None:
        for line in s.split("\n"):
            self._write_line(line)
