"""Hardware-virtualization layer: late launch, VM exits, VM entries.

A Vmcs attaches to a running machine at any instruction boundary (late
launch) without touching guest state.  `run()` executes the guest until
an intercepted event produces an exit.  Exits are fault-like: the
triggering instruction has NOT been retired and no architectural effect
has happened, so root mode observes the state exactly as it was before
the instruction.  `resume()` re-enters the guest, optionally skipping
the exiting instruction and delivering queued exception injections
through the guest IVT.

Interception is controlled by four execution controls:

  exception_bitmap        64-bit mask; bit v intercepts vector v
  io_bitmap               256-bit mask; bit p intercepts port p (kernel IN/OUT)
  ptbr_write_exit         intercept MOVCR PTBR
  external_interrupt_exit intercept interrupt delivery
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

from .isa import Cr, Op
from .machine import Fault, Halted, Machine, Peek

__all__ = [
    "ExecutionControls",
    "Vmcs",
    "ExceptionExit",
    "ExternalInterruptExit",
    "IoPortExit",
    "PtbrWriteExit",
    "HltExit",
    "BoundaryStop",
    "TripleFaultExit",
    "Exit",
    "VmxError",
    "AlreadyLaunched",
    "VmcsInvalid",
    "NotAtBoundary",
    "PendingWorkRemains",
]


@dataclass
class ExecutionControls:
    exception_bitmap: int = 0
    io_bitmap: int = 0
    ptbr_write_exit: bool = False
    external_interrupt_exit: bool = False

    def copy(self) -> "ExecutionControls":
        return replace(self)


@dataclass(frozen=True)
class ExceptionExit:
    vector: int
    error_code: int
    fault_va: int
    at: int  # guest pc of the faulting instruction


@dataclass(frozen=True)
class ExternalInterruptExit:
    line: int
    at: int


@dataclass(frozen=True)
class IoPortExit:
    port: int
    access: str  # "read" or "write"
    reg: int     # guest register involved
    value: int | None  # written value for "write"; None for "read"
    at: int


@dataclass(frozen=True)
class PtbrWriteExit:
    new_value: int
    old_value: int
    at: int


@dataclass(frozen=True)
class HltExit:
    at: int


@dataclass(frozen=True)
class BoundaryStop:
    """Not an interception: run() reached the requested retired count and
    stopped at a clean instruction boundary."""

    at: int
    retired: int


@dataclass(frozen=True)
class TripleFaultExit:
    """Unrecoverable guest: a fault could not be delivered.  Diagnostic."""

    reason: str
    at: int


Exit = (ExceptionExit | ExternalInterruptExit | IoPortExit | PtbrWriteExit
        | HltExit | TripleFaultExit | BoundaryStop)


class VmxError(Exception):
    pass


class AlreadyLaunched(VmxError):
    pass


class VmcsInvalid(VmxError):
    pass


class NotAtBoundary(VmxError):
    """Operation needs the guest stopped at an exit or entry boundary."""


class PendingWorkRemains(VmxError):
    pass


_RUNNING = "running"
_EXITED = "exited"
_INVALID = "invalid"


@dataclass
class Vmcs:
    machine: Machine
    controls: ExecutionControls
    last_exit: Exit | None = None
    pending_injections: deque = field(default_factory=deque)
    _state: str = _RUNNING

    @classmethod
    def late_launch(cls, m: Machine, controls: ExecutionControls | None = None
                    ) -> "Vmcs":
        """Attach to a machine mid-run.  Guest state is not modified, so
        the digest at launch equals the unvirtualized digest at the same
        retired count."""
        if m._vmcs is not None:
            raise AlreadyLaunched("machine already has a virtualization context")
        v = cls(m, (controls or ExecutionControls()).copy())
        m._vmcs = v
        return v

    # -- state checks -------------------------------------------------------

    def _alive(self) -> None:
        if self._state == _INVALID:
            raise VmcsInvalid("context was unloaded")

    @property
    def exited(self) -> bool:
        return self._state == _EXITED

    # -- the exit loop ------------------------------------------------------

    def run(self, until_retired: int | None = None) -> Exit:
        """Run the guest until the next exit.  All exits are fault-like:
        the instruction at exit.at has not executed.  until_retired stops
        at the first boundary where the virtual clock reaches the target,
        checked before any instruction or delivery work."""
        self._alive()
        if self._state != _RUNNING:
            raise NotAtBoundary("run() after an exit; resume() first")
        m = self.machine
        ctl = self.controls
        while True:
            if until_retired is not None and m.retired >= until_retired:
                return self._exit(BoundaryStop(at=m.pc, retired=m.retired))
            if m.halted:
                return self._exit(TripleFaultExit(
                    reason=m.halt_reason or "halted outside guest control",
                    at=m.pc))
            m.poll_inputs()
            line = m.deliverable_irq()
            if line is not None:
                if ctl.external_interrupt_exit:
                    m.irq_pending.discard(line)
                    return self._exit(ExternalInterruptExit(line=line, at=m.pc))
                out = m.step()  # delivers natively
            else:
                pk = m.peek_instruction()
                ex = self._prefilter(pk)
                if ex is not None:
                    return self._exit(ex)
                if pk.fault is not None:
                    out = Fault(*pk.fault)
                else:
                    out = m.step(peeked=pk)
            if isinstance(out, Fault):
                if (ctl.exception_bitmap >> out.vector) & 1:
                    return self._exit(ExceptionExit(
                        vector=out.vector, error_code=out.error_code,
                        fault_va=out.fault_va, at=m.pc))
                m.inject_exception(out.vector, out.error_code, out.fault_va)
            elif isinstance(out, Halted):
                return self._exit(TripleFaultExit(
                    reason=m.halt_reason, at=m.pc))
            # Retired: keep going

    def _prefilter(self, pk: Peek) -> Exit | None:
        """Intercept before execution.  Only kernel-mode instructions are
        filtered; in user mode the privilege fault wins and flows through
        the exception path."""
        if pk.fault is not None or pk.instr is None:
            return None
        m = self.machine
        ctl = self.controls
        ins = pk.instr
        op = ins.op
        if m.user_mode:
            return None
        if op is Op.HLT:
            return HltExit(at=m.pc)
        if op is Op.IN and (ctl.io_bitmap >> ins.b) & 1:
            return IoPortExit(port=ins.b, access="read", reg=ins.a,
                              value=None, at=m.pc)
        if op is Op.OUT and (ctl.io_bitmap >> ins.a) & 1:
            return IoPortExit(port=ins.a, access="write", reg=ins.b,
                              value=m.regs[ins.b], at=m.pc)
        if op is Op.MOVCR and ins.a == Cr.PTBR and ctl.ptbr_write_exit:
            return PtbrWriteExit(new_value=m.regs[ins.b],
                                 old_value=m.cr[Cr.PTBR], at=m.pc)
        if op is Op.SYSCALL and (ctl.exception_bitmap >> 8) & 1:
            # the gate executes as a trap, but interception is fault-like:
            # exit before any effect
            return ExceptionExit(vector=8, error_code=0, fault_va=0, at=m.pc)
        return None

    def _exit(self, ex: Exit) -> Exit:
        self.last_exit = ex
        self._state = _EXITED
        return ex

    # -- entries ------------------------------------------------------------

    def inject(self, vector: int, error_code: int = 0, fault_va: int = 0) -> None:
        """Queue an exception for delivery at the next resume."""
        self._alive()
        self.pending_injections.append((vector, error_code, fault_va))

    def resume(self, skip: int | None = None) -> None:
        """Re-enter the guest.  skip=N retires the exiting instruction as
        emulated (pc advances N bytes and the virtual clock ticks once);
        skip=None re-executes or continues at the injected target."""
        self._alive()
        if self._state != _EXITED:
            raise NotAtBoundary("resume() without a pending exit")
        m = self.machine
        if skip is not None:
            m.pc = (m.pc + skip) & 0xFFFFFFFF
            m.retire_one()
        while self.pending_injections:
            v, e, f = self.pending_injections.popleft()
            m.inject_exception(v, e, f)
        self._state = _RUNNING

    def set_controls(self, controls: ExecutionControls) -> None:
        """Replace execution controls.  Allowed at any boundary (after an
        exit, or before the next run)."""
        self._alive()
        self.controls = controls.copy()

    def unload(self) -> Machine:
        """Detach.  The machine continues native stepping from its exact
        current state.  Queued injections must be drained first."""
        self._alive()
        if self.pending_injections:
            raise PendingWorkRemains(
                f"{len(self.pending_injections)} queued injections undelivered")
        self.machine._vmcs = None
        self._state = _INVALID
        return self.machine
