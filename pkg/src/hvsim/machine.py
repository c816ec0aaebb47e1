"""Deterministic GISA-32 machine: CPU, two-level MMU, devices, virtual clock.

The virtual clock is the retired instruction count.  All asynchronous
input arrives through an input schedule of (retired_count, scancode)
pairs, so a run is a pure function of the initial RAM image and the
schedule.  `step()` is fault-reporting, not fault-delivering: a faulting
instruction leaves all architectural state untouched and the caller
decides whether to deliver the exception through the guest IVT
(`inject_exception`) or to handle it elsewhere.  That split is the seam
a virtualization layer hooks into.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass

from . import isa
from .isa import Cr, Instruction, Op

__all__ = [
    "Machine",
    "Retired",
    "Fault",
    "Halted",
    "StepOutcome",
    "MachineError",
    "PhysicalOutOfBounds",
    "MachineHalted",
    "RAM_SIZE_DEFAULT",
    "FB_BASE",
    "FB_SIZE",
    "PAGE_SIZE",
    "PORT_TIMER",
    "PORT_KBD_DATA",
    "PORT_KBD_STATUS",
    "PORT_DEBUG",
    "VEC_BRK",
    "VEC_SYSCALL",
    "VEC_GP",
    "VEC_PF",
    "IRQ_TIMER",
    "IRQ_KBD",
    "PTE_P",
    "PTE_W",
    "PTE_U",
]

RAM_SIZE_DEFAULT = 16 * 1024 * 1024
PAGE_SIZE = 4096

FB_BASE = 0xB8000
FB_COLS = 80
FB_ROWS = 25
FB_SIZE = FB_COLS * FB_ROWS * 2

PORT_TIMER = 0x40
PORT_KBD_DATA = 0x60
PORT_KBD_STATUS = 0x64
PORT_DEBUG = 0xE9

VEC_BRK = 3
VEC_SYSCALL = 8
VEC_GP = 13
VEC_PF = 14
IRQ_TIMER = 32
IRQ_KBD = 33

IVT_ENTRIES = 64

RESET_PC = 0x100
RESET_IVT = 0x400

# page table entry bits; bits 12..31 hold the frame number
PTE_P = 0x1
PTE_W = 0x2
PTE_U = 0x4
PTE_FRAME_MASK = 0xFFFFF000

# page fault error code bits
ERR_PROT = 0x1   # set: permission denied on a present entry; clear: not present
ERR_WRITE = 0x2
ERR_USER = 0x4
ERR_EXEC = 0x8

# EFLAGS image layout used by interrupt delivery and IRET
FL_Z = 0x1
FL_N = 0x2
FL_IF = 0x4

_PRIVILEGED = {Op.HLT, Op.IN, Op.OUT, Op.MOVCR, Op.IRET, Op.STI, Op.CLI}

_MASK32 = 0xFFFFFFFF


class MachineError(Exception):
    pass


class PhysicalOutOfBounds(MachineError):
    def __init__(self, pa: int, size: int):
        super().__init__(f"physical access [0x{pa:X}, 0x{pa + size:X}) out of RAM")


class MachineHalted(MachineError):
    pass


@dataclass(frozen=True)
class Retired:
    """The instruction committed (or an interrupt was delivered)."""


@dataclass(frozen=True)
class Fault:
    """The instruction faulted and was NOT retired; state is unchanged."""

    vector: int
    error_code: int = 0
    fault_va: int = 0


@dataclass(frozen=True)
class Halted:
    """The machine halted (HLT, or an unrecoverable delivery failure)."""


StepOutcome = Retired | Fault | Halted

_RETIRED = Retired()
_HALTED = Halted()


class _VmFault(Exception):
    """Internal carrier for a fault detected mid-execution."""

    def __init__(self, vector: int, err: int = 0, va: int = 0):
        self.vector = vector
        self.err = err
        self.va = va


@dataclass(frozen=True)
class Peek:
    """Result of decoding at pc without executing."""

    instr: Instruction | None
    length: int
    fault: tuple[int, int, int] | None  # (vector, error_code, fault_va)


class Machine:
    def __init__(self, ram_size: int = RAM_SIZE_DEFAULT,
                 input_schedule: list[tuple[int, int]] | None = None):
        self.ram = bytearray(ram_size)
        self.ram_size = ram_size
        self.regs = [0] * isa.NUM_REGS
        self.pc = RESET_PC
        self.flag_z = 0
        self.flag_n = 0
        self.user_mode = False
        self.if_enabled = False
        self.cr = [0] * 8
        self.cr[Cr.IVT] = RESET_IVT
        self.retired = 0
        self.halted = False
        self.halt_reason = ""
        self.irq_pending: set[int] = set()
        # devices
        self.timer_divisor = 0
        self.kbd_fifo: deque[int] = deque()
        self.debug_out = bytearray()
        # input schedule, sorted by arrival point on the virtual clock
        self.input_schedule = sorted(input_schedule or [])
        self._schedule_pos = 0
        # virtualization layer hook; exactly one may attach
        self._vmcs = None

    # -- image loading ------------------------------------------------------

    def load_image(self, image: isa.AssembledImage) -> None:
        for addr, data in image.sections:
            self.write_phys(addr, data)

    # -- physical memory ----------------------------------------------------

    def read_phys(self, pa: int, n: int) -> bytes:
        if pa < 0 or pa + n > self.ram_size:
            raise PhysicalOutOfBounds(pa, n)
        return bytes(self.ram[pa:pa + n])

    def write_phys(self, pa: int, data: bytes) -> None:
        if pa < 0 or pa + len(data) > self.ram_size:
            raise PhysicalOutOfBounds(pa, len(data))
        self.ram[pa:pa + len(data)] = data

    def read_phys_u32(self, pa: int) -> int:
        if pa < 0 or pa + 4 > self.ram_size:
            raise PhysicalOutOfBounds(pa, 4)
        return struct.unpack_from("<I", self.ram, pa)[0]

    def write_phys_u32(self, pa: int, v: int) -> None:
        if pa < 0 or pa + 4 > self.ram_size:
            raise PhysicalOutOfBounds(pa, 4)
        struct.pack_into("<I", self.ram, pa, v & _MASK32)

    # -- address translation ------------------------------------------------

    def translate(self, va: int, write: bool = False, execute: bool = False,
                  user: bool | None = None) -> int:
        """Translate one byte address; raises _VmFault(VEC_PF, ...) on failure.

        With paging disabled addresses map identically.  Out-of-RAM
        physical targets surface as not-present page faults to keep the
        machine total.
        """
        va &= _MASK32
        if user is None:
            user = self.user_mode
        acc = (ERR_WRITE if write else 0) | (ERR_USER if user else 0) \
            | (ERR_EXEC if execute else 0)
        if not self.cr[Cr.PGEN]:
            if va >= self.ram_size:
                raise _VmFault(VEC_PF, acc, va)
            return va
        de_addr = self.cr[Cr.PTBR] + ((va >> 22) & 0x3FF) * 4
        if de_addr + 4 > self.ram_size:
            raise _VmFault(VEC_PF, acc, va)
        de = struct.unpack_from("<I", self.ram, de_addr)[0]
        if not de & PTE_P:
            raise _VmFault(VEC_PF, acc, va)
        if user and not de & PTE_U:
            raise _VmFault(VEC_PF, acc | ERR_PROT, va)
        if write and not de & PTE_W:
            raise _VmFault(VEC_PF, acc | ERR_PROT, va)
        te_addr = (de & PTE_FRAME_MASK) + ((va >> 12) & 0x3FF) * 4
        if te_addr + 4 > self.ram_size:
            raise _VmFault(VEC_PF, acc, va)
        te = struct.unpack_from("<I", self.ram, te_addr)[0]
        if not te & PTE_P:
            raise _VmFault(VEC_PF, acc, va)
        if user and not te & PTE_U:
            raise _VmFault(VEC_PF, acc | ERR_PROT, va)
        if write and not te & PTE_W:
            raise _VmFault(VEC_PF, acc | ERR_PROT, va)
        pa = (te & PTE_FRAME_MASK) | (va & 0xFFF)
        if pa >= self.ram_size:
            raise _VmFault(VEC_PF, acc, va)
        return pa

    def _read_virt(self, va: int, n: int, execute: bool = False) -> bytes:
        out = bytearray()
        off = 0
        while off < n:
            pa = self.translate(va + off, execute=execute)
            chunk = min(n - off, PAGE_SIZE - ((va + off) & 0xFFF))
            out += self.ram[pa:pa + chunk]
            off += chunk
        return bytes(out)

    def _read_virt_u32(self, va: int) -> int:
        if (va & 0xFFF) <= PAGE_SIZE - 4:
            pa = self.translate(va)
            return struct.unpack_from("<I", self.ram, pa)[0]
        return struct.unpack("<I", self._read_virt(va, 4))[0]

    def _write_virt_u32(self, va: int, v: int) -> None:
        v &= _MASK32
        if (va & 0xFFF) <= PAGE_SIZE - 4:
            pa = self.translate(va, write=True)
            struct.pack_into("<I", self.ram, pa, v)
            return
        data = struct.pack("<I", v)
        for i in range(4):
            pa = self.translate(va + i, write=True)
            self.ram[pa] = data[i]

    # -- devices ------------------------------------------------------------

    def port_read(self, port: int) -> int:
        if port == PORT_KBD_DATA:
            v = self.kbd_fifo.popleft() if self.kbd_fifo else 0
            # the interrupt line tracks buffered bytes: draining the
            # FIFO (or polling it empty) drops the latch
            if not self.kbd_fifo:
                self.irq_pending.discard(IRQ_KBD)
            return v
        if port == PORT_KBD_STATUS:
            return 1 if self.kbd_fifo else 0
        if port == PORT_TIMER:
            return self.timer_divisor
        return 0

    def port_write(self, port: int, value: int) -> None:
        value &= _MASK32
        if port == PORT_TIMER:
            self.timer_divisor = value
        elif port == PORT_DEBUG:
            self.debug_out.append(value & 0xFF)
        # other ports ignore writes

    def raise_irq(self, line: int) -> None:
        if line not in (IRQ_TIMER, IRQ_KBD):
            raise MachineError(f"no such interrupt line {line}")
        self.irq_pending.add(line)

    # -- virtual clock and input --------------------------------------------

    def poll_inputs(self) -> None:
        """Move schedule entries that are due onto the keyboard FIFO.

        Runs at the start of every instruction boundary; an entry with
        at == retired is visible to the instruction executing at that
        boundary.
        """
        sched = self.input_schedule
        while self._schedule_pos < len(sched) and \
                sched[self._schedule_pos][0] <= self.retired:
            self.kbd_fifo.append(sched[self._schedule_pos][1] & 0xFF)
            self.irq_pending.add(IRQ_KBD)
            self._schedule_pos += 1

    def press_key(self, code: int) -> None:
        """A key arriving right now: FIFO plus the latched line, exactly
        what a schedule entry due at this boundary would have done."""
        self.kbd_fifo.append(code & 0xFF)
        self.irq_pending.add(IRQ_KBD)

    def retire_one(self) -> None:
        """Account one retired instruction; latches the timer line when due."""
        self.retired += 1
        if self.timer_divisor and self.retired % self.timer_divisor == 0:
            self.irq_pending.add(IRQ_TIMER)

    def deliverable_irq(self) -> int | None:
        if self.if_enabled and self.irq_pending:
            return min(self.irq_pending)
        return None

    # -- exception and interrupt delivery -----------------------------------

    def _deliver(self, vector: int, err: int, fva: int) -> None:
        """Transfer to the guest handler for `vector` through the IVT.

        A missing table or a zero handler is a double fault: the machine
        halts with a diagnostic.  Vector 8 is trap-like (EPC points past
        the gate instruction); everything else is fault-like.
        """
        ivt_slot = self.cr[Cr.IVT] + vector * 4
        if vector >= IVT_ENTRIES or ivt_slot + 4 > self.ram_size:
            self._double_fault(vector)
            return
        handler = struct.unpack_from("<I", self.ram, ivt_slot)[0]
        if handler == 0:
            self._double_fault(vector)
            return
        self.cr[Cr.FAR] = fva & _MASK32
        self.cr[Cr.ERR] = err & _MASK32
        self.cr[Cr.EPC] = (self.pc + 1 if vector == VEC_SYSCALL else self.pc) & _MASK32
        self.cr[Cr.EFLAGS] = (FL_Z if self.flag_z else 0) \
            | (FL_N if self.flag_n else 0) | (FL_IF if self.if_enabled else 0)
        self.cr[Cr.EMODE] = 1 if self.user_mode else 0
        self.if_enabled = False
        self.user_mode = False
        self.pc = handler

    def _double_fault(self, vector: int) -> None:
        self.halted = True
        self.halt_reason = f"double fault delivering vector {vector}"

    def inject_exception(self, vector: int, error_code: int = 0,
                         fault_va: int = 0) -> None:
        """Deliver an exception exactly as native hardware delivery would."""
        self._deliver(vector, error_code, fault_va)

    # -- instruction fetch and execution ------------------------------------

    def peek_instruction(self) -> Peek:
        """Fetch and decode at pc without side effects."""
        try:
            first = self._read_virt(self.pc, 1, execute=True)
            try:
                op = Op(first[0])
            except ValueError:
                return Peek(None, 1, (VEC_GP, 0, 0))
            ln = isa.instr_length(op)
            raw = first if ln == 1 else self._read_virt(self.pc, ln, execute=True)
            try:
                ins, _ = isa.decode(raw)
            except isa.DecodeError:
                return Peek(None, ln, (VEC_GP, 0, 0))
            return Peek(ins, ln, None)
        except _VmFault as f:
            return Peek(None, 0, (f.vector, f.err, f.va))

    def step(self, peeked: Peek | None = None,
             deliver_irqs: bool = True) -> StepOutcome:
        """Execute one instruction boundary.

        Order: drain due inputs, deliver one pending interrupt if IF is
        set (costs no retired instruction), then fetch/decode/execute.
        Faults are reported without being delivered and without any
        state change.  deliver_irqs=False skips the input/delivery phase
        so a caller that already resolved the boundary can commit the
        pending instruction and nothing else.
        """
        if self.halted:
            raise MachineHalted("step on a halted machine")
        if deliver_irqs:
            self.poll_inputs()
            line = self.deliverable_irq()
            if line is not None:
                self.irq_pending.discard(line)
                self._deliver(line, 0, 0)
                return _HALTED if self.halted else _RETIRED
        pk = peeked if peeked is not None else self.peek_instruction()
        if pk.fault is not None:
            return Fault(*pk.fault)
        try:
            return self._execute(pk.instr, pk.length)
        except _VmFault as f:
            return Fault(f.vector, f.err, f.va)

    def _execute(self, ins: Instruction, ln: int) -> StepOutcome:
        """Commit one instruction.  Raises _VmFault before any state change."""
        op = ins.op
        if self.user_mode and op in _PRIVILEGED:
            raise _VmFault(VEC_GP)
        regs = self.regs
        next_pc = (self.pc + ln) & _MASK32

        if op is Op.NOP:
            pass
        elif op is Op.MOVI:
            regs[ins.a] = ins.b & _MASK32
        elif op is Op.MOV:
            regs[ins.a] = regs[ins.b]
        elif op is Op.LD:
            regs[ins.a] = self._read_virt_u32((regs[ins.b] + ins.c) & _MASK32)
        elif op is Op.ST:
            self._write_virt_u32((regs[ins.a] + ins.c) & _MASK32, regs[ins.b])
        elif op is Op.ADD:
            regs[ins.a] = self._alu((regs[ins.a] + regs[ins.b]) & _MASK32)
        elif op is Op.SUB:
            regs[ins.a] = self._alu((regs[ins.a] - regs[ins.b]) & _MASK32)
        elif op is Op.AND:
            regs[ins.a] = regs[ins.a] & regs[ins.b]
        elif op is Op.OR:
            regs[ins.a] = regs[ins.a] | regs[ins.b]
        elif op is Op.XOR:
            regs[ins.a] = regs[ins.a] ^ regs[ins.b]
        elif op is Op.ADDI:
            regs[ins.a] = self._alu((regs[ins.a] + ins.b) & _MASK32)
        elif op is Op.CMP:
            self._alu((regs[ins.a] - regs[ins.b]) & _MASK32)
        elif op is Op.JMP:
            next_pc = ins.a
        elif op is Op.JZ:
            if self.flag_z:
                next_pc = ins.a
        elif op is Op.JNZ:
            if not self.flag_z:
                next_pc = ins.a
        elif op is Op.CALL:
            sp = (regs[isa.SP] - 4) & _MASK32
            self._write_virt_u32(sp, next_pc)
            regs[isa.SP] = sp
            next_pc = ins.a
        elif op is Op.RET:
            next_pc = self._read_virt_u32(regs[isa.SP])
            regs[isa.SP] = (regs[isa.SP] + 4) & _MASK32
        elif op is Op.PUSH:
            sp = (regs[isa.SP] - 4) & _MASK32
            self._write_virt_u32(sp, regs[ins.a])
            regs[isa.SP] = sp
        elif op is Op.POP:
            v = self._read_virt_u32(regs[isa.SP])
            regs[isa.SP] = (regs[isa.SP] + 4) & _MASK32
            regs[ins.a] = v
        elif op is Op.IN:
            regs[ins.a] = self.port_read(ins.b) & _MASK32
        elif op is Op.OUT:
            self.port_write(ins.a, regs[ins.b])
        elif op is Op.SYSCALL:
            # executes as a trap: delivery through the IVT costs this one
            # retired instruction, like any other committed control transfer
            self._deliver(VEC_SYSCALL, 0, 0)
            if self.halted:
                return _HALTED
            self.retire_one()
            return _RETIRED
        elif op is Op.IRET:
            fl = self.cr[Cr.EFLAGS]
            self.flag_z = 1 if fl & FL_Z else 0
            self.flag_n = 1 if fl & FL_N else 0
            self.if_enabled = bool(fl & FL_IF)
            self.user_mode = bool(self.cr[Cr.EMODE])
            next_pc = self.cr[Cr.EPC]
        elif op is Op.MOVCR:
            self.cr_write(ins.a, regs[ins.b])
        elif op is Op.MOVRC:
            regs[ins.a] = self.cr_read(ins.b)
        elif op is Op.STI:
            self.if_enabled = True
        elif op is Op.CLI:
            self.if_enabled = False
        elif op is Op.HLT:
            self.halted = True
            self.halt_reason = "hlt"
            return _HALTED
        elif op is Op.BRK:
            raise _VmFault(VEC_BRK)
        else:
            raise _VmFault(VEC_GP)

        self.pc = next_pc
        self.retire_one()
        return _RETIRED

    def _alu(self, result: int) -> int:
        self.flag_z = 1 if result == 0 else 0
        self.flag_n = 1 if result >> 31 else 0
        return result

    # -- control registers ---------------------------------------------------

    def cr_read(self, idx: int) -> int:
        # EFLAGS/EPC/EMODE hold the image saved by the last delivery; a
        # handler reads and edits these to steer where IRET lands
        return self.cr[idx]

    def cr_write(self, idx: int, value: int) -> None:
        value &= _MASK32
        if idx == Cr.PGEN:
            self.cr[idx] = value & 1
        else:
            self.cr[idx] = value

    # -- state digest --------------------------------------------------------

    def digest(self) -> str:
        """SHA-256 over all architecturally visible state.

        Covers registers, control registers, flags, mode, RAM (the
        framebuffer is a RAM window), device state, latched interrupt
        lines, the halt flag and the retired count.  The input schedule
        itself is configuration, not state, and stays out.
        """
        h = hashlib.sha256()
        h.update(struct.pack("<8I", *self.regs))
        h.update(struct.pack("<IBBBB", self.pc, self.flag_z, self.flag_n,
                             1 if self.user_mode else 0,
                             1 if self.if_enabled else 0))
        h.update(struct.pack("<8I", *self.cr))
        h.update(struct.pack("<QBI", self.retired, 1 if self.halted else 0,
                             self.timer_divisor))
        fifo = bytes(self.kbd_fifo)
        h.update(struct.pack("<I", len(fifo)))
        h.update(fifo)
        h.update(struct.pack("<I", len(self.debug_out)))
        h.update(bytes(self.debug_out))
        lines = sorted(self.irq_pending)
        h.update(struct.pack(f"<I{len(lines)}I", len(lines), *lines))
        h.update(self.ram)
        return h.hexdigest()
