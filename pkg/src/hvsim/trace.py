"""Native run helpers and an instrumented instruction tracer.

The tracer drives a bare machine (no virtualization layer involved) and
records one entry per committed instruction with its pc, opcode and
memory footprint.  Counts derived from these records serve as
independent oracles for everything the analysis layer reports:
breakpoint hit counts, watchpoint hit counts, syscall counts, process
switch counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .isa import Cr, Instruction, Op
from .machine import Fault, Halted, Machine, Retired

__all__ = [
    "run_native",
    "record_run",
    "footprint",
    "InstrRecord",
    "RunTrace",
    "StepLimitExceeded",
]

DEFAULT_STEP_LIMIT = 5_000_000


class StepLimitExceeded(Exception):
    pass


def run_native(m: Machine, max_steps: int = DEFAULT_STEP_LIMIT,
               until_retired: int | None = None) -> None:
    """Run to halt, delivering faults to the guest like bare hardware.

    With `until_retired` the run stops once the retired count reaches
    that value (the machine sits at an instruction boundary).
    """
    for _ in range(max_steps):
        if m.halted:
            return
        if until_retired is not None and m.retired >= until_retired:
            return
        out = m.step()
        if isinstance(out, Fault):
            m.inject_exception(out.vector, out.error_code, out.fault_va)
        elif isinstance(out, Halted):
            return
    raise StepLimitExceeded(f"no halt within {max_steps} steps")


def footprint(m: Machine, ins: Instruction) -> tuple[list[tuple[int, int]],
                                                     list[tuple[int, int]]]:
    """(loads, stores) as (va, size) ranges the instruction will touch.

    Computed from pre-execution register state; fetch is not included.
    """
    loads: list[tuple[int, int]] = []
    stores: list[tuple[int, int]] = []
    op = ins.op
    if op is Op.LD:
        loads.append(((m.regs[ins.b] + ins.c) & 0xFFFFFFFF, 4))
    elif op is Op.ST:
        stores.append(((m.regs[ins.a] + ins.c) & 0xFFFFFFFF, 4))
    elif op in (Op.PUSH, Op.CALL):
        stores.append(((m.regs[isa.SP] - 4) & 0xFFFFFFFF, 4))
    elif op in (Op.POP, Op.RET):
        loads.append((m.regs[isa.SP], 4))
    return loads, stores


@dataclass(frozen=True)
class InstrRecord:
    retired_before: int
    pc: int
    op: Op
    loads: tuple[tuple[int, int], ...]
    stores: tuple[tuple[int, int], ...]
    ptbr: int            # value before execution
    new_ptbr: int | None  # set for PTBR loads


@dataclass
class RunTrace:
    records: list[InstrRecord] = field(default_factory=list)
    irq_deliveries: list[tuple[int, int]] = field(default_factory=list)
    faults: list[tuple[int, int]] = field(default_factory=list)  # (pc, vector)

    def count_pc(self, pc: int) -> int:
        return sum(1 for r in self.records if r.pc == pc)

    def count_op(self, op: Op) -> int:
        return sum(1 for r in self.records if r.op == op)

    def count_stores_overlapping(self, va: int, length: int) -> int:
        n = 0
        for r in self.records:
            if any(a < va + length and va < a + size for a, size in r.stores):
                n += 1
        return n

    def count_loads_overlapping(self, va: int, length: int) -> int:
        n = 0
        for r in self.records:
            if any(a < va + length and va < a + size for a, size in r.loads):
                n += 1
        return n

    def count_ptbr_changes(self) -> int:
        return sum(1 for r in self.records
                   if r.new_ptbr is not None and r.new_ptbr != r.ptbr)


def record_run(m: Machine, max_steps: int = DEFAULT_STEP_LIMIT,
               until_retired: int | None = None) -> RunTrace:
    """Like run_native but records every committed instruction."""
    tr = RunTrace()
    for _ in range(max_steps):
        if m.halted:
            return tr
        if until_retired is not None and m.retired >= until_retired:
            return tr
        m.poll_inputs()
        line = m.deliverable_irq()
        if line is not None:
            before = m.retired
            out = m.step()
            tr.irq_deliveries.append((before, line))
            if isinstance(out, Halted):
                return tr
            continue
        pk = m.peek_instruction()
        if pk.fault is not None:
            tr.faults.append((m.pc, pk.fault[0]))
            m.inject_exception(*pk.fault)
            continue
        loads, stores = footprint(m, pk.instr)
        rec = InstrRecord(
            retired_before=m.retired, pc=m.pc, op=pk.instr.op,
            loads=tuple(loads), stores=tuple(stores),
            ptbr=m.cr[Cr.PTBR],
            new_ptbr=m.regs[pk.instr.b] & 0xFFFFFFFF
            if pk.instr.op is Op.MOVCR and pk.instr.a == Cr.PTBR else None,
        )
        out = m.step(peeked=pk)
        if isinstance(out, Retired):
            tr.records.append(rec)
        elif isinstance(out, Fault):
            tr.faults.append((m.pc, out.vector))
            m.inject_exception(out.vector, out.error_code, out.fault_va)
        else:
            return tr
    raise StepLimitExceeded(f"no halt within {max_steps} steps")
