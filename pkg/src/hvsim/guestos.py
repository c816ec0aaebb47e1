"""Guest fixture images: small kernels assembled from source at build time.

Shared conventions across fixtures:

  0x0100  reset entry, boot prologue
  0x0400  IVT, 64 little-endian u32 handler addresses
  0x0D00  process descriptor table
  0x0EC0  kernel scratch variables
  0x0F00  kernel info block {magic, proc_list_head, current_proc}
  0x1000  kernel text
  0x8000  kernel page directory
  0x9000  kernel page table (identity maps the first 1 MiB)
  0xB8000 text framebuffer (identity mapped)

All fixtures except boot_min enable paging.  Code runs in kernel mode;
process isolation in two_procs is by address space (per-process page
directory), with scheduling driven by the timer device.  The toy ABI:
syscall number in r0, argument in r1, return value in r0; the gate may
clobber r0..r4.  Syscalls: 1 write-char, 2 getpid, 3 yield, 4 exit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import isa
from .machine import Machine

__all__ = [
    "Fixture",
    "FIXTURES",
    "fixture_names",
    "get_fixture",
    "build_fixture",
    "symbols_text",
    "save_image_file",
    "load_image_file",
    "INFO_BLOCK",
    "INFO_MAGIC",
    "PROC_TABLE",
    "KERNEL_DIR",
]

INFO_BLOCK = 0x0F00
INFO_MAGIC = 0x4B534F47
PROC_TABLE = 0x0D00
VARS = 0x0EC0
KERNEL_DIR = 0x8000
KERNEL_TABLE = 0x9000
KSTACK_TOP = 0x20000

BOOT = f"""
.org 0x100
boot:
    MOVI r7, 0x{KSTACK_TOP:X}
    MOVI r6, 0
    MOVI r0, 0x{KERNEL_DIR:X}
    MOVCR PTBR, r0
    MOVI r0, 1
    MOVCR PGEN, r0
    JMP kmain
"""
BOOT_RETIRED = 7  # instructions from reset until kmain's first


def _words(vals, per_line=8) -> str:
    lines = []
    for i in range(0, len(vals), per_line):
        chunk = vals[i:i + per_line]
        lines.append(".word " + ", ".join(
            v if isinstance(v, str) else f"0x{v:X}" for v in chunk))
    return "\n".join(lines)


def _ivt(entries: dict[int, str]) -> str:
    slots = [entries.get(i, 0) for i in range(64)]
    return f".org 0x400\n{_words(slots)}\n"


def _page_tables(dirs: dict[int, dict[int, int | str]],
                 tables: dict[int, list[int]]) -> str:
    """dirs: dir_base -> {dir_index: table_base_or_entry}; entries get |3.
    tables: table_base -> 1024 raw entry values."""
    out = []
    for base, ents in dirs.items():
        vals = [0] * 1024
        for idx, tb in ents.items():
            vals[idx] = (tb | 0x3) if isinstance(tb, int) else tb
        out.append(f".org 0x{base:X}\n{_words(vals)}")
    for base, vals in tables.items():
        out.append(f".org 0x{base:X}\n{_words(vals)}")
    return "\n".join(out) + "\n"


def _identity_entries(npages=256) -> list[int]:
    vals = [(i << 12) | 0x3 for i in range(npages)]
    return vals + [0] * (1024 - npages)


def _kernel_paging() -> str:
    return _page_tables({KERNEL_DIR: {0: KERNEL_TABLE}},
                        {KERNEL_TABLE: _identity_entries()})


def _descriptor(pid: int, name: str, ptbr: int, state: int,
                stack: int, heap: int, nxt: int) -> str:
    pad = "\\0" * (16 - len(name))
    return (f".word {pid}\n.ascii \"{name}{pad}\"\n"
            f".word 0x{ptbr:X}, {state}, 0x{stack:X}, 0x{heap:X}, 0x{nxt:X}\n")


def _info_block(head: int, current: int) -> str:
    return f".org 0x{INFO_BLOCK:X}\n.word 0x{INFO_MAGIC:X}, 0x{head:X}, 0x{current:X}\n"


def _kernel_only_procs() -> str:
    return (f".org 0x{PROC_TABLE:X}\nkproc:\n"
            + _descriptor(1, "kernel", KERNEL_DIR, 1, KSTACK_TOP, 0x30000, 0)
            + _info_block(PROC_TABLE, PROC_TABLE))


@dataclass(frozen=True)
class Fixture:
    name: str
    source: str
    notes: dict = field(default_factory=dict)


def _boot_min() -> Fixture:
    src = """
.org 0x100
.global kmain
kmain:
    MOVI r0, 1
    OUT 0xE9, r0
    HLT
"""
    return Fixture("boot_min", src, {"debug_out": b"\x01"})


def _counter_loop() -> Fixture:
    src = BOOT + _kernel_paging() + _kernel_only_procs() + """
.org 0x1000
.global kmain
kmain:
    MOVI r2, 0x3000      ; counter cell
    MOVI r4, 0x3080      ; unrelated cell on the same page
    MOVI r3, 7
.global kloop
kloop:
    LD r1, [r2]
    ADDI r1, 1
    ST [r2], r1
    ST [r4], r1          ; unrelated same-page traffic
    ADDI r3, -1
    JNZ kloop
    LD r1, [r2]
    OUT 0xE9, r1
    HLT
"""
    return Fixture("counter_loop", src, {
        "counter_va": 0x3000, "unrelated_va": 0x3080,
        "counter_stores": 7, "debug_out": b"\x07",
    })


def _call_tree() -> Fixture:
    src = BOOT + _kernel_paging() + _kernel_only_procs() + """
.org 0x1000
.global kmain
kmain:
    MOVI r4, 5
kloop:
    CALL f1
    ADDI r4, -1
    JNZ kloop
    MOVI r0, 0x11
    OUT 0xE9, r0
    HLT
.global f1
f1:
    PUSH r6
    MOV r6, r7
    CALL f2
    MOV r7, r6
    POP r6
    RET
.global f2
f2:
    PUSH r6
    MOV r6, r7
    ADDI r5, 1
    MOV r7, r6
    POP r6
    RET
"""
    return Fixture("call_tree", src, {
        "f1_calls": 5, "f2_calls": 5, "debug_out": b"\x11",
    })


def _recursion() -> Fixture:
    src = BOOT + _kernel_paging() + _kernel_only_procs() + """
.org 0x1000
.global kmain
kmain:
    MOVI r0, 3
    CALL fact
    OUT 0xE9, r0
    HLT
.global fact
fact:
    PUSH r6
    MOV r6, r7
    MOVI r1, 1
    CMP r0, r1
    JZ fact_base
    PUSH r0
    ADDI r0, -1
    CALL fact
    POP r1
    ADD r0, r1           ; additive recursion: fact(n) = n + fact(n-1)
    JMP fact_out
.global fact_base
fact_base:
    MOVI r0, 1
fact_out:
    MOV r7, r6
    POP r6
    RET
"""
    return Fixture("recursion", src, {
        "fact_calls": 3, "debug_out": b"\x06",
    })


_PROC_A_ENTRY = 0x40000
_PROC_B_ENTRY = 0x50000
_A_STACK_TOP = 0x4E000
_B_STACK_TOP = 0x5E000
_DESC_KERNEL = PROC_TABLE
_DESC_A = PROC_TABLE + 40
_DESC_B = PROC_TABLE + 80


def _two_procs() -> Fixture:
    dirs = {
        KERNEL_DIR: {0: KERNEL_TABLE},
        0xA000: {0: KERNEL_TABLE, 1: 0xC000},
        0xB000: {0: KERNEL_TABLE, 1: 0xD000},
    }
    tables = {
        KERNEL_TABLE: _identity_entries(),
        0xC000: [0x70000 | 0x3] + [0] * 1023,
        0xD000: [0x71000 | 0x3] + [0] * 1023,
    }
    procs = (
        f".org 0x{PROC_TABLE:X}\n"
        + _descriptor(1, "kernel", KERNEL_DIR, 1, KSTACK_TOP, 0x30000, _DESC_A)
        + _descriptor(2, "procA", 0xA000, 0, _A_STACK_TOP, 0x400000, _DESC_B)
        + _descriptor(3, "procB", 0xB000, 0, _B_STACK_TOP, 0x400000, 0)
        + _info_block(PROC_TABLE, PROC_TABLE)
    )
    # vars: +0 cur idx, +4 spA, +8 spB, +12 doneA, +16 doneB,
    #       +20 descA, +24 descB, +28 dirA, +32 dirB, +36 fb cursor
    vars_sec = (f".org 0x{VARS:X}\n"
                + _words([0, 0, "b_stack_init", 0, 0,
                          _DESC_A, _DESC_B, 0xA000, 0xB000, 0]))
    # procB's first entry goes through the scheduler restore path, so its
    # stack is laid out pre-saved: EFLAGS(IF), EPC, r6..r0
    b_stack = (f".org 0x{_B_STACK_TOP - 36:X}\nb_stack_init:\n"
               + _words([4, "procB_entry", 0, 0, 0, 0, 0, 0, 0]))
    src = BOOT + _ivt({8: "syscall_gate", 32: "sched"}) \
        + _page_tables(dirs, tables) + procs + vars_sec + "\n" + b_stack + f"""
.org 0x1000
.global kmain
kmain:
    MOVI r1, 0x{_DESC_KERNEL:X}
    MOVI r2, 0
    ST [r1+24], r2
    MOVI r1, 0x{_DESC_A:X}
    MOVI r2, 1
    ST [r1+24], r2
    MOVI r1, 0x{INFO_BLOCK + 8:X}
    MOVI r2, 0x{_DESC_A:X}
    ST [r1], r2
    MOVI r0, 500
    OUT 0x40, r0
    MOVI r0, 0xA000
    MOVCR PTBR, r0
    MOVI r0, procA_entry
    MOVCR EPC, r0
    MOVI r0, 4
    MOVCR EFLAGS, r0
    MOVI r7, 0x{_A_STACK_TOP:X}
    IRET

.global sched
sched:
    PUSH r0
    PUSH r1
    PUSH r2
    PUSH r3
    PUSH r4
    PUSH r5
    PUSH r6
    MOVRC r0, EPC
    PUSH r0
    MOVRC r0, EFLAGS
    PUSH r0
    MOVI r1, 0x{VARS:X}
    LD r2, [r1+0]        ; current index
    MOV r3, r2
    ADD r3, r3
    ADD r3, r3
    ADD r3, r1
    ST [r3+4], r7        ; save stack pointer
    MOVI r4, 1
    SUB r4, r2           ; candidate next = 1 - cur
    MOV r3, r4
    ADD r3, r3
    ADD r3, r3
    ADD r3, r1
    LD r5, [r3+12]       ; done[next]
    MOVI r6, 0
    CMP r5, r6
    JZ do_switch
    MOV r3, r2
    ADD r3, r3
    ADD r3, r3
    ADD r3, r1
    LD r5, [r3+12]       ; done[cur]
    CMP r5, r6
    JZ keep_cur
    HLT                  ; nothing left to run
keep_cur:
    MOV r4, r2
do_switch:
    ST [r1+0], r4
    MOV r3, r2
    ADD r3, r3
    ADD r3, r3
    ADD r3, r1
    LD r5, [r3+20]       ; old descriptor
    LD r6, [r3+12]
    ADD r6, r6           ; state: ready 0 or done 2
    ST [r5+24], r6
    MOV r3, r4
    ADD r3, r3
    ADD r3, r3
    ADD r3, r1
    LD r5, [r3+20]       ; new descriptor
    MOVI r6, 1
    ST [r5+24], r6       ; running
    MOVI r6, 0x{INFO_BLOCK + 8:X}
    ST [r6], r5
    LD r6, [r3+28]       ; new page directory
    MOVCR PTBR, r6
    LD r7, [r3+4]        ; new stack pointer
    POP r0
    MOVCR EFLAGS, r0
    POP r0
    MOVCR EPC, r0
    POP r6
    POP r5
    POP r4
    POP r3
    POP r2
    POP r1
    POP r0
    IRET

.global syscall_gate
syscall_gate:
    MOVI r2, 1
    CMP r0, r2
    JZ sys_write
    MOVI r2, 2
    CMP r0, r2
    JZ sys_getpid
    MOVI r2, 3
    CMP r0, r2
    JZ sys_yield
    MOVI r2, 4
    CMP r0, r2
    JZ sys_exit
    IRET
sys_write:
    OUT 0xE9, r1
    MOVI r2, 0xB8000
    MOVI r3, 0x{VARS:X}
    LD r4, [r3+36]
    ADD r2, r4
    MOVI r0, 0x700
    OR r1, r0
    ST [r2], r1
    ADDI r4, 2
    ST [r3+36], r4
    IRET
sys_getpid:
    MOVI r2, 0x{INFO_BLOCK + 8:X}
    LD r2, [r2]
    LD r0, [r2]
    IRET
sys_yield:
    JMP sched
sys_exit:
    MOVI r2, 0x{VARS:X}
    LD r3, [r2+0]
    MOV r4, r3
    ADD r4, r4
    ADD r4, r4
    ADD r4, r2
    MOVI r0, 1
    ST [r4+12], r0       ; done[cur]
    JMP sched

.org 0x{_PROC_A_ENTRY:X}
.global procA_entry
procA_entry:
    MOVI r0, 2
    SYSCALL
    MOVI r5, 3
A_loop:
    MOVI r0, 1
    MOVI r1, 'A'
    SYSCALL
    MOVI r6, 200
A_delay:
    ADDI r6, -1
    JNZ A_delay
    ADDI r5, -1
    JNZ A_loop
    MOVI r2, 0x400000
    MOVI r1, 'A'
    ST [r2], r1          ; touch the private page
    MOVI r0, 4
    SYSCALL
A_hang:
    JMP A_hang

.org 0x{_PROC_B_ENTRY:X}
.global procB_entry
procB_entry:
    MOVI r0, 2
    SYSCALL
    MOVI r5, 3
B_loop:
    MOVI r0, 1
    MOVI r1, 'B'
    SYSCALL
    MOVI r6, 170
B_delay:
    ADDI r6, -1
    JNZ B_delay
    ADDI r5, -1
    JNZ B_loop
    MOVI r2, 0x400000
    MOVI r1, 'B'
    ST [r2], r1
    MOVI r0, 4
    SYSCALL
B_hang:
    JMP B_hang
"""
    return Fixture("two_procs", src, {
        "syscalls": 10, "writes_per_proc": 3,
        "proc_dirs": {"kernel": KERNEL_DIR, "procA": 0xA000, "procB": 0xB000},
        "private_va": 0x400000,
        "private_pa": {"procA": 0x70000, "procB": 0x71000},
    })


def _kbd_echo() -> Fixture:
    # first IN lands at retired 11, then every 3 retired instructions; the
    # echo branch is 6 instructions so the cadence survives echoes.
    src = BOOT + _ivt({3: "brk_handler"}) + _kernel_paging() \
        + _kernel_only_procs() + """
.org 0x1000
.global kmain
kmain:
    MOVI r3, 0
    MOVI r4, 0xB8000
    NOP
    NOP
.global in_poll
in_poll:
    IN r0, 0x60
    CMP r0, r3
    JZ in_poll
echo:
    MOVI r1, 0x700
    OR r0, r1
    ST [r4], r0
    ADDI r4, 2
    NOP
    JMP in_poll
.global brk_handler
brk_handler:
    MOVRC r1, EPC
    ADDI r1, 1
    MOVCR EPC, r1
    MOVI r1, 0x33
    OUT 0xE9, r1
    IRET
"""
    return Fixture("kbd_echo", src, {
        "first_in_retired": 11, "in_period": 3, "halts": False,
    })


def _pf_demo() -> Fixture:
    spare = f".org 0xE000\n{_words([0] * 256 + [0x72000 | 0x3] + [0] * 767)}\n"
    sentinel = ".org 0x72000\n.word 0x13371337\n"
    src = BOOT + _ivt({3: "brk_handler", 14: "pf_handler"}) + _kernel_paging() \
        + _kernel_only_procs() + spare + sentinel + """
.org 0x1000
.global kmain
kmain:
    MOVI r2, 0x500000
    LD r1, [r2]          ; page fault; handler maps it, IRET retries
    OUT 0xE9, r1
    BRK
    MOVI r0, 0xAA
    OUT 0xE9, r0
    HLT
.global pf_handler
pf_handler:
    MOVI r1, 0x8000
    MOVI r0, 0xE003
    ST [r1+4], r0        ; directory slot 1 := spare table
    MOVI r0, 0x14
    OUT 0xE9, r0
    IRET
.global brk_handler
brk_handler:
    MOVRC r1, EPC
    ADDI r1, 1
    MOVCR EPC, r1
    MOVI r1, 0x33
    OUT 0xE9, r1
    IRET
"""
    return Fixture("pf_demo", src, {"debug_out": b"\x14\x37\x33\xAA"})


def _map_reserved() -> Fixture:
    empty_table = f".org 0xE000\n{_words([0] * 1024)}\n"
    src = BOOT + _kernel_paging() + _kernel_only_procs() + empty_table + """
.org 0x1000
.global kmain
kmain:
    MOVI r1, 0x8000
    MOVI r2, 0xE003
    ST [r1+4], r2        ; directory slot 1 := table at 0xE000
    MOVI r1, 0xE000
    MOVI r2, 0xFF0003    ; va 0x600000 -> frame 0xFF0, P|W
    ST [r1+2048], r2
    MOVI r2, 0x600000
    MOVI r1, 0xDEADBEEF
    ST [r2], r1
    LD r3, [r2]
    CMP r3, r1
    JZ mr_ok
    MOVI r0, 'F'
    OUT 0xE9, r0
    HLT
mr_ok:
    MOVI r0, 'P'
    OUT 0xE9, r0
    HLT
"""
    return Fixture("map_reserved", src, {
        "mapped_va": 0x600000, "mapped_frame": 0xFF0,
        "pte_slot": 0xE000 + 2048, "pte_value": 0xFF0003,
        "debug_out": b"P",
    })


_BUILDERS = {
    "boot_min": _boot_min,
    "counter_loop": _counter_loop,
    "call_tree": _call_tree,
    "recursion": _recursion,
    "two_procs": _two_procs,
    "kbd_echo": _kbd_echo,
    "pf_demo": _pf_demo,
    "map_reserved": _map_reserved,
}

FIXTURES = sorted(_BUILDERS)


def fixture_names() -> list[str]:
    return list(FIXTURES)


def get_fixture(name: str) -> Fixture:
    if name not in _BUILDERS:
        raise KeyError(f"no fixture named {name!r}")
    return _BUILDERS[name]()


def build_fixture(name: str, input_schedule=None,
                  ram_size=None) -> tuple[Machine, isa.AssembledImage]:
    fx = get_fixture(name)
    img = isa.assemble(fx.source)
    kw = {"input_schedule": input_schedule}
    if ram_size is not None:
        kw["ram_size"] = ram_size
    m = Machine(**kw)
    m.load_image(img)
    return m, img


def symbols_text(img: isa.AssembledImage) -> str:
    """Render exported symbols as 'HEXADDR NAME' lines, ascending."""
    pairs = sorted(img.symbols.items(), key=lambda kv: kv[1])
    return "\n".join(f"{addr:08X} {name}" for name, addr in pairs) + "\n"


def save_image_file(img: isa.AssembledImage, path: str) -> None:
    """Flat binary image container: repeated (u32 load_addr, u32 len, bytes)."""
    with open(path, "wb") as f:
        for addr, data in img.sections:
            f.write(struct.pack("<II", addr, len(data)))
            f.write(data)


def load_image_file(path: str) -> isa.AssembledImage:
    sections = []
    with open(path, "rb") as f:
        blob = f.read()
    off = 0
    while off < len(blob):
        if off + 8 > len(blob):
            raise ValueError("truncated image header")
        addr, ln = struct.unpack_from("<II", blob, off)
        off += 8
        if off + ln > len(blob):
            raise ValueError("truncated image section")
        sections.append((addr, blob[off:off + ln]))
        off += ln
    entry = sections[0][0] if sections else 0
    return isa.AssembledImage(sections, {}, entry)
