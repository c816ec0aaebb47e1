"""Reserved-frame concealment and page-table write protection.

The framework hides its working data in a handful of physical frames
near the top of RAM and keeps the guest honest about them:

  * pool: a bump allocator over the reserved frames.  Their content is
    snapshotted at reserve() time and put back at unload, so nothing the
    framework scribbles there survives into the unsupervised machine.

  * write protection: every leaf PTE that maps a page-table page gets
    its W bit cleared.  A guest store into a live page table then page
    faults, the framework emulates the store, and rebuild() re-derives
    the protected set from the new table contents.

  * substitution: a guest PTE naming a reserved frame is rewritten to
    name a substitute frame seeded with the reserved frame's pristine
    content.  The binding persists for the whole supervised run, so
    unmapping and remapping the same frame shows stable data.  At
    unload the substitute's content moves into the reserved frame and
    the guest PTE goes back, leaving RAM byte-identical to a run that
    never had a framework loaded.

masquerade_read() builds the guest-truthful view of physical memory
(original W bits, original PTE values, logical reserved-frame content)
for introspection paths that must not show the plumbing.

Protocol note: rebuild(), lift() and unload_restore() compare raw slot
values against their own records.  A caller layering additional PTE
edits on top (page presence traps and the like) must remove those edits
before calling in here and re-apply them afterwards.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .isa import Cr
from .machine import (
    PAGE_SIZE,
    PTE_FRAME_MASK,
    PTE_P,
    PTE_U,
    PTE_W,
    ERR_PROT,
    ERR_WRITE,
    ERR_USER,
    ERR_EXEC,
    Machine,
)

__all__ = [
    "MemGuard",
    "MemGuardError",
    "FrameInUse",
    "MalformedDirectory",
    "SubstitutePoolExhausted",
    "PoolExhausted",
    "Walk",
    "walk_page_table",
]

DIR_SLOTS = 1024
TABLE_SLOTS = 1024


class MemGuardError(Exception):
    pass


class FrameInUse(MemGuardError):
    """A frame requested for reservation is mapped by the live tables."""


class MalformedDirectory(MemGuardError):
    """The page-table tree cannot be supervised as structured."""


class SubstitutePoolExhausted(MemGuardError):
    pass


class PoolExhausted(MemGuardError):
    pass


@dataclass(frozen=True)
class Walk:
    """Result of one software page walk.

    ok/pa describe a successful translation.  On failure err carries the
    page-fault error bits and pa is None.  dir_slot/leaf_slot are the
    physical addresses of the entries consulted (None where the walk
    ended before reaching them) so callers can reason about which slot
    produced a given outcome.
    """

    ok: bool
    va: int
    pa: int | None = None
    err: int | None = None
    dir_slot: int | None = None
    leaf_slot: int | None = None
    de: int | None = None
    te: int | None = None


def walk_page_table(read32, ram_size: int, ptbr: int, pgen: int, va: int, *,
                    write: bool = False, execute: bool = False,
                    user: bool = False) -> Walk:
    """Software page walk over PTEs fetched through read32(pa).

    Independent of the machine's own translation path; checks happen in
    the same order with the same error bits so the two can be compared
    entry for entry.
    """
    va &= 0xFFFFFFFF
    acc = (ERR_WRITE if write else 0) | (ERR_USER if user else 0) \
        | (ERR_EXEC if execute else 0)
    if not pgen:
        if va >= ram_size:
            return Walk(False, va, err=acc)
        return Walk(True, va, pa=va)
    de_addr = ptbr + ((va >> 22) & 0x3FF) * 4
    if de_addr + 4 > ram_size:
        return Walk(False, va, err=acc)
    de = read32(de_addr)
    if not de & PTE_P:
        return Walk(False, va, err=acc, dir_slot=de_addr, de=de)
    if user and not de & PTE_U:
        return Walk(False, va, err=acc | ERR_PROT, dir_slot=de_addr, de=de)
    if write and not de & PTE_W:
        return Walk(False, va, err=acc | ERR_PROT, dir_slot=de_addr, de=de)
    te_addr = (de & PTE_FRAME_MASK) + ((va >> 12) & 0x3FF) * 4
    if te_addr + 4 > ram_size:
        return Walk(False, va, err=acc, dir_slot=de_addr, de=de)
    te = read32(te_addr)
    if not te & PTE_P:
        return Walk(False, va, err=acc, dir_slot=de_addr, de=de,
                    leaf_slot=te_addr, te=te)
    if user and not te & PTE_U:
        return Walk(False, va, err=acc | ERR_PROT, dir_slot=de_addr, de=de,
                    leaf_slot=te_addr, te=te)
    if write and not te & PTE_W:
        return Walk(False, va, err=acc | ERR_PROT, dir_slot=de_addr, de=de,
                    leaf_slot=te_addr, te=te)
    pa = (te & PTE_FRAME_MASK) | (va & 0xFFF)
    if pa >= ram_size:
        return Walk(False, va, err=acc, dir_slot=de_addr, de=de,
                    leaf_slot=te_addr, te=te)
    return Walk(True, va, pa=pa, dir_slot=de_addr, de=de,
                leaf_slot=te_addr, te=te)


class MemGuard:
    DEFAULT_RESERVED = 16
    DEFAULT_SUBSTITUTES = 16

    def __init__(self, m: Machine,
                 reserved_frames: list[int] | None = None,
                 substitute_frames: list[int] | None = None):
        self.m = m
        top = m.ram_size >> 12
        if reserved_frames is None:
            reserved_frames = list(range(top - self.DEFAULT_RESERVED, top))
        if substitute_frames is None:
            lo = top - self.DEFAULT_RESERVED - self.DEFAULT_SUBSTITUTES
            substitute_frames = list(range(lo, top - self.DEFAULT_RESERVED))
        self.reserved = set(reserved_frames)
        self._sub_free = sorted(substitute_frames)
        self.snapshot: dict[int, bytes] = {}
        # reserved frame -> substitute frame, persistent once bound
        self.substitute_for: dict[int, int] = {}
        self.substitute_orig: dict[int, bytes] = {}
        # pte slot pa -> (guest value, value in RAM)
        self.remap: dict[int, tuple[int, int]] = {}
        # pte slot pa -> guest value with W still set
        self.wp_slots: dict[int, int] = {}
        self.pt_pages: set[int] = set()
        # vpage -> (slot pa, guest pte) for every present leaf, rebuilt
        # with the protections; consumers must not cache across rebuilds
        self.leaf_map: dict[int, tuple[int, int]] = {}
        self._pool_cursor = 0
        self._pool_limit = len(self.reserved) * PAGE_SIZE
        self._pool_base = min(self.reserved) << 12 if self.reserved else 0

    # -- reservation and the hidden pool ------------------------------------

    def reserve(self) -> None:
        """Snapshot the reserved frames and claim them.  With paging live
        the current tree must not reference them."""
        if self.snapshot:
            raise MemGuardError("already reserved")
        m = self.m
        for f in self.reserved:
            if (f << 12) + PAGE_SIZE > m.ram_size:
                raise MemGuardError(f"reserved frame {f:#x} beyond RAM")
        if m.cr[Cr.PGEN]:
            for frame in self._frames_referenced(m.cr[Cr.PTBR]):
                if frame in self.reserved:
                    raise FrameInUse(f"frame {frame:#x} is mapped")
        for f in self.reserved:
            self.snapshot[f] = bytes(m.read_phys(f << 12, PAGE_SIZE))

    def _frames_referenced(self, ptbr: int):
        m = self.m
        seen = set()
        for i in range(DIR_SLOTS):
            sa = ptbr + i * 4
            if sa + 4 > m.ram_size:
                break
            de = m.read_phys_u32(sa)
            if not de & PTE_P:
                continue
            tf = (de & PTE_FRAME_MASK) >> 12
            yield tf
            if tf in seen or (tf << 12) + PAGE_SIZE > m.ram_size:
                continue
            seen.add(tf)
            for j in range(TABLE_SLOTS):
                te = m.read_phys_u32((tf << 12) + j * 4)
                if te & PTE_P:
                    yield (te & PTE_FRAME_MASK) >> 12

    def pool_alloc(self, n: int, align: int = 4) -> int:
        """Hand out a physical address inside the reserved region."""
        if not self.snapshot:
            raise MemGuardError("reserve() first")
        p = (self._pool_cursor + align - 1) & ~(align - 1)
        if p + n > self._pool_limit:
            raise PoolExhausted(f"{n} bytes requested, "
                                f"{self._pool_limit - p} free")
        self._pool_cursor = p + n
        return self._pool_base + p

    # -- supervision --------------------------------------------------------

    def rebuild(self, ptbr: int | None = None) -> None:
        """Re-derive all protections from the live tables under ptbr.

        Restores previous edits first, so it is safe after any guest
        change to the tree: a table hooked or unhooked, a PTE rewritten,
        a directory switch.
        """
        m = self.m
        if ptbr is None:
            ptbr = m.cr[Cr.PTBR]
        self._restore_slots()
        self.pt_pages = set()
        self.leaf_map = {}
        if ptbr == 0:
            return  # reset value, nothing mapped through it by convention
        ram_pages = m.ram_size >> 12
        dir_pages = {p for p in {ptbr >> 12, (ptbr + PAGE_SIZE - 1) >> 12}
                     if p < ram_pages}
        if dir_pages & self.reserved:
            raise MalformedDirectory("directory inside a reserved frame")
        dir_entries = []
        tables = set()
        for i in range(DIR_SLOTS):
            sa = ptbr + i * 4
            if sa + 4 > m.ram_size:
                break
            de = m.read_phys_u32(sa)
            if not de & PTE_P:
                continue
            tf = (de & PTE_FRAME_MASK) >> 12
            if tf in self.reserved:
                raise MalformedDirectory(
                    f"directory slot {i} names reserved frame {tf:#x}")
            if tf < ram_pages:
                dir_entries.append((i, tf))
                tables.add(tf)
        self.pt_pages = dir_pages | tables
        # one table frame can back several directory slots; edit each
        # physical slot once but index every virtual page it serves
        processed: set[int] = set()
        for i, tf in dir_entries:
            base = tf << 12
            for j in range(TABLE_SLOTS):
                sa = base + j * 4
                vpage = (i << 10) | j
                if sa in processed:
                    guest = self.guest_pte_at(sa)
                    if guest is None:
                        guest = m.read_phys_u32(sa)
                    if guest & PTE_P:
                        self.leaf_map[vpage] = (sa, guest)
                    continue
                processed.add(sa)
                te = m.read_phys_u32(sa)
                if not te & PTE_P:
                    continue
                self.leaf_map[vpage] = (sa, te)
                frame = (te & PTE_FRAME_MASK) >> 12
                if frame in self.reserved:
                    sub = self._bind_substitute(frame)
                    actual = (te & (PAGE_SIZE - 1)) | (sub << 12)
                    m.write_phys_u32(sa, actual)
                    self.remap[sa] = (te, actual)
                elif frame in self.pt_pages and te & PTE_W:
                    m.write_phys_u32(sa, te & ~PTE_W)
                    self.wp_slots[sa] = te

    def lift(self) -> dict[int, int]:
        """Put guest W bits back so one instruction can run natively.
        Substitutions stay in force.  Follow with relock() of the
        returned slots, or rebuild() when the tables may have changed."""
        m = self.m
        lifted = self.wp_slots
        for sa, guest in lifted.items():
            if m.read_phys_u32(sa) == guest & ~PTE_W:
                m.write_phys_u32(sa, guest)
        self.wp_slots = {}
        return lifted

    def relock(self, lifted: dict[int, int]) -> None:
        """Re-clear W on slots lift() restored.  Any slot that changed in
        the meantime invalidates the fast path and forces a rebuild."""
        m = self.m
        for sa, guest in lifted.items():
            if m.read_phys_u32(sa) != guest:
                self.rebuild()
                return
        for sa, guest in lifted.items():
            m.write_phys_u32(sa, guest & ~PTE_W)
        self.wp_slots = dict(lifted)

    def _restore_slots(self) -> None:
        # a slot whose raw value no longer matches our edit was rewritten
        # by the guest in the meantime; its current value is guest truth
        m = self.m
        for sa, guest in self.wp_slots.items():
            if m.read_phys_u32(sa) == guest & ~PTE_W:
                m.write_phys_u32(sa, guest)
        for sa, (guest, actual) in self.remap.items():
            if m.read_phys_u32(sa) == actual:
                m.write_phys_u32(sa, guest)
        self.wp_slots = {}
        self.remap = {}

    def _bind_substitute(self, frame: int) -> int:
        sub = self.substitute_for.get(frame)
        if sub is not None:
            return sub
        if not self._sub_free:
            raise SubstitutePoolExhausted(
                f"no substitute left for frame {frame:#x}")
        sub = self._sub_free.pop(0)
        m = self.m
        self.substitute_orig[sub] = bytes(m.read_phys(sub << 12, PAGE_SIZE))
        # seed with pristine content: the guest mapped the frame and must
        # read what an unsupervised machine would have shown it
        m.write_phys(sub << 12, self.snapshot[frame])
        self.substitute_for[frame] = sub
        return sub

    # -- introspection ------------------------------------------------------

    def masquerade_read(self, pa: int, n: int) -> bytes:
        """Physical read through the guest-truthful lens: protected slots
        show their original values, reserved frames their logical
        content, borrowed substitute frames their original content."""
        m = self.m
        out = bytearray(m.read_phys(pa, n))

        def splice(at: int, data: bytes) -> None:
            lo, hi = max(at, pa), min(at + len(data), pa + n)
            if lo < hi:
                out[lo - pa:hi - pa] = data[lo - at:hi - at]

        for sa, guest in self.wp_slots.items():
            if sa + 4 > pa and sa < pa + n:
                splice(sa, struct.pack("<I", guest))
        for sa, (guest, _) in self.remap.items():
            if sa + 4 > pa and sa < pa + n:
                splice(sa, struct.pack("<I", guest))
        lo_page, hi_page = pa >> 12, (pa + n - 1) >> 12
        for page in range(lo_page, hi_page + 1):
            if page in self.reserved and self.snapshot:
                sub = self.substitute_for.get(page)
                if sub is not None:
                    splice(page << 12, bytes(m.read_phys(sub << 12, PAGE_SIZE)))
                else:
                    splice(page << 12, self.snapshot[page])
            sub_orig = self.substitute_orig.get(page)
            if sub_orig is not None:
                splice(page << 12, sub_orig)
        return bytes(out)

    def masquerade_u32(self, pa: int) -> int:
        return struct.unpack("<I", self.masquerade_read(pa, 4))[0]

    def guest_pte_at(self, slot_pa: int) -> int | None:
        """The guest-intended value of a protected slot, if any."""
        if slot_pa in self.wp_slots:
            return self.wp_slots[slot_pa]
        if slot_pa in self.remap:
            return self.remap[slot_pa][0]
        return None

    def walk_raw(self, va: int, *, write=False, execute=False,
                 user=False) -> Walk:
        """Walk the tables as the MMU sees them right now."""
        m = self.m
        return walk_page_table(m.read_phys_u32, m.ram_size, m.cr[Cr.PTBR],
                               m.cr[Cr.PGEN], va, write=write,
                               execute=execute, user=user)

    def walk_guest(self, va: int, *, write=False, execute=False,
                   user=False) -> Walk:
        """Walk the tables as the guest believes them to be."""
        m = self.m
        return walk_page_table(self.masquerade_u32, m.ram_size,
                               m.cr[Cr.PTBR], m.cr[Cr.PGEN], va, write=write,
                               execute=execute, user=user)

    def classify_write_fault(self, va: int, user: bool) -> Walk | None:
        """For a write page fault: None when the fault is one the guest
        earned on its own ptes, else the guest-truth walk that proves the
        protection caused it (its pa names the slot-to-be-written)."""
        gw = self.walk_guest(va, write=True, user=user)
        if not gw.ok:
            return None
        return gw

    # -- unload -------------------------------------------------------------

    def unload_restore(self) -> None:
        """Erase every trace: slot edits, pool scribbles, substitutions.
        Afterwards RAM matches an unsupervised run byte for byte."""
        m = self.m
        self._restore_slots()
        self.pt_pages = set()
        for f, data in self.snapshot.items():
            m.write_phys(f << 12, data)
        for frame, sub in self.substitute_for.items():
            m.write_phys(frame << 12, bytes(m.read_phys(sub << 12, PAGE_SIZE)))
            m.write_phys(sub << 12, self.substitute_orig[sub])
        self.substitute_for = {}
        self.substitute_orig = {}
        self.snapshot = {}
        self._pool_cursor = 0
