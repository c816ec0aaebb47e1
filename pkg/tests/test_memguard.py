"""Reserved frames, substitution, page-table write protection, walker."""

import random
import struct

import pytest

from hvsim import guestos, trace
from hvsim.isa import Cr
from hvsim.machine import PTE_P, PTE_W, PTE_U, Machine, _VmFault
from hvsim.memguard import (
    FrameInUse,
    MalformedDirectory,
    MemGuard,
    MemGuardError,
    PoolExhausted,
    SubstitutePoolExhausted,
    Walk,
    walk_page_table,
)

RESERVED_LO = 0xFF0
SUB_LO = 0xFE0


def booted(name="counter_loop"):
    """Fixture run to completion: paging on, tables live, machine idle."""
    m, img = guestos.build_fixture(name)
    trace.run_native(m)
    return m, img


def probe_native(m, va, write, execute, user):
    try:
        return ("ok", m.translate(va, write=write, execute=execute, user=user))
    except _VmFault as f:
        return ("fault", f.err)


def probe_walk(m, va, write, execute, user):
    g = MemGuard(m)
    w = g.walk_raw(va, write=write, execute=execute, user=user)
    return ("ok", w.pa) if w.ok else ("fault", w.err)


class TestWalkerParity:
    def test_against_mmu_on_live_tables(self):
        m, _ = booted("two_procs")
        rng = random.Random(7)
        interesting = [0, 0x100, 0x8000, 0x9000, 0x400000, 0x401000,
                       0x4E000, 0x500000, 0xB8000, 0xFFFFFF, 0x1000000,
                       0xFFFFFFFF, 0x600000]
        for i in range(1200):
            va = (interesting[i % len(interesting)] + rng.randrange(0x2000)
                  if i % 3 else rng.randrange(0, 1 << 32))
            flags = (bool(rng.getrandbits(1)), bool(rng.getrandbits(1)),
                     bool(rng.getrandbits(1)))
            assert probe_native(m, va, *flags) == probe_walk(m, va, *flags), \
                hex(va)

    def test_paging_disabled_identity(self):
        m = Machine()
        assert probe_walk(m, 0x1234, False, False, False) == ("ok", 0x1234)
        st, _ = probe_walk(m, m.ram_size, False, False, False)
        assert st == "fault"

    def test_slot_addresses_reported(self):
        m, _ = booted()
        w = MemGuard(m).walk_raw(0x8000)
        assert w.ok
        assert w.dir_slot == m.cr[Cr.PTBR] + (0x8000 >> 22) * 4
        table = (w.de & ~0xFFF)
        assert w.leaf_slot == table + ((0x8000 >> 12) & 0x3FF) * 4


class TestReserve:
    def test_snapshot_and_pool(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        a = g.pool_alloc(1)
        b = g.pool_alloc(4000)
        c = g.pool_alloc(1)
        assert a != c and b % 4 == 0
        assert RESERVED_LO << 12 <= a < m.ram_size
        m.write_phys(b, b"backup" * 10)
        assert g.masquerade_read(b, 6) == b"\x00" * 6  # hidden from view

    def test_pool_requires_reserve(self):
        m, _ = booted()
        with pytest.raises(MemGuardError):
            MemGuard(m).pool_alloc(4)

    def test_pool_exhaustion(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        g.pool_alloc(15 * 4096)
        with pytest.raises(PoolExhausted):
            g.pool_alloc(2 * 4096)

    def test_refuses_mapped_frame(self):
        m, _ = booted("map_reserved")  # guest mapped 0xFF0 while running
        with pytest.raises(FrameInUse):
            MemGuard(m).reserve()

    def test_trusts_unpaged_machine(self):
        m = Machine()
        MemGuard(m).reserve()

    def test_double_reserve_rejected(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        with pytest.raises(MemGuardError):
            g.reserve()


class TestWriteProtection:
    def leaf_slot(self, m, va):
        return MemGuard(m).walk_raw(va).leaf_slot

    def test_pt_mappings_lose_w(self):
        m, _ = booted()
        dir_slot_va = guestos.KERNEL_DIR     # identity mapped
        table_va = guestos.KERNEL_TABLE
        g = MemGuard(m)
        g.reserve()
        g.rebuild()
        assert g.pt_pages == {guestos.KERNEL_DIR >> 12,
                              guestos.KERNEL_TABLE >> 12}
        for va in (dir_slot_va, table_va):
            slot = self.leaf_slot(m, va)
            assert slot in g.wp_slots
            assert not m.read_phys_u32(slot) & PTE_W
            assert g.masquerade_u32(slot) & PTE_W
        # a write into the directory page now faults
        with pytest.raises(_VmFault) as ei:
            m.translate(dir_slot_va + 4, write=True)
        assert ei.value.err == 0b011

    def test_lift_then_rebuild(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        g.rebuild()
        slot = self.leaf_slot(m, guestos.KERNEL_DIR)
        g.lift()
        assert m.read_phys_u32(slot) & PTE_W
        assert m.translate(guestos.KERNEL_DIR, write=True) == guestos.KERNEL_DIR
        g.rebuild()
        assert not m.read_phys_u32(slot) & PTE_W

    def test_guest_overwrite_wins_reconciliation(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        g.rebuild()
        slot = self.leaf_slot(m, guestos.KERNEL_DIR)
        new_pte = (0x50 << 12) | PTE_P | PTE_W
        m.write_phys_u32(slot, new_pte)  # as an emulated guest store would
        g.rebuild()
        assert g.guest_pte_at(slot) is None or g.wp_slots.get(slot) != new_pte
        # the slot no longer maps a pt page, so it keeps its new value
        assert m.read_phys_u32(slot) == new_pte

    def test_classifies_induced_vs_genuine(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        g.rebuild()
        induced = g.classify_write_fault(guestos.KERNEL_DIR + 4, user=False)
        assert induced is not None and induced.pa == guestos.KERNEL_DIR + 4
        assert g.classify_write_fault(0x500000, user=False) is None

    def test_hooking_new_table_extends_protection(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        g.rebuild()
        # guest hooks a fresh table page at directory slot 1
        m.write_phys(0xE000, b"\x00" * 4096)
        m.write_phys_u32(guestos.KERNEL_DIR + 4, 0xE000 | PTE_P | PTE_W)
        g.rebuild()
        assert 0xE in g.pt_pages
        slot = self.leaf_slot(m, 0xE000)
        assert slot in g.wp_slots


def map_va(m, va, frame, bits=PTE_P | PTE_W):
    """Install a leaf PTE for va in the already-present table."""
    slot = guestos.KERNEL_TABLE + ((va >> 12) & 0x3FF) * 4
    m.write_phys_u32(slot, (frame << 12) | bits)
    return slot


class TestSubstitution:
    def test_reserved_mapping_redirected(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        va = 0x50000
        slot = map_va(m, va, RESERVED_LO)
        g.rebuild()
        guest, actual = g.remap[slot]
        assert guest == (RESERVED_LO << 12) | PTE_P | PTE_W
        assert actual == (SUB_LO << 12) | PTE_P | PTE_W
        assert m.read_phys_u32(slot) == actual
        assert g.masquerade_u32(slot) == guest
        assert m.translate(va, write=True) == SUB_LO << 12

    def test_guest_sees_pristine_content(self):
        m, _ = booted()
        m.write_phys(RESERVED_LO << 12, b"relic")
        g = MemGuard(m)
        g.reserve()
        p = g.pool_alloc(16)
        m.write_phys(p, b"secret data here")
        map_va(m, 0x50000, RESERVED_LO)
        g.rebuild()
        pa = m.translate(0x50000)
        assert m.read_phys(pa, 5) == b"relic"   # pre-reserve content
        assert b"secret" not in bytes(m.read_phys(pa, 4096))

    def test_binding_persists_across_unmap(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        slot = map_va(m, 0x50000, RESERVED_LO)
        g.rebuild()
        m.write_phys(m.translate(0x50000), b"kept")
        m.write_phys_u32(slot, 0)   # guest unmaps (as emulated store)
        g.rebuild()
        assert slot not in g.remap
        map_va(m, 0x51000, RESERVED_LO)  # remap elsewhere
        g.rebuild()
        assert m.read_phys(m.translate(0x51000), 4) == b"kept"
        assert g.substitute_for[RESERVED_LO] == SUB_LO

    def test_masquerade_of_reserved_region_tracks_guest_writes(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        map_va(m, 0x50000, RESERVED_LO)
        g.rebuild()
        m.write_phys(m.translate(0x50000), b"guest!")
        assert g.masquerade_read(RESERVED_LO << 12, 6) == b"guest!"

    def test_substitute_frame_masquerades_as_untouched(self):
        m, _ = booted()
        m.write_phys(SUB_LO << 12, b"mine")
        g = MemGuard(m)
        g.reserve()
        map_va(m, 0x50000, RESERVED_LO)
        g.rebuild()
        assert m.read_phys(SUB_LO << 12, 4) != b"mine"
        assert g.masquerade_read(SUB_LO << 12, 4) == b"mine"

    def test_pool_exhaustion_of_substitutes(self):
        m, _ = booted()
        g = MemGuard(m, substitute_frames=[SUB_LO])
        g.reserve()
        map_va(m, 0x50000, RESERVED_LO)
        map_va(m, 0x51000, RESERVED_LO + 1)
        with pytest.raises(SubstitutePoolExhausted):
            g.rebuild()

    def test_directory_in_reserved_frame_rejected(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        m.write_phys_u32(guestos.KERNEL_DIR + 8,
                         (RESERVED_LO << 12) | PTE_P | PTE_W)
        with pytest.raises(MalformedDirectory):
            g.rebuild()


class TestUnload:
    def test_full_restore_is_byte_exact(self):
        m, _ = booted()
        baseline = m.digest()
        g = MemGuard(m)
        g.reserve()
        p = g.pool_alloc(64)
        m.write_phys(p, bytes(range(64)))
        g.rebuild()
        g.unload_restore()
        assert m.digest() == baseline

    def test_substituted_writes_land_in_reserved_frame(self):
        m, _ = booted()
        g = MemGuard(m)
        g.reserve()
        slot = map_va(m, 0x50000, RESERVED_LO)
        g.rebuild()
        m.write_phys(m.translate(0x50000, write=True), b"persist")
        g.unload_restore()
        assert m.read_phys(RESERVED_LO << 12, 7) == b"persist"
        assert m.read_phys_u32(slot) == (RESERVED_LO << 12) | PTE_P | PTE_W
        # the borrowed substitute got its own content back
        assert m.translate(0x50000) == RESERVED_LO << 12

    def test_restore_matches_native_replay(self):
        # same guest edits, one run supervised and one not, same RAM after
        def drive(supervised):
            m, _ = booted()
            g = None
            if supervised:
                g = MemGuard(m)
                g.reserve()
                g.pool_alloc(32)
                m.write_phys(g.pool_alloc(8), b"scratch!")
                g.rebuild()
            slot = map_va(m, 0x52000, RESERVED_LO + 2)
            if supervised:
                g.rebuild()
            m.write_phys(m.translate(0x52000, write=True), b"payload")
            if supervised:
                g.unload_restore()
            return m.digest()

        assert drive(True) == drive(False)
