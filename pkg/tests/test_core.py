"""Framework behavior: events, breakpoints, tracing, tool isolation."""

import time

import pytest

from hvsim import guestos, trace
from hvsim.core import (
    AlreadyLoaded,
    BreakpointExists,
    Condition,
    Consume,
    EventKind,
    Framework,
    FrameworkError,
    NotLoaded,
    PortAccessDenied,
    UnknownId,
    UnsupportedCondition,
    WriteAccessDenied,
)
from hvsim.isa import Op
from hvsim.trace import record_run, run_native

ALL_FIXTURES = ["boot_min", "counter_loop", "call_tree", "recursion",
                "two_procs", "kbd_echo", "pf_demo", "map_reserved"]
SCHEDULES = {"kbd_echo": [(500, 0x41), (2000, 0x42)]}
BOUNDS = {"kbd_echo": 6000}


def native(name):
    m, img = guestos.build_fixture(name, input_schedule=SCHEDULES.get(name))
    run_native(m, until_retired=BOUNDS.get(name))
    return m


def supervised(name, *, subscribe=None, setup=None):
    """Run a fixture under the framework, detach, finish natively.

    subscribe: list of (kind, sink_list[, condition]); setup(fw, img)
    runs after load.  Returns (machine, framework, image)."""
    m, img = guestos.build_fixture(name, input_schedule=SCHEDULES.get(name))
    fw = Framework(m)
    for spec in subscribe or []:
        kind, sink = spec[0], spec[1]
        cond = spec[2] if len(spec) > 2 else None
        fw.subscribe(kind, lambda ev, s=sink: s.append(ev), cond)
    fw.load()
    if setup is not None:
        setup(fw, img)
    bound = BOUNDS.get(name)
    r = fw.run(until_retired=bound) if bound else fw.run()
    while r not in ("halt", "triple", "boundary"):
        r = fw.run(until_retired=bound) if bound else fw.run()
    fw.unload()
    while not m.halted and bound is None:
        m.step()
    return m, fw, img


class TestLifecycle:
    def test_double_load_rejected(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        fw.load()
        with pytest.raises(AlreadyLoaded):
            fw.load()

    def test_unload_requires_load(self):
        fw = Framework(guestos.build_fixture("counter_loop")[0])
        with pytest.raises(NotLoaded):
            fw.unload()

    def test_watchpoint_requires_load(self):
        fw = Framework(guestos.build_fixture("counter_loop")[0])
        with pytest.raises(NotLoaded):
            fw.add_watchpoint(0x3000)

    def test_duplicate_tool_name(self):
        fw = Framework(guestos.build_fixture("counter_loop")[0])
        fw.register_tool("a")
        with pytest.raises(FrameworkError):
            fw.register_tool("a")

    def test_condition_rejected_where_unsupported(self):
        fw = Framework(guestos.build_fixture("counter_loop")[0])
        with pytest.raises(UnsupportedCondition):
            fw.subscribe(EventKind.BREAKPOINT_HIT, lambda ev: None,
                         Condition(vector=3))


class TestNonInterference:
    """The supervised run must be indistinguishable from the native one:
    same retired count, same memory, same registers, same device state."""

    @pytest.mark.parametrize("name", ALL_FIXTURES)
    def test_digest_matches_native(self, name):
        ref = native(name)
        m, fw, _ = supervised(name)
        assert m.retired == ref.retired
        assert m.digest() == ref.digest()
        assert fw.ledger_balanced()

    def test_full_instrumentation_leaves_no_trace(self):
        # every event family armed at once, then withdrawn
        sinks = {k: [] for k in EventKind}
        subs = [(k, sinks[k]) for k in EventKind]

        def setup(fw, img):
            fw.add_breakpoint(img.symbols["f1"])
            fw.add_breakpoint(img.symbols["f2"], style="transparent")
            fw.trace_function(img.symbols["f2"])
            fw.add_watchpoint(0x3000, 8, "rw")

        ref = native("call_tree")
        m, fw, _ = supervised("call_tree", subscribe=subs, setup=setup)
        assert m.digest() == ref.digest()
        assert sinks[EventKind.BREAKPOINT_HIT]
        assert sinks[EventKind.FUNCTION_ENTRY]

    def test_guest_digest_matches_native_while_attached(self):
        # the masqueraded digest agrees with a native run even while a
        # trap byte sits planted in the polling loop
        ref, _ = guestos.build_fixture("kbd_echo",
                                       input_schedule=SCHEDULES["kbd_echo"])
        trace.run_native(ref, until_retired=3000)
        m, img = guestos.build_fixture("kbd_echo",
                                       input_schedule=SCHEDULES["kbd_echo"])
        fw = Framework(m)
        fw.load()
        fw.add_breakpoint(img.symbols["in_poll"])
        r = fw.run(until_retired=3000)
        while r not in ("boundary", "halt"):
            r = fw.run(until_retired=3000)
        assert r == "boundary"
        assert m.digest() != ref.digest()  # raw RAM differs while loaded
        assert fw.guest_digest() == ref.digest()
        fw.unload()


class TestBreakpoints:
    @pytest.mark.parametrize("style", ["soft", "transparent"])
    def test_counts_and_transparency(self, style):
        hits = []
        m, fw, img = supervised(
            "call_tree",
            subscribe=[(EventKind.BREAKPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_breakpoint(img.symbols["f1"],
                                                    style=style))
        assert len(hits) == 5
        assert all(ev.fields["style"] == style for ev in hits)
        assert all(ev.pc == img.symbols["f1"] for ev in hits)
        assert m.digest() == native("call_tree").digest()

    def test_one_shot(self):
        hits = []
        m, fw, _ = supervised(
            "call_tree",
            subscribe=[(EventKind.BREAKPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_breakpoint(img.symbols["f1"],
                                                    one_shot=True))
        assert len(hits) == 1
        assert m.digest() == native("call_tree").digest()

    def test_one_shot_transparent(self):
        hits = []
        m, fw, _ = supervised(
            "call_tree",
            subscribe=[(EventKind.BREAKPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_breakpoint(
                img.symbols["f1"], style="transparent", one_shot=True))
        assert len(hits) == 1
        assert m.digest() == native("call_tree").digest()

    def test_duplicate_site_rejected(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        fw.load()
        fw.add_breakpoint(img.symbols["f1"])
        with pytest.raises(BreakpointExists):
            fw.add_breakpoint(img.symbols["f1"])

    def test_remove_unknown(self):
        fw = Framework(guestos.build_fixture("counter_loop")[0])
        with pytest.raises(UnknownId):
            fw.remove_breakpoint(99)

    def test_removed_breakpoint_stops_firing(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        hits = []
        fw.subscribe(EventKind.BREAKPOINT_HIT,
                     lambda ev: (hits.append(ev), fw.request_stop())[0])
        fw.load()
        bid = fw.add_breakpoint(img.symbols["f1"])
        assert fw.run() == "stopped"
        fw.remove_breakpoint(bid)
        fw.run_to_halt()
        assert len(hits) == 1
        fw.unload()
        while not m.halted:
            m.step()
        assert m.digest() == native("call_tree").digest()

    def test_guest_sees_original_byte_under_soft(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        fw.load()
        f1 = img.symbols["f1"]
        before = fw.guest_read(f1, 4)
        fw.add_breakpoint(f1)
        site = fw.walk_guest(f1, execute=True).pa
        assert m.read_phys(site, 1) == bytes([0xCC])
        assert fw.guest_read(f1, 4) == before


class TestWatchpoints:
    def test_write_hits_match_instrumented_count(self):
        oracle = record_run(guestos.build_fixture("counter_loop")[0])
        hits = []
        m, fw, _ = supervised(
            "counter_loop",
            subscribe=[(EventKind.WATCHPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_watchpoint(0x3000, 4, "w"))
        assert len(hits) == oracle.count_stores_overlapping(0x3000, 4) == 7
        assert [ev.fields["value"] for ev in hits] == [1, 2, 3, 4, 5, 6, 7]
        assert all(ev.fields["access"] == "write" for ev in hits)
        assert m.digest() == native("counter_loop").digest()

    def test_read_hits(self):
        oracle = record_run(guestos.build_fixture("counter_loop")[0])
        hits = []
        m, fw, _ = supervised(
            "counter_loop",
            subscribe=[(EventKind.WATCHPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_watchpoint(0x3000, 4, "r"))
        assert len(hits) == oracle.count_loads_overlapping(0x3000, 4)
        assert all(ev.fields["access"] == "read" for ev in hits)
        assert all(ev.fields["value"] is None for ev in hits)
        assert m.digest() == native("counter_loop").digest()

    def test_rw_combines(self):
        oracle = record_run(guestos.build_fixture("counter_loop")[0])
        hits = []
        m, fw, _ = supervised(
            "counter_loop",
            subscribe=[(EventKind.WATCHPOINT_HIT, hits)],
            setup=lambda fw, img: fw.add_watchpoint(0x3000, 4, "rw"))
        want = oracle.count_stores_overlapping(0x3000, 4) \
            + oracle.count_loads_overlapping(0x3000, 4)
        assert len(hits) == want
        assert m.digest() == native("counter_loop").digest()

    def test_remove_stops_hits(self):
        m, img = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        hits = []
        fw.subscribe(EventKind.WATCHPOINT_HIT, lambda ev: hits.append(ev))
        fw.load()
        wid = fw.add_watchpoint(0x3000, 4, "w")
        fw.remove_watchpoint(wid)
        fw.run_to_halt()
        assert hits == []


class TestFunctionTracing:
    def test_call_tree_counts(self):
        ent, ext = [], []
        m, fw, img = supervised(
            "call_tree",
            subscribe=[(EventKind.FUNCTION_ENTRY, ent),
                       (EventKind.FUNCTION_EXIT, ext)],
            setup=lambda fw, img: fw.trace_function(img.symbols["f1"]))
        assert len(ent) == len(ext) == 5
        assert all(ev.fields["addr"] == img.symbols["f1"] for ev in ent)
        assert m.digest() == native("call_tree").digest()

    def test_recursive_entries_and_returns(self):
        ent, ext = [], []
        m, fw, img = supervised(
            "recursion",
            subscribe=[(EventKind.FUNCTION_ENTRY, ent),
                       (EventKind.FUNCTION_EXIT, ext)],
            setup=lambda fw, img: fw.trace_function(img.symbols["fact"]))
        assert len(ent) == len(ext) == 3
        # additive fact: innermost return first
        assert [ev.fields["retval"] for ev in ext] == [1, 3, 6]
        assert m.digest() == native("recursion").digest()

    def test_untrace_removes_instrumentation(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        ent = []
        fw.subscribe(EventKind.FUNCTION_ENTRY, lambda ev: ent.append(ev))
        fw.load()
        tid = fw.trace_function(img.symbols["f1"])
        fw.untrace_function(tid)
        fw.run_to_halt()
        assert ent == []
        fw.unload()
        while not m.halted:
            m.step()
        assert m.digest() == native("call_tree").digest()


class TestSyscallTracing:
    @staticmethod
    def _exit_oracle(tr):
        # replay the native trace: entering the gate arms its return
        # site, executing at an armed site consumes one pending entry
        pending: dict[tuple[int, int], int] = {}
        exits = 0
        for r in tr.records:
            key = (r.ptbr, r.pc)
            if pending.get(key):
                pending[key] -= 1
                exits += 1
            if r.op is Op.SYSCALL:
                k = (r.ptbr, r.pc + 1)
                pending[k] = pending.get(k, 0) + 1
        return exits

    def test_entry_exit_counts(self):
        tr = record_run(guestos.build_fixture("two_procs")[0])
        se, sx = [], []
        m, fw, _ = supervised(
            "two_procs",
            subscribe=[(EventKind.SYSCALL_ENTRY, se),
                       (EventKind.SYSCALL_EXIT, sx)])
        assert len(se) == tr.count_op(Op.SYSCALL) == 10
        assert len(sx) == self._exit_oracle(tr)
        # a process's final syscall never returns
        assert len(sx) < len(se)
        assert m.digest() == native("two_procs").digest()

    def test_numbers_pair_up(self):
        se, sx = [], []
        supervised("two_procs",
                   subscribe=[(EventKind.SYSCALL_ENTRY, se),
                              (EventKind.SYSCALL_EXIT, sx)])
        entered = [ev.fields["number"] for ev in se]
        exited = [ev.fields["number"] for ev in sx]
        for n in exited:
            assert n in entered


class TestProcessSwitch:
    def test_events_match_reload_count(self):
        tr = record_run(guestos.build_fixture("two_procs")[0])
        ps = []
        m, fw, _ = supervised(
            "two_procs", subscribe=[(EventKind.PROCESS_SWITCH, ps)])
        assert len(ps) == tr.count_ptbr_changes() >= 3
        assert all(ev.fields["old"] != ev.fields["new"] for ev in ps)
        assert m.digest() == native("two_procs").digest()


class TestExceptionEvents:
    def test_genuine_faults_reported_and_reinjected(self):
        exc = []
        m, fw, _ = supervised(
            "pf_demo", subscribe=[(EventKind.EXCEPTION, exc)])
        vectors = [ev.fields["vector"] for ev in exc]
        assert 14 in vectors and 3 in vectors
        assert m.digest() == native("pf_demo").digest()

    def test_vector_condition_filters(self):
        exc = []
        supervised("pf_demo",
                   subscribe=[(EventKind.EXCEPTION, exc,
                               Condition(vector=14))])
        assert exc and all(ev.fields["vector"] == 14 for ev in exc)
        assert all(ev.fields["fault_va"] for ev in exc)


class TestInterrupts:
    def test_events_and_redelivery(self):
        irs = []
        m, fw, _ = supervised(
            "two_procs", subscribe=[(EventKind.INTERRUPT, irs)])
        assert irs and {ev.fields["vector"] for ev in irs} == {32}
        assert m.digest() == native("two_procs").digest()

    def test_consume_suppresses_delivery(self):
        m, img = guestos.build_fixture("two_procs")
        fw = Framework(m)
        seen = []
        fw.subscribe(EventKind.INTERRUPT,
                     lambda ev: (seen.append(ev), Consume())[1])
        fw.load()
        fw.run_to_halt()
        # suppressed timer ticks: the guest never observed line 32
        assert seen
        assert m.digest() != native("two_procs").digest()


class TestIoPortEvents:
    def test_unconditioned_subscription_sees_every_access(self):
        tr = record_run(guestos.build_fixture("kbd_echo",
                                              input_schedule=SCHEDULES[
                                                  "kbd_echo"])[0],
                        until_retired=6000)
        evs = []
        m, fw, _ = supervised(
            "kbd_echo", subscribe=[(EventKind.IO_PORT, evs)])
        assert len(evs) == tr.count_op(Op.IN) + tr.count_op(Op.OUT)
        assert m.digest() == native("kbd_echo").digest()

    def test_data_port_read_cadence(self):
        evs = []
        m, fw, _ = supervised(
            "kbd_echo",
            subscribe=[(EventKind.IO_PORT, evs,
                        Condition(port=0x60, access="read"))])
        reads = [ev.retired for ev in evs]
        assert reads[0] == 11
        gaps = {b - a for a, b in zip(reads, reads[1:])}
        assert gaps <= {3, 9}
        assert m.digest() == native("kbd_echo").digest()

    def test_write_consume_blocks_device(self):
        m, img = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        fw.subscribe(EventKind.IO_PORT, lambda ev: Consume(),
                     Condition(access="write"))
        fw.load()
        assert fw.run_to_halt() == "halt"
        assert m.debug_out == b""  # the OUT never reached the device

    def test_read_replacement_reaches_guest(self):
        sched = [(0, 0x41)]
        m, img = guestos.build_fixture("kbd_echo", input_schedule=sched)
        fw = Framework(m)

        def swap(ev):
            if ev.fields["value"] == 0x41:
                return Consume(replacement=0x5A)
            return None

        fw.subscribe(EventKind.IO_PORT, swap,
                     Condition(port=0x60, access="read"))
        fw.load()
        r = fw.run(until_retired=2000)
        while r not in ("boundary", "halt", "triple"):
            r = fw.run(until_retired=2000)
        fw.unload()
        # the echo path saw 0x5A where the device produced 0x41
        assert 0x5A in bytes(m.read_phys(0xB8000, 16))


class TestMmapEvents:
    def test_framebuffer_stores(self):
        mm = []
        m, fw, _ = supervised(
            "kbd_echo", subscribe=[(EventKind.IO_MMAP, mm)])
        writes = [ev for ev in mm if ev.fields["access"] == "write"]
        assert len(writes) == 2
        assert [ev.fields["pa"] for ev in writes] == [0xB8000, 0xB8002]
        # 0x07 attribute in the high byte, the echoed key beneath
        assert [ev.fields["value"] >> 8 for ev in writes] == [0x07, 0x07]
        assert [ev.fields["value"] & 0xFF for ev in writes] == [0x41, 0x42]
        assert m.digest() == native("kbd_echo").digest()


class TestToolIsolation:
    def test_runaway_handler_evicted_others_survive(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        greedy = fw.register_tool("greedy")
        calm = fw.register_tool("calm")
        calm_hits = []

        def spin(ev):
            while True:
                greedy.read_guest_regs()

        fw.load()
        greedy.subscribe(EventKind.BREAKPOINT_HIT, spin)
        calm.subscribe(EventKind.BREAKPOINT_HIT,
                       lambda ev: calm_hits.append(ev))
        greedy.add_breakpoint(img.symbols["f1"])
        calm.add_breakpoint(img.symbols["f2"])
        fw.run_to_halt()
        fw.unload()
        while not m.halted:
            m.step()
        assert [name for name, _ in fw.evictions] == ["greedy"]
        assert fw.tools["greedy"].evicted
        # every f2 call still observed; at most the one f1 hit that
        # triggered the eviction leaks through before the cleanup
        f2 = img.symbols["f2"]
        assert len([e for e in calm_hits if e.pc == f2]) == 5
        assert m.digest() == native("call_tree").digest()

    def test_crashing_handler_evicted(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        bad = fw.register_tool("crashy")
        fw.load()
        bad.subscribe(EventKind.BREAKPOINT_HIT,
                      lambda ev: 1 // 0)
        bad.add_breakpoint(img.symbols["f1"])
        fw.run_to_halt()
        fw.unload()
        while not m.halted:
            m.step()
        assert fw.tools["crashy"].evicted
        assert "ZeroDivisionError" in fw.evictions[0][1]
        assert m.digest() == native("call_tree").digest()

    def test_wall_time_budget(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        slow = fw.register_tool("slow")

        def dawdle(ev):
            time.sleep(0.3)
            slow.read_guest_regs()  # budget checked here

        fw.load()
        slow.subscribe(EventKind.BREAKPOINT_HIT, dawdle)
        slow.add_breakpoint(img.symbols["f1"])
        fw.run_to_halt()
        assert slow._h.evicted
        assert "wall-time" in fw.evictions[0][1]

    def test_interactive_tool_exempt_from_wall_clock(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        ui = fw.register_tool("ui", interactive=True)
        hits = []

        def ponder(ev):
            time.sleep(0.3)
            ui.read_guest_regs()
            hits.append(ev)

        fw.load()
        ui.subscribe(EventKind.BREAKPOINT_HIT, ponder)
        ui.add_breakpoint(img.symbols["f1"], one_shot=True)
        fw.run_to_halt()
        assert hits and not ui._h.evicted

    def test_write_capability_enforced(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        ro = fw.register_tool("observer")
        rw = fw.register_tool("editor", guest_write=True)
        fw.load()
        with pytest.raises(WriteAccessDenied):
            ro.write_physical(0x3000, b"\x00")
        rw.write_physical(0x3000, b"\x00")

    def test_port_capability_enforced(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        keys = fw.register_tool("keys", ports={0x60, 0x64})
        blind = fw.register_tool("blind")
        fw.load()
        keys.port_read(0x64)
        with pytest.raises(PortAccessDenied):
            blind.port_read(0x64)


class TestGuestAccess:
    def test_patch_through_armed_breakpoint(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        fw.load()
        f1 = img.symbols["f1"]
        site = fw.walk_guest(f1, execute=True).pa
        bid = fw.add_breakpoint(f1)
        fw.write_physical(site, b"\x00")
        assert m.read_phys(site, 1) == bytes([0xCC])  # still armed
        assert fw.read_physical(site, 1) == b"\x00"
        fw.remove_breakpoint(bid)
        assert m.read_phys(site, 1) == b"\x00"  # patch survives disarm

    def test_guest_write_roundtrip(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        fw.load()
        fw.guest_write(0x3000, b"\xAA\xBB\xCC\xDD")
        assert fw.guest_read(0x3000, 4) == b"\xAA\xBB\xCC\xDD"

    def test_disassemble_hides_trap_bytes(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        fw.load()
        f1 = img.symbols["f1"]
        before = fw.disassemble_guest(f1, 4)
        fw.add_breakpoint(f1)
        assert fw.disassemble_guest(f1, 4) == before
        assert "BRK" not in before[0][1]


class TestSingleStep:
    def test_retires_exactly_one(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        fw.load()
        for want in range(1, 11):
            st = fw.single_step()
            assert st["retired"] == want

    def test_step_then_run_preserves_digest(self):
        m, _ = guestos.build_fixture("counter_loop")
        fw = Framework(m)
        fw.load()
        for _ in range(5):
            fw.single_step()
        fw.run_to_halt()
        fw.unload()
        while not m.halted:
            m.step()
        assert m.digest() == native("counter_loop").digest()

    def test_step_with_instrumentation_armed(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        hits = []
        fw.subscribe(EventKind.BREAKPOINT_HIT, lambda ev: hits.append(ev))
        fw.load()
        fw.add_breakpoint(img.symbols["f1"])
        # the supervised guest never executes its HLT; the step result,
        # not m.halted, says when the end is reached
        while m.retired < 200:
            if fw.single_step()["halted"]:
                break
        fw.unload()
        while not m.halted:
            m.step()
        assert m.digest() == native("call_tree").digest()


class TestBoundaryStops:
    def test_exact_target_with_events_en_route(self):
        m, img = guestos.build_fixture("two_procs")
        fw = Framework(m)
        se = []
        fw.subscribe(EventKind.SYSCALL_ENTRY, lambda ev: se.append(ev))
        fw.load()
        r = fw.run(until_retired=1500)
        while r not in ("boundary", "halt"):
            r = fw.run(until_retired=1500)
        assert r == "boundary"
        assert m.retired == 1500
        assert se  # events streamed before the stop
        fw.run_to_halt()
        fw.unload()
        while not m.halted:
            m.step()
        assert m.digest() == native("two_procs").digest()

    def test_stop_request_from_handler(self):
        m, img = guestos.build_fixture("call_tree")
        fw = Framework(m)
        fw.subscribe(EventKind.BREAKPOINT_HIT,
                     lambda ev: fw.request_stop("hit"))
        fw.load()
        fw.add_breakpoint(img.symbols["f1"])
        stops = 0
        r = fw.run()
        while r == "stopped":
            stops += 1
            r = fw.run()
        assert r == "halt"
        assert stops == 5


class TestLedger:
    def test_dispositions_audit(self):
        exc = []
        m, fw, _ = supervised(
            "pf_demo", subscribe=[(EventKind.EXCEPTION, exc)])
        led = fw.ledger
        assert fw.ledger_balanced()
        assert led["abstracted"] > 0  # the announced faults
        assert led["by_kind"]["ExceptionExit"] >= len(exc)

    def test_unobserved_faults_count_reinjected(self):
        m, fw, _ = supervised("pf_demo")
        led = fw.ledger
        assert fw.ledger_balanced()
        assert led["reinjected"] > 0
        assert led["abstracted"] == 0
