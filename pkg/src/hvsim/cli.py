"""Command line front end.

`hvsim fixtures` lists the built-in guest images.  `hvsim run` executes
one of them (or a saved image file) natively, under the analysis
framework with the interactive debugger attached, or behind the remote
console server, and prints a short transcript of the outcome.

Script files given with --script mix keyboard input and debugger
commands; `#` starts a comment anywhere on a line:

    key@120 0x41    # a key press due at retired 120
    s 3             # everything else goes to the debugger
    c

A scripted debugger session detaches once the script runs out, so the
guest finishes on its own.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import guestos
from .core import Framework
from .guestos import build_fixture, fixture_names, load_image_file, symbols_text
from .hyperdbg import HyperDbg
from .machine import Machine
from .osdep import SymbolTable
from .server import ConsoleServer
from .trace import StepLimitExceeded, run_native


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="hvsim",
        description="run and inspect guests on the emulated machine")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("fixtures", help="list built-in guest images")

    r = sub.add_parser("run", help="execute a fixture or image file")
    r.add_argument("target", help="fixture name or image file path")
    r.add_argument("--symbols", metavar="FILE",
                   help="symbol file (HEXADDR NAME per line); fixtures "
                        "bring their own unless this overrides them")
    r.add_argument("--mem", type=int, metavar="BYTES",
                   help="physical memory size")
    r.add_argument("--keys", metavar="N:CODE,...",
                   help="input schedule entries, e.g. 100:0x41,200:0x42")
    r.add_argument("--script", metavar="FILE",
                   help="scripted session (key presses and debugger commands)")
    r.add_argument("--tool", choices=["hyperdbg"],
                   help="supervise the guest with this tool attached")
    r.add_argument("--serve", metavar="HOST:PORT",
                   help="expose the guest over the remote console protocol")
    r.add_argument("--paused", action="store_true",
                   help="start a served guest paused")
    r.add_argument("--until", type=int, metavar="N",
                   help="stop once N instructions have retired")
    r.add_argument("--digest-only", action="store_true",
                   help="print just the final state digest")
    return p


def _parse_keys(spec: str) -> list[tuple[int, int]]:
    out = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        when, sep, code = part.partition(":")
        if not sep:
            raise ValueError(f"bad key entry {part!r} (want RETIRED:CODE)")
        out.append((int(when, 0), int(code, 0)))
    return out


def _parse_script(path: str) -> tuple[list[tuple[int, int]], list[str]]:
    """Split a script into (input schedule, debugger command lines)."""
    schedule, commands = [], []
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("key@"):
                head, _, rest = line.partition(" ")
                code = rest.strip()
                if not code:
                    raise ValueError(f"bad script line {line!r}")
                schedule.append((int(head[4:], 0), int(code, 0)))
            else:
                commands.append(line)
    return schedule, commands


def _script_reader(commands: list[str]):
    it = iter(commands)

    def read_line() -> str | None:
        return next(it, None)

    return read_line


def _load_target(args):
    """Build (name, machine, symbols, scripted commands or None)."""
    sched = []
    if args.keys:
        sched += _parse_keys(args.keys)
    commands = None
    if args.script:
        extra, commands = _parse_script(args.script)
        sched += extra
    sched.sort()
    schedule = sched or None

    if args.target in guestos.FIXTURES:
        m, img = build_fixture(args.target, input_schedule=schedule,
                               ram_size=args.mem)
        symbols = SymbolTable.parse(symbols_text(img))
        name = args.target
    else:
        img = load_image_file(args.target)
        kw = {"input_schedule": schedule}
        if args.mem is not None:
            kw["ram_size"] = args.mem
        m = Machine(**kw)
        m.load_image(img)
        symbols = SymbolTable()
        name = os.path.basename(args.target)
    if args.symbols:
        symbols = SymbolTable.load(args.symbols)
    return name, m, symbols, commands


def _report(args, name: str, verdict: str, m: Machine, digest: str) -> None:
    if args.digest_only:
        print(digest)
        return
    print(f"target: {name}")
    print(f"verdict: {verdict}")
    print(f"retired: {m.retired}")
    if m.debug_out:
        print("debug: " + " ".join(f"{b:02x}" for b in m.debug_out))
    print(f"digest: {digest}")


def _run_native(args, name: str, m: Machine) -> int:
    try:
        run_native(m, until_retired=args.until)
        verdict = "halt" if m.halted else "boundary"
    except StepLimitExceeded:
        verdict = "step-limit"
    _report(args, name, verdict, m, m.digest())
    return 0


def _run_supervised(args, name, m, symbols, commands) -> int:
    fw = Framework(m)
    reader = _script_reader(commands) if commands is not None else None
    dbg = HyperDbg(fw, symbols=symbols, read_line=reader)
    dbg.attach()
    fw.load()
    # open with a prompt so breakpoints can be placed before anything runs
    if dbg.interact() == "detach":
        dbg.detach()
    verdict = dbg.run(until_retired=args.until)
    fw.unload()
    if verdict == "halt":
        run_native(m)  # retire the HLT the exit left pending
    _report(args, name, verdict, m, m.digest())
    return 0


def _run_served(args, name, m, symbols) -> int:
    host, sep, port = args.serve.rpartition(":")
    if not sep:
        host, port = "127.0.0.1", args.serve
    fw = Framework(m)
    srv = ConsoleServer(m, fw, host=host, port=int(port), target=name,
                        start_paused=args.paused, max_retired=args.until)
    if args.tool:
        dbg = HyperDbg(fw, symbols=symbols, read_line=srv.debugger_input,
                       write_line=srv.debugger_output)
        dbg.attach()
        srv.attach_debugger(dbg)
    fw.load()
    # announce the bound address so callers can pass port 0
    print(f"serving on {srv.host}:{srv.port}", flush=True)
    srv.serve_forever()
    verdict = srv.state
    fw.unload()
    if verdict == "halted":
        run_native(m)
    _report(args, name, verdict, m, m.digest())
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fixtures":
        for n in fixture_names():
            print(n)
        return 0
    try:
        name, m, symbols, commands = _load_target(args)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.serve:
        return _run_served(args, name, m, symbols)
    if args.tool:
        return _run_supervised(args, name, m, symbols, commands)
    return _run_native(args, name, m)


if __name__ == "__main__":
    raise SystemExit(main())
