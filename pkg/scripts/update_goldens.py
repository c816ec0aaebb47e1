#!/usr/bin/env python3
"""Regenerate tests/golden_digests.json from the current fixture corpus.

Run after any intentional change to the machine model or a fixture.
"""

import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from hvsim import guestos, trace

# fixtures that halt run to completion; open-ended ones get a step budget
BOUNDS = {"kbd_echo": 6000}

# deterministic key schedule for the open-ended echo fixture
SCHEDULES = {"kbd_echo": [(500, 0x41), (2000, 0x42)]}


def compute() -> dict:
    out = {}
    for name in guestos.fixture_names():
        m, _ = guestos.build_fixture(name, input_schedule=SCHEDULES.get(name))
        trace.run_native(m, until_retired=BOUNDS.get(name))
        out[name] = {"retired": m.retired, "digest": m.digest()}
    return out


def main() -> None:
    path = pathlib.Path(__file__).resolve().parents[1] / "tests" / "golden_digests.json"
    data = compute()
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path}")
    for name, entry in sorted(data.items()):
        print(f"  {name:14s} retired={entry['retired']:<8d} {entry['digest'][:16]}...")


if __name__ == "__main__":
    main()
