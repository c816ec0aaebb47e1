"""Hardware-virtualization style dynamic analysis on an emulated machine.

A small deterministic computer (the guest) runs under a virtualization
layer that reports exits for the events an analysis cares about.  The
framework on top hides its own footprint from the guest, and an
interactive kernel debugger plus a remote console build on that base.
"""

from hvsim.core import Framework, FrameworkError
from hvsim.guestos import build_fixture, fixture_names
from hvsim.hyperdbg import HyperDbg
from hvsim.machine import Machine
from hvsim.osdep import SymbolTable
from hvsim.server import ConsoleServer
from hvsim.trace import run_native
from hvsim.vmx import Vmcs

__version__ = "0.1.0"

__all__ = [
    "ConsoleServer",
    "Framework",
    "FrameworkError",
    "HyperDbg",
    "Machine",
    "SymbolTable",
    "Vmcs",
    "build_fixture",
    "fixture_names",
    "run_native",
    "__version__",
]
