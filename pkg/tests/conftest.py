import pytest

from vmecrate import config as config_mod
from vmecrate.boards.dsp import DualDspBoard
from vmecrate.boards.hv import HvController
from vmecrate.boards.mps import MpsComparator, MpsConfig
from vmecrate.boards.pll import PllModule
from vmecrate.boards.ring import RingBoard
from vmecrate.boards.scam import ScamBoard
from vmecrate.bus import Address, Space
from vmecrate.crate import Crate

A16, A24 = Space.A16, Space.A24


def small_crate(trace=True, ring_size=2):
    """One board of each kind at fixed addresses, plus a short ring."""
    crate = Crate(trace=trace)
    crate.add_board(ScamBoard("scam"), 2, Address(A16, 0xC100))
    crate.add_board(HvController("hv"), 3, Address(A16, 0xC000))
    rings = []
    for i in range(ring_size):
        board = RingBoard(f"ring{i + 1}", serial_address=i + 1)
        crate.add_board(board, 4 + i, Address(A24, 0x100000 + 0x100 * i))
        rings.append(board)
    dsp = DualDspBoard("dsp")
    crate.add_board(dsp, 12, Address(A24, 0x110000))
    crate.add_board(dsp, 12, Address(A24, 0x400000), 128 * 1024, region="memory")
    mps = MpsComparator("mps", MpsConfig(station_count=3,
                                         location_limits_uA=(200.0, 100.0, 60.0, 60.0)))
    crate.add_board(mps, 13, Address(A24, 0x120000))
    crate.add_board(mps, 13, Address(A24, 0x800000), 8 * 1024 * 1024, region="buffer")
    crate.add_board(PllModule("pll"), 14, Address(A24, 0x130000))
    if rings:
        crate.make_ring(rings)
    return crate


@pytest.fixture
def crate():
    return small_crate()


@pytest.fixture
def default_config():
    return config_mod.load(config_mod.bundled("crate.yaml"))


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def record_acceptance(request):
    """Print and remember one PASS/FAIL line per acceptance criterion."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        store.append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
