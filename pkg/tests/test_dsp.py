import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmecrate.boards.dsp import (MEMORY_BYTES, AccessKind, DualDspBoard, MemAccess, Port,
                                 RoundRobinArbiter)
from vmecrate.bus import Address, Space, VmeBus, Width
from vmecrate.errors import RangeError

BASE = 0x400000


def board_on_bus():
    bus = VmeBus()
    dsp = DualDspBoard("dsp")
    bus.attach(6, dsp, Address(Space.A24, 0x110000), 0x10)
    bus.attach(6, dsp, Address(Space.A24, BASE), MEMORY_BYTES, region="memory")
    return bus, dsp


def test_coherence_dsp_write_vme_read():
    bus, dsp = board_on_bus()
    dsp.dsp_access(Port.DSP_A, "Write", 0x100, Width.D16, 0x1234)
    dsp.tick(1)
    assert bus.read(Address(Space.A24, BASE + 0x100), Width.D16).data == 0x1234


def test_same_tick_three_ports_within_three_slots():
    arb = RoundRobinArbiter()
    for port, off in zip(Port, (0, 2, 4)):
        arb.submit(MemAccess(port, AccessKind.WRITE, off, data=1))
    done = arb.run_all()
    assert max(c.tick for c in done) <= 3
    assert sorted(c.access.port for c in done) == list(Port)


def test_competing_test_and_set_one_winner():
    for phase in Port:
        arb = RoundRobinArbiter(priority=phase)
        for port in (Port.DSP_A, Port.DSP_B):
            arb.submit(MemAccess(port, AccessKind.RMW, 0x40, data=1, mask=1))
        results = [c.value for c in arb.run_all()]
        assert sorted(results) == [0, 1]
        assert arb.memory[0x40] == 1


def test_rmw_holds_grant_for_two_slots():
    arb = RoundRobinArbiter()
    arb.submit(MemAccess(Port.DSP_A, AccessKind.RMW, 0, data=1, mask=1))
    arb.submit(MemAccess(Port.DSP_B, AccessKind.WRITE, 0, data=0))
    first, second = arb.run_all()
    assert (first.grant_tick, first.tick) == (0, 2)
    assert second.grant_tick == 2


def test_rotation_advances_past_served_port():
    arb = RoundRobinArbiter(priority=Port.DSP_B)
    arb.submit(MemAccess(Port.DSP_B, AccessKind.READ, 0))
    arb.run_all()
    assert arb.priority is Port.VME


def test_block_read_equals_reads():
    bus, dsp = board_on_bus()
    for i in range(128):
        dsp.memory[i] = (i * 37) & 0xFF
    words, res = bus.block_transfer(Address(Space.A24, BASE), 64, Width.D16, "ReadOut")
    singles = [bus.read(Address(Space.A24, BASE + 2 * i), Width.D16).data for i in range(64)]
    assert res.ok and words == singles


def test_big_endian_d16():
    bus, dsp = board_on_bus()
    dsp.memory[2:4] = b"\xAB\xCD"
    assert bus.read(Address(Space.A24, BASE + 2), Width.D16).data == 0xABCD


def test_past_memory_is_bus_error():
    bus, _ = board_on_bus()
    assert not bus.read(Address(Space.A24, BASE + 0x20000)).ok


def test_block_write_then_read():
    bus, _ = board_on_bus()
    data = list(range(100, 132))
    _, res = bus.block_transfer(Address(Space.A24, BASE + 0x800), 32, Width.D16, "WriteIn", data)
    assert res.ok
    words, _ = bus.block_transfer(Address(Space.A24, BASE + 0x800), 32, Width.D16, "ReadOut")
    assert words == data


def test_memaccess_range():
    with pytest.raises(RangeError):
        MemAccess(Port.DSP_A, AccessKind.READ, MEMORY_BYTES)
    with pytest.raises(RangeError):
        MemAccess(Port.DSP_A, AccessKind.READ, MEMORY_BYTES - 1, Width.D16)
    with pytest.raises(ValueError):
        MemAccess(Port.DSP_A, AccessKind.READ, 3, Width.D16)


def test_dsp_interrupts():
    bus, dsp = board_on_bus()
    dsp.dsp_interrupt(Port.DSP_A, 0x0140, Width.D16)
    level = dsp.irq_level
    assert bus.acknowledge(level, Width.D16).data == 0x0140
    dsp.dsp_interrupt(Port.DSP_A, 0x0140, Width.D16)
    assert bus.acknowledge(level, Width.D08).data == 0x40
    dsp.dsp_interrupt(Port.DSP_B, 0x0202)
    dsp.dsp_interrupt(Port.DSP_A, 0x0101)
    assert bus.acknowledge(level, Width.D16).data == 0x0101
    assert bus.acknowledge(level, Width.D16).data == 0x0202


def test_irq_level_from_control_register():
    bus, dsp = board_on_bus()
    bus.write(Address(Space.A24, 0x110000), 2, Width.D16)
    dsp.dsp_interrupt(Port.DSP_B, 0x10)
    assert bus.pending(2)


def test_status_and_grant_registers():
    bus, dsp = board_on_bus()
    for i in range(3):
        dsp.dsp_access(Port.DSP_A, "Read", i)
    dsp.tick(10)
    bus.read(Address(Space.A24, BASE), Width.D16)
    read = lambda off: bus.read(Address(Space.A24, 0x110000 + off), Width.D16).data
    assert read(4) == 3 and read(6) == 0 and read(8) == 1
    assert read(2) == int(Port.DSP_A)


def test_vme_waits_for_pending_dsp_grants():
    bus, dsp = board_on_bus()
    dsp.dsp_access(Port.DSP_A, "Write", 0x10, data=0x55)
    dsp.dsp_access(Port.DSP_B, "Write", 0x10, data=0x66)
    # a VME read issued on the same tick is arbitrated after both earlier-queued writes
    value = bus.read(Address(Space.A24, BASE + 0x10)).data
    assert value == 0x66


def test_dump_memory(tmp_path):
    _, dsp = board_on_bus()
    dsp.memory[5] = 9
    path = tmp_path / "m.bin"
    dsp.dump_memory(path)
    data = path.read_bytes()
    assert len(data) == MEMORY_BYTES and data[5] == 9


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.sampled_from(list(Port)))
def test_fairness(k, phase):
    arb = RoundRobinArbiter(priority=phase)
    for _ in range(k):
        for p in Port:
            arb.submit(MemAccess(p, AccessKind.READ, 0))
    arb.run_all()
    assert arb.grant_counts == [k, k, k]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(Port)), st.integers(0, 3), st.integers(0, 255)),
                max_size=8))
def test_coherence_read_after_write(ops):
    arb = RoundRobinArbiter()
    for port, off, val in ops:
        arb.submit(MemAccess(port, AccessKind.WRITE, off, data=val))
        arb.submit(MemAccess(port, AccessKind.READ, off))
    last = {}
    for done in arb.run_all():
        a = done.access
        if a.kind is AccessKind.WRITE:
            last[a.offset] = a.data
        else:
            assert done.value == last.get(a.offset, 0)
