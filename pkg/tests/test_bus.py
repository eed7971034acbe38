import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmecrate.boards.hv import HvController
from vmecrate.bus import (Address, BusCycle, CycleKind, InterruptRequest, Outcome, Space, VmeBus,
                          Width)
from vmecrate.errors import MalformedCycleError, OverlapError, SlotOccupiedError
from vmecrate.registers import RegisterDescriptor, RegisterMap
from vmecrate.board import Board

from oracles import iack_order

A16, A24 = Space.A16, Space.A24


class Plain(Board):
    kind = "plain"
    register_map = RegisterMap.contiguous_bytes([f"r{i}" for i in range(8)])


class Wide(Board):
    kind = "wide"
    bus_width = Width.D16
    register_map = RegisterMap([RegisterDescriptor("w0", 0, 16), RegisterDescriptor("w1", 2, 16)], 4)


def test_address_limits():
    Address(A16, 0xFFFF)
    with pytest.raises(MalformedCycleError):
        Address(A16, 0x10000)
    Address(A24, 0xFFFFFF)
    with pytest.raises(MalformedCycleError):
        Address(A24, 1 << 24)


def test_attach_overlap_example():
    bus = VmeBus()
    bus.attach(3, HvController("hv"), Address(A16, 0xC000), 16)
    with pytest.raises(OverlapError):
        bus.attach(4, Plain("x"), Address(A16, 0xC008), 16)


def test_attach_mps_window_and_distinct_spaces():
    bus = VmeBus()
    bus.attach(1, Plain("m"), Address(A24, 0x200000), 0x800000)
    bus2 = VmeBus()
    bus2.attach(1, Plain("a"), Address(A16, 0), 8)
    bus2.attach(2, Plain("b"), Address(A24, 0), 8)


def test_slot_occupied():
    bus = VmeBus()
    bus.attach(1, Plain("a"), Address(A16, 0), 8)
    with pytest.raises(SlotOccupiedError):
        bus.attach(1, Plain("b"), Address(A16, 0x100), 8)


def test_write_read_round_trip_example():
    bus = VmeBus()
    bus.attach(3, HvController("hv"), Address(A16, 0xC000), 9)
    assert bus.write(Address(A16, 0xC008), 0xAB).ok
    result = bus.read(Address(A16, 0xC008))
    assert result.outcome is Outcome.DTACK and result.data == 0xAB
    assert result.latency_ticks == 2


def test_unmapped_read_is_bus_error():
    bus = VmeBus()
    result = bus.read(Address(A16, 0xFF00))
    assert result.outcome is Outcome.BUS_ERROR and result.data == 0


def test_d16_odd_address_is_malformed():
    with pytest.raises(MalformedCycleError):
        BusCycle(CycleKind.READ, Address(A24, 0x101), Width.D16)


def test_d16_to_8_bit_board_is_bus_error():
    bus = VmeBus()
    bus.attach(3, HvController("hv"), Address(A16, 0xC000), 9)
    assert bus.read(Address(A16, 0xC000), Width.D16).outcome is Outcome.BUS_ERROR


def test_data_must_fit_width():
    with pytest.raises(MalformedCycleError):
        BusCycle(CycleKind.WRITE, Address(A16, 0), Width.D08, 0x100)
    with pytest.raises(MalformedCycleError):
        BusCycle(CycleKind.READ, Address(A16, 0), beat_count=2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 0x3F), min_size=1, max_size=4, unique=True))
def test_routing_partition(bases):
    """Every byte of a small space maps to exactly the owning window or to BusError."""
    bus = VmeBus()
    owners = {}
    slot = 1
    for b in sorted(bases):
        base = b * 8
        try:
            bus.attach(slot, Plain(f"p{slot}"), Address(A16, base), 8)
        except OverlapError:
            continue
        for a in range(base, base + 8):
            owners[a] = slot
        slot += 1
    for a in range(0, 0x200 + 16):
        reg = bus.route(A16, a)
        if a in owners:
            assert reg is not None and reg.slot == owners[a]
        else:
            assert reg is None
            assert bus.read(Address(A16, a)).outcome is Outcome.BUS_ERROR


def _dsp_bus():
    from vmecrate.boards.dsp import DualDspBoard

    bus = VmeBus()
    dsp = DualDspBoard("dsp")
    bus.attach(5, dsp, Address(A24, 0x400000), 128 * 1024, region="memory")
    return bus, dsp


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200), st.lists(st.integers(0, 0xFFFF), min_size=1, max_size=16))
def test_block_equals_single_cycles(start_word, words):
    bus_a, dsp_a = _dsp_bus()
    bus_b, dsp_b = _dsp_bus()
    start = Address(A24, 0x400000 + 2 * start_word)
    _, res = bus_a.block_transfer(start, len(words), Width.D16, "WriteIn", words)
    assert res.ok
    for i, w in enumerate(words):
        assert bus_b.write(start + 2 * i, w, Width.D16).ok
    assert dsp_a.memory == dsp_b.memory
    assert dsp_a.arbiter.grant_counts == dsp_b.arbiter.grant_counts
    block, res = bus_a.block_transfer(start, len(words), Width.D16, "ReadOut")
    singles = [bus_b.read(start + 2 * i, Width.D16).data for i in range(len(words))]
    assert block == singles == words


def test_block_crossing_window_end_is_bus_error():
    bus, _ = _dsp_bus()
    end = 0x400000 + 128 * 1024
    words, res = bus.block_transfer(Address(A24, end - 4), 4, Width.D16, "ReadOut")
    assert res.outcome is Outcome.BUS_ERROR and words == []


def test_block_on_unsupported_board_is_bus_error():
    bus = VmeBus()
    bus.attach(3, HvController("hv"), Address(A16, 0xC000), 9)
    _, res = bus.block_transfer(Address(A16, 0xC000), 2, Width.D08, "ReadOut")
    assert res.outcome is Outcome.BUS_ERROR


def test_block_fault_keeps_earlier_beats():
    bus, dsp = _dsp_bus()
    end = 0x400000 + 128 * 1024
    _, res = bus.block_transfer(Address(A24, end - 4), 3, Width.D16, "WriteIn", [1, 2, 3])
    assert not res.ok
    assert dsp.memory[-4:] == bytes([0, 1, 0, 2])


def test_block_latency_overlaps_address_phase():
    bus, _ = _dsp_bus()
    _, res = bus.block_transfer(Address(A24, 0x400000), 8, Width.D16, "ReadOut")
    assert res.latency_ticks == 2 + 7 * 1


def test_rmw_examples():
    bus, dsp = _dsp_bus()
    sem = Address(A24, 0x400010)
    first = bus.read_modify_write(sem, Width.D08, 0x01, 0x01)
    assert first.data == 0x00 and dsp.memory[0x10] == 0x01
    second = bus.read_modify_write(sem, Width.D08, 0x01, 0x01)
    assert second.data == 0x01


@given(st.integers(0, 0xFF), st.integers(0, 0xFF), st.integers(0, 0xFF))
def test_rmw_formula(old, mask, set_bits):
    bus, dsp = _dsp_bus()
    dsp.memory[7] = old
    res = bus.read_modify_write(Address(A24, 0x400007), Width.D08, mask, set_bits)
    assert res.data == old
    assert dsp.memory[7] == (old & ~mask & 0xFF) | (set_bits & mask)


def test_rmw_unsupported_is_bus_error():
    bus = VmeBus()
    bus.attach(3, HvController("hv"), Address(A16, 0xC000), 9)
    assert not bus.read_modify_write(Address(A16, 0xC008), Width.D08, 1, 1).ok


def _irq_bus(slots):
    bus = VmeBus()
    for s in slots:
        bus.attach(s, Plain(f"p{s}"), Address(A16, 0x100 * s), 8)
    return bus


def test_post_interrupt_examples():
    bus = _irq_bus([2, 3])
    req = InterruptRequest(3, 0x40, 2)
    bus.post_interrupt(req)
    assert bus.pending(3) == [req]
    bus.post_interrupt(InterruptRequest(3, 0x40, 2))
    assert len(bus.pending(3)) == 1
    bus.post_interrupt(InterruptRequest(2, 0x11, 3))
    bus.post_interrupt(InterruptRequest(5, 0x22, 3))
    assert len(bus.pending(2)) == 1 and len(bus.pending(5)) == 1


def test_acknowledge_daisy_chain_example():
    bus = _irq_bus([2, 5])
    bus.post_interrupt(InterruptRequest(4, 0x55, 5))
    bus.post_interrupt(InterruptRequest(4, 0x22, 2))
    assert bus.acknowledge(4).data == 0x22
    assert bus.acknowledge(4).data == 0x55
    assert bus.acknowledge(4).outcome is Outcome.BUS_ERROR


def test_spurious_acknowledge():
    assert VmeBus().acknowledge(6).outcome is Outcome.BUS_ERROR


def test_d08_acknowledge_truncates():
    bus = _irq_bus([2])
    bus.post_interrupt(InterruptRequest(1, 0x1234, 2, Width.D16))
    assert bus.acknowledge(1, Width.D08).data == 0x34


def test_interrupt_request_validation():
    with pytest.raises(ValueError):
        InterruptRequest(0, 1, 1)
    with pytest.raises(ValueError):
        InterruptRequest(1, 0x100, 1, Width.D08)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 8), st.integers(0, 2), st.integers(0, 0xFF)),
                max_size=7))
def test_iack_matches_sort_oracle(posts):
    bus = _irq_bus(range(1, 9))
    kept = []
    for slot, source, vector in posts:
        if bus.post_interrupt(InterruptRequest(2, vector, slot, source=source)):
            kept.append((slot, source, vector))
    got = []
    while True:
        res = bus.acknowledge(2)
        if not res.ok:
            break
        got.append(res.data)
    assert got == iack_order(kept)


def test_trace_records_cycles(crate):
    addr, _ = crate.address_of("hv", "relays")
    crate.bus.write(addr, 3)
    crate.bus.read(Address(A16, 0xFF00))
    recs = crate.trace.records
    assert recs[-2][1] == "Write" and recs[-2][6] == "Dtack" and recs[-2][7] == 3
    assert recs[-1][1] == "Read" and recs[-1][6] == "BusError" and recs[-1][7] is None
