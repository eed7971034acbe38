import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmecrate.boards.hv import (CMD_OFF, CMD_ON, FAULT_INTERLOCK, FAULT_OVERCURRENT,
                                FAULT_REJECTED, ST_DRIVE, HvConfig, HvController, Mode, Reject,
                                dac_code)
from vmecrate.bus import Width
from vmecrate.errors import BusError, ConfigError

SEC = 10_000_000  # 10 MHz ticks


def test_cold_turn_on_accepted():
    hv = HvController()
    assert hv.command_on(50.0) == (True, None)
    assert hv.mode is Mode.RAMPING and hv.drive_enabled


def test_turn_on_during_bleed_rejected():
    hv = HvController()
    hv.command_on(0.5)
    hv.tick(SEC)
    hv.command_off()
    hv.tick(SEC)
    assert hv.command_on() == (False, Reject.BLEED_ACTIVE)
    assert hv.get_reg("fault") & FAULT_REJECTED


def test_open_interlock_rejects():
    hv = HvController()
    hv.set_interlock(2, False)
    assert hv.command_on(10.0) == (False, Reject.INTERLOCK_OPEN)


def test_already_on():
    hv = HvController()
    hv.command_on(10.0)
    assert hv.command_on() == (False, Reject.ALREADY_ON)


def test_ramp_rate_times_time():
    hv = HvController()
    hv.command_on(100.0)
    hv.step(10 * SEC)
    assert hv.output_kV == 50.0
    assert hv.mode is Mode.RAMPING


def test_ramp_clamps_at_setpoint():
    hv = HvController()
    hv.command_on(12.0)
    hv.step(3 * SEC)
    assert hv.output_kV == 12.0
    assert hv.mode is Mode.AT_SETPOINT


def test_overcurrent_trips_within_one_step():
    hv = HvController()
    hv.command_on(50.0)
    hv.step(SEC)
    hv.set_load_current(150.0)
    assert hv.mode is Mode.TRIPPED and not hv.drive_enabled
    assert hv.get_reg("fault") & FAULT_OVERCURRENT
    hv.step(1)
    assert hv.mode is Mode.BLEED_OFF


def test_interlock_opening_trips():
    hv = HvController()
    hv.command_on(50.0)
    hv.step(100)
    hv.set_interlock(5, False)
    assert not hv.drive_enabled and hv.get_reg("fault") & FAULT_INTERLOCK


def test_readback_examples():
    hv = HvController()
    assert hv.readback().voltage_count == 0
    hv.command_on(100.0)
    hv.step(10 * SEC)
    rb = hv.readback()
    assert rb.voltage_count == 5000
    assert rb.setpoint_dac == 65535
    assert dac_code(100.0, 100.0) == 65535 and dac_code(0.0, 100.0) == 0
    assert rb.limit_dac == dac_code(100.0, 1000.0)


def test_bleed_lockout_timer_alone():
    hv = HvController()
    hv.command_on(0.5)
    hv.step(SEC)
    hv.command_off()
    hv.step(5 * SEC)
    assert hv.output_kV < hv.config.rearm_threshold_kV
    assert hv.command_on() == (False, Reject.BLEED_ACTIVE)
    hv.step(5 * SEC)
    assert hv.mode is Mode.OFF
    assert hv.command_on()[0]


def test_bleed_lockout_voltage_alone():
    hv = HvController(config=HvConfig(bleed_tau_s=5.0))
    hv.command_on(100.0)
    hv.step(20 * SEC)
    hv.command_off()
    hv.step(10 * SEC)
    assert not hv.bleed_timer_active()
    assert hv.output_kV >= 1.0
    assert hv.command_on() == (False, Reject.VOLTAGE_PRESENT)
    clear = 5.0 * math.log(100.0 / 1.0)
    hv.step(int((clear - 10) * SEC) + 2)
    assert hv.mode is Mode.OFF and hv.command_on()[0]


def test_bleed_off_to_off_when_both_clear():
    hv = HvController()
    hv.command_on(20.0)
    hv.step(5 * SEC)
    hv.command_off()
    assert hv.mode is Mode.BLEED_OFF
    hv.step(10 * SEC - 1)
    assert hv.mode is Mode.BLEED_OFF
    hv.step(1)
    assert hv.mode is Mode.OFF


def test_config_validation():
    with pytest.raises(ConfigError):
        HvConfig(rearm_threshold_kV=100.0)
    with pytest.raises(ConfigError):
        HvConfig(ramp_rate_kV_per_s=0)
    with pytest.raises(ConfigError):
        HvController().command_on(150.0)


def test_register_interface():
    hv = HvController()
    code = 5000  # 50.00 kV in 10 V units
    hv.bus_write("regs", 4, Width.D08, code >> 8)
    hv.bus_write("regs", 5, Width.D08, code & 0xFF)
    assert hv.setpoint_kV == 50.0
    hv.bus_write("regs", 0, Width.D08, CMD_ON)
    assert hv.mode is Mode.RAMPING
    status = hv.bus_read("regs", 1, Width.D08)
    assert status & 7 == Mode.RAMPING and status & ST_DRIVE
    assert hv.bus_read("regs", 0, Width.D08) == 0     # WO reads zero
    with pytest.raises(BusError):
        hv.bus_write("regs", 1, Width.D08, 0xFF)
    hv.step(20 * SEC)
    count = (hv.bus_read("regs", 6, Width.D08) << 8) | hv.bus_read("regs", 7, Width.D08)
    assert count == 5000
    hv.bus_write("regs", 0, Width.D08, CMD_OFF)
    assert hv.mode is Mode.BLEED_OFF
    hv.bus_write("regs", 8, Width.D08, 0x0A)
    assert hv.relay_state == (False, True, False, True)
    hv.set_load_current(500.0)
    hv.regs[2] = 0x05
    hv.bus_write("regs", 2, Width.D08, 0x01)
    assert hv.get_reg("fault") == 0x04


def test_retarget_while_ramping():
    hv = HvController()
    hv.command_on(100.0)
    hv.step(2 * SEC)
    hv._set_setpoint(5.0)
    hv.step(SEC)
    assert hv.output_kV == 5.0 and hv.mode is Mode.AT_SETPOINT


def test_events_emitted():
    seen = []
    hv = HvController()
    hv.events = lambda board, kind, info: seen.append(kind)
    hv.command_on(10.0)
    hv.set_load_current(200.0)
    assert seen == ["HV ON", "FAULT"]


actions = st.lists(st.one_of(
    st.tuples(st.just("on"), st.floats(0, 100)),
    st.tuples(st.just("off"), st.just(0)),
    st.tuples(st.just("step"), st.integers(1, 30 * SEC)),
    st.tuples(st.just("ilk"), st.integers(0, 15)),
    st.tuples(st.just("cur"), st.floats(0, 200)),
), max_size=12)


@settings(max_examples=150, deadline=None)
@given(actions)
def test_hv_invariants(seq):
    hv = HvController()
    for verb, arg in seq:
        before_v = hv.output_kV
        before_mode = hv.mode
        if verb == "on":
            bleeding = hv.bleed_timer_active() or hv.output_kV >= hv.config.rearm_threshold_kV
            ok, _ = hv.command_on(arg)
            if ok:
                assert not bleeding and hv.interlocks_ok
        elif verb == "off":
            hv.command_off()
        elif verb == "step":
            hv.step(arg)
            if before_mode is Mode.RAMPING and hv.mode in (Mode.RAMPING, Mode.AT_SETPOINT):
                if hv.setpoint_kV >= before_v:
                    assert hv.output_kV >= before_v
        elif verb == "ilk":
            hv.set_interlock(arg % 8, arg < 8)
        else:
            hv.set_load_current(arg)
        assert 0 <= hv.output_kV <= 100.0
        if hv.mode in (Mode.RAMPING, Mode.AT_SETPOINT):
            assert hv.output_kV <= hv.setpoint_kV or hv.setpoint_kV < before_v
        if not hv.interlocks_ok:
            assert hv.mode in (Mode.TRIPPED, Mode.BLEED_OFF, Mode.OFF)
            assert not hv.drive_enabled
