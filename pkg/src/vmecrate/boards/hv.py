"""Injector high-voltage controller: setpoint ramp, interlocks, over-current
trip and bleed-off lockout for a 100 kV supply and four HV relays.

Output voltage is held as an analytic segment (start tick, start voltage,
mode) rather than integrated tick by tick, so ``tick(a); tick(b)`` lands on
exactly the same floating-point state as ``tick(a + b)``.
"""

import enum
import math
from dataclasses import dataclass

from ..board import Board
from ..bus import Width
from ..errors import ConfigError
from ..registers import Access, RegisterMap

MAX_KV = 100.0
SETPOINT_UNITS_PER_KV = 100  # setpoint register counts 10 V steps


class Mode(enum.IntEnum):
    OFF = 0
    RAMPING = 1
    AT_SETPOINT = 2
    TRIPPED = 3
    BLEED_OFF = 4


class Reject(enum.Enum):
    INTERLOCK_OPEN = "InterlockOpen"
    BLEED_ACTIVE = "BleedActive"
    VOLTAGE_PRESENT = "VoltagePresent"
    ALREADY_ON = "AlreadyOn"


# command register bits
CMD_ON = 0x01
CMD_OFF = 0x02
# status register bits (mode lives in bits 0-2)
ST_DRIVE = 0x08
ST_BLEED_TIMER = 0x10
ST_VOLTAGE_PRESENT = 0x20
# fault register bits (RW1C)
FAULT_OVERCURRENT = 0x01
FAULT_INTERLOCK = 0x02
FAULT_REJECTED = 0x04

REGISTER_MAP = RegisterMap.contiguous_bytes(
    ["command", "status", "fault", "interlock", "setpoint_hi", "setpoint_lo",
     "readback_hi", "readback_lo", "relays"],
    command={"access": Access.WO},
    status={"access": Access.RO},
    fault={"access": Access.RW1C},
    interlock={"access": Access.RO, "reset_value": 0xFF},
    readback_hi={"access": Access.RO},
    readback_lo={"access": Access.RO},
)


@dataclass(frozen=True)
class HvConfig:
    ramp_rate_kV_per_s: float = 5.0
    overcurrent_limit_uA: float = 100.0
    bleed_time_s: float = 10.0
    rearm_threshold_kV: float = 1.0
    bleed_tau_s: float = 2.0
    vf_full_scale_hz: float = 1_000_000.0
    vf_gate_s: float = 0.01
    current_full_scale_uA: float = 1000.0

    def __post_init__(self):
        for name in ("ramp_rate_kV_per_s", "overcurrent_limit_uA", "bleed_time_s",
                     "rearm_threshold_kV", "bleed_tau_s", "vf_full_scale_hz", "vf_gate_s",
                     "current_full_scale_uA"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.rearm_threshold_kV >= MAX_KV:
            raise ConfigError("rearm threshold must be below 100 kV")


@dataclass(frozen=True)
class HvReadback:
    setpoint_dac: int
    limit_dac: int
    voltage_count: int
    current_count: int


def dac_code(value, full_scale):
    return int(math.floor(min(max(value, 0.0), full_scale) / full_scale * 65535 + 0.5))


class HvController(Board):
    kind = "hv"
    clock_hz = 10_000_000
    bus_width = Width.D08
    register_map = REGISTER_MAP

    def __init__(self, name=None, config=None, latency_ticks=2):
        self.config = config or HvConfig()
        super().__init__(name, latency_ticks)

    def reset_state(self):
        self.mode = Mode.OFF
        self.seg_start = self.now
        self.seg_v0 = 0.0
        self.setpoint_kV = 0.0
        self.current_uA = 0.0
        self.interlock_mask = 0xFF
        self.off_tick = None
        self.relay_state = (False,) * 4
        self.last_reject = None
        self._sync_registers()

    # -- derived quantities ---------------------------------------------------

    @property
    def bleed_ticks(self):
        return int(round(self.config.bleed_time_s * self.clock_hz))

    @property
    def drive_enabled(self):
        return self.mode in (Mode.RAMPING, Mode.AT_SETPOINT)

    @property
    def interlocks_ok(self):
        return self.interlock_mask == 0xFF

    def _ramp_value(self, tick):
        elapsed = tick - self.seg_start
        delta = self.config.ramp_rate_kV_per_s * elapsed / self.clock_hz
        if self.setpoint_kV >= self.seg_v0:
            return min(self.setpoint_kV, self.seg_v0 + delta)
        return max(self.setpoint_kV, self.seg_v0 - delta)

    def _decay_value(self, tick):
        elapsed = tick - self.seg_start
        return self.seg_v0 * math.exp(-elapsed / (self.clock_hz * self.config.bleed_tau_s))

    def output_at(self, tick):
        if self.mode is Mode.RAMPING:
            return self._ramp_value(tick)
        if self.mode is Mode.AT_SETPOINT:
            return self.setpoint_kV
        return self._decay_value(tick)

    @property
    def output_kV(self):
        return self.output_at(self.now)

    def bleed_timer_active(self, tick=None):
        tick = self.now if tick is None else tick
        return self.off_tick is not None and tick - self.off_tick < self.bleed_ticks

    def _arrival_tick(self):
        rate = self.config.ramp_rate_kV_per_s
        k = self.seg_start + math.ceil(abs(self.setpoint_kV - self.seg_v0) * self.clock_hz / rate)
        while k > self.seg_start and self._ramp_value(k - 1) == self.setpoint_kV:
            k -= 1
        while self._ramp_value(k) != self.setpoint_kV:
            k += 1
        return k

    def _voltage_clear_tick(self):
        thr = self.config.rearm_threshold_kV
        if self.seg_v0 < thr:
            return self.seg_start
        scale = self.clock_hz * self.config.bleed_tau_s
        k = self.seg_start + math.ceil(scale * math.log(self.seg_v0 / thr))
        while k > self.seg_start and self._decay_value(k - 1) < thr:
            k -= 1
        while self._decay_value(k) >= thr:
            k += 1
        return k

    # -- state transitions --------------------------------------------------

    def _start_segment(self, mode, tick, v0):
        self.mode = mode
        self.seg_start = tick
        self.seg_v0 = v0

    def command_on(self, setpoint_kV=None):
        """Request turn-on. Returns ``(accepted, reason)``; reason is a :class:`Reject` or None."""
        if setpoint_kV is not None:
            if not 0.0 <= setpoint_kV <= MAX_KV:
                raise ConfigError(f"setpoint {setpoint_kV} kV outside 0..100")
            self._set_setpoint(setpoint_kV, retarget=False)
        reason = None
        if self.drive_enabled:
            reason = Reject.ALREADY_ON
        elif not self.interlocks_ok:
            reason = Reject.INTERLOCK_OPEN
        elif self.bleed_timer_active():
            reason = Reject.BLEED_ACTIVE
        elif self.output_kV >= self.config.rearm_threshold_kV:
            reason = Reject.VOLTAGE_PRESENT
        elif self.mode is not Mode.OFF:
            reason = Reject.BLEED_ACTIVE
        self.last_reject = reason
        if reason is not None:
            self.regs[2] |= FAULT_REJECTED
            self._sync_registers()
            return False, reason
        self._start_segment(Mode.RAMPING, self.now, self.output_kV)
        self.emit("HV ON", {"setpoint_kV": self.setpoint_kV})
        self._check_trip()
        self._sync_registers()
        return True, None

    def command_off(self):
        if self.drive_enabled:
            self._enter_bleed(Mode.BLEED_OFF)
            self.emit("HV OFF")
        self._sync_registers()

    def _enter_bleed(self, mode):
        self._start_segment(mode, self.now, self.output_kV)
        self.off_tick = self.now

    def _check_trip(self):
        if not self.drive_enabled:
            return
        fault = 0
        if self.current_uA > self.config.overcurrent_limit_uA:
            fault |= FAULT_OVERCURRENT
        if not self.interlocks_ok:
            fault |= FAULT_INTERLOCK
        if fault:
            self.regs[2] |= fault
            self._enter_bleed(Mode.TRIPPED)
            self.emit("FAULT", {"fault": fault, "current_uA": self.current_uA,
                                "interlock": self.interlock_mask})

    def set_load_current(self, current_uA):
        if current_uA < 0:
            raise ValueError("load current cannot be negative")
        self.current_uA = float(current_uA)
        self._check_trip()
        self._sync_registers()

    def set_interlock(self, bit, ok):
        if not 0 <= bit < 8:
            raise ValueError("interlock bits are 0..7")
        if ok:
            self.interlock_mask |= 1 << bit
        else:
            self.interlock_mask &= ~(1 << bit) & 0xFF
        self._check_trip()
        self._sync_registers()

    def set_interlock_mask(self, mask):
        self.interlock_mask = mask & 0xFF
        self._check_trip()
        self._sync_registers()

    def _set_setpoint(self, setpoint_kV, retarget=True):
        setpoint_kV = min(max(setpoint_kV, 0.0), MAX_KV)
        if retarget and self.drive_enabled and setpoint_kV != self.setpoint_kV:
            v = self.output_kV
            self.setpoint_kV = setpoint_kV
            self._start_segment(Mode.RAMPING, self.now, v)
        else:
            self.setpoint_kV = setpoint_kV
        code = int(round(self.setpoint_kV * SETPOINT_UNITS_PER_KV))
        self.regs[4] = code >> 8
        self.regs[5] = code & 0xFF

    def step(self, dt_ticks):
        self.tick(dt_ticks)

    def advance(self, start, end):
        if self.mode is Mode.TRIPPED:
            self.mode = Mode.BLEED_OFF
        while True:
            if self.mode is Mode.RAMPING:
                k = self._arrival_tick()
                if k <= end:
                    self._start_segment(Mode.AT_SETPOINT, k, self.setpoint_kV)
                    continue
            elif self.mode is Mode.BLEED_OFF:
                k = max(self.off_tick + self.bleed_ticks, self._voltage_clear_tick())
                if k <= end:
                    self.mode = Mode.OFF
                    continue
            break
        self._sync_registers(end)

    # -- readback -----------------------------------------------------------

    def readback(self, tick=None):
        tick = self.now if tick is None else tick
        cfg = self.config
        full_count = round(cfg.vf_full_scale_hz * cfg.vf_gate_s)
        v = min(max(self.output_at(tick), 0.0), MAX_KV)
        i = min(max(self.current_uA, 0.0), cfg.current_full_scale_uA)
        return HvReadback(
            setpoint_dac=dac_code(self.setpoint_kV, MAX_KV),
            limit_dac=dac_code(cfg.overcurrent_limit_uA, cfg.current_full_scale_uA),
            voltage_count=math.floor(v * full_count / MAX_KV),
            current_count=math.floor(i * full_count / cfg.current_full_scale_uA),
        )

    def _sync_registers(self, tick=None):
        tick = self.now if tick is None else tick
        status = int(self.mode)
        if self.drive_enabled:
            status |= ST_DRIVE
        if self.bleed_timer_active(tick):
            status |= ST_BLEED_TIMER
        if self.output_at(tick) >= self.config.rearm_threshold_kV:
            status |= ST_VOLTAGE_PRESENT
        self.regs[1] = status
        self.regs[3] = self.interlock_mask

    def refresh_register(self, name):
        if name in ("readback_hi", "readback_lo"):
            count = self.readback().voltage_count & 0xFFFF
            self.regs[6] = count >> 8
            self.regs[7] = count & 0xFF
        elif name in ("status", "interlock"):
            self._sync_registers()

    def on_write(self, name, value):
        if name == "command":
            if value & CMD_OFF:
                self.command_off()
            elif value & CMD_ON:
                self.command_on()
        elif name == "setpoint_lo":
            code = (self.regs[4] << 8) | self.regs[5]
            self._set_setpoint(code / SETPOINT_UNITS_PER_KV)
            # keep the register contents as written; the setpoint itself is clamped
            self.regs[4], self.regs[5] = code >> 8, value
        elif name == "relays":
            self.relay_state = tuple(bool(value >> i & 1) for i in range(4))

    def snapshot(self):
        snap = super().snapshot()
        snap.update(mode=self.mode.name, output_kV=self.output_kV, setpoint_kV=self.setpoint_kV,
                    current_uA=self.current_uA, interlock_mask=self.interlock_mask,
                    relays=list(self.relay_state))
        return snap
