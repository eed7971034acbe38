"""Machine-protection comparator: instantaneous and integrated beam loss,
operator current limits, latched shutdown and the 8 MiB history buffer.

The integrated loss is a leaky integrator whose decay constant depends on
the size of the present loss. This is a reconstruction: the original
firmware's adaptive algorithm is not documented.

History records are 24 bytes, big-endian::

    u32 timestamp (40 MHz ticks / 1024)
    u16 injector current (0.01 uA)
    7 x u16 end-station currents (0.01 uA, unused stations zero)
    i16 instantaneous loss (0.01 uA, unclamped)
    u16 flags (bit 15 valid, bit 0 shutdown, bit 1 integrated over limit,
               bits 2-9 per-location over limit, location 0 = injector)
"""

import csv
import math
import struct
from dataclasses import dataclass, field

from ..board import Board
from ..bus import Width
from ..errors import BusError, ConfigError, FormatError
from ..registers import Access, RegisterDescriptor, RegisterMap

BUFFER_BYTES = 8 * 1024 * 1024
RECORD = struct.Struct(">IH7HhH")
RECORD_BYTES = RECORD.size
CAPACITY = BUFFER_BYTES // RECORD_BYTES
MAX_STATIONS = 7
TIMESTAMP_SHIFT = 10
FRAME_CLOCK_HZ = 40_000_000

FLAG_VALID = 0x8000
FLAG_SHUTDOWN = 0x0001
FLAG_INTEGRATED = 0x0002
FLAG_LOCATION0 = 0x0004

DUMP_MAGIC = b"MPSH"
DUMP_HEADER = struct.Struct(">4sHHII")

assert RECORD_BYTES == 24 and CAPACITY == 349525


def quantize(value_uA):
    """0.01 uA grid with round-half-away-from-zero."""
    scaled = abs(value_uA) * 100.0
    q = math.floor(scaled + 0.5)
    return -q if value_uA < 0 else q


def _sat(value, lo, hi):
    return lo if value < lo else hi if value > hi else value


@dataclass(frozen=True)
class CurrentFrame:
    timestamp_ticks: int
    injector_uA: float
    station_uA: tuple

    def __post_init__(self):
        object.__setattr__(self, "station_uA", tuple(self.station_uA))
        values = (self.injector_uA, *self.station_uA)
        if not all(math.isfinite(v) and v >= 0 for v in values):
            raise ValueError("currents must be finite and non-negative")
        if len(self.station_uA) > MAX_STATIONS:
            raise ValueError("at most seven end stations")


@dataclass(frozen=True)
class ShutdownReason:
    kind: str                 # "LocationLimit" or "IntegratedLimit"
    index: int = None

    def __str__(self):
        return f"LocationLimit({self.index})" if self.kind == "LocationLimit" else self.kind


@dataclass(frozen=True)
class TripDecision:
    location_flags: tuple
    instantaneous_uA: float
    integrated_uAs: float
    shutdown: bool
    reason: ShutdownReason = None
    tripped_now: bool = False


@dataclass(frozen=True)
class HistoryRecord:
    timestamp_ticks: int
    injector_uA: float
    station_uA: tuple
    loss_uA: float
    flags: int

    def to_bytes(self):
        stations = list(self.station_uA) + [0.0] * (MAX_STATIONS - len(self.station_uA))
        return RECORD.pack(
            _sat(self.timestamp_ticks >> TIMESTAMP_SHIFT, 0, 0xFFFFFFFF),
            _sat(quantize(self.injector_uA), 0, 0xFFFF),
            *(_sat(quantize(s), 0, 0xFFFF) for s in stations),
            _sat(quantize(self.loss_uA), -0x8000, 0x7FFF),
            (self.flags | FLAG_VALID) & 0xFFFF,
        )

    @classmethod
    def from_bytes(cls, data):
        ts, inj, *rest = RECORD.unpack(data)
        stations, loss, flags = rest[:MAX_STATIONS], rest[MAX_STATIONS], rest[MAX_STATIONS + 1]
        if not flags & FLAG_VALID:
            raise FormatError("history record lacks the valid flag")
        return cls(ts << TIMESTAMP_SHIFT, inj / 100, tuple(s / 100 for s in stations),
                   loss / 100, flags)


@dataclass(frozen=True)
class MpsConfig:
    station_count: int = 2
    location_limits_uA: tuple = None   # injector first, then stations; default 200 uA each
    integrated_limit_uAs: float = 1.0
    tau_slow_s: float = 1.0
    tau_fast_s: float = 10.0
    loss_knee_uA: float = 5.0
    frame_period_s: float = 1e-4
    dac_full_scale_uA: float = 10.0

    def __post_init__(self):
        if not 1 <= self.station_count <= MAX_STATIONS:
            raise ConfigError("station count must be 1..7")
        limits = self.location_limits_uA
        if limits is None:
            limits = (200.0,) * (self.station_count + 1)
        limits = tuple(float(x) for x in limits)
        if len(limits) != self.station_count + 1:
            raise ConfigError("need one limit for the injector and one per station")
        if any(not 0 <= x <= 655.35 for x in limits):
            raise ConfigError("limits must fit the 16-bit 0.01 uA register range")
        object.__setattr__(self, "location_limits_uA", limits)
        if not 0 <= self.integrated_limit_uAs <= 655.35:
            raise ConfigError("integrated limit must fit the 16-bit 0.01 uA*s register range")
        if not (self.tau_slow_s > 0 and self.tau_fast_s > 0):
            raise ConfigError("decay constants must be positive (use inf to disable decay)")
        if self.tau_fast_s < self.tau_slow_s:
            raise ConfigError("tau_fast (used at or above the knee) must not be shorter than tau_slow")
        if self.frame_period_s <= 0 or self.dac_full_scale_uA <= 0:
            raise ConfigError("frame period and DAC full scale must be positive")


def instantaneous_loss(injector_uA, station_uA):
    return injector_uA - sum(station_uA)


def decay_tau(loss_uA, config):
    return config.tau_slow_s if loss_uA < config.loss_knee_uA else config.tau_fast_s


def update_integrated(integrated, loss_uA, dt_s, config):
    """One step of the adaptive leaky integrator."""
    if not dt_s > 0:
        raise ValueError("dt must be positive")
    tau = config.tau_slow_s if loss_uA < config.loss_knee_uA else config.tau_fast_s
    value = integrated * math.exp(-dt_s / tau) + (loss_uA if loss_uA > 0 else 0.0) * dt_s
    return value if value > 0 else 0.0


def loss_dac(loss_uA, full_scale_uA, bits=16):
    """Offset-binary DAC code; midscale is zero loss."""
    mid = 1 << (bits - 1)
    top = (1 << bits) - 1
    x = mid + loss_uA / full_scale_uA * (mid - 1)
    code = math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)
    return _sat(code, 0, top)


def _build_register_map(config):
    regs = [
        RegisterDescriptor("status", 0x00, 16, Access.RO,
                           doc="bit0 shutdown, bit1 integrated trip, bits 4-7 location index"),
        RegisterDescriptor("reset", 0x02, 16, Access.WO, doc="write bit0 to clear the shutdown latch"),
        RegisterDescriptor("pointer_hi", 0x04, 16, Access.RO),
        RegisterDescriptor("pointer_lo", 0x06, 16, Access.RO),
        RegisterDescriptor("dac", 0x08, 16, Access.RO, 0x8000),
        RegisterDescriptor("integrated_limit", 0x0A, 16, Access.RW,
                           quantize(config.integrated_limit_uAs)),
        RegisterDescriptor("integrated", 0x0C, 16, Access.RO),
        RegisterDescriptor("loss", 0x0E, 16, Access.RO, signed=True),
    ]
    for i in range(MAX_STATIONS + 1):
        reset = quantize(config.location_limits_uA[i]) if i <= config.station_count else 0
        regs.append(RegisterDescriptor(f"limit_{i}", 0x10 + 2 * i, 16, Access.RW, reset))
    return RegisterMap(regs, window_bytes=0x20)


class HistoryBuffer:
    """Circular buffer of 24-byte records in an 8 MiB byte array."""

    def __init__(self):
        self.data = bytearray(BUFFER_BYTES)
        self.head = 0      # next record index to write
        self.count = 0

    def clear(self):
        self.data[:] = bytes(BUFFER_BYTES)
        self.head = 0
        self.count = 0

    @property
    def pointer(self):
        """Byte offset of the oldest record."""
        return self.head * RECORD_BYTES if self.count >= CAPACITY else 0

    def append_raw(self, ts, inj_q, stations_q, loss_q, flags):
        RECORD.pack_into(self.data, self.head * RECORD_BYTES, ts, inj_q, *stations_q, loss_q, flags)
        self.head += 1
        if self.head == CAPACITY:
            self.head = 0
        if self.count < CAPACITY:
            self.count += 1
        return self.pointer

    def append(self, record):
        self.data[self.head * RECORD_BYTES:(self.head + 1) * RECORD_BYTES] = record.to_bytes()
        self.head = (self.head + 1) % CAPACITY
        self.count = min(self.count + 1, CAPACITY)
        return self.pointer


def reconstruct(buffer, pointer):
    """Records oldest to newest from a buffer image and its oldest-record pointer."""
    if len(buffer) < CAPACITY * RECORD_BYTES:
        raise FormatError("buffer image shorter than the record area")
    if pointer % RECORD_BYTES or pointer >= CAPACITY * RECORD_BYTES:
        raise FormatError(f"pointer {pointer} is not a record boundary")
    view = memoryview(buffer)
    empty = bytes(RECORD_BYTES)
    start = pointer // RECORD_BYTES
    out = []
    for i in range(CAPACITY):
        off = ((start + i) % CAPACITY) * RECORD_BYTES
        chunk = view[off:off + RECORD_BYTES]
        if chunk == empty:
            break
        out.append(HistoryRecord.from_bytes(chunk))
    return out


def write_dump(path, buffer, pointer):
    with open(path, "wb") as fh:
        fh.write(DUMP_HEADER.pack(DUMP_MAGIC, 1, RECORD_BYTES, CAPACITY, pointer))
        fh.write(bytes(buffer))


def read_dump(path):
    """Returns ``(buffer bytes, pointer)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < DUMP_HEADER.size:
        raise FormatError("dump truncated before header end")
    magic, version, rsize, capacity, pointer = DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC or version != 1:
        raise FormatError("not an MPS history dump")
    if rsize != RECORD_BYTES or capacity != CAPACITY:
        raise FormatError("dump layout does not match 24-byte records / 349525 capacity")
    body = raw[DUMP_HEADER.size:]
    if len(body) != BUFFER_BYTES:
        raise FormatError(f"dump body is {len(body)} bytes, expected {BUFFER_BYTES}")
    return body, pointer


def history_csv(records, path_or_file):
    header = ["time", "injector"] + [f"station_{i}" for i in range(1, MAX_STATIONS + 1)] + ["loss", "flags"]

    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in records:
            writer.writerow([r.timestamp_ticks, f"{r.injector_uA:.2f}",
                             *(f"{s:.2f}" for s in r.station_uA), f"{r.loss_uA:.2f}",
                             f"0x{r.flags:04X}"])

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)


@dataclass
class LossState:
    instantaneous_uA: float = 0.0
    integrated_uAs: float = 0.0
    shutdown: bool = False
    shutdown_reason: ShutdownReason = None
    last_timestamp: int = None
    frames: int = 0
    trips: list = field(default_factory=list)


class MpsComparator(Board):
    kind = "mps"
    clock_hz = FRAME_CLOCK_HZ
    bus_width = Width.D16
    supports_block = True

    def __init__(self, name=None, config=None, latency_ticks=2, mcc_sink=None):
        self.config = config or MpsConfig()
        self.register_map = _build_register_map(self.config)
        self.history = HistoryBuffer()
        self.mcc_sink = mcc_sink
        super().__init__(name, latency_ticks)

    def reset_state(self):
        self.limits = list(self.config.location_limits_uA)
        self.integrated_limit = self.config.integrated_limit_uAs
        self.state = LossState()
        if self.history.count:
            self.history.clear()
        self._sync()

    # -- frame processing ---------------------------------------------------

    def _process(self, ts, injector, stations):
        """Core per-frame path; returns ``(flags_word, loss, tripped_now)``."""
        cfg = self.config
        st = self.state
        if len(stations) != cfg.station_count:
            raise ValueError(f"expected {cfg.station_count} station currents")
        if st.last_timestamp is None:
            dt = cfg.frame_period_s
        else:
            if ts <= st.last_timestamp:
                raise ValueError("frame timestamps must increase")
            dt = (ts - st.last_timestamp) / FRAME_CLOCK_HZ
        st.last_timestamp = ts
        loss = injector - sum(stations)
        limits = self.limits
        flags = 0
        first = None
        if injector > limits[0]:
            flags = FLAG_LOCATION0
            first = 0
        for i, s in enumerate(stations, 1):
            if s > limits[i]:
                flags |= FLAG_LOCATION0 << i
                if first is None:
                    first = i
        tau = cfg.tau_slow_s if loss < cfg.loss_knee_uA else cfg.tau_fast_s
        integ = st.integrated_uAs * math.exp(-dt / tau) + (loss if loss > 0 else 0.0) * dt
        if integ < 0:
            integ = 0.0
        st.integrated_uAs = integ
        st.instantaneous_uA = loss
        over = integ > self.integrated_limit
        if over:
            flags |= FLAG_INTEGRATED
        tripped = False
        if not st.shutdown and (first is not None or over):
            st.shutdown = True
            st.shutdown_reason = (ShutdownReason("LocationLimit", first) if first is not None
                                  else ShutdownReason("IntegratedLimit"))
            st.trips.append((st.frames, ts, st.shutdown_reason))
            tripped = True
        if st.shutdown:
            flags |= FLAG_SHUTDOWN
        st.frames += 1
        self._record(ts, injector, stations, loss, flags)
        if self.mcc_sink is not None:
            self.mcc_sink(ts, loss, integ, st.shutdown)
        if tripped:
            self.emit("Trip", {"reason": str(st.shutdown_reason), "frame": st.frames - 1,
                               "timestamp_ticks": ts})
        return flags, loss, tripped

    def _record(self, ts, injector, stations, loss, flags):
        q = quantize
        sq = [_sat(q(s), 0, 0xFFFF) for s in stations]
        if len(sq) < MAX_STATIONS:
            sq.extend([0] * (MAX_STATIONS - len(sq)))
        self.history.append_raw(
            (ts >> TIMESTAMP_SHIFT) & 0xFFFFFFFF, _sat(q(injector), 0, 0xFFFF), sq,
            _sat(q(loss), -0x8000, 0x7FFF), (flags | FLAG_VALID) & 0xFFFF)

    def evaluate(self, frame):
        """Process one CurrentFrame: integrate, check limits, latch, record."""
        flags, loss, tripped = self._process(frame.timestamp_ticks, frame.injector_uA,
                                             frame.station_uA)
        self._sync()
        st = self.state
        nloc = self.config.station_count + 1
        return TripDecision(
            location_flags=tuple(bool(flags & (FLAG_LOCATION0 << i)) for i in range(nloc)),
            instantaneous_uA=loss,
            integrated_uAs=st.integrated_uAs,
            shutdown=st.shutdown,
            reason=st.shutdown_reason,
            tripped_now=tripped,
        )

    def process_frames(self, frames):
        """Bulk path over ``(timestamp, injector, stations)`` tuples; returns trip count."""
        before = len(self.state.trips)
        proc = self._process
        for ts, injector, stations in frames:
            proc(ts, injector, stations)
        self._sync()
        return len(self.state.trips) - before

    def record(self, frame, loss, flags):
        """Append a history record directly; returns the oldest-record pointer."""
        self._record(frame.timestamp_ticks, frame.injector_uA, frame.station_uA, loss, flags)
        self._sync()
        return self.history.pointer

    def operator_reset(self):
        self.state.shutdown = False
        self.state.shutdown_reason = None
        self._sync()

    def reconstruct(self):
        return reconstruct(self.history.data, self.history.pointer)

    def dump(self, path):
        write_dump(path, self.history.data, self.history.pointer)

    # -- VME side -----------------------------------------------------------

    def bus_read(self, region, offset, width):
        if region == "buffer":
            data = self.history.data
            if width is Width.D08:
                return data[offset]
            return (data[offset] << 8) | data[offset + 1]
        return super().bus_read(region, offset, width)

    def bus_write(self, region, offset, width, value):
        if region == "buffer":
            raise BusError("history buffer is read-only from VME")
        super().bus_write(region, offset, width, value)

    def on_write(self, name, value):
        if name == "reset" and value & 1:
            self.operator_reset()
        elif name == "integrated_limit":
            self.integrated_limit = value / 100
        elif name.startswith("limit_"):
            i = int(name[6:])
            if i < len(self.limits):
                self.limits[i] = value / 100

    def _sync(self):
        st = self.state
        status = 0
        if st.shutdown:
            status |= 1
            if st.shutdown_reason.kind == "IntegratedLimit":
                status |= 2
            else:
                status |= (st.shutdown_reason.index & 0xF) << 4
        regs = self.regs
        rmap = self.register_map
        regs[rmap.index("status")] = status
        pointer = self.history.pointer
        regs[rmap.index("pointer_hi")] = pointer >> 16
        regs[rmap.index("pointer_lo")] = pointer & 0xFFFF
        regs[rmap.index("dac")] = loss_dac(st.instantaneous_uA, self.config.dac_full_scale_uA)
        regs[rmap.index("integrated")] = _sat(quantize(st.integrated_uAs), 0, 0xFFFF)
        regs[rmap.index("loss")] = _sat(quantize(st.instantaneous_uA), -0x8000, 0x7FFF) & 0xFFFF

    def snapshot(self):
        snap = super().snapshot()
        st = self.state
        snap.update(shutdown=st.shutdown, reason=None if st.shutdown_reason is None else str(st.shutdown_reason),
                    integrated_uAs=st.integrated_uAs, instantaneous_uA=st.instantaneous_uA,
                    frames=st.frames, records=self.history.count, pointer=self.history.pointer)
        return snap
