"""30 Hz timing board and the fiber token ring that links them.

Frames on the fiber use a small invented wire format::

    0x7E | dest | payload_hi | payload_lo | xor(dest, payload_hi, payload_lo)

A frame whose checksum fails at a receiver is dropped there and counted in
that board's error counter. Destination 0 is broadcast.
"""

from dataclasses import dataclass, field

from ..board import Board
from ..bus import Width
from ..errors import ConfigError, FormatError
from ..registers import Access, RegisterMap

SYNC = 0x7E
BROADCAST = 0
FRAME_BYTES = 5

CTRL_IRQ_ENABLE = 0x01
ST_LATCHED = 0x01
ST_IRQ_PENDING = 0x02
ST_TX_BUSY = 0x04
ST_LINK_DOWN = 0x08

REGISTER_MAP = RegisterMap.contiguous_bytes(
    ["control", "status", "serial_address", "irq_vector", "irq_level", "rx_payload_lo",
     "rx_payload_hi", "tx_dest", "tx_payload_lo", "tx_payload_hi", "tx_go", "error_count"],
    status={"access": Access.RO},
    serial_address={"access": Access.RO},
    irq_level={"reset_value": 3},
    rx_payload_lo={"access": Access.RO},
    rx_payload_hi={"access": Access.RO},
    tx_go={"access": Access.WO},
    error_count={"access": Access.RO},
)


@dataclass(frozen=True)
class RingFrame:
    dest: int
    payload: int
    origin: object = None

    def __post_init__(self):
        if not 0 <= self.dest <= 0xFF:
            raise ValueError("ring destination is an 8-bit serial address")
        if not 0 <= self.payload <= 0xFFFF:
            raise ValueError("ring payload is a 16-bit word")

    @property
    def is_broadcast(self):
        return self.dest == BROADCAST


def encode_frame(frame):
    hi, lo = frame.payload >> 8, frame.payload & 0xFF
    return bytes((SYNC, frame.dest, hi, lo, frame.dest ^ hi ^ lo))


def decode_frame(data, origin=None):
    if len(data) != FRAME_BYTES or data[0] != SYNC:
        raise FormatError("bad ring frame framing")
    _, dest, hi, lo, check = data
    if dest ^ hi ^ lo != check:
        raise FormatError("ring frame checksum mismatch")
    return RingFrame(dest, (hi << 8) | lo, origin)


@dataclass
class DeliveryReport:
    """Arrival ticks are relative to ``start_tick``, the tick the frame left the originator."""

    origin: str
    frame: RingFrame
    start_tick: int
    arrivals: list = field(default_factory=list)      # (board name, arrival tick)
    unreachable: list = field(default_factory=list)   # board names past a break
    dropped_at: str = None                            # board that rejected a corrupt frame
    lap_ticks: int = 0

    @property
    def delivered_to(self):
        return [name for name, _ in self.arrivals]


class RingBoard(Board):
    kind = "ring"
    clock_hz = 20_000_000
    bus_width = Width.D16
    register_map = REGISTER_MAP

    def __init__(self, name=None, serial_address=1, hop_delay_ticks=10, latency_ticks=2):
        if not 1 <= serial_address <= 0xFF:
            raise ConfigError("serial address must be 1..255 (0 is broadcast)")
        if hop_delay_ticks <= 0:
            raise ConfigError("hop delay must be positive")
        self.serial_address = serial_address
        self.hop_delay_ticks = hop_delay_ticks
        self.ring = None
        super().__init__(name, latency_ticks)

    def reset_state(self):
        self.irq_enabled = False
        self.irq_level = 3
        self.vector = 0
        self.last_payload = 0
        self.up = True
        self.received = 0
        self.latched = 0
        self.interrupts_posted = 0
        self.set_reg("serial_address", self.serial_address)
        self._sync_status()

    @property
    def irq_level_reg(self):
        return self.get_reg("irq_level")

    def configure(self, irq_enabled, irq_level, vector):
        if not 0 <= vector <= 0xFF:
            raise ConfigError(f"vector 0x{vector:X} does not fit D08 status/ID")
        if not 1 <= irq_level <= 7:
            raise ConfigError(f"interrupt level {irq_level} outside 1..7")
        self.irq_enabled = bool(irq_enabled)
        self.irq_level = irq_level
        self.vector = vector
        ctrl = self.get_reg("control")
        self.set_reg("control", ctrl | CTRL_IRQ_ENABLE if irq_enabled else ctrl & ~CTRL_IRQ_ENABLE)
        self.set_reg("irq_level", irq_level)
        self.set_reg("irq_vector", vector)
        self._sync_status()

    def on_receive(self, frame):
        """Decode a frame that reached this board. Returns ``"latched"`` or ``"ignored"``."""
        self.received += 1
        if frame.dest != BROADCAST and frame.dest != self.serial_address:
            return "ignored"
        self.last_payload = frame.payload
        self.latched += 1
        self.set_reg("rx_payload_lo", frame.payload & 0xFF)
        self.set_reg("rx_payload_hi", frame.payload >> 8)
        if self.irq_enabled:
            self.interrupts_posted += 1
            self.post_interrupt(self.irq_level, self.vector, Width.D08)
        self._sync_status()
        return "latched"

    def count_error(self):
        self.set_reg("error_count", min(self.get_reg("error_count") + 1, 0xFF))

    def set_up(self, up):
        self.up = bool(up)
        self._sync_status()

    def interrupt_acknowledged(self, req):
        self._sync_status()

    def _sync_status(self):
        status = 0
        if self.latched:
            status |= ST_LATCHED
        if self.bus is not None and any(r.slot == self.slot for r in self.bus.pending()):
            status |= ST_IRQ_PENDING
        if self.ring is not None and self.ring.busy:
            status |= ST_TX_BUSY
        if not self.up:
            status |= ST_LINK_DOWN
        self.set_reg("status", status)

    def refresh_register(self, name):
        if name == "status":
            self._sync_status()

    def on_write(self, name, value):
        if name == "control":
            self.irq_enabled = bool(value & CTRL_IRQ_ENABLE)
        elif name == "irq_vector":
            self.vector = value
        elif name == "irq_level":
            if 1 <= value <= 7:
                self.irq_level = value
        elif name == "tx_go" and value & 1:
            if self.ring is None:
                return
            payload = (self.get_reg("tx_payload_hi") << 8) | self.get_reg("tx_payload_lo")
            self.ring.send(self, RingFrame(self.get_reg("tx_dest"), payload, self.name))

    def snapshot(self):
        snap = super().snapshot()
        snap.update(serial_address=self.serial_address, irq_enabled=self.irq_enabled,
                    irq_level=self.irq_level, vector=self.vector, last_payload=self.last_payload,
                    up=self.up)
        return snap


class TokenRing:
    """Ordered ring of :class:`RingBoard`. One frame circulates at a time.

    With ``scheduler`` unset, :meth:`send` delivers synchronously. Otherwise
    ``scheduler(delay_ticks, callback)`` is used to run each arrival at its
    tick (20 MHz board ticks after the current time).
    """

    def __init__(self, boards, scheduler=None, on_event=None, now_fn=None):
        boards = list(boards)
        if not boards:
            raise ConfigError("a ring needs at least one board")
        addresses = [b.serial_address for b in boards]
        if len(set(addresses)) != len(addresses):
            raise ConfigError(f"duplicate serial addresses on ring: {addresses}")
        self.boards = boards
        for board in boards:
            board.ring = self
        self.scheduler = scheduler
        self.on_event = on_event
        self.busy_until = 0
        self.now_fn = now_fn
        self._now = 0
        self.corrupt_links = set()
        self.frames_sent = 0
        self.frames_dropped = 0

    @property
    def now(self):
        return self.now_fn() if self.now_fn is not None else self._now

    @now.setter
    def now(self, value):
        self._now = value

    @property
    def busy(self):
        return self.busy_until > self.now

    def corrupt_next(self, board):
        """Corrupt the next frame travelling over the link into ``board``."""
        self.corrupt_links.add(board.name)

    def plan(self, origin, frame, start_tick=0):
        if origin not in self.boards:
            raise ValueError(f"{origin.name} is not on this ring")
        n = len(self.boards)
        i = self.boards.index(origin)
        report = DeliveryReport(origin.name, frame, start_tick)
        t = 0
        sender = origin
        broken = not origin.up
        for hop in range(1, n):
            board = self.boards[(i + hop) % n]
            t += sender.hop_delay_ticks
            if broken or not board.up:
                broken = True
                report.unreachable.append(board.name)
                continue
            report.arrivals.append((board.name, t))
            sender = board
        report.lap_ticks = t + sender.hop_delay_ticks if not broken else t
        return report

    def send(self, origin, frame):
        """Put ``frame`` on the ring from ``origin``; returns a :class:`DeliveryReport`."""
        start = max(self.now, self.busy_until)
        report = self.plan(origin, frame, start)
        self.busy_until = start + report.lap_ticks
        self.frames_sent += 1
        wire = encode_frame(frame)
        by_name = {b.name: b for b in self.boards}
        state = {"dropped": False}

        def arrive(name):
            if state["dropped"]:
                return
            board = by_name[name]
            data = wire
            if name in self.corrupt_links:
                self.corrupt_links.discard(name)
                data = wire[:-1] + bytes([wire[-1] ^ 0xFF])
            try:
                received = decode_frame(data, frame.origin)
            except FormatError:
                state["dropped"] = True
                report.dropped_at = name
                self.frames_dropped += 1
                board.count_error()
                self._event("RingDrop", board, frame)
                return
            action = board.on_receive(received)
            self._event("RingRx", board, frame, action)

        self._event("RingTx", origin, frame)
        if self.scheduler is None:
            for name, _ in report.arrivals:
                arrive(name)
        else:
            offset = start - self.now
            for name, t in report.arrivals:
                self.scheduler(offset + t, lambda name=name: arrive(name))
        if report.unreachable:
            self._event("RingBroken", origin, frame, ",".join(report.unreachable))
        return report

    def _event(self, kind, board, frame, detail=None):
        if self.on_event is not None:
            self.on_event(kind, board, frame, detail)
