"""VME backplane model: address routing, data cycles, block transfer,
read-modify-write and the interrupt-acknowledge daisy chain."""

import bisect
import enum
from dataclasses import dataclass

from .clock import SimClock
from .errors import BusError, MalformedCycleError, OverlapError, SlotOccupiedError


class Space(enum.Enum):
    A16 = 16
    A24 = 24

    @property
    def limit(self):
        return 1 << self.value


class Width(enum.Enum):
    D08 = 1
    D16 = 2

    @property
    def nbytes(self):
        return self.value

    @property
    def mask(self):
        return 0xFF if self is Width.D08 else 0xFFFF


class CycleKind(enum.Enum):
    READ = "Read"
    WRITE = "Write"
    BLOCK_READ = "BlockRead"
    BLOCK_WRITE = "BlockWrite"
    READ_MODIFY_WRITE = "ReadModifyWrite"
    INTERRUPT_ACK = "InterruptAck"


class Outcome(enum.Enum):
    DTACK = "Dtack"
    BUS_ERROR = "BusError"


_BLOCK_KINDS = (CycleKind.BLOCK_READ, CycleKind.BLOCK_WRITE)


@dataclass(frozen=True)
class Address:
    space: Space
    value: int

    def __post_init__(self):
        if not 0 <= self.value < self.space.limit:
            raise MalformedCycleError(
                f"address 0x{self.value:X} outside {self.space.name} space")

    def __add__(self, offset):
        return Address(self.space, self.value + offset)

    def __str__(self):
        return f"{self.space.name}:0x{self.value:06X}"


class BusCycle:
    """One VME transaction, validated on construction.

    ``payload`` carries the words of a BlockWrite and ``mask`` the modify mask
    of a ReadModifyWrite (``data`` is then the value to set). For InterruptAck
    the level travels on address lines A01-A03, as on the real backplane.
    """

    __slots__ = ("kind", "address", "width", "data", "beat_count", "payload", "mask")

    def __init__(self, kind, address, width=Width.D08, data=0, beat_count=1,
                 payload=(), mask=0):
        self.kind = kind
        self.address = address
        self.width = width
        self.data = data
        self.beat_count = beat_count
        self.payload = tuple(payload)
        self.mask = mask
        self._validate()

    def _validate(self):
        wmask = self.width.mask
        if self.data < 0 or self.data > wmask:
            raise MalformedCycleError(f"data 0x{self.data:X} does not fit {self.width.name}")
        if self.mask < 0 or self.mask > wmask:
            raise MalformedCycleError(f"mask 0x{self.mask:X} does not fit {self.width.name}")
        if self.kind is CycleKind.INTERRUPT_ACK:
            if not 1 <= (self.address.value >> 1) & 7 <= 7:
                raise MalformedCycleError("interrupt acknowledge needs a level 1..7 on A01-A03")
            return
        if self.width is Width.D16 and self.address.value & 1:
            raise MalformedCycleError(f"D16 cycle at odd address {self.address}")
        if self.beat_count < 1:
            raise MalformedCycleError("beat_count must be positive")
        if self.kind in _BLOCK_KINDS:
            if self.kind is CycleKind.BLOCK_WRITE and len(self.payload) != self.beat_count:
                raise MalformedCycleError("BlockWrite payload length must equal beat_count")
            if any(w < 0 or w > wmask for w in self.payload):
                raise MalformedCycleError(f"block payload word does not fit {self.width.name}")
            end = self.address.value + self.beat_count * self.width.nbytes
            if end > self.address.space.limit:
                raise MalformedCycleError("block transfer runs off the end of the address space")
        elif self.beat_count != 1:
            raise MalformedCycleError(f"{self.kind.value} cycles have exactly one beat")

    def __repr__(self):
        return (f"BusCycle({self.kind.value}, {self.address}, {self.width.name}, "
                f"data=0x{self.data:X}, beats={self.beat_count})")


@dataclass(frozen=True)
class CycleResult:
    outcome: Outcome
    data: int = 0
    latency_ticks: int = 0
    words: tuple = ()

    @property
    def ok(self):
        return self.outcome is Outcome.DTACK


_BERR = CycleResult(Outcome.BUS_ERROR)


@dataclass(frozen=True)
class InterruptRequest:
    level: int
    vector: int
    slot: int
    status_width: Width = Width.D08
    # Board-internal priority among requests from the same slot; lower answers first.
    source: int = 0

    def __post_init__(self):
        if not 1 <= self.level <= 7:
            raise ValueError(f"interrupt level {self.level} outside 1..7")
        if not 0 <= self.vector <= self.status_width.mask:
            raise ValueError(f"vector 0x{self.vector:X} does not fit {self.status_width.name}")
        if self.slot < 1:
            raise ValueError("slot numbers start at 1")


@dataclass(frozen=True)
class Registration:
    id: int
    slot: int
    module: object
    space: Space
    base: int
    window_bytes: int
    region: str

    @property
    def end(self):
        return self.base + self.window_bytes

    def contains(self, address, nbytes=1):
        return self.base <= address and address + nbytes <= self.end


class VmeBus:
    """Single-master VME backplane.

    Slaves implement ``bus_read(region, offset, width)``,
    ``bus_write(region, offset, width, value)`` and, when they advertise
    ``supports_rmw``, ``bus_rmw(region, offset, width, mask, value)``. They raise
    :class:`BusError` to terminate a cycle with BERR. ``bus_width`` names the
    widest data cycle the slave decodes; ``latency_ticks`` and ``period_ps``
    give the reported access latency.
    """

    def __init__(self, clock=None, trace=None):
        self.clock = clock if clock is not None else SimClock()
        self.trace = trace
        self.registrations = []
        self._slots = {}
        self._starts = {Space.A16: [], Space.A24: []}
        self._windows = {Space.A16: [], Space.A24: []}
        self._pending = []
        self._post_seq = 0

    # -- registration -------------------------------------------------------

    def attach(self, slot, module, base, window_bytes, region="regs"):
        if slot < 1:
            raise ValueError("slot numbers start at 1")
        if window_bytes <= 0:
            raise ValueError("window must be at least one byte")
        occupant = self._slots.get(slot)
        if occupant is not None and occupant is not module:
            raise SlotOccupiedError(f"slot {slot} already holds {getattr(occupant, 'name', occupant)}")
        if base.value + window_bytes > base.space.limit:
            raise OverlapError(f"window {base}+0x{window_bytes:X} runs off the {base.space.name} space")
        for reg in self._windows[base.space]:
            if base.value < reg.end and reg.base < base.value + window_bytes:
                raise OverlapError(
                    f"slot {slot} window {base}+0x{window_bytes:X} overlaps slot {reg.slot} "
                    f"window {Address(reg.space, reg.base)}+0x{reg.window_bytes:X}")
        reg = Registration(len(self.registrations), slot, module, base.space, base.value,
                           window_bytes, region)
        self.registrations.append(reg)
        self._slots[slot] = module
        windows = self._windows[base.space]
        idx = bisect.bisect(self._starts[base.space], base.value)
        windows.insert(idx, reg)
        self._starts[base.space].insert(idx, base.value)
        if hasattr(module, "attached"):
            module.attached(self, slot)
        return reg.id

    def module_in_slot(self, slot):
        return self._slots.get(slot)

    def route(self, space, address, nbytes=1):
        starts = self._starts[space]
        idx = bisect.bisect_right(starts, address) - 1
        if idx < 0:
            return None
        reg = self._windows[space][idx]
        if address + nbytes <= reg.base + reg.window_bytes:
            return reg
        return None

    def registrations_for(self, module):
        return [r for r in self.registrations if r.module is module]

    # -- data cycles --------------------------------------------------------

    def perform_cycle(self, cycle):
        kind = cycle.kind
        if kind is CycleKind.INTERRUPT_ACK:
            return self._iack((cycle.address.value >> 1) & 7, cycle.width)
        if kind is CycleKind.BLOCK_READ or kind is CycleKind.BLOCK_WRITE:
            return self._block(cycle)
        width = cycle.width
        space = cycle.address.space
        address = cycle.address.value
        reg = self.route(space, address, width.value)
        data = 0
        result = _BERR
        if reg is not None:
            module = reg.module
            if width.value <= module.bus_width.value:
                try:
                    if kind is CycleKind.READ:
                        data = module.bus_read(reg.region, address - reg.base, width)
                    elif kind is CycleKind.WRITE:
                        data = cycle.data
                        module.bus_write(reg.region, address - reg.base, width, data)
                    elif module.supports_rmw:
                        data = module.bus_rmw(reg.region, address - reg.base, width,
                                              cycle.mask, cycle.data)
                    else:
                        raise BusError("read-modify-write not supported")
                    result = CycleResult(Outcome.DTACK, data, module.latency_ticks)
                except BusError:
                    data = 0
        if self.trace is not None:
            self.trace.append(self.clock.now_ps, kind.value, space.name, address, width.name,
                              data, result.outcome.value, reg.slot if reg else None)
        return result

    def _block(self, cycle):
        width = cycle.width
        nbytes = width.value
        space = cycle.address.space
        start = cycle.address.value
        beats = cycle.beat_count
        reg = self.route(space, start, nbytes)
        module = reg.module if reg is not None else None
        fault = (reg is None or not module.supports_block
                 or width.value > module.bus_width.value)
        words = []
        latency = 0
        reading = cycle.kind is CycleKind.BLOCK_READ
        if not fault:
            latency = module.latency_ticks + (beats - 1) * max(1, module.latency_ticks - 1)
        for beat in range(beats):
            address = start + beat * nbytes
            data = 0
            ok = False
            if not fault and address + nbytes <= reg.base + reg.window_bytes:
                try:
                    if reading:
                        data = module.bus_read(reg.region, address - reg.base, width)
                    else:
                        data = cycle.payload[beat]
                        module.bus_write(reg.region, address - reg.base, width, data)
                    ok = True
                except BusError:
                    data = 0
            if self.trace is not None:
                self.trace.append(self.clock.now_ps, cycle.kind.value, space.name, address,
                                  width.name, data, "Dtack" if ok else "BusError",
                                  reg.slot if reg else None)
            if not ok:
                return _BERR
            words.append(data)
        return CycleResult(Outcome.DTACK, words[-1], latency, tuple(words))

    # -- convenience wrappers ----------------------------------------------

    def read(self, address, width=Width.D08):
        return self.perform_cycle(BusCycle(CycleKind.READ, address, width))

    def write(self, address, data, width=Width.D08):
        return self.perform_cycle(BusCycle(CycleKind.WRITE, address, width, data))

    def block_transfer(self, start, beats, width, direction, data_in=()):
        """Returns ``(words, result)``. ``direction`` is ``"ReadOut"`` or ``"WriteIn"``."""
        if direction == "ReadOut":
            cycle = BusCycle(CycleKind.BLOCK_READ, start, width, beat_count=beats)
        elif direction == "WriteIn":
            cycle = BusCycle(CycleKind.BLOCK_WRITE, start, width, beat_count=beats,
                             payload=data_in)
        else:
            raise ValueError(f"unknown block direction {direction!r}")
        result = self.perform_cycle(cycle)
        return list(result.words), result

    def read_modify_write(self, address, width, mask, set_bits):
        """Atomic ``(old & ~mask) | (set & mask)``; returns the CycleResult whose
        ``data`` is the old value."""
        return self.perform_cycle(BusCycle(CycleKind.READ_MODIFY_WRITE, address, width,
                                           data=set_bits, mask=mask))

    # -- interrupts ---------------------------------------------------------

    def post_interrupt(self, req):
        if self._slots.get(req.slot) is None:
            raise ValueError(f"no module attached in slot {req.slot}")
        merged = any(p is req or p == req for _, p in self._pending)
        if not merged:
            self._pending.append((self._post_seq, req))
            self._post_seq += 1
        if self.trace is not None:
            self.trace.append(self.clock.now_ps, "IrqPost", None, req.level, req.status_width.name,
                              req.vector, "merged" if merged else "pending", req.slot)
        return not merged

    def pending(self, level=None):
        """Pending requests in acknowledge order (slot, then board-internal source, then post order)."""
        entries = [(r.slot, r.source, seq, r) for seq, r in self._pending
                   if level is None or r.level == level]
        entries.sort(key=lambda e: e[:3])
        return [e[3] for e in entries]

    def clear_interrupts(self, slot):
        self._pending = [(s, r) for s, r in self._pending if r.slot != slot]

    def acknowledge(self, level, width=Width.D08):
        """IACK cycle at ``level``; result data is the winning vector."""
        return self.perform_cycle(BusCycle(CycleKind.INTERRUPT_ACK,
                                           Address(Space.A16, level << 1), width))

    def _iack(self, level, width):
        best = None
        for entry in self._pending:
            seq, req = entry
            if req.level != level:
                continue
            key = (req.slot, req.source, seq)
            if best is None or key < best[0]:
                best = (key, entry)
        if best is None:
            result = _BERR
            slot = None
            vector = 0
        else:
            entry = best[1]
            self._pending.remove(entry)
            req = entry[1]
            slot = req.slot
            vector = req.vector & width.mask
            module = self._slots.get(slot)
            result = CycleResult(Outcome.DTACK, vector, getattr(module, "latency_ticks", 0))
            if hasattr(module, "interrupt_acknowledged"):
                module.interrupt_acknowledged(req)
        if self.trace is not None:
            self.trace.append(self.clock.now_ps, "InterruptAck", "A16", level, width.name,
                              vector, result.outcome.value, slot)
        return result
