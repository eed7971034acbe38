"""Base class for the board models that sit on the VME bus."""

import logging

from .bus import InterruptRequest, Width
from .clock import period_ps
from .errors import BusError
from .registers import Access

log = logging.getLogger(__name__)


class Board:
    """Shared slave machinery: register decode, access rules, reset and ticking.

    Subclasses set ``register_map``, ``clock_hz`` and ``bus_width`` and may
    override the hooks ``on_write``, ``refresh_register``, ``reset_state`` and
    ``advance``.
    """

    kind = "board"
    clock_hz = 10_000_000
    bus_width = Width.D08
    register_map = None
    supports_block = False
    supports_rmw = False

    def __init__(self, name=None, latency_ticks=2):
        self.name = name or self.kind
        self.latency_ticks = latency_ticks
        self.bus = None
        self.slot = None
        self.events = None  # callable(kind, info) for trace events, set by the crate
        self.now = 0
        self.notifications = 0
        self.regs = [d.reset_value for d in self.register_map]
        self.reset_state()

    @property
    def period_ps(self):
        return period_ps(self.clock_hz)

    def attached(self, bus, slot):
        self.bus = bus
        self.slot = slot

    def emit(self, kind, info=None):
        if self.events is not None:
            self.events(self, kind, info)

    # -- bus entry points ---------------------------------------------------

    def bus_read(self, region, offset, width):
        if region != "regs":
            raise BusError(f"{self.name} has no region {region!r}")
        index, pair = self._decode_access(offset, width)
        if pair is None:
            return self.register_access(index, "read")
        return (self.register_access(pair[0], "read") << 8) | self.register_access(pair[1], "read")

    def bus_write(self, region, offset, width, value):
        if region != "regs":
            raise BusError(f"{self.name} has no region {region!r}")
        index, pair = self._decode_access(offset, width)
        if pair is None:
            self.register_access(index, "write", value)
        else:
            self.register_access(pair[0], "write", value >> 8)
            self.register_access(pair[1], "write", value & 0xFF)

    def bus_rmw(self, region, offset, width, mask, value):
        old = self.bus_read(region, offset, width)
        self.bus_write(region, offset, width, (old & ~mask) | (value & mask))
        return old

    def _decode_access(self, offset, width):
        rmap = self.register_map
        index = rmap.decode(offset)
        if index is None:
            raise BusError(f"{self.name}: nothing decoded at offset 0x{offset:X}")
        desc = rmap.registers[index]
        if desc.offset != offset:
            raise BusError(f"{self.name}: partial access inside {desc.name}")
        if desc.width_bits == 8 * width.value:
            return index, None
        if width is Width.D16 and desc.width_bits == 8:
            low = rmap.decode(offset + 1)
            if low is not None and rmap.registers[low].width_bits == 8:
                return index, (index, low)
        raise BusError(f"{self.name}: {width.name} access to {desc.width_bits}-bit {desc.name}")

    # -- register semantics -------------------------------------------------

    def register_access(self, index, kind, value=0):
        desc = self.register_map.registers[index]
        if kind == "read":
            if desc.access is Access.WO:
                return 0
            self.refresh_register(desc.name)
            return self.regs[index]
        if desc.access is Access.RO:
            raise BusError(f"{self.name}: {desc.name} is read-only")
        value &= desc.mask
        if desc.access is Access.RW1C:
            self.regs[index] &= ~value & desc.mask
        else:
            self.regs[index] = value
        self.notifications += 1
        self.on_write(desc.name, value)
        return value

    def peek(self, name):
        """Current register contents without bus side effects (WO registers read back stored value)."""
        index = self.register_map.index(name)
        self.refresh_register(name)
        return self.regs[index]

    def set_reg(self, name, value):
        """Internal update of a register from the board's own logic."""
        index = self.register_map.index(name)
        self.regs[index] = value & self.register_map.registers[index].mask

    def get_reg(self, name):
        return self.regs[self.register_map.index(name)]

    # -- lifecycle ----------------------------------------------------------

    def reset(self):
        self.regs = [d.reset_value for d in self.register_map]
        if self.bus is not None and self.slot is not None:
            self.bus.clear_interrupts(self.slot)
        self.reset_state()

    def tick(self, n=1):
        if n < 0:
            raise ValueError("cannot tick backwards")
        if n:
            self.advance(self.now, self.now + n)
            self.now += n

    def post_interrupt(self, level, vector, width=Width.D08, source=0):
        if self.bus is None:
            log.debug("%s: interrupt with no bus attached dropped", self.name)
            return False
        return self.bus.post_interrupt(InterruptRequest(level, vector, self.slot, width, source))

    # -- hooks --------------------------------------------------------------

    def on_write(self, name, value):
        pass

    def refresh_register(self, name):
        pass

    def reset_state(self):
        pass

    def advance(self, start, end):
        pass

    def snapshot(self):
        """JSON-friendly state summary used for final-state dumps."""
        return {
            "kind": self.kind,
            "now_ticks": self.now,
            "registers": {d.name: self.peek(d.name) for d in self.register_map},
        }
