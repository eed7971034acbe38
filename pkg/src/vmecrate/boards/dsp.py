"""Dual DSP board: 128 KiB dual-port memory shared by two DSP ports and the
VME port through a rotating-priority round-robin arbiter.

Each grant slot is one 25 MHz tick. A Read or Write holds the grant for one
slot, an RMW for two (read half and write half) with no other port admitted
in between. After every grant the priority pointer moves to the port after
the one just served.
"""

import enum
from collections import deque
from dataclasses import dataclass

from ..board import Board
from ..bus import Width
from ..errors import BusError, RangeError
from ..registers import Access, RegisterDescriptor, RegisterMap

MEMORY_BYTES = 128 * 1024


class Port(enum.IntEnum):
    DSP_A = 0
    DSP_B = 1
    VME = 2


class AccessKind(enum.Enum):
    READ = "Read"
    WRITE = "Write"
    RMW = "RMW"


@dataclass(frozen=True)
class MemAccess:
    port: Port
    kind: AccessKind
    offset: int
    width: Width = Width.D08
    data: int = 0
    mask: int = 0
    issue_tick: int = 0

    def __post_init__(self):
        if not 0 <= self.offset or self.offset + self.width.nbytes > MEMORY_BYTES:
            raise RangeError(f"offset 0x{self.offset:X} outside the 128 KiB dual-port memory")
        if self.width is Width.D16 and self.offset & 1:
            raise ValueError("D16 accesses must be even-aligned")
        if not 0 <= self.data <= self.width.mask or not 0 <= self.mask <= self.width.mask:
            raise ValueError(f"data/mask do not fit {self.width.name}")


@dataclass
class Completion:
    access: MemAccess
    grant_tick: int
    tick: int          # tick at which the access finished
    value: int         # read value, or old value for RMW, or written data
    seq: int = 0       # global grant order


class RoundRobinArbiter:
    """Three-port arbiter over a bytearray; usable on its own for oracle tests."""

    def __init__(self, memory=None, priority=Port.DSP_A, keep_log=True):
        self.memory = memory if memory is not None else bytearray(MEMORY_BYTES)
        self.priority = Port(priority)
        self.queues = {p: deque() for p in Port}
        self.cursor = 0           # next free grant slot
        self.grants = [] if keep_log else None   # Completion records in grant order
        self.grant_counts = [0, 0, 0]
        self._seq = 0

    def submit(self, access):
        self.queues[access.port].append(access)

    def has_pending(self):
        q = self.queues
        return bool(q[Port.DSP_A] or q[Port.DSP_B] or q[Port.VME])

    def _next_port(self, tick):
        for i in range(3):
            port = Port((self.priority + i) % 3)
            q = self.queues[port]
            if q and q[0].issue_tick <= tick:
                return port
        return None

    def _earliest_issue(self):
        heads = [q[0].issue_tick for q in self.queues.values() if q]
        return min(heads) if heads else None

    def step(self, until=None):
        """Grant one access if any is eligible before ``until`` (exclusive); returns the Completion or None."""
        earliest = self._earliest_issue()
        if earliest is None:
            return None
        tick = max(self.cursor, earliest)
        if until is not None and tick >= until:
            return None
        port = self._next_port(tick)
        access = self.queues[port].popleft()
        value = self._execute(access)
        duration = 2 if access.kind is AccessKind.RMW else 1
        done = Completion(access, tick, tick + duration, value, self._seq)
        self._seq += 1
        self.cursor = tick + duration
        self.priority = Port((port + 1) % 3)
        if self.grants is not None:
            self.grants.append(done)
        self.grant_counts[port] += 1
        return done

    def grant_uncontended(self, port, kind, offset, width, data=0, mask=0, issue_tick=0):
        """Serve an access while every queue is empty; same bookkeeping as
        :meth:`step` without allocating a MemAccess. Returns ``(value, done_tick)``."""
        assert not self.has_pending()
        tick = self.cursor if self.cursor > issue_tick else issue_tick
        if kind is AccessKind.READ:
            value = self._load(offset, width)
            duration = 1
        elif kind is AccessKind.WRITE:
            self._store(offset, width, data)
            value, duration = data, 1
        else:
            value = self._load(offset, width)
            self._store(offset, width, (value & ~mask & width.mask) | (data & mask))
            duration = 2
        self._seq += 1
        self.cursor = tick + duration
        self.priority = _NEXT[port]
        self.grant_counts[port] += 1
        return value, tick + duration

    def run_until(self, tick):
        """Grant every access whose slot starts before ``tick``."""
        out = []
        while True:
            done = self.step(until=tick)
            if done is None:
                return out
            out.append(done)

    def run_all(self):
        out = []
        while self.has_pending():
            out.append(self.step())
        return out

    def _load(self, offset, width):
        if width is Width.D08:
            return self.memory[offset]
        return (self.memory[offset] << 8) | self.memory[offset + 1]

    def _store(self, offset, width, value):
        if width is Width.D08:
            self.memory[offset] = value
        else:
            self.memory[offset] = value >> 8
            self.memory[offset + 1] = value & 0xFF

    def _execute(self, access):
        if access.kind is AccessKind.READ:
            return self._load(access.offset, access.width)
        if access.kind is AccessKind.WRITE:
            self._store(access.offset, access.width, access.data)
            return access.data
        old = self._load(access.offset, access.width)
        self._store(access.offset, access.width,
                    (old & ~access.mask & access.width.mask) | (access.data & access.mask))
        return old


_NEXT = {p: Port((p + 1) % 3) for p in Port}


REGISTER_MAP = RegisterMap([
    RegisterDescriptor("control", 0x0, 16, Access.RW, 0x0005, doc="bits 0-2 interrupt level"),
    RegisterDescriptor("status", 0x2, 16, Access.RO, doc="bits 0-1 arbiter priority port"),
    RegisterDescriptor("grants_a", 0x4, 16, Access.RO),
    RegisterDescriptor("grants_b", 0x6, 16, Access.RO),
    RegisterDescriptor("grants_vme", 0x8, 16, Access.RO),
    RegisterDescriptor("mailbox", 0xA, 16, Access.RW),
], window_bytes=0x10)


class DualDspBoard(Board):
    kind = "dsp"
    clock_hz = 25_000_000
    bus_width = Width.D16
    register_map = REGISTER_MAP
    supports_block = True
    supports_rmw = True

    def reset_state(self):
        self.arbiter = RoundRobinArbiter(keep_log=False)
        self.last_completion = None

    @property
    def memory(self):
        return self.arbiter.memory

    @property
    def irq_level(self):
        level = self.get_reg("control") & 7
        return level or 5

    def submit(self, access):
        """Queue a port access. Returns the Completion once granted (immediately
        for the VME port, which waits for its grant); DSP accesses complete as the
        board ticks."""
        if access.port is Port.VME:
            return self._vme(access)
        self.arbiter.submit(access)
        return None

    def dsp_access(self, port, kind, offset, width=Width.D08, data=0, mask=0, issue_tick=None):
        return self.submit(MemAccess(Port(port), AccessKind(kind), offset, width, data, mask,
                                     self.now if issue_tick is None else issue_tick))

    def _vme(self, access):
        access = MemAccess(access.port, access.kind, access.offset, access.width, access.data,
                           access.mask, max(access.issue_tick, self.now))
        self.arbiter.submit(access)
        while True:
            done = self.arbiter.step()
            self.last_completion = done
            if done.access is access:
                return done

    def _vme_fast(self, kind, offset, width, data=0, mask=0):
        arb = self.arbiter
        if arb.has_pending():
            return self._vme(MemAccess(Port.VME, kind, offset, width, data, mask, self.now)).value
        return arb.grant_uncontended(Port.VME, kind, offset, width, data, mask, self.now)[0]

    def advance(self, start, end):
        arb = self.arbiter
        if arb.has_pending():
            for done in arb.run_until(end):
                self.last_completion = done

    def dsp_interrupt(self, source, vector, width=Width.D16):
        source = Port(source)
        if source is Port.VME:
            raise ValueError("only the DSP ports raise interrupts")
        return self.post_interrupt(self.irq_level, vector, width, source=int(source))

    # -- VME side -----------------------------------------------------------

    def bus_read(self, region, offset, width):
        if region == "memory":
            return self._vme_fast(AccessKind.READ, offset, width)
        return super().bus_read(region, offset, width)

    def bus_write(self, region, offset, width, value):
        if region == "memory":
            self._vme_fast(AccessKind.WRITE, offset, width, value)
            return
        super().bus_write(region, offset, width, value)

    def bus_rmw(self, region, offset, width, mask, value):
        if region == "memory":
            return self._vme_fast(AccessKind.RMW, offset, width, value, mask)
        raise BusError("read-modify-write is only decoded in the dual-port memory")

    def refresh_register(self, name):
        self._sync()

    def _sync(self):
        self.set_reg("status", int(self.arbiter.priority))
        counts = self.arbiter.grant_counts
        self.set_reg("grants_a", counts[Port.DSP_A] & 0xFFFF)
        self.set_reg("grants_b", counts[Port.DSP_B] & 0xFFFF)
        self.set_reg("grants_vme", counts[Port.VME] & 0xFFFF)

    def dump_memory(self, path):
        with open(path, "wb") as fh:
            fh.write(bytes(self.memory))

    def snapshot(self):
        snap = super().snapshot()
        snap.update(priority=self.arbiter.priority.name,
                    grant_counts={p.name: self.arbiter.grant_counts[p] for p in Port},
                    pending={p.name: len(q) for p, q in self.arbiter.queues.items()})
        return snap
