"""Process-variable gateway: a line-oriented TCP service that maps named PVs
onto board registers. This is a deliberately small protocol, not EPICS
Channel Access.

Requests and replies, one per line::

    GET <pv>            -> OK <pv> <value>
    PUT <pv> <value>    -> OK
    MON <pv>            -> OK, then EVT <pv> <value> on every change
    anything else       -> ERR <code> <message>

Error codes: ``unknown-pv``, ``read-only``, ``parse``, ``bus-error``.
Values are engineering units (``raw * gain + offset``); appending ``.raw``
to a PV name reads or writes the unscaled register value.
"""

import logging
import os
import socketserver
import threading
import time
from dataclasses import dataclass

import yaml

from .bus import BusCycle, CycleKind, Width
from .errors import ConfigError

log = logging.getLogger(__name__)

MAX_LINE = 256
PORT_ENV = "VMECRATE_PV_PORT"


@dataclass(frozen=True)
class PvBinding:
    name: str
    board: str
    registers: tuple
    direction: str = "ReadWrite"
    gain: float = 1.0
    offset: float = 0.0
    mask: int = None
    shift: int = 0

    @property
    def writable(self):
        return self.direction == "ReadWrite"


def format_value(value):
    if isinstance(value, int):
        return str(value)
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return f"{value:.10g}"


def load_bindings(path):
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return bindings_from_data(data)


def bindings_from_data(data):
    out = []
    for raw in data.get("pvs", []):
        regs = raw["register"]
        regs = tuple(regs) if isinstance(regs, (list, tuple)) else (regs,)
        out.append(PvBinding(raw["name"], raw["board"], regs, raw.get("direction", "ReadWrite"),
                             float(raw.get("gain", 1.0)), float(raw.get("offset", 0.0)),
                             raw.get("mask"), int(raw.get("shift", 0))))
    return out


def manifest_bindings(crate):
    """One raw PV per register of every board: ``<board>.<register>``."""
    from .registers import Access

    out = []
    for name, board in crate.boards.items():
        for desc in board.register_map:
            direction = "ReadOnly" if desc.access is Access.RO else "ReadWrite"
            out.append(PvBinding(f"{name}.{desc.name}", name, (desc.name,), direction))
    return out


class Session:
    """One client connection. ``send`` is invoked on the core loop only."""

    _ids = 0

    def __init__(self, send=None):
        Session._ids += 1
        self.id = Session._ids
        self.sent = []
        self._send = send
        self.monitors = {}

    def send(self, line):
        if self._send is None:
            self.sent.append(line)
        else:
            self._send(line)


class Gateway:
    def __init__(self, crate, bindings):
        self.crate = crate
        self.bindings = {}
        errors = []
        for b in bindings:
            if b.name in self.bindings or b.name + ".raw" in self.bindings:
                errors.append(f"duplicate PV name {b.name!r}")
                continue
            if b.direction not in ("ReadOnly", "ReadWrite"):
                errors.append(f"{b.name}: direction must be ReadOnly or ReadWrite")
            if b.gain == 0:
                errors.append(f"{b.name}: gain must be non-zero")
            if not 1 <= len(b.registers) <= 2:
                errors.append(f"{b.name}: bind one register or a hi/lo pair")
            board = crate.boards.get(b.board)
            if board is None:
                errors.append(f"{b.name}: unknown board {b.board!r}")
            else:
                for reg in b.registers:
                    try:
                        crate.address_of(b.board, reg)
                    except KeyError:
                        errors.append(f"{b.name}: board {b.board!r} has no register {reg!r}")
            self.bindings[b.name] = b
        if errors:
            raise ConfigError("; ".join(errors))
        self.sessions = []

    # -- register access ----------------------------------------------------

    def _parts(self, binding):
        parts = []
        for reg in binding.registers:
            address, desc = self.crate.address_of(binding.board, reg)
            parts.append((address, desc))
        return parts

    def read_raw(self, binding, peek=False):
        """Combined raw value of the bound register(s); None on bus error."""
        value = 0
        signed = False
        bits = 0
        for address, desc in self._parts(binding):
            if peek:
                word = self.crate.board(binding.board).peek(desc.name)
            else:
                width = Width.D16 if desc.width_bits == 16 else Width.D08
                result = self.crate.bus.perform_cycle(BusCycle(CycleKind.READ, address, width))
                if not result.ok:
                    return None
                word = result.data
            value = (value << desc.width_bits) | word
            bits += desc.width_bits
            signed = desc.signed
        if binding.mask is not None:
            value = (value >> binding.shift) & binding.mask
        elif signed and value >> (bits - 1):
            value -= 1 << bits
        return value

    def scaled(self, binding, raw):
        return raw * binding.gain + binding.offset

    def _write_raw(self, binding, raw):
        parts = self._parts(binding)
        bits = sum(d.width_bits for _, d in parts)
        if binding.mask is not None:
            if not 0 <= raw <= binding.mask:
                return "parse", "value out of range"
            current = self.read_raw(PvBinding(binding.name, binding.board, binding.registers,
                                              binding.direction), peek=True)
            raw = (current & ~(binding.mask << binding.shift)) | (raw << binding.shift)
        else:
            signed = parts[-1][1].signed
            lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
            if not lo <= raw <= hi:
                return "parse", "value out of range"
            raw &= (1 << bits) - 1
        remaining = bits
        for address, desc in parts:
            remaining -= desc.width_bits
            word = (raw >> remaining) & desc.mask
            width = Width.D16 if desc.width_bits == 16 else Width.D08
            result = self.crate.bus.perform_cycle(BusCycle(CycleKind.WRITE, address, width, word))
            if not result.ok:
                return "bus-error", f"write to {binding.board}.{desc.name} failed"
        return None

    def _lookup(self, name):
        """Returns ``(binding, raw_flag)`` or None."""
        if name in self.bindings:
            return self.bindings[name], False
        if name.endswith(".raw") and name[:-4] in self.bindings:
            return self.bindings[name[:-4]], True
        return None

    def value_of(self, binding, raw_flag, peek=False):
        raw = self.read_raw(binding, peek=peek)
        if raw is None:
            return None
        return raw if raw_flag else self.scaled(binding, raw)

    # -- protocol -----------------------------------------------------------

    def handle_line(self, session, line):
        """Execute one request on the core loop; returns the reply lines."""
        if isinstance(line, bytes):
            if len(line) > MAX_LINE:
                return ["ERR parse line too long"]
            try:
                line = line.decode("utf-8")
            except UnicodeDecodeError:
                return ["ERR parse line is not UTF-8"]
        if len(line.encode("utf-8")) > MAX_LINE:
            return ["ERR parse line too long"]
        words = line.split()
        if not words:
            return ["ERR parse empty request"]
        verb = words[0].upper()
        if verb not in ("GET", "PUT", "MON"):
            return [f"ERR parse unknown verb {words[0]}"]
        expected = 3 if verb == "PUT" else 2
        if len(words) != expected:
            return [f"ERR parse {verb} takes {expected - 1} argument(s)"]
        name = words[1]
        found = self._lookup(name)
        if found is None:
            return [f"ERR unknown-pv {name}"]
        binding, raw_flag = found
        if verb == "GET":
            value = self.value_of(binding, raw_flag)
            if value is None:
                return [f"ERR bus-error read of {name} failed"]
            return [f"OK {name} {format_value(value)}"]
        if verb == "PUT":
            if not binding.writable:
                return [f"ERR read-only {name} is read-only"]
            try:
                value = float(words[2]) if not raw_flag else int(words[2], 0)
            except ValueError:
                return [f"ERR parse bad value {words[2]}"]
            raw = value if raw_flag else (value - binding.offset) / binding.gain
            raw = int(raw + 0.5) if raw >= 0 else -int(-raw + 0.5)
            err = self._write_raw(binding, raw)
            if err is not None:
                return [f"ERR {err[0]} {err[1]}"]
            return ["OK"]
        # MON
        session.monitors[name] = self.value_of(binding, raw_flag, peek=True)
        if session not in self.sessions:
            self.sessions.append(session)
        return ["OK"]

    def execute(self, session, line):
        """Handle a request and send its reply plus any monitor events, in order."""
        for reply in self.handle_line(session, line):
            session.send(reply)
        self.poll_monitors()

    def poll_monitors(self):
        """Emit one EVT per subscribed session for every changed PV."""
        cache = {}
        for session in self.sessions:
            for name, last in session.monitors.items():
                if name not in cache:
                    binding, raw_flag = self._lookup(name)
                    cache[name] = self.value_of(binding, raw_flag, peek=True)
                value = cache[name]
                if value != last:
                    session.monitors[name] = value
                    session.send(f"EVT {name} {format_value(value)}")

    def drop_session(self, session):
        if session in self.sessions:
            self.sessions.remove(session)


# -- TCP front end -------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        server = self.server
        lock = threading.Lock()

        def send(line):
            with lock:
                try:
                    self.wfile.write(line.encode("utf-8") + b"\n")
                    self.wfile.flush()
                except OSError:
                    pass

        session = Session(send)
        try:
            while True:
                line = self.rfile.readline(MAX_LINE + 2)
                if not line:
                    break
                if not line.endswith(b"\n"):
                    # over-long line: discard the rest of it
                    while line and not line.endswith(b"\n"):
                        line = self.rfile.readline(MAX_LINE + 2)
                    server.crate.submit(lambda: session.send("ERR parse line too long")).result()
                    continue
                payload = line.rstrip(b"\r\n")
                server.crate.submit(server.gateway.execute, session, payload).result()
        finally:
            server.crate.submit(server.gateway.drop_session, session)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class GatewayService:
    """Runs the gateway on a TCP port with a core-loop thread that owns the crate.

    The core thread drains the crate mailbox continuously and, every
    ``poll_period_ps`` of simulated time, advances the simulation and polls
    monitors. With ``realtime`` set, simulated time tracks the wall clock.
    """

    def __init__(self, crate, gateway, port=None, host="127.0.0.1", poll_period_ps=10**9,
                 realtime=True):
        if port is None:
            port = int(os.environ.get(PORT_ENV, "5064"))
        self.crate = crate
        self.gateway = gateway
        self.poll_period_ps = poll_period_ps
        self.realtime = realtime
        self._server = _Server((host, port), _Handler)
        self._server.crate = crate
        self._server.gateway = gateway
        self._stop = threading.Event()
        self._threads = []

    @property
    def address(self):
        return self._server.server_address

    def _core_loop(self):
        period_s = self.poll_period_ps / 1e12
        next_poll = time.monotonic() + period_s
        while not self._stop.is_set():
            self.crate.drain_mailbox(timeout=min(period_s, 0.05))
            now = time.monotonic()
            if not self.realtime or now >= next_poll:
                self.crate.run_for(self.poll_period_ps)
                self.gateway.poll_monitors()
                next_poll = now + period_s

    def start(self):
        core = threading.Thread(target=self._core_loop, name="vmecrate-core", daemon=True)
        net = threading.Thread(target=self._server.serve_forever, name="vmecrate-gateway",
                               daemon=True)
        self._threads = [core, net]
        core.start()
        net.start()
        log.info("PV gateway listening on %s:%d", *self.address)
        return self

    def stop(self):
        self._stop.set()
        self._server.shutdown()
        self._server.server_close()
        for t in self._threads:
            t.join(timeout=2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
