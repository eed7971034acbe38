"""Scripted experiments: timed steps driving the crate, fault injection and
inline assertions.

A script is YAML with ``version: 1``, an ``end`` time and a list of steps.
Each step has ``at`` (a time such as ``"2.5ms"`` or integer picoseconds) and
exactly one verb key::

    - at: 0s
      write: {board: hv, register: setpoint_lo, value: 0x88}
    - at: 10s
      assert: {board: hv, field: output_kV, approx: 50.0, tol: 1.0e-9}

See the README for the full verb list.
"""

import json
import logging
import os
import random
from dataclasses import dataclass, field

import yaml

from .boards.dsp import Port
from .boards.mps import CurrentFrame, FRAME_CLOCK_HZ
from .boards.ring import RingFrame
from .boards.scam import ChannelConfig
from .bus import Address, BusCycle, CycleKind, Space, Width
from .clock import PS_PER_SECOND, parse_time
from .config import build_crate
from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

VERBS = (
    "write", "read", "block_read", "block_write", "rmw", "iack", "hv_command", "interlock",
    "load_current", "frame", "frames", "ring_send", "broadcast", "ring_config", "ring_link",
    "ring_corrupt", "dsp", "dsp_irq", "scam_channel", "pll_set", "encoder", "adc", "reset",
    "operator_reset", "burst", "assert",
)


@dataclass
class Step:
    at_ps: int
    verb: str
    args: dict
    index: int


@dataclass
class ScenarioScript:
    steps: list
    end_ps: int
    source: str = None


@dataclass
class RunResult:
    exit_status: int
    failures: list = field(default_factory=list)
    assertions: int = 0
    cycles: int = 0
    crate: object = None

    @property
    def first_failure(self):
        return self.failures[0] if self.failures else None


def parse_script(data, source=None):
    errors = []
    if not isinstance(data, dict):
        raise ValidationError(["script must be a mapping"])
    if data.get("version") != SCHEMA_VERSION:
        errors.append(f"unsupported or missing version {data.get('version')!r} (expected 1)")
    steps = []
    last = 0
    for i, raw in enumerate(data.get("steps") or []):
        if not isinstance(raw, dict):
            errors.append(f"steps[{i}]: expected a mapping")
            continue
        try:
            at = parse_time(raw.get("at", 0))
        except (ValueError, ArithmeticError) as exc:
            errors.append(f"steps[{i}]: {exc}")
            continue
        verbs = [k for k in raw if k != "at"]
        if len(verbs) != 1 or verbs[0] not in VERBS:
            errors.append(f"steps[{i}]: need exactly one verb from {', '.join(VERBS)}; got {verbs}")
            continue
        if at < last:
            errors.append(f"steps[{i}]: steps must be sorted by time")
        last = max(last, at)
        args = raw[verbs[0]]
        if args is None:
            args = {}
        if not isinstance(args, dict):
            errors.append(f"steps[{i}]: arguments of {verbs[0]} must be a mapping")
            continue
        steps.append(Step(at, verbs[0], args, i))
    try:
        end = parse_time(data.get("end", last))
    except ValueError as exc:
        errors.append(f"end: {exc}")
        end = last
    if end < last:
        errors.append("end time precedes the last step")
    if errors:
        raise ValidationError(errors)
    return ScenarioScript(steps, end, source)


def load_script(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_script(data, source=path)


def _width(args):
    return Width[args.get("width", "D08")]


def _num(value):
    if isinstance(value, str):
        return int(value, 0)
    return value


def _port(value):
    """DSP port given as 0/1/2 or DSP_A/DSP_B/VME."""
    return Port[value] if isinstance(value, str) else Port(value)


class AssertionFailed(Exception):
    pass


class Runner:
    """Executes one script against one crate. Randomness comes only from ``seed``."""

    def __init__(self, crate, script, seed=0):
        self.crate = crate
        self.script = script
        self.rng = random.Random(seed)
        self.failures = []
        self.assertions = 0
        self.cycles = 0

    def run(self):
        crate = self.crate
        for step in self.script.steps:
            crate.schedule_at(step.at_ps, lambda step=step: self._execute(step))
        crate.advance_to(self.script.end_ps)
        return RunResult(1 if self.failures else 0, self.failures, self.assertions, self.cycles,
                         crate)

    def _execute(self, step):
        try:
            getattr(self, "_do_" + step.verb)(step.args)
        except AssertionFailed as exc:
            msg = f"step {step.index} at {step.at_ps} ps: {exc}"
            self.failures.append(msg)
            log.error("assertion failed: %s", msg)
        except (KeyError, ValueError, TypeError) as exc:
            msg = f"step {step.index} ({step.verb}) at {step.at_ps} ps: {exc}"
            self.failures.append(msg)
            log.error("%s", msg)

    # -- addressing helpers -------------------------------------------------

    def _address(self, args):
        if "board" in args and "register" in args:
            address, desc = self.crate.address_of(args["board"], args["register"])
            width = Width.D16 if desc.width_bits == 16 else Width.D08
            return address, Width[args["width"]] if "width" in args else width
        if "board" in args and "offset" in args:
            region = args.get("region", "regs")
            board = self.crate.board(args["board"])
            for reg in self.crate.bus.registrations_for(board):
                if reg.region == region:
                    return Address(reg.space, reg.base + _num(args["offset"])), _width(args)
            raise KeyError(f"{args['board']} has no {region} window")
        return Address(Space[args.get("space", "A24")], _num(args["address"])), _width(args)

    def _cycle(self, cycle):
        self.cycles += 1
        return self.crate.bus.perform_cycle(cycle)

    def _check(self, label, actual, args):
        self.assertions += 1
        if "equals" in args:
            expected = args["equals"]
            if isinstance(expected, str) and isinstance(actual, int):
                expected = _num(expected)
            if actual != expected:
                raise AssertionFailed(f"{label}: expected {expected!r}, got {actual!r}")
        elif "approx" in args:
            tol = float(args.get("tol", 1e-9))
            if actual is None or abs(float(actual) - float(args["approx"])) > tol:
                raise AssertionFailed(f"{label}: expected {args['approx']} +/- {tol}, got {actual!r}")
        elif "at_least" in args or "at_most" in args:
            if "at_least" in args and not actual >= args["at_least"]:
                raise AssertionFailed(f"{label}: expected >= {args['at_least']}, got {actual!r}")
            if "at_most" in args and not actual <= args["at_most"]:
                raise AssertionFailed(f"{label}: expected <= {args['at_most']}, got {actual!r}")

    # -- verbs --------------------------------------------------------------

    def _do_write(self, args):
        address, width = self._address(args)
        result = self._cycle(BusCycle(CycleKind.WRITE, address, width, _num(args["value"])))
        if "outcome" in args:
            self._check(f"write {address} outcome", result.outcome.value, {"equals": args["outcome"]})

    def _do_read(self, args):
        address, width = self._address(args)
        result = self._cycle(BusCycle(CycleKind.READ, address, width))
        if "outcome" in args:
            self._check(f"read {address} outcome", result.outcome.value, {"equals": args["outcome"]})
        if "expect" in args:
            self._check(f"read {address}", result.data, {"equals": _num(args["expect"])})

    def _do_block_read(self, args):
        address, width = self._address(args)
        result = self._cycle(BusCycle(CycleKind.BLOCK_READ, address, width,
                                      beat_count=int(args["beats"])))
        if "outcome" in args:
            self._check(f"block read {address} outcome", result.outcome.value,
                        {"equals": args["outcome"]})
        if "expect" in args:
            self._check(f"block read {address}", list(result.words),
                        {"equals": [_num(x) for x in args["expect"]]})

    def _do_block_write(self, args):
        address, width = self._address(args)
        data = [_num(x) for x in args["data"]]
        result = self._cycle(BusCycle(CycleKind.BLOCK_WRITE, address, width,
                                      beat_count=len(data), payload=data))
        if "outcome" in args:
            self._check(f"block write {address} outcome", result.outcome.value,
                        {"equals": args["outcome"]})

    def _do_rmw(self, args):
        address, width = self._address(args)
        result = self._cycle(BusCycle(CycleKind.READ_MODIFY_WRITE, address, width,
                                      data=_num(args.get("set", 0)), mask=_num(args.get("mask", 0))))
        if "expect_old" in args:
            self._check(f"rmw {address} old value", result.data, {"equals": _num(args["expect_old"])})

    def _do_iack(self, args):
        result = self.crate.bus.acknowledge(int(args["level"]), _width(args))
        self.cycles += 1
        if "expect" in args:
            expected = args["expect"]
            actual = result.data if result.ok else "BusError"
            self._check(f"iack level {args['level']}", actual,
                        {"equals": expected if expected == "BusError" else _num(expected)})

    def _do_hv_command(self, args):
        hv = self.crate.board(args["board"])
        if args.get("off"):
            hv.command_off()
        else:
            accepted, reason = hv.command_on(float(args["setpoint_kV"]) if "setpoint_kV" in args else None)
            if "expect" in args:
                actual = "accepted" if accepted else reason.value
                self._check("hv command_on", actual, {"equals": args["expect"]})

    def _do_interlock(self, args):
        hv = self.crate.board(args["board"])
        if "mask" in args:
            hv.set_interlock_mask(_num(args["mask"]))
        else:
            hv.set_interlock(int(args["bit"]), bool(args.get("ok", False)))

    def _do_load_current(self, args):
        self.crate.board(args["board"]).set_load_current(float(args["uA"]))

    def _frame_ticks(self):
        return self.crate.now_ps * FRAME_CLOCK_HZ // PS_PER_SECOND

    def _do_frame(self, args):
        mps = self.crate.board(args["board"])
        frame = CurrentFrame(self._frame_ticks(), float(args["injector"]),
                             tuple(float(s) for s in args["stations"]))
        mps.evaluate(frame)

    def _do_frames(self, args):
        """``count`` frames every ``period``; optional per-station ``jitter`` (uA, grid 0.01)
        drawn from the seeded generator, with the injector kept equal to the station sum
        unless ``loss`` is given."""
        mps = self.crate.board(args["board"])
        count = int(args["count"])
        period = parse_time(args.get("period", "100us"))
        stations = [float(s) for s in args["stations"]]
        jitter = float(args.get("jitter", 0.0))
        loss = args.get("loss")
        overrides = {int(k): v for k, v in (args.get("override") or {}).items()}
        state = {"n": 0}

        def emit():
            n = state["n"]
            values = list(stations)
            if jitter:
                values = [max(0.0, round(v + self.rng.randint(-100, 100) / 100 * jitter, 2))
                          for v in values]
            if n in overrides:
                values = [float(x) for x in overrides[n]]
            injector = sum(values) if loss is None else sum(values) + float(loss)
            mps.evaluate(CurrentFrame(self._frame_ticks(), injector, tuple(values)))
            state["n"] += 1
            if state["n"] < count:
                self.crate.schedule_in(period, emit)

        if count > 0:
            emit()

    def _do_ring_send(self, args):
        board = self.crate.board(args["board"])
        self.crate.ring.send(board, RingFrame(_num(args.get("dest", 0)), _num(args["payload"]),
                                              board.name))

    def _do_broadcast(self, args):
        """Repeated broadcasts, by default at the 30 Hz machine cadence."""
        board = self.crate.board(args["board"])
        count = int(args.get("count", 1))
        period = parse_time(args.get("period", PS_PER_SECOND // 30))
        payload = _num(args.get("payload", 0))
        increment = bool(args.get("increment", False))
        state = {"n": 0}

        def send():
            n = state["n"]
            word = (payload + n) & 0xFFFF if increment else payload
            self.crate.ring.send(board, RingFrame(0, word, board.name))
            state["n"] += 1
            if state["n"] < count:
                self.crate.schedule_in(period, send)

        if count > 0:
            send()

    def _do_ring_config(self, args):
        board = self.crate.board(args["board"])
        board.configure(bool(args.get("irq_enabled", True)), int(args.get("level", 3)),
                        _num(args.get("vector", 0)))

    def _do_ring_link(self, args):
        self.crate.board(args["board"]).set_up(bool(args.get("up", False)))

    def _do_ring_corrupt(self, args):
        self.crate.ring.corrupt_next(self.crate.board(args["board"]))

    def _do_dsp(self, args):
        dsp = self.crate.board(args["board"])
        dsp.dsp_access(_port(args["port"]), args.get("kind", "Write"), _num(args["offset"]), _width(args),
                       _num(args.get("data", 0)), _num(args.get("mask", 0)))

    def _do_dsp_irq(self, args):
        self.crate.board(args["board"]).dsp_interrupt(_port(args["source"]), _num(args["vector"]),
                                                      Width[args.get("width", "D16")])

    def _do_scam_channel(self, args):
        scam = self.crate.board(args["board"])
        scam.configure_channel(args["hall"], ChannelConfig(
            int(args["period"]), int(args["width_ticks"]), int(args.get("delay", 0)),
            bool(args.get("enabled", True))))

    def _do_pll_set(self, args):
        self.crate.board(args["board"]).set_phase_amplitude(_num(args["phase"]), _num(args["amplitude"]))

    def _do_encoder(self, args):
        self.crate.board(args["board"]).encoder_step(int(args.get("phase", 0)),
                                                    int(args.get("amplitude", 0)))

    def _do_adc(self, args):
        self.crate.board(args["board"]).inject_adc(int(args["channel"]), float(args["volts"]))

    def _do_reset(self, args):
        self.crate.board(args["board"]).reset()

    def _do_operator_reset(self, args):
        self.crate.board(args["board"]).operator_reset()

    def _do_burst(self, args):
        """``count`` repetitions of a list of bus operations, all at this instant."""
        ops = []
        for op in args["cycles"]:
            address, width = self._address(op)
            kind = op.get("op", "read")
            if kind == "read":
                ops.append(BusCycle(CycleKind.READ, address, width))
            elif kind == "write":
                ops.append(BusCycle(CycleKind.WRITE, address, width, _num(op["value"])))
            else:
                raise ValueError(f"burst supports read and write, not {kind!r}")
        perform = self.crate.bus.perform_cycle
        for _ in range(int(args["count"])):
            for cycle in ops:
                perform(cycle)
        self.cycles += len(ops) * int(args["count"])

    def _do_assert(self, args):
        board = self.crate.board(args["board"])
        if "register" in args:
            label = f"{board.name}.{args['register']}"
            actual = board.peek(args["register"])
        elif "field" in args:
            label = f"{board.name}.{args['field']}"
            snap = board.snapshot()
            if args["field"] not in snap:
                raise KeyError(f"{board.name} has no field {args['field']!r}")
            actual = snap[args["field"]]
        else:
            raise ValueError("assert needs register or field")
        self._check(label, actual, args)


def run(config, script, seed=0, trace_path=None, state_path=None, dump_dir=None, crate=None):
    """Run ``script`` on a crate built from ``config``; trace and dumps are written
    even when assertions fail."""
    crate = crate or build_crate(config)
    result = Runner(crate, script, seed).run()
    if trace_path and crate.trace is not None:
        crate.trace.write(trace_path)
    if state_path:
        with open(state_path, "w", encoding="utf-8") as fh:
            json.dump(crate.snapshot(), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
        for name, board in crate.boards.items():
            if board.kind == "mps":
                board.dump(os.path.join(dump_dir, f"{name}.mpsdump"))
            elif board.kind == "dsp":
                board.dump_memory(os.path.join(dump_dir, f"{name}.mem"))
    return result
