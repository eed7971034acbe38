"""Crate configuration: parsing, aggregated validation and crate assembly.

Configuration files are YAML with ``version: 1``::

    version: 1
    boards:
      - {name: hv, kind: hv, slot: 3, space: A16, base: 0xC000,
         params: {ramp_rate_kV_per_s: 5.0}}
      - {name: dsp, kind: dsp, slot: 6, space: A24, base: 0x110000,
         memory_base: 0x400000}
    ring: {boards: [ring1, ring2], hop_delay_ticks: 10}
    bindings: bindings.yaml
"""

import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from .boards import BOARD_KINDS
from .boards.dsp import MEMORY_BYTES
from .boards.hv import HvConfig
from .boards.mps import BUFFER_BYTES, MpsConfig
from .bus import Address, Space
from .clock import period_ps
from .crate import Crate
from .errors import ConfigError, ParseError, ValidationError

SCHEMA_VERSION = 1

# extra windows beyond the register window: kind -> (config key, region, size)
EXTRA_WINDOWS = {
    "dsp": ("memory_base", "memory", MEMORY_BYTES),
    "mps": ("buffer_base", "buffer", BUFFER_BYTES),
}


@dataclass
class Window:
    region: str
    space: Space
    base: int
    size: int


@dataclass
class BoardSpec:
    name: str
    kind: str
    slot: int
    windows: list
    params: dict = field(default_factory=dict)
    clock_hz: int = None
    latency_ticks: int = 2


@dataclass
class RingSpec:
    boards: list
    hop_delay_ticks: int = None


@dataclass
class CrateConfig:
    boards: list
    ring: RingSpec = None
    bindings_path: str = None
    source: str = None


def _int(value, what, errors):
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, str):
            try:
                return int(value, 0)
            except ValueError:
                pass
        errors.append(f"{what}: expected an integer, got {value!r}")
        return None
    return value


def _board_factory(kind, name, params, latency):
    cls = BOARD_KINDS[kind]
    params = dict(params or {})
    if kind == "hv":
        return cls(name, config=HvConfig(**params), latency_ticks=latency)
    if kind == "mps":
        if "location_limits_uA" in params:
            params["location_limits_uA"] = tuple(params["location_limits_uA"])
        return cls(name, config=MpsConfig(**params), latency_ticks=latency)
    return cls(name, latency_ticks=latency, **params)


def parse_config(data, source=None):
    """Validate a parsed mapping into a :class:`CrateConfig`, collecting every error."""
    errors = []
    if not isinstance(data, dict):
        raise ValidationError(["configuration must be a mapping"])
    if data.get("version") != SCHEMA_VERSION:
        errors.append(f"unsupported or missing version {data.get('version')!r} (expected 1)")
    raw_boards = data.get("boards")
    if not isinstance(raw_boards, list) or not raw_boards:
        errors.append("boards: need a non-empty list")
        raw_boards = []
    specs = []
    names = {}
    slots = {}
    for i, raw in enumerate(raw_boards):
        where = f"boards[{i}]"
        if not isinstance(raw, dict):
            errors.append(f"{where}: expected a mapping")
            continue
        name = raw.get("name") or f"board{i}"
        where = f"board {name!r}"
        kind = raw.get("kind")
        if kind not in BOARD_KINDS:
            errors.append(f"{where}: unknown board kind {kind!r} (known: {', '.join(sorted(BOARD_KINDS))})")
            continue
        if name in names:
            errors.append(f"{where}: duplicate board name")
        slot = _int(raw.get("slot"), f"{where} slot", errors)
        if slot is not None:
            if not 1 <= slot <= 21:
                errors.append(f"{where}: slot {slot} outside 1..21")
            elif slot in slots:
                errors.append(f"{where}: slot {slot} already used by {slots[slot]!r}")
            else:
                slots[slot] = name
        try:
            space = Space[raw.get("space", "A24")]
        except KeyError:
            errors.append(f"{where}: unknown address space {raw.get('space')!r}")
            continue
        base = _int(raw.get("base"), f"{where} base", errors)
        cls = BOARD_KINDS[kind]
        windows = []
        if base is not None:
            windows.append(Window("regs", space, base, None))
        if kind in EXTRA_WINDOWS:
            key, region, size = EXTRA_WINDOWS[kind]
            extra = _int(raw.get(key), f"{where} {key}", errors)
            if extra is not None:
                extra_space = Space[raw.get(key.replace("base", "space"), "A24")]
                windows.append(Window(region, extra_space, extra, size))
        clock_hz = None
        if "clock_mhz" in raw:
            try:
                clock_hz = int(round(float(raw["clock_mhz"]) * 1e6))
                period_ps(clock_hz)
            except (TypeError, ValueError) as exc:
                errors.append(f"{where}: clock_mhz {raw['clock_mhz']!r}: {exc}")
                clock_hz = None
        latency = _int(raw.get("latency_ticks", 2), f"{where} latency_ticks", errors)
        params = raw.get("params") or {}
        try:
            board = _board_factory(kind, name, params, latency or 2)
        except (TypeError, ValueError) as exc:
            errors.append(f"{where}: bad params: {exc}")
            board = None
        rmap = board.register_map if board is not None else cls.register_map
        for w in windows:
            if w.size is None:
                w.size = rmap.window_bytes if rmap is not None else 0x20
        for w in windows:
            if w.base < 0 or w.base + w.size > w.space.limit:
                errors.append(f"{where}: {w.region} window 0x{w.base:X}+0x{w.size:X} "
                              f"outside {w.space.name} space")
        names[name] = kind
        specs.append(BoardSpec(name, kind, slot, windows, params, clock_hz, latency or 2))

    # pairwise window overlap, naming both slots
    flat = [(s, w) for s in specs for w in s.windows]
    for i, (sa, wa) in enumerate(flat):
        for sb, wb in flat[i + 1:]:
            if wa.space is wb.space and wa.base < wb.base + wb.size and wb.base < wa.base + wa.size:
                errors.append(
                    f"window overlap in {wa.space.name}: slot {sa.slot} ({sa.name} {wa.region} "
                    f"0x{wa.base:X}+0x{wa.size:X}) and slot {sb.slot} ({sb.name} {wb.region} "
                    f"0x{wb.base:X}+0x{wb.size:X})")

    ring = None
    raw_ring = data.get("ring")
    if raw_ring is not None:
        members = raw_ring.get("boards") if isinstance(raw_ring, dict) else None
        if not isinstance(members, list) or not members:
            errors.append("ring: need a non-empty boards list")
        else:
            for m in members:
                if names.get(m) != "ring":
                    errors.append(f"ring: {m!r} is not a ring board")
            if len(set(members)) != len(members):
                errors.append("ring: a board appears twice")
            addrs = [((next((s.params for s in specs if s.name == m), {}) or {})
                      .get("serial_address", 1)) for m in members]
            if len(set(addrs)) != len(addrs):
                errors.append(f"ring: serial addresses must be unique, got {addrs}")
            hop = raw_ring.get("hop_delay_ticks")
            if hop is not None and (not isinstance(hop, int) or hop <= 0):
                errors.append("ring: hop_delay_ticks must be a positive integer")
            ring = RingSpec(list(members), hop)

    bindings = data.get("bindings")
    if bindings is not None and source is not None and not os.path.isabs(bindings):
        bindings = os.path.join(os.path.dirname(os.path.abspath(source)), bindings)

    if errors:
        raise ValidationError(errors)
    return CrateConfig(specs, ring, bindings, source)


def load(path):
    """Read and validate a crate config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_config(data, source=path)


def build_crate(config, trace=True):
    crate = Crate(trace=trace)
    for spec in config.boards:
        board = _board_factory(spec.kind, spec.name, spec.params, spec.latency_ticks)
        if spec.clock_hz is not None:
            board.clock_hz = spec.clock_hz
        for w in spec.windows:
            crate.add_board(board, spec.slot, Address(w.space, w.base), w.size, w.region)
    if config.ring is not None:
        members = [crate.board(n) for n in config.ring.boards]
        if config.ring.hop_delay_ticks is not None:
            for b in members:
                b.hop_delay_ticks = config.ring.hop_delay_ticks
        crate.make_ring(members)
    return crate


def bundled(name):
    return os.path.join(os.path.dirname(__file__), "data", name)


def config_to_dict(config):
    return dataclasses.asdict(config)


__all__ = ["CrateConfig", "ConfigError", "build_crate", "bundled", "load", "parse_config"]
