"""System Catch All Module: three programmable hall pulse generators and
16 optical I/O lines on an 8-bit A16 slave."""

import csv
from dataclasses import dataclass, replace

from ..board import Board
from ..bus import Width
from ..errors import ConfigError, RangeError
from ..registers import RegisterMap

HALLS = ("A", "B", "C")
PERIOD_UNIT_TICKS = 256

REGISTER_MAP = RegisterMap.contiguous_bytes(
    ["control", "period_a", "period_b", "period_c", "width_a", "width_b", "width_c"],
    window_bytes=8,
)


@dataclass(frozen=True)
class ChannelConfig:
    period_ticks: int
    width_ticks: int
    delay_ticks: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.period_ticks <= 0 or self.width_ticks <= 0:
            raise ConfigError("period and width must be positive")
        if self.width_ticks >= self.period_ticks:
            raise ConfigError(
                f"width {self.width_ticks} must be shorter than period {self.period_ticks}")
        if not 0 <= self.delay_ticks < self.period_ticks:
            raise ConfigError(f"delay {self.delay_ticks} must lie inside the period")


@dataclass
class OpticalLine:
    index: int
    direction: str = "In"
    level: bool = False

    def __post_init__(self):
        if not 0 <= self.index < 16:
            raise RangeError(f"optical line {self.index} outside 0..15")
        if self.direction not in ("In", "Out"):
            raise ValueError(f"direction must be In or Out, not {self.direction!r}")


class _Channel:
    """Timeline of config segments; segment i covers [start_i, start_{i+1})."""

    def __init__(self):
        self.segments = [(0, None)]

    def current(self):
        return self.segments[-1][1]

    def next_boundary(self, now):
        start, cfg = self.segments[-1]
        if cfg is None or not cfg.enabled or now <= start:
            return max(now, start)
        first = start + cfg.delay_ticks
        if now <= first:
            return first
        k = -(-(now - first) // cfg.period_ticks)
        return first + k * cfg.period_ticks

    def reconfigure(self, now, cfg):
        boundary = self.next_boundary(now)
        # a later reconfiguration before the boundary replaces the pending one
        while len(self.segments) > 1 and self.segments[-1][0] >= boundary:
            self.segments.pop()
        if self.segments[-1][0] == boundary:
            self.segments[-1] = (boundary, cfg)
        else:
            self.segments.append((boundary, cfg))

    def edges(self, lo, hi):
        out = []
        for i, (start, cfg) in enumerate(self.segments):
            end = self.segments[i + 1][0] if i + 1 < len(self.segments) else hi
            if cfg is None or not cfg.enabled or end <= lo or start >= hi:
                continue
            seg_lo, seg_hi = max(lo, start), min(hi, end)
            first = start + cfg.delay_ticks
            k = max(0, (seg_lo - first - cfg.width_ticks) // cfg.period_ticks)
            while True:
                rise = first + k * cfg.period_ticks
                if rise >= seg_hi:
                    break
                fall = rise + cfg.width_ticks
                if seg_lo <= rise:
                    out.append((rise, 1))
                if seg_lo <= fall < hi:
                    out.append((fall, 0))
                k += 1
        return out

    def level(self, tick):
        for i in range(len(self.segments) - 1, -1, -1):
            start, cfg = self.segments[i]
            if start <= tick:
                break
        else:
            return 0
        if cfg is None or not cfg.enabled:
            return 0
        phase = tick - start - cfg.delay_ticks
        if phase < 0:
            return 0
        return int(phase % cfg.period_ticks < cfg.width_ticks)


class ScamBoard(Board):
    kind = "scam"
    clock_hz = 16_000_000
    bus_width = Width.D08
    register_map = REGISTER_MAP

    def reset_state(self):
        self.channels = {hall: _Channel() for hall in HALLS}
        self.delays = {hall: 0 for hall in HALLS}
        self.optical = [OpticalLine(i, "Out" if i < 8 else "In") for i in range(16)]

    def configure_channel(self, hall, config):
        """Install ``config`` for ``hall``; it takes effect at the next period boundary."""
        if hall not in self.channels:
            raise ConfigError(f"unknown hall {hall!r}")
        self.channels[hall].reconfigure(self.now, config)
        self.delays[hall] = config.delay_ticks
        i = HALLS.index(hall)
        control = self.get_reg("control")
        control = control | (1 << i) if config.enabled else control & ~(1 << i)
        self.set_reg("control", control)
        if config.period_ticks % PERIOD_UNIT_TICKS == 0 and config.period_ticks // PERIOD_UNIT_TICKS < 256:
            self.set_reg(f"period_{hall.lower()}", config.period_ticks // PERIOD_UNIT_TICKS)
        if config.width_ticks < 256:
            self.set_reg(f"width_{hall.lower()}", config.width_ticks)

    def channel_config(self, hall):
        return self.channels[hall].current()

    def waveform(self, hall, from_tick, to_tick):
        """Edges ``(tick, level)`` of ``hall`` within ``[from_tick, to_tick)``."""
        if from_tick > to_tick:
            raise ValueError("from_tick must not exceed to_tick")
        return self.channels[hall].edges(from_tick, to_tick)

    def level(self, hall, tick):
        return self.channels[hall].level(tick)

    def on_write(self, name, value):
        halls = HALLS if name == "control" else (name[-1].upper(),)
        control = self.get_reg("control")
        for hall in halls:
            i = HALLS.index(hall)
            period = self.get_reg(f"period_{hall.lower()}") * PERIOD_UNIT_TICKS
            width = self.get_reg(f"width_{hall.lower()}")
            enabled = bool(control >> i & 1)
            try:
                cfg = ChannelConfig(period, width, self.delays[hall] % max(period, 1), enabled)
            except ConfigError:
                cfg = None  # incomplete register programming: channel idles
            old = self.channels[hall].current()
            if cfg != old:
                self.channels[hall].reconfigure(self.now, cfg)

    def set_optical_input(self, index, level):
        line = self.optical[index]
        if line.direction != "In":
            raise ConfigError(f"optical line {index} is an output")
        line.level = bool(level)

    def lemo_levels(self, tick=None):
        """The 18 Lemo connectors mirror internal signals: three hall pulses,
        three hall enables, and the 12 lower optical lines."""
        tick = self.now if tick is None else tick
        control = self.get_reg("control")
        levels = {}
        for i, hall in enumerate(HALLS):
            levels[f"pulse_{hall}"] = self.level(hall, tick)
            levels[f"enable_{hall}"] = control >> i & 1
        for line in self.optical[:12]:
            levels[f"optical_{line.index}"] = int(line.level)
        return levels

    def advance(self, start, end):
        # optical outputs 0..2 follow the hall pulse trains
        for i, hall in enumerate(HALLS):
            self.optical[i].level = bool(self.level(hall, end))

    def export_csv(self, path, from_tick, to_tick):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tick", "hall", "level"])
            rows = [(t, hall, lvl) for hall in HALLS for t, lvl in self.waveform(hall, from_tick, to_tick)]
            writer.writerows(sorted(rows))

    def snapshot(self):
        snap = super().snapshot()
        snap["channels"] = {
            hall: None if ch.current() is None else vars(replace(ch.current()))
            for hall, ch in self.channels.items()
        }
        return snap
