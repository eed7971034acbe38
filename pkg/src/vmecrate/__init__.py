"""Deterministic VME crate simulator for six FPGA board models."""

from .bus import (Address, BusCycle, CycleKind, CycleResult, InterruptRequest, Outcome, Space,
                  VmeBus, Width)
from .clock import SimClock
from .crate import Crate
from .errors import (BusError, ConfigError, FormatError, MalformedCycleError, OverlapError,
                     ParseError, RangeError, SlotOccupiedError, ValidationError)
from .registers import Access, RegisterDescriptor, RegisterMap

__version__ = "0.1.0"

__all__ = [
    "Access", "Address", "BusCycle", "BusError", "ConfigError", "Crate", "CycleKind",
    "CycleResult", "FormatError", "InterruptRequest", "MalformedCycleError", "Outcome",
    "OverlapError", "ParseError", "RangeError", "RegisterDescriptor", "RegisterMap", "SimClock",
    "SlotOccupiedError", "Space", "ValidationError", "VmeBus", "Width",
]
