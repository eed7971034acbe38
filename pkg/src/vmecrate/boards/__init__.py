"""Behavioral models of the six crate boards."""

from .dsp import DualDspBoard
from .hv import HvController
from .mps import MpsComparator
from .pll import PllModule
from .ring import RingBoard, TokenRing
from .scam import ScamBoard

BOARD_KINDS = {
    "scam": ScamBoard,
    "hv": HvController,
    "ring": RingBoard,
    "dsp": DualDspBoard,
    "mps": MpsComparator,
    "pll": PllModule,
}

__all__ = [
    "BOARD_KINDS",
    "DualDspBoard",
    "HvController",
    "MpsComparator",
    "PllModule",
    "RingBoard",
    "ScamBoard",
    "TokenRing",
]
