"""Register descriptors, register maps and decode."""

import enum
from dataclasses import dataclass, field


class Access(enum.Enum):
    RO = "RO"
    WO = "WO"
    RW = "RW"
    RW1C = "RW1C"


@dataclass(frozen=True)
class RegisterDescriptor:
    name: str
    offset: int
    width_bits: int = 8
    access: Access = Access.RW
    reset_value: int = 0
    signed: bool = False
    doc: str = ""

    def __post_init__(self):
        if self.width_bits not in (8, 16):
            raise ValueError(f"{self.name}: registers are 8 or 16 bits wide")
        if self.width_bits == 16 and self.offset & 1:
            raise ValueError(f"{self.name}: 16-bit registers must be even-aligned")
        if not 0 <= self.reset_value < 1 << self.width_bits:
            raise ValueError(f"{self.name}: reset value does not fit {self.width_bits} bits")

    @property
    def nbytes(self):
        return self.width_bits // 8

    @property
    def mask(self):
        return (1 << self.width_bits) - 1


@dataclass
class RegisterMap:
    registers: list
    window_bytes: int
    _by_offset: list = field(init=False, repr=False)
    _by_name: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.registers = list(self.registers)
        self._by_offset = [None] * self.window_bytes
        self._by_name = {}
        for index, desc in enumerate(self.registers):
            if desc.offset + desc.nbytes > self.window_bytes:
                raise ValueError(f"{desc.name} does not fit in a {self.window_bytes}-byte window")
            if desc.name in self._by_name:
                raise ValueError(f"duplicate register name {desc.name}")
            self._by_name[desc.name] = index
            for byte in range(desc.offset, desc.offset + desc.nbytes):
                if self._by_offset[byte] is not None:
                    raise ValueError(f"{desc.name} overlaps {self.registers[self._by_offset[byte]].name}")
                self._by_offset[byte] = index

    @classmethod
    def contiguous_bytes(cls, names, window_bytes=None, **overrides):
        """Byte registers at offsets 0, 1, 2, ...; ``overrides`` maps name to a
        dict of descriptor fields."""
        regs = [RegisterDescriptor(name, i, **overrides.get(name, {})) for i, name in enumerate(names)]
        return cls(regs, window_bytes or len(regs))

    def __len__(self):
        return len(self.registers)

    def __iter__(self):
        return iter(self.registers)

    def __getitem__(self, index):
        return self.registers[index]

    def decode(self, offset):
        """Index of the register containing byte ``offset``, or None."""
        if 0 <= offset < self.window_bytes:
            return self._by_offset[offset]
        return None

    def index(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"no register named {name!r}") from None

    def descriptor(self, name):
        return self.registers[self.index(name)]

    def manifest(self):
        return [
            {
                "name": d.name,
                "offset": d.offset,
                "width": d.width_bits,
                "access": d.access.value,
                "reset": d.reset_value,
                "signed": d.signed,
            }
            for d in self.registers
        ]
