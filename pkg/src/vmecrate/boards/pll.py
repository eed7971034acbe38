"""PLL module: phase/amplitude in, lookup-table sine/cosine, fixed-point
I/Q out on two 14-bit offset-binary DACs, plus an 8-channel read-back ADC.

I carries amplitude x sine and Q amplitude x cosine, the reverse of the
usual convention, following the board's documented assignment.
"""

import math
import struct
import zlib
from dataclasses import dataclass

from ..board import Board
from ..bus import Width
from ..errors import FormatError, RangeError
from ..registers import Access, RegisterDescriptor, RegisterMap

SINE_ENTRIES = 4096
COS_OFFSET = SINE_ENTRIES // 4
SINE_FULL_SCALE = 32767
AMP_ENTRIES = 1 << 14
AMP_MAX = AMP_ENTRIES - 1
PHASE_BITS = 16
PHASE_SHIFT = PHASE_BITS - 12       # 16-bit phase -> 12-bit table index
PRODUCT_SHIFT = 16                  # 30-bit product -> 14-bit signed
DAC_MID = 8192
DAC_MAX = 16383
ADC_CHANNELS = 8
ADC_RANGE_V = 10.0

FLASH_MAGIC = b"PLUT"
FLASH_HEADER = struct.Struct(">4sHHHHI")


def round_half_away(x):
    return math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)


def shift_round(value, shift):
    """Arithmetic right shift with round-half-away-from-zero."""
    half = 1 << (shift - 1)
    if value >= 0:
        return (value + half) >> shift
    return -((-value + half) >> shift)


@dataclass(frozen=True)
class PhaseAmplitude:
    phase_code: int
    amplitude_code: int

    def __post_init__(self):
        if not 0 <= self.phase_code < 1 << PHASE_BITS:
            raise ValueError("phase code is 16 bits")
        if not 0 <= self.amplitude_code <= AMP_MAX:
            raise ValueError("amplitude code is 14 bits")


@dataclass(frozen=True)
class LutImage:
    sine: tuple
    amplitude: tuple

    def cosine(self, index):
        return self.sine[(index + COS_OFFSET) % SINE_ENTRIES]

    def to_bytes(self):
        body = struct.pack(f">{len(self.sine)}h", *self.sine)
        body += struct.pack(f">{len(self.amplitude)}H", *self.amplitude)
        header = FLASH_HEADER.pack(FLASH_MAGIC, 1, len(self.sine), COS_OFFSET,
                                   len(self.amplitude), zlib.crc32(body))
        return header + body

    @classmethod
    def from_bytes(cls, data):
        if len(data) < FLASH_HEADER.size:
            raise FormatError("flash image truncated")
        magic, version, n_sine, cos_off, n_amp, crc = FLASH_HEADER.unpack_from(data)
        if magic != FLASH_MAGIC or version != 1 or cos_off != n_sine // 4:
            raise FormatError("not a PLL flash image")
        body = data[FLASH_HEADER.size:]
        if len(body) != 2 * (n_sine + n_amp) or zlib.crc32(body) != crc:
            raise FormatError("flash image body corrupt")
        sine = struct.unpack_from(f">{n_sine}h", body)
        amp = struct.unpack_from(f">{n_amp}H", body, 2 * n_sine)
        return cls(sine, amp)


def build_luts(amplitude_table=None):
    sine = tuple(round_half_away(SINE_FULL_SCALE * math.sin(2 * math.pi * k / SINE_ENTRIES))
                 for k in range(SINE_ENTRIES))
    amp = tuple(range(AMP_ENTRIES)) if amplitude_table is None else tuple(amplitude_table)
    if len(amp) != AMP_ENTRIES or any(not 0 <= a <= AMP_MAX for a in amp):
        raise ValueError("amplitude table needs 16384 entries within 0..16383")
    return LutImage(sine, amp)


def compute_iq(pa, luts):
    """Returns the (I, Q) 14-bit offset-binary DAC codes."""
    index = (pa.phase_code & 0xFFFF) >> PHASE_SHIFT
    amp = luts.amplitude[pa.amplitude_code]
    i_val = shift_round(luts.sine[index] * amp, PRODUCT_SHIFT)
    q_val = shift_round(luts.sine[(index + COS_OFFSET) % SINE_ENTRIES] * amp, PRODUCT_SHIFT)
    return i_val + DAC_MID, q_val + DAC_MID


def encoder_step(pa, delta_phase, delta_amp):
    amp = min(max(pa.amplitude_code + delta_amp, 0), AMP_MAX)
    return PhaseAmplitude((pa.phase_code + delta_phase) % (1 << PHASE_BITS), amp)


def adc_code(volts):
    """Bipolar +/-10 V, 16-bit offset binary; 0 V is midscale."""
    return min(max(round_half_away(32768 + volts / ADC_RANGE_V * 32768), 0), 0xFFFF)


CTRL_ENCODER = 0x01

REGISTER_MAP = RegisterMap([
    RegisterDescriptor("phase_hi", 0x00, 8, Access.RW),
    RegisterDescriptor("phase_lo", 0x01, 8, Access.RW),
    RegisterDescriptor("amplitude", 0x02, 16, Access.RW, doc="14-bit amplitude code"),
    RegisterDescriptor("control", 0x04, 16, Access.RW, doc="bit0 encoder source"),
    *(RegisterDescriptor(f"adc_{ch}", 0x06 + 2 * ch, 16, Access.RO, 0x8000) for ch in range(ADC_CHANNELS)),
    RegisterDescriptor("i_dac", 0x16, 16, Access.RO, DAC_MID),
    RegisterDescriptor("q_dac", 0x18, 16, Access.RO, DAC_MID),
], window_bytes=0x20)


class PllModule(Board):
    kind = "pll"
    clock_hz = 10_000_000
    bus_width = Width.D16
    register_map = REGISTER_MAP

    def __init__(self, name=None, luts=None, latency_ticks=2):
        self.luts = luts or build_luts()
        super().__init__(name, latency_ticks)

    def reset_state(self):
        self.setting = PhaseAmplitude(0, 0)
        self.adc_volts = [0.0] * ADC_CHANNELS
        self._update_outputs()

    @property
    def iq(self):
        return compute_iq(self.setting, self.luts)

    def set_phase_amplitude(self, phase_code, amplitude_code):
        self.setting = PhaseAmplitude(phase_code, amplitude_code)
        self._update_outputs()

    def encoder_step(self, delta_phase, delta_amp):
        """Front-panel encoders; ignored unless the control register selects them."""
        if not self.get_reg("control") & CTRL_ENCODER:
            return self.setting
        self.setting = encoder_step(self.setting, delta_phase, delta_amp)
        self._update_outputs()
        return self.setting

    def inject_adc(self, channel, volts):
        if not 0 <= channel < ADC_CHANNELS:
            raise RangeError(f"ADC channel {channel} outside 0..7")
        self.adc_volts[channel] = float(volts)
        self.set_reg(f"adc_{channel}", adc_code(volts))

    def adc_read(self, channel):
        if not 0 <= channel < ADC_CHANNELS:
            raise RangeError(f"ADC channel {channel} outside 0..7")
        return adc_code(self.adc_volts[channel])

    def _update_outputs(self):
        phase = self.setting.phase_code
        self.set_reg("phase_hi", phase >> 8)
        self.set_reg("phase_lo", phase & 0xFF)
        amp_reg = self.get_reg("amplitude")
        if amp_reg & AMP_MAX != self.setting.amplitude_code:
            self.set_reg("amplitude", self.setting.amplitude_code)
        i_code, q_code = self.iq
        self.set_reg("i_dac", i_code)
        self.set_reg("q_dac", q_code)
        for ch in range(ADC_CHANNELS):
            self.set_reg(f"adc_{ch}", adc_code(self.adc_volts[ch]))

    def on_write(self, name, value):
        if name in ("phase_hi", "phase_lo", "amplitude"):
            phase = (self.get_reg("phase_hi") << 8) | self.get_reg("phase_lo")
            self.setting = PhaseAmplitude(phase, self.get_reg("amplitude") & AMP_MAX)
            i_code, q_code = self.iq
            self.set_reg("i_dac", i_code)
            self.set_reg("q_dac", q_code)

    def write_flash(self, path):
        with open(path, "wb") as fh:
            fh.write(self.luts.to_bytes())

    def snapshot(self):
        snap = super().snapshot()
        i_code, q_code = self.iq
        snap.update(phase_code=self.setting.phase_code, amplitude_code=self.setting.amplitude_code,
                    i_code=i_code, q_code=q_code, adc_volts=list(self.adc_volts))
        return snap
