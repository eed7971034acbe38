"""Picosecond simulation clock and module clock-period helpers."""

PS_PER_SECOND = 10**12


def period_ps(clock_hz):
    """Exact clock period in picoseconds; rejects rates that do not divide 1 s."""
    clock_hz = int(clock_hz)
    if clock_hz <= 0 or PS_PER_SECOND % clock_hz:
        raise ValueError(f"{clock_hz} Hz has no integer picosecond period")
    return PS_PER_SECOND // clock_hz


def parse_time(value):
    """Parse ``"10s"``, ``"2.5ms"``, ``"100us"``, ``"40ns"``, ``"7ps"`` or a bare
    integer (picoseconds) into integer picoseconds."""
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"bare times are integer picoseconds, got {value!r}")
        return int(value)
    text = str(value).strip()
    for suffix, scale in (("ps", 1), ("ns", 10**3), ("us", 10**6), ("ms", 10**9), ("s", 10**12)):
        if text.endswith(suffix):
            number = text[: -len(suffix)].strip()
            break
    else:
        number, scale = text, 1
    from fractions import Fraction

    ps = Fraction(number) * scale
    if ps.denominator != 1:
        raise ValueError(f"time {value!r} is not a whole number of picoseconds")
    if ps < 0:
        raise ValueError(f"negative time {value!r}")
    return int(ps)


class SimClock:
    """Monotonic 64-bit picosecond clock."""

    __slots__ = ("now_ps",)

    def __init__(self, now_ps=0):
        self.now_ps = now_ps

    def advance_to(self, t_ps):
        if t_ps < self.now_ps:
            raise ValueError(f"clock cannot run backwards ({t_ps} < {self.now_ps})")
        if t_ps >= 1 << 64:
            raise OverflowError("simulation time exceeds 64-bit picoseconds")
        self.now_ps = t_ps

    def __repr__(self):
        return f"SimClock(now_ps={self.now_ps})"
