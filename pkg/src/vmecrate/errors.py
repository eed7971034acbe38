"""Exception types shared across the crate model."""


class CrateError(Exception):
    pass


class BusError(CrateError):
    """Raised by a slave to signal BERR; the bus converts it into a cycle outcome."""


class MalformedCycleError(CrateError, ValueError):
    pass


class OverlapError(CrateError, ValueError):
    pass


class SlotOccupiedError(CrateError, ValueError):
    pass


class ConfigError(CrateError, ValueError):
    pass


class RangeError(CrateError, IndexError):
    pass


class FormatError(CrateError, ValueError):
    pass


class ParseError(CrateError, ValueError):
    pass


class ValidationError(CrateError, ValueError):
    """Aggregated configuration problems. ``errors`` holds every message found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
