"""Append-only event trace.

Each record is one JSON object per line with keys in this fixed order::

    time_ps, kind, space, address, width, data, outcome, slot[, info]

``address`` and ``data`` are upper-case hex strings (``"0x00C004"``, ``"0x00AB"``)
or ``null`` for events that are not bus cycles. ``info`` is present only on
records that carry extra detail (trip reasons, ring frames, board events).
"""

import json

FIELDS = ("time_ps", "kind", "space", "address", "width", "data", "outcome", "slot")


def _hex(value, digits):
    if value is None:
        return None
    return f"0x{value:0{digits}X}"


def format_record(record):
    time_ps, kind, space, address, width, data, outcome, slot, info = record
    obj = {
        "time_ps": time_ps,
        "kind": kind,
        "space": space,
        "address": _hex(address, 6),
        "width": width,
        "data": _hex(data, 4),
        "outcome": outcome,
        "slot": slot,
    }
    if info is not None:
        obj["info"] = info
    return json.dumps(obj, separators=(",", ":"))


def parse_line(line):
    obj = json.loads(line)
    for key in ("address", "data"):
        if obj[key] is not None:
            obj[key] = int(obj[key], 16)
    return obj


class TraceLog:
    """In-memory trace buffer; records are raw tuples until written out."""

    def __init__(self):
        self.records = []

    def append(self, time_ps, kind, space=None, address=None, width=None, data=None,
               outcome=None, slot=None, info=None):
        self.records.append((time_ps, kind, space, address, width, data, outcome, slot, info))

    def __len__(self):
        return len(self.records)

    def kinds(self, kind):
        return [r for r in self.records if r[1] == kind]

    def lines(self):
        for record in self.records:
            yield format_record(record)

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")


def read_trace(path):
    with open(path, encoding="utf-8") as fh:
        return [parse_line(line) for line in fh if line.strip()]
