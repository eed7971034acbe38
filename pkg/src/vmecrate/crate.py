"""Deterministic core loop: picosecond event scheduler, lazy board clocking
and the ordered mailbox through which other threads reach the bus."""

import heapq
import queue
from concurrent.futures import Future

from .bus import Address, VmeBus
from .clock import SimClock
from .trace import TraceLog


class Crate:
    """A VME crate: one bus, its boards, an optional token ring and a trace.

    Boards are clocked lazily: whenever simulated time moves, each board is
    ticked by the number of its own clock edges that elapsed, so a 100 s idle
    stretch costs the same as a 1 us one.
    """

    def __init__(self, trace=True):
        self.clock = SimClock()
        self.trace = TraceLog() if trace else None
        self.bus = VmeBus(self.clock, self.trace)
        self.boards = {}
        self.ring = None
        self._events = []
        self._seq = 0
        self._mailbox = queue.Queue()

    # -- assembly -----------------------------------------------------------

    def add_board(self, board, slot, base, window_bytes=None, region="regs"):
        if board.name in self.boards and self.boards[board.name] is not board:
            raise ValueError(f"duplicate board name {board.name!r}")
        if window_bytes is None:
            window_bytes = board.register_map.window_bytes
        reg_id = self.bus.attach(slot, board, base, window_bytes, region)
        self.boards[board.name] = board
        board.events = self._board_event
        self._sync_board(board, self.clock.now_ps)
        return reg_id

    def make_ring(self, boards):
        from .boards.ring import TokenRing

        period = boards[0].period_ps
        self.ring = TokenRing(
            boards,
            scheduler=lambda ticks, fn: self.schedule_in(ticks * period, fn),
            on_event=self._ring_event,
            now_fn=lambda: self.clock.now_ps // period,
        )
        return self.ring

    def board(self, name):
        try:
            return self.boards[name]
        except KeyError:
            raise KeyError(f"no board named {name!r}") from None

    def address_of(self, board_name, register, region="regs"):
        board = self.board(board_name)
        for reg in self.bus.registrations_for(board):
            if reg.region == region:
                desc = board.register_map.descriptor(register)
                return Address(reg.space, reg.base + desc.offset), desc
        raise KeyError(f"{board_name} has no {region} window")

    # -- time ---------------------------------------------------------------

    @property
    def now_ps(self):
        return self.clock.now_ps

    def schedule_at(self, t_ps, fn):
        if t_ps < self.clock.now_ps:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._events, (t_ps, self._seq, fn))
        self._seq += 1

    def schedule_in(self, dt_ps, fn):
        self.schedule_at(self.clock.now_ps + dt_ps, fn)

    def advance_to(self, t_ps):
        """Run every event due at or before ``t_ps`` in (time, insertion) order."""
        events = self._events
        while events and events[0][0] <= t_ps:
            when, _, fn = heapq.heappop(events)
            self._move(when)
            fn()
        self._move(t_ps)

    def run_for(self, dt_ps):
        self.advance_to(self.clock.now_ps + dt_ps)

    def _move(self, t_ps):
        if t_ps != self.clock.now_ps:
            self.clock.advance_to(t_ps)
        for board in self.boards.values():
            self._sync_board(board, t_ps)

    @staticmethod
    def _sync_board(board, t_ps):
        target = t_ps // board.period_ps
        if target > board.now:
            board.tick(target - board.now)

    @property
    def next_event_ps(self):
        return self._events[0][0] if self._events else None

    # -- mailbox ------------------------------------------------------------

    def submit(self, fn, *args):
        """Queue ``fn(*args)`` for the core loop; returns a Future with its result."""
        fut = Future()
        self._mailbox.put((fn, args, fut))
        return fut

    def drain_mailbox(self, timeout=None):
        """Run queued commands in arrival order. With ``timeout``, block up to
        that many seconds for the first one."""
        n = 0
        while True:
            try:
                if n == 0 and timeout:
                    fn, args, fut = self._mailbox.get(timeout=timeout)
                else:
                    fn, args, fut = self._mailbox.get_nowait()
            except queue.Empty:
                return n
            if fut.set_running_or_notify_cancel():
                try:
                    fut.set_result(fn(*args))
                except BaseException as exc:  # delivered to the waiting caller
                    fut.set_exception(exc)
            n += 1

    # -- trace hooks --------------------------------------------------------

    def _board_event(self, board, kind, info=None):
        if self.trace is not None:
            self.trace.append(self.clock.now_ps, kind, slot=board.slot, info=info)

    def _ring_event(self, kind, board, frame, detail=None):
        if self.trace is not None:
            info = {"board": board.name, "dest": frame.dest, "payload": frame.payload}
            if detail is not None:
                info["detail"] = detail
            self.trace.append(self.clock.now_ps, kind, data=frame.payload, slot=board.slot, info=info)

    def snapshot(self):
        return {
            "time_ps": self.clock.now_ps,
            "boards": {name: b.snapshot() for name, b in self.boards.items()},
            "pending_interrupts": [
                {"level": r.level, "vector": r.vector, "slot": r.slot, "width": r.status_width.name}
                for r in self.bus.pending()
            ],
        }
