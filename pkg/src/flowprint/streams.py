"""Stream multiplexing inside one circuit.

Each stream may have at most ``package_window`` cells outstanding. Credit
comes back in 50-cell increments, ``ack_delay`` seconds after every 50th cell
of that stream reaches the client. While one stream waits for credit, its
peers have the circuit to themselves, which is what produces runs of whole
50-cell batches.

Packaging is governed by ``queue_limit``, the number of cells the exit may
hold on the circuit ahead of transmission:

* ``0``: a cell is packaged at the moment the circuit has budget to transmit
  it, round-robin over eligible streams;
* ``Q > 0``: the exit keeps up to ``Q`` cells queued, topping up round-robin
  as cells drain or credit arrives;
* ``None``: no limit, so everything the windows allow is queued at once.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError

CELL_BYTES = 512
WINDOW_CELLS = 500
INCREMENT_CELLS = 50
DEFAULT_ACK_DELAY = 0.6

_EPS_BYTES = 1e-9


@dataclass
class StreamState:
    """Per-stream flow-control state at the exit."""

    id: int
    circuit: int
    package_window: int = WINDOW_CELLS
    # heap of (arrival_time, cells)
    pending_increments: list = field(default_factory=list)
    bytes_sent: int = 0  # packaged onto the circuit, whole cells
    applied_increments: int = 0  # cells of credit returned so far
    backlog: float = math.inf  # bytes the source still wants to send
    start_time: float = 0.0
    bytes_delivered: float = 0.0
    cells_delivered: int = 0

    def __post_init__(self):
        if not 0 <= self.package_window <= WINDOW_CELLS:
            raise ConfigurationError(f"package window must lie in [0, {WINDOW_CELLS}]")

    def eligible(self, clock: float) -> bool:
        return self.package_window > 0 and self.backlog > 0 and clock >= self.start_time

    def next_arrival(self) -> float:
        return self.pending_increments[0][0] if self.pending_increments else math.inf

    def window_consistent(self) -> bool:
        expected = (WINDOW_CELLS - self.package_window + self.applied_increments) * CELL_BYTES
        return self.bytes_sent == expected


@dataclass(frozen=True)
class CellScheduleRecord:
    stream: int
    tick: int
    cells: int


def mature_increments(stream: StreamState, clock: float) -> int:
    """Apply every increment that has arrived by ``clock``; returns the new window."""
    pending = stream.pending_increments
    while pending and pending[0][0] <= clock:
        _, cells = heapq.heappop(pending)
        if cells != INCREMENT_CELLS:
            raise ConfigurationError(f"increments come in {INCREMENT_CELLS}-cell units, got {cells}")
        gain = min(cells, WINDOW_CELLS - stream.package_window)
        stream.package_window += gain
        stream.applied_increments += gain
    return stream.package_window


class CircuitMux:
    """Cell scheduler for the streams of one circuit."""

    def __init__(
        self,
        streams: Sequence[StreamState],
        ack_delay: float = DEFAULT_ACK_DELAY,
        queue_limit: Optional[int] = None,
        ack_jitter: float = 0.0,
        rng: Optional[np.random.Generator] = None,
        log_runs: bool = False,
    ):
        if ack_delay < 0 or ack_jitter < 0:
            raise ConfigurationError("ack delay and jitter must be non-negative")
        if ack_jitter > 0 and rng is None:
            raise ConfigurationError("ack jitter needs a random generator")
        self.streams = sorted(streams, key=lambda s: s.id)
        self.by_id = {s.id: s for s in self.streams}
        if len(self.by_id) != len(self.streams):
            raise ConfigurationError("duplicate stream id in circuit")
        self.ack_delay = float(ack_delay)
        self.ack_jitter = float(ack_jitter)
        if queue_limit is not None and queue_limit < 0:
            raise ConfigurationError("queue_limit must be non-negative")
        self.queue_limit = queue_limit
        self.queued = 0
        self.rng = rng
        self.queue: deque = deque()  # [stream id, cells]
        self.head_sent = 0.0  # bytes of the head cell already on the wire
        self._rr = -1  # index of the last stream served
        self.runs: Optional[list] = [] if log_runs else None
        self._started: set[int] = set()

    # packaging ---------------------------------------------------------

    def _rr_order(self, clock: float) -> list[StreamState]:
        n = len(self.streams)
        order = [self.streams[(self._rr + 1 + k) % n] for k in range(n)]
        return [s for s in order if s.eligible(clock)]

    def _push(self, sid: int, cells: int) -> None:
        if self.queue and self.queue[-1][0] == sid:
            self.queue[-1][1] += cells
        else:
            self.queue.append([sid, cells])

    def _package(self, stream: StreamState, cells: int) -> None:
        stream.package_window -= cells
        stream.bytes_sent += cells * CELL_BYTES
        stream.backlog -= cells * CELL_BYTES
        self.queued += cells
        self._push(stream.id, cells)

    def _package_one(self, clock: float) -> bool:
        order = self._rr_order(clock)
        if not order:
            return False
        s = order[0]
        self._rr = self.streams.index(s)
        self._package(s, 1)
        return True

    def _room(self) -> float:
        if self.queue_limit is None:
            return math.inf
        return self.queue_limit - self.queued

    def _package_all(self, clock: float) -> None:
        """Fill the queue up to its limit, one cell per eligible stream per turn."""
        while self._room() > 0:
            order = self._rr_order(clock)
            if not order:
                return
            if len(order) == 1:
                s = order[0]
                cells = s.package_window
                if math.isfinite(s.backlog):
                    cells = min(cells, max(1, math.ceil(s.backlog / CELL_BYTES)))
                cells = int(min(cells, self._room()))
                self._rr = self.streams.index(s)
                self._package(s, cells)
                continue
            for s in order:
                if self._room() <= 0:
                    return
                self._rr = self.streams.index(s)
                self._package(s, 1)

    # credit ------------------------------------------------------------

    def _cell_delivered(self, stream: StreamState, when: float) -> float:
        """Record a delivered cell; returns the time of any credit it triggers."""
        stream.cells_delivered += 1
        if self.runs is not None:
            if self.runs and self.runs[-1][0] == stream.id:
                self.runs[-1][1] += 1
            else:
                self.runs.append([stream.id, 1])
        if stream.cells_delivered % INCREMENT_CELLS == 0:
            delay = self.ack_delay
            if self.ack_jitter > 0:
                delay += self.ack_jitter * float(self.rng.random())
            heapq.heappush(stream.pending_increments, (when + delay, INCREMENT_CELLS))
            return when + delay
        return math.inf

    def _next_event(self, s: StreamState) -> float:
        if s.id not in self._started:
            return s.start_time
        return s.next_arrival()

    def _next_arrival(self) -> float:
        """Time of the next credit arrival or stream start."""
        return min((self._next_event(s) for s in self.streams), default=math.inf)

    def _settle(self, clock: float) -> None:
        """Apply starts and increments due by ``clock`` in (time, stream id) order."""
        while True:
            due = [(self._next_event(s), s.id) for s in self.streams if self._next_event(s) <= clock]
            if not due:
                break
            when, sid = min(due)
            s = self.by_id[sid]
            if sid not in self._started:
                self._started.add(sid)
            else:
                _, cells = heapq.heappop(s.pending_increments)
                gain = min(cells, WINDOW_CELLS - s.package_window)
                s.package_window += gain
                s.applied_increments += gain
            if self.queue_limit != 0:
                self._package_all(when)
        if self.queue_limit != 0:
            self._package_all(clock)

    # scheduling --------------------------------------------------------

    def step(self, budget: float, clock: float, tick: float) -> dict[int, float]:
        """Deliver up to ``budget`` bytes spread evenly over ``[clock, clock + tick)``."""
        if budget < 0:
            raise ConfigurationError("budget must be non-negative")
        out = {s.id: 0.0 for s in self.streams}
        end = clock + tick
        rate = budget / tick if tick > 0 else 0.0
        left = float(budget)
        tau = clock
        self._settle(tau)
        while True:
            nxt = self._next_arrival()
            limit = min(nxt, end)
            while left > _EPS_BYTES and tau < limit:
                if not self.queue:
                    if self.queue_limit != 0 or not self._package_one(tau):
                        break
                sid, _ = self.queue[0]
                take = min(CELL_BYTES - self.head_sent, left)
                if limit < end:
                    take = min(take, (limit - tau) * rate)
                if take <= 0:
                    break
                self.head_sent += take
                left -= take
                tau = min(limit, tau + take / rate)
                s = self.by_id[sid]
                out[sid] += take
                s.bytes_delivered += take
                if self.head_sent >= CELL_BYTES - _EPS_BYTES:
                    self.head_sent = 0.0
                    self.queue[0][1] -= 1
                    self.queued -= 1
                    if self.queue[0][1] == 0:
                        self.queue.popleft()
                    nxt = min(nxt, self._cell_delivered(s, tau))
                    if nxt <= tau:
                        self._settle(tau)
                        nxt = self._next_arrival()
                        limit = min(nxt, end)
                    elif self.queue_limit:
                        self._package_all(tau)
            nxt = self._next_arrival()
            if nxt >= end:
                break
            tau = max(tau, nxt)
            self._settle(tau)
        return out


def schedule_cells(
    streams: Sequence[StreamState],
    budget: float,
    clock: float,
    ack_delay: float = DEFAULT_ACK_DELAY,
    tick: float = 0.1,
) -> dict[int, float]:
    """One tick of direct-mode round-robin scheduling; returns bytes per stream."""
    return CircuitMux(streams, ack_delay=ack_delay, queue_limit=0).step(budget, clock, tick)


def run_lengths(runs: Iterable[Sequence[int]]) -> list[int]:
    return [int(c) for _, c in runs]
