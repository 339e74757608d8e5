"""Fixed-step simulation of circuit throughput.

Rates come from the max-min allocation and are recomputed only when the set
of active flows changes. Between such changes whole blocks of ticks are
integrated at once; circuits that multiplex several streams are stepped tick
by tick through their cell scheduler.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, TruncatedTraceError
from ..stats import ThroughputTrace
from ..streams import DEFAULT_ACK_DELAY, CircuitMux, StreamState
from ..traffic import DemandProfile
from .allocation import AllocationIndex, hop_shares, maxmin_rates
from .network import NetworkState, draw_guard_set, is_endpoint, select_path

# allocated rates are shaved by this fraction so float sums stay within capacity
_CAPACITY_MARGIN = 1e-9
_GRID_TOL = 1e-9
# a burst counts as delivered once this fraction of it is left (absorbs the margin)
_BURST_TOL = 1e-6


@dataclass
class SimConfig:
    tick: float = 0.1
    seed: int = 0
    slow_start_ramp: float = 5.0
    background_circuits: int = 0
    guard_set_size: int = 3
    # background activity: exponential on/off periods snapped to event_grid
    background_on_mean: float = 6.0
    background_off_mean: float = 6.0
    background_lifetime: float = 600.0
    event_grid: float = 1.0
    ack_delay: float = DEFAULT_ACK_DELAY
    ack_jitter: float = 0.1
    queue_limit: Optional[int] = None

    def __post_init__(self):
        if not self.tick > 0:
            raise ConfigurationError("tick must be positive")
        if self.slow_start_ramp < 0:
            raise ConfigurationError("slow_start_ramp must be non-negative")
        if self.background_circuits < 0:
            raise ConfigurationError("background_circuits must be non-negative")
        if self.guard_set_size < 1:
            raise ConfigurationError("guard_set_size must be at least 1")
        if min(self.background_on_mean, self.background_off_mean, self.background_lifetime) <= 0:
            raise ConfigurationError("background period means must be positive")
        ratio = self.event_grid / self.tick
        if self.event_grid <= 0 or abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ConfigurationError("event_grid must be a positive multiple of tick")
        if self.ack_delay < 0 or self.ack_jitter < 0:
            raise ConfigurationError("ack delay and jitter must be non-negative")

    def ticks(self, seconds: float) -> int:
        """Whole ticks in ``seconds`` (rounded to the nearest tick)."""
        return int(round(seconds / self.tick))


@dataclass
class Flow:
    """Traffic source feeding one circuit."""

    kind: str  # "bulk", "onoff" or "interactive"
    active: bool = False
    activated: int = 0  # tick index of the last activation (ramp origin)
    burst_left: float = math.inf
    segments: list = field(default_factory=list)  # interactive (burst bytes, gap seconds)
    position: int = 0
    delivered: float = 0.0


class Simulator:
    """Deterministic tick engine over a :class:`NetworkState`."""

    def __init__(self, network: NetworkState, config: SimConfig):
        self.network = network
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        self.rng_background = np.random.default_rng(seeds[0])
        self.rng_streams = np.random.default_rng(seeds[1])
        self.rng_paths = np.random.default_rng(seeds[2])
        self.tick_index = 0
        self.flows: dict[int, Flow] = {}
        self.muxes: dict[int, CircuitMux] = {}
        self.streams: dict[int, StreamState] = {}
        self._next_stream = 0
        self.rates: dict[int, float] = {}
        self._dirty = True
        self._events: list = []
        self._event_seq = 0
        self._index: Optional[AllocationIndex] = None
        self._rate_vec = np.zeros(0)
        # recording
        self._watch_circ: dict[int, tuple[int, list]] = {}
        self._watch_stream: dict[int, tuple[int, list]] = {}
        self._closed: dict[int, tuple[int, np.ndarray]] = {}
        self._bottleneck_watch: set[int] = set()
        self._bottleneck_log: dict[int, list] = {}
        # conservation accounting
        self.max_utilization = 0.0
        self.capacity_violations = 0
        self.allocations = 0
        # throttles: connection -> [tokens, throttled]
        self._tokens: dict[tuple[str, str], list] = {}
        self._bg_slots: list[dict] = []
        if config.background_circuits:
            self.add_background(config.background_circuits)

    # time ----------------------------------------------------------------

    @property
    def clock(self) -> float:
        return self.tick_index * self.config.tick

    def _tick_of(self, t: float) -> int:
        return int(math.ceil(t / self.config.tick - _GRID_TOL))

    def schedule(self, t: float, action: Callable[[], None]) -> None:
        """Run ``action`` at the start of the first tick at or after time ``t``."""
        k = max(self._tick_of(t), self.tick_index)
        heapq.heappush(self._events, (k, self._event_seq, action))
        self._event_seq += 1

    def _schedule_tick(self, k: int, action: Callable[[], None]) -> None:
        heapq.heappush(self._events, (k, self._event_seq, action))
        self._event_seq += 1

    # flows -----------------------------------------------------------------

    def _activate(self, cid: int) -> None:
        f = self.flows[cid]
        f.active = True
        f.activated = self.tick_index
        self.network.circuits[cid].demand = math.inf
        self._dirty = True

    def _deactivate(self, cid: int) -> None:
        f = self.flows.get(cid)
        if f is not None:
            f.active = False
        if cid in self.network.circuits:
            self.network.circuits[cid].demand = 0.0
        self._dirty = True

    def start_bulk(self, cid: int, at: Optional[float] = None, stop: Optional[float] = None) -> None:
        """Backlogged source on circuit ``cid`` from ``at`` (default now) until ``stop``."""
        self._require(cid)
        self.flows[cid] = Flow("bulk")
        self.network.circuits[cid].demand = 0.0
        self.schedule(self.clock if at is None else at, lambda: self._activate(cid))
        if stop is not None:
            self.schedule(stop, lambda: self._deactivate(cid))

    def start_interactive(self, cid: int, segments: Sequence[tuple[float, float]], at: Optional[float] = None) -> None:
        """Alternate bursts and gaps; a gap starts once its burst is fully delivered."""
        self._require(cid)
        segs = [(float(b), float(g)) for b, g in segments]
        if any(b <= 0 or g < 0 for b, g in segs):
            raise ConfigurationError("bursts must be positive and gaps non-negative")
        self.flows[cid] = Flow("interactive", segments=segs)
        self.network.circuits[cid].demand = 0.0
        self.schedule(self.clock if at is None else at, lambda: self._next_burst(cid))

    def start_flow(self, cid: int, profile: DemandProfile, at: Optional[float] = None) -> None:
        """Drive circuit ``cid`` from a demand profile starting at ``at``."""
        start = self.clock if at is None else at
        if profile.backlogged:
            self.start_bulk(cid, at=start, stop=start + profile.duration)
        elif profile.segments:
            self.start_interactive(cid, profile.segments, at=start)

    def _next_burst(self, cid: int) -> None:
        f = self.flows.get(cid)
        if f is None or cid not in self.network.circuits:
            return
        if f.position >= len(f.segments):
            self._deactivate(cid)
            return
        f.burst_left = f.segments[f.position][0]
        self._activate(cid)

    def _burst_done(self, cid: int, end_tick: int) -> None:
        f = self.flows[cid]
        gap = f.segments[f.position][1]
        f.position += 1
        f.burst_left = math.inf
        self._deactivate(cid)
        self._schedule_tick(end_tick + self.config.ticks(gap), lambda: self._next_burst(cid))

    def attach_streams(self, cid: int, count: int, offsets: Optional[Sequence[float]] = None) -> list[int]:
        """Multiplex ``count`` bulk streams on circuit ``cid``; returns their ids."""
        self._require(cid)
        offsets = list(offsets) if offsets is not None else [0.0] * count
        if len(offsets) != count:
            raise ConfigurationError("one start offset per stream")
        base = self.clock
        states = []
        for off in offsets:
            sid = self._next_stream
            self._next_stream += 1
            st = StreamState(id=sid, circuit=cid, start_time=base + float(off))
            self.streams[sid] = st
            states.append(st)
            self.network.circuits[cid].streams.append(sid)
        cfg = self.config
        self.muxes[cid] = CircuitMux(
            states,
            ack_delay=cfg.ack_delay,
            queue_limit=cfg.queue_limit,
            ack_jitter=cfg.ack_jitter,
            rng=self.rng_streams,
            log_runs=True,
        )
        return [s.id for s in states]

    def remove_circuit(self, cid: int) -> None:
        if cid not in self.network.circuits:
            return
        for key in list(self._watch_circ):
            if key == cid:
                k0, chunks = self._watch_circ.pop(key)
                self._closed[cid] = (k0, _concat(chunks))
        self.network.remove_circuit(cid)
        self.flows.pop(cid, None)
        self.muxes.pop(cid, None)
        self._dirty = True

    def _require(self, cid: int) -> None:
        if cid not in self.network.circuits:
            raise ConfigurationError(f"unknown circuit {cid}")

    # background ----------------------------------------------------------

    def add_background(self, count: int, guards: Optional[Sequence[str]] = None) -> None:
        """Bulk circuits switching on and off; each is rebuilt when its lifetime ends.

        With ``guards`` the circuits always enter through that guard set, as
        other clients of the same guards would.
        """
        cfg = self.config
        for g in guards or ():
            if g not in self.network.relays:
                raise ConfigurationError(f"unknown guard {g!r}")
        for _ in range(count):
            slot = {"cid": None, "on": False, "guards": list(guards) if guards else None}
            self._bg_slots.append(slot)
            p_on = cfg.background_on_mean / (cfg.background_on_mean + cfg.background_off_mean)
            slot["on"] = bool(self.rng_background.random() < p_on)
            self._bg_new_circuit(slot)
            self._bg_schedule_toggle(slot)

    def _grid_ticks(self, mean: float) -> int:
        cfg = self.config
        step = cfg.ticks(cfg.event_grid)
        n = max(1, int(math.ceil(self.rng_background.exponential(mean) / cfg.event_grid)))
        return n * step

    def _bg_new_circuit(self, slot: dict) -> None:
        cfg = self.config
        if slot["cid"] is not None:
            self.remove_circuit(slot["cid"])
        guards = slot["guards"] or draw_guard_set(self.network, cfg.guard_set_size, self.rng_background)
        path = select_path(self.network, guards, self.rng_background)
        circ = self.network.add_circuit(path, kind="background")
        slot["cid"] = circ.id
        self.flows[circ.id] = Flow("onoff")
        circ.demand = 0.0
        if slot["on"]:
            self._activate(circ.id)
        life = self._grid_ticks(cfg.background_lifetime)
        self._schedule_tick(self.tick_index + life, lambda: self._bg_new_circuit(slot))

    def _bg_schedule_toggle(self, slot: dict) -> None:
        cfg = self.config
        mean = cfg.background_on_mean if slot["on"] else cfg.background_off_mean
        self._schedule_tick(self.tick_index + self._grid_ticks(mean), lambda: self._bg_toggle(slot))

    def _bg_toggle(self, slot: dict) -> None:
        slot["on"] = not slot["on"]
        if slot["on"]:
            self._activate(slot["cid"])
        else:
            self._deactivate(slot["cid"])
        self._bg_schedule_toggle(slot)

    # observation -----------------------------------------------------------

    def watch(self, cid: int) -> None:
        """Start recording per-tick bytes of circuit ``cid``."""
        self._require(cid)
        if cid not in self._watch_circ:
            self._watch_circ[cid] = (self.tick_index, [])

    def watch_stream(self, sid: int) -> None:
        if sid not in self.streams:
            raise ConfigurationError(f"unknown stream {sid}")
        if sid not in self._watch_stream:
            self._watch_stream[sid] = (self.tick_index, [])

    def track_bottleneck(self, cid: int) -> None:
        """Log which relay gives circuit ``cid`` its smallest share."""
        self._require(cid)
        self._bottleneck_watch.add(cid)
        self._bottleneck_log.setdefault(cid, [])
        self._dirty = True

    def _trace_from(self, k0: int, samples: np.ndarray) -> ThroughputTrace:
        tick = self.config.tick
        return ThroughputTrace(k0 * tick, tick, samples / tick)

    def trace(self, cid: int) -> ThroughputTrace:
        """Recorded throughput of circuit ``cid`` (bytes/second per tick)."""
        if cid in self._watch_circ:
            k0, chunks = self._watch_circ[cid]
            return self._trace_from(k0, _concat(chunks))
        if cid in self._closed:
            k0, arr = self._closed[cid]
            return self._trace_from(k0, arr)
        raise ConfigurationError(f"circuit {cid} is not being recorded")

    def stream_trace(self, sid: int) -> ThroughputTrace:
        if sid not in self._watch_stream:
            raise ConfigurationError(f"stream {sid} is not being recorded")
        k0, chunks = self._watch_stream[sid]
        return self._trace_from(k0, _concat(chunks))

    def bottleneck(self, cid: int, t0: float, t1: float) -> Optional[str]:
        """Relay holding the smallest share for most ticks in ``[t0, t1)``."""
        log = self._bottleneck_log.get(cid)
        if not log:
            return None
        k0, k1 = self._tick_of(t0), min(self._tick_of(t1), self.tick_index)
        counts: dict[str, int] = {}
        for i, (start, relay) in enumerate(log):
            stop = log[i + 1][0] if i + 1 < len(log) else self.tick_index
            lo, hi = max(start, k0), min(stop, k1)
            if hi > lo and relay is not None:
                counts[relay] = counts.get(relay, 0) + hi - lo
        if not counts:
            return None
        return max(sorted(counts), key=lambda r: counts[r])

    def mux_runs(self, cid: int) -> list:
        return self.muxes[cid].runs

    # allocation ------------------------------------------------------------

    def _reallocate(self) -> None:
        net = self.network
        active = [cid for cid in sorted(net.circuits) if net.circuits[cid].demand > 0]
        index = AllocationIndex.build(net, active)
        demand = np.array([net.circuits[c].demand for c in active], dtype=float)
        init = np.array([self.rates.get(c, np.nan) for c in active], dtype=float)
        rate = maxmin_rates(index, demand, init_rate=init if active else None) if active else np.zeros(0)
        rate = self._within_capacity(index, rate)
        self.allocations += 1
        self._index = index
        self._rate_vec = rate
        self.rates = {c: float(r) for c, r in zip(active, rate)}
        # incidence for per-tick relay accounting
        nr = len(index.relay_ids)
        inc = np.zeros((len(active), nr))
        if index.hop_circ.size:
            np.add.at(inc, (index.hop_circ, index.conn_relay[index.hop_conn]), 1.0)
        self._incidence = inc
        if self._bottleneck_watch:
            self._log_bottlenecks(index, rate)
        self._dirty = False

    def _within_capacity(self, index: AllocationIndex, rate: np.ndarray) -> np.ndarray:
        if not rate.size or not index.hop_circ.size:
            return rate
        rate = rate * (1.0 - _CAPACITY_MARGIN)
        hop_relay = index.conn_relay[index.hop_conn]
        load = np.bincount(hop_relay, weights=rate[index.hop_circ], minlength=index.capacity.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(load > index.capacity, index.capacity * (1.0 - _CAPACITY_MARGIN) / load, 1.0)
        factor = np.ones(rate.size)
        np.minimum.at(factor, index.hop_circ, ratio[hop_relay])
        return rate * factor

    def _log_bottlenecks(self, index: AllocationIndex, rate: np.ndarray) -> None:
        share = hop_shares(index, rate) if index.hop_circ.size else np.zeros(0)
        pos = {c: i for i, c in enumerate(index.circuit_ids)}
        for cid in sorted(self._bottleneck_watch):
            relay = None
            if cid in pos:
                hops = np.nonzero(index.hop_circ == pos[cid])[0]
                if hops.size:
                    h = hops[int(np.argmin(share[hops]))]
                    relay = index.relay_ids[index.conn_relay[index.hop_conn[h]]]
            log = self._bottleneck_log[cid]
            if not log or log[-1][1] != relay:
                log.append((self.tick_index, relay))

    # integration -----------------------------------------------------------

    def _ramp(self, activated: np.ndarray, n: int) -> np.ndarray:
        """Mean slow-start factor per tick (rows) and circuit (columns)."""
        ramp = self.config.slow_start_ramp
        tick = self.config.tick
        if ramp <= 0:
            return np.ones((n, activated.size))
        ks = self.tick_index + np.arange(n)
        a0 = (ks[:, None] - activated[None, :]) * tick  # age at tick start
        a1 = a0 + tick
        full = np.clip(a1 - ramp, 0.0, tick)  # part of the tick past the ramp
        lo = np.clip(a0, 0.0, ramp)
        hi = np.clip(a1, 0.0, ramp)
        ramped = (hi * hi - lo * lo) / (2.0 * ramp)
        return (ramped + full) / tick

    def _block_length(self, limit: int) -> int:
        n = limit
        if self._events:
            n = min(n, self._events[0][0] - self.tick_index)
        if self._tokens:
            n = min(n, 1)
        return max(n, 1)

    def _fire_events(self) -> None:
        while self._events and self._events[0][0] <= self.tick_index:
            _, _, action = heapq.heappop(self._events)
            action()

    def _advance(self, limit: int) -> tuple[dict[int, np.ndarray], int]:
        """Integrate up to ``limit`` ticks without an allocation change."""
        self._fire_events()
        if self._dirty:
            self._reallocate()
        n = self._block_length(limit)
        cids = self._index.circuit_ids if self._index is not None else []
        tick = self.config.tick
        if cids:
            activated = np.array([self.flows[c].activated if c in self.flows else 0 for c in cids])
            budget = self._ramp(activated, n) * (self._rate_vec * tick)[None, :]
        else:
            budget = np.zeros((n, 0))

        # interactive bursts end inside the block
        cut = n
        pos = {c: i for i, c in enumerate(cids)}
        finishing = []
        for c in cids:
            f = self.flows.get(c)
            if f is not None and f.kind == "interactive" and f.active:
                col = budget[:, pos[c]]
                cum = np.cumsum(col)
                k = int(np.searchsorted(cum, f.burst_left * (1 - _BURST_TOL), side="left"))
                if k < n:
                    finishing.append((k, c))
                    cut = min(cut, k + 1)
        budget = budget[:cut]
        n = cut
        delivered = budget.copy()
        finishing = [c for k, c in finishing if k == n - 1]
        for c in finishing:
            i = pos[c]
            already = float(delivered[: n - 1, i].sum())
            delivered[n - 1, i] = min(delivered[n - 1, i], max(0.0, self.flows[c].burst_left - already))

        # throttled connections: tokens limit what the connection forwards
        if self._tokens:
            self._apply_throttles(delivered, cids, pos)

        # multiplexed streams
        stream_bytes: dict[int, np.ndarray] = {}
        for c, mux in self.muxes.items():
            if c not in pos:
                for st in mux.streams:
                    stream_bytes[st.id] = np.zeros(n)
                continue
            i = pos[c]
            per = {st.id: np.zeros(n) for st in mux.streams}
            for k in range(n):
                out = mux.step(float(delivered[k, i]), (self.tick_index + k) * tick, tick)
                for sid, b in out.items():
                    per[sid][k] = b
            delivered[:, i] = np.sum([per[s] for s in per], axis=0) if per else 0.0
            stream_bytes.update(per)

        # conservation: bytes forwarded per relay and tick
        if cids:
            relay_bytes = delivered @ self._incidence
            cap_tick = self._index.capacity * tick
            over = relay_bytes > cap_tick[None, :]
            self.capacity_violations += int(np.count_nonzero(over))
            util = float((relay_bytes / cap_tick[None, :]).max()) if relay_bytes.size else 0.0
            self.max_utilization = max(self.max_utilization, util)

        for c in cids:
            f = self.flows.get(c)
            if f is not None:
                got = float(delivered[:, pos[c]].sum())
                f.delivered += got
                if f.kind == "interactive" and f.active:
                    f.burst_left -= got

        out = {c: delivered[:, pos[c]] for c in cids}
        for c, (k0, chunks) in self._watch_circ.items():
            chunks.append(out[c] if c in out else np.zeros(n))
        for s, (k0, chunks) in self._watch_stream.items():
            chunks.append(stream_bytes.get(s, np.zeros(n)))
        self.tick_index += n
        for c in finishing:
            self._burst_done(c, self.tick_index)
        return out, n

    def _apply_throttles(self, delivered: np.ndarray, cids: list, pos: dict) -> None:
        tick = self.config.tick
        for key, state in sorted(self._tokens.items()):
            relay = self.network.relays[key[0]]
            thr = relay.throttle
            state[0] = min(thr.burst, state[0] + thr.rate_limit * tick)
            members = [c for c in sorted(self.network.hop_connections.get(key, ())) if c in pos]
            if not members:
                state[1] = False
                continue
            cols = [pos[c] for c in members]
            use = float(delivered[0, cols].sum())
            if use > state[0]:
                delivered[0, cols] *= state[0] / use
                use = float(delivered[0, cols].sum())
                state[1] = True
                cap = thr.rate_limit / len(members)
                for c in members:
                    circ = self.network.circuits[c]
                    if circ.demand > cap:
                        circ.demand = cap
                        self._dirty = True
            state[0] = max(0.0, state[0] - use)

    def enable_throttles(self) -> None:
        """Start token buckets on every connection covered by a relay throttle."""
        for key in sorted(self.network.hop_connections):
            sender, receiver = key
            if is_endpoint(sender):
                continue
            thr = self.network.relays[sender].throttle
            if thr is None:
                continue
            if thr.applies_to_non_relays_only and not is_endpoint(receiver):
                continue
            self._tokens.setdefault(key, [thr.burst, False])

    # public stepping ---------------------------------------------------------

    def step(self) -> dict[int, float]:
        """Advance one tick; returns bytes delivered per circuit."""
        out, _ = self._advance(1)
        return {c: float(v[0]) for c, v in out.items()}

    def run(self, duration: float) -> None:
        remaining = self.config.ticks(duration)
        while remaining > 0:
            _, n = self._advance(remaining)
            remaining -= n

    def run_until(self, t: float) -> None:
        self.run(max(0.0, t - self.clock))

    def sample_trace(self, cid: int, duration: float) -> ThroughputTrace:
        """Run for ``duration`` and return the throughput of ``cid`` over it."""
        self._require(cid)
        k0 = self.tick_index
        fresh = cid not in self._watch_circ
        self.watch(cid)
        n = self.config.ticks(duration)
        while self.tick_index < k0 + n:
            self._advance(k0 + n - self.tick_index)
            if cid not in self.network.circuits:
                full = self.trace(cid)
                partial = full.slice_time(k0 * self.config.tick, full.end)
                raise TruncatedTraceError(f"circuit {cid} was torn down before t={self.clock:g}", partial)
        tr = self.trace(cid)
        if fresh:
            return tr
        return tr.slice_time(k0 * self.config.tick, self.clock)


def _concat(chunks: list) -> np.ndarray:
    return np.concatenate(chunks) if chunks else np.zeros(0)
