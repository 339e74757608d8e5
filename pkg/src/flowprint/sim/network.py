"""Circuits, TCP connections between hops, and path selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import ConfigurationError
from .relays import Relay

Endpoint = str  # endpoint ids start with "@"; relay ids never do
RENDEZVOUS_MAX_HOPS = 8


def is_endpoint(node: str) -> bool:
    return node.startswith("@")


@dataclass
class Circuit:
    """Forwarding path, ordered from the client side (guard first)."""

    id: int
    path: tuple[str, ...]
    client: Endpoint
    server: Endpoint
    created_at: float = 0.0
    streams: list[int] = field(default_factory=list)
    kind: str = "client"
    # bytes/second cap imposed by the traffic source or a throttle; inf = backlogged
    demand: float = math.inf

    def hops(self) -> list[tuple[str, str]]:
        """TCP connections in the data direction (server towards client)."""
        nodes = [self.server, *reversed(self.path), self.client]
        return list(zip(nodes[:-1], nodes[1:]))

    def relay_hops(self) -> list[tuple[str, str]]:
        """Hops whose sending end is a relay; these are the capacity-constrained ones."""
        return [h for h in self.hops() if not is_endpoint(h[0])]


class NetworkState:
    """Relays, active circuits and the circuit multiplexing of each connection."""

    def __init__(self, relays: Iterable[Relay]):
        self.relays: dict[str, Relay] = {}
        for r in relays:
            if r.id in self.relays:
                raise ConfigurationError(f"duplicate relay id {r.id!r}")
            self.relays[r.id] = r
        self.circuits: dict[int, Circuit] = {}
        self.hop_connections: dict[tuple[str, str], set[int]] = {}
        self.clock: float = 0.0
        self._next_circuit = 0
        self._next_endpoint = 0
        self.version = 0  # bumped on every topology change

    def new_endpoint(self, role: str) -> Endpoint:
        self._next_endpoint += 1
        return f"@{role}{self._next_endpoint}"

    def add_circuit(
        self,
        path: Sequence[str],
        client: Endpoint | None = None,
        server: Endpoint | None = None,
        kind: str = "client",
    ) -> Circuit:
        path = tuple(path)
        # rendezvous paths stitch client and service circuits together
        ok = len(path) in (1, 3) or (kind == "rendezvous" and 1 <= len(path) <= RENDEZVOUS_MAX_HOPS)
        if not ok:
            raise ConfigurationError(f"circuit path must have 1 or 3 relays, got {len(path)}")
        if len(set(path)) != len(path):
            raise ConfigurationError(f"circuit path repeats a relay: {path}")
        for rid in path:
            if rid not in self.relays:
                raise ConfigurationError(f"unknown relay id {rid!r}")
        if len(path) == 3 and kind == "client":
            if not self.relays[path[0]].guard_eligible:
                raise ConfigurationError(f"relay {path[0]!r} is not guard-eligible")
            if not self.relays[path[2]].exit_eligible:
                raise ConfigurationError(f"relay {path[2]!r} is not exit-eligible")
        cid = self._next_circuit
        self._next_circuit += 1
        circ = Circuit(
            id=cid,
            path=path,
            client=client or self.new_endpoint("c"),
            server=server or self.new_endpoint("s"),
            created_at=self.clock,
            kind=kind,
        )
        self.circuits[cid] = circ
        for hop in circ.hops():
            self.hop_connections.setdefault(hop, set()).add(cid)
        self.version += 1
        return circ

    def remove_circuit(self, cid: int) -> Circuit:
        circ = self.circuits.pop(cid)
        for hop in circ.hops():
            members = self.hop_connections[hop]
            members.discard(cid)
            if not members:
                del self.hop_connections[hop]
        self.version += 1
        return circ

    def connection_count(self, relay_id: str) -> int:
        """Active outgoing TCP connections of a relay."""
        return sum(1 for (a, _b) in self.hop_connections if a == relay_id)


def _weighted_pick(ids: list[str], weights: np.ndarray, rng: np.random.Generator) -> str:
    cum = np.cumsum(weights)
    k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return ids[min(k, len(ids) - 1)]


def select_path(
    network: NetworkState,
    guard_set: Sequence[str],
    rng: np.random.Generator,
) -> tuple[str, str, str]:
    """Guard uniformly from ``guard_set``; exit, then middle, capacity-weighted."""
    if not guard_set:
        raise ConfigurationError("guard set is empty")
    relays = network.relays
    for g in guard_set:
        if g not in relays:
            raise ConfigurationError(f"unknown guard {g!r}")
    guard = guard_set[int(rng.integers(len(guard_set)))] if len(guard_set) > 1 else guard_set[0]

    exits = [rid for rid, r in relays.items() if r.exit_eligible and rid != guard]
    if not exits:
        raise ConfigurationError("no exit-eligible relay distinct from the guard")
    exit_ = _weighted_pick(exits, np.array([relays[r].capacity for r in exits]), rng)

    middles = [rid for rid in relays if rid not in (guard, exit_)]
    if not middles:
        raise ConfigurationError("need at least three distinct relays to build a path")
    middle = _weighted_pick(middles, np.array([relays[r].capacity for r in middles]), rng)
    return guard, middle, exit_


def draw_guard_set(network: NetworkState, size: int, rng: np.random.Generator) -> list[str]:
    """Capacity-weighted guard set without replacement."""
    ids = [rid for rid, r in network.relays.items() if r.guard_eligible]
    if len(ids) < size:
        raise ConfigurationError(f"only {len(ids)} guard-eligible relays, need {size}")
    out: list[str] = []
    for _ in range(size):
        pool = [r for r in ids if r not in out]
        out.append(_weighted_pick(pool, np.array([network.relays[r].capacity for r in pool]), rng))
    return out


def add_probe_circuit(network: NetworkState, relay: str) -> int:
    """One-hop circuit through ``relay`` carrying a single bulk download."""
    if relay not in network.relays:
        raise ConfigurationError(f"unknown relay id {relay!r}")
    circ = network.add_circuit((relay,), kind="probe")
    return circ.id
