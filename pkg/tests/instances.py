"""Random network snapshots shared by the allocation tests."""

from __future__ import annotations

import math

import numpy as np

from flowprint.sim.network import NetworkState, add_probe_circuit, draw_guard_set, select_path
from flowprint.sim.relays import generate_network


def random_instance(seed: int, max_relays: int = 30, max_circuits: int = 100) -> NetworkState:
    rng = np.random.default_rng(seed)
    n_relays = int(rng.integers(3, max_relays + 1))
    net = NetworkState(generate_network(n_relays, seed=seed))
    n_circ = int(rng.integers(1, max_circuits + 1))
    shared_client = net.new_endpoint("c")
    for _ in range(n_circ):
        u = rng.random()
        if u < 0.15:
            relay = list(net.relays)[int(rng.integers(n_relays))]
            circ = net.circuits[add_probe_circuit(net, relay)]
        else:
            guards = draw_guard_set(net, 1, rng)
            client = shared_client if u > 0.85 else None
            circ = net.add_circuit(select_path(net, guards, rng), client=client)
        v = rng.random()
        if v < 0.1:
            circ.demand = 0.0
        elif v < 0.3:
            circ.demand = float(rng.uniform(5e3, 2e5))
        else:
            circ.demand = math.inf
    return net


def oracle_input(net: NetworkState):
    capacity = {rid: r.capacity for rid, r in net.relays.items()}
    circuits = {cid: [(h[0], h) for h in c.relay_hops()] for cid, c in net.circuits.items()}
    demand = {cid: c.demand for cid, c in net.circuits.items() if math.isfinite(c.demand)}
    return capacity, circuits, demand
