"""Two-level max-min fair bandwidth allocation.

A relay divides its capacity fairly among its outgoing TCP connections, and a
connection divides its share fairly among the circuits multiplexed on it. A
circuit's rate is the smallest of its per-hop shares (and its own demand).

The allocation is the fixed point where every circuit's rate equals the
minimum over its hops of the nested water level it would see there with all
other circuits held at their rates. It is found by iterating per-hop water
filling: each hop's share is recomputed from the caps its circuits have
elsewhere until no share moves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateInputError
from . import _kernels
from .network import NetworkState, is_endpoint

_REL_TOL = 1e-10
# shares are differences of capacities, so their rounding error scales with the largest one
_CAPACITY_ULPS = 1e-14
_MAX_ITER = 200_000
_ACTIVE_SET_ROUNDS = 12
# plain best-response iteration can cycle with period two; partial steps damp it
_DAMPING = 0.5
_SLOW_DAMPING = 0.3
_SLOW_AFTER = 20_000


@dataclass
class AllocationIndex:
    """Flattened incidence structure of a network snapshot."""

    circuit_ids: list[int]
    relay_ids: list[str]
    capacity: np.ndarray  # per relay
    conn_keys: list[tuple[str, str]]
    conn_relay: np.ndarray  # per connection: index of the sending relay
    hop_circ: np.ndarray  # per relay hop: circuit index
    hop_conn: np.ndarray  # per relay hop: connection index
    last_iterations: int = 0

    def __post_init__(self):
        nc, nj, nr = len(self.circuit_ids), len(self.conn_relay), self.capacity.size
        self.conn_ptr, self.conn_hops = _csr(self.hop_conn, nj)
        self.circ_ptr, self.circ_hops = _csr(self.hop_circ, nc)
        self.relay_ptr, self.relay_conns = _csr(self.conn_relay, nr)

    @classmethod
    def build(cls, network: NetworkState, circuit_ids=None) -> "AllocationIndex":
        relay_ids = list(network.relays)
        rpos = {rid: i for i, rid in enumerate(relay_ids)}
        cids = sorted(network.circuits) if circuit_ids is None else list(circuit_ids)
        conn_pos: dict[tuple[str, str], int] = {}
        conn_relay: list[int] = []
        hop_circ: list[int] = []
        hop_conn: list[int] = []
        for ci, cid in enumerate(cids):
            for hop in network.circuits[cid].relay_hops():
                j = conn_pos.get(hop)
                if j is None:
                    j = conn_pos[hop] = len(conn_relay)
                    conn_relay.append(rpos[hop[0]])
                hop_circ.append(ci)
                hop_conn.append(j)
        return cls(
            circuit_ids=cids,
            relay_ids=relay_ids,
            capacity=np.array([network.relays[r].capacity for r in relay_ids], dtype=float),
            conn_keys=list(conn_pos),
            conn_relay=np.array(conn_relay, dtype=np.int64),
            hop_circ=np.array(hop_circ, dtype=np.int64),
            hop_conn=np.array(hop_conn, dtype=np.int64),
        )


def _csr(owner: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Group element indices by ``owner`` (stable): returns (pointers, members)."""
    members = np.argsort(owner, kind="stable").astype(np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(owner, minlength=n), out=ptr[1:])
    return ptr, members


def _progressive_fill(index: AllocationIndex, demand: np.ndarray) -> np.ndarray:
    """Freeze circuits at their smallest candidate share, one level at a time.

    Exact for single-level sharing; with two levels it can freeze a connection
    too early, so it only seeds the active-set refinement below.
    """
    nc = len(index.circuit_ids)
    nj = len(index.conn_relay)
    nr = index.capacity.size
    hop_circ, hop_conn, conn_relay = index.hop_circ, index.hop_conn, index.conn_relay
    rate = np.zeros(nc)
    frozen = ~(demand > 0)
    has_hop = np.zeros(nc, dtype=bool)
    has_hop[hop_circ] = True
    free = ~frozen & ~has_hop
    rate[free] = demand[free]
    frozen |= free
    while not frozen.all():
        fz_hop = frozen[hop_circ]
        u_conn = np.bincount(hop_conn, weights=(~fz_hop).astype(float), minlength=nj)
        f_conn = np.bincount(hop_conn, weights=np.where(fz_hop, rate[hop_circ], 0.0), minlength=nj)
        conn_open = u_conn > 0
        closed = np.bincount(conn_relay, weights=np.where(conn_open, 0.0, f_conn), minlength=nr)
        n_open = np.bincount(conn_relay, weights=conn_open.astype(float), minlength=nr)
        with np.errstate(divide="ignore", invalid="ignore"):
            level = np.maximum(index.capacity - closed, 0.0) / n_open
            conn_level = np.maximum(level[conn_relay] - f_conn, 0.0) / u_conn
        cand = np.where(frozen, np.inf, demand)
        unf = ~fz_hop
        np.minimum.at(cand, hop_circ[unf], conn_level[hop_conn[unf]])
        newly = ~frozen & (cand <= cand.min() * (1 + 1e-12))
        rate[newly] = cand[newly]
        frozen |= newly
    return rate


def hop_shares(index: AllocationIndex, rate: np.ndarray) -> np.ndarray:
    """Per relay hop: the two-level level its circuit would get there if unbounded,
    with every other circuit held at ``rate``."""
    return _kernels.hop_shares(
        np.ascontiguousarray(rate, dtype=float),
        index.hop_circ,
        index.hop_conn,
        index.conn_relay,
        index.capacity,
        index.conn_ptr,
        index.conn_hops,
        index.relay_ptr,
        index.relay_conns,
    )


def _best_response(index: AllocationIndex, demand: np.ndarray, rate: np.ndarray):
    share = hop_shares(index, rate)
    return _kernels.best_response(demand, share, index.circ_ptr, index.circ_hops), share


def _solve_structure(index: AllocationIndex, demand: np.ndarray, rate: np.ndarray, share: np.ndarray):
    """Exact rates for the bottleneck pattern observed at ``rate``.

    Each circuit is either demand-limited or pinned to the per-circuit level of
    its bottleneck connection; a bottleneck connection carries its relay's
    connection level, and a relay with bottleneck connections is full.
    Returns ``None`` when the pattern gives no usable system.
    """
    M, rhs, var, ok = _kernels.structure_system(
        demand,
        rate,
        share,
        index.hop_circ,
        index.hop_conn,
        index.conn_relay,
        index.capacity,
        index.conn_ptr,
        index.conn_hops,
        index.circ_ptr,
        index.circ_hops,
    )
    if not ok:
        return None
    try:
        sol = np.linalg.solve(M, rhs) if rhs.size else np.zeros(0)
    except np.linalg.LinAlgError:
        return None
    pinned = var >= 0
    out = demand.copy()
    out[pinned] = sol[var[pinned]]
    out[~np.isfinite(out)] = 0.0
    return np.maximum(out, 0.0)


def _warm_seed(index: AllocationIndex, demand: np.ndarray, init_rate) -> np.ndarray:
    """Previous rates, with unknown (NaN) entries set to their best response."""
    rate = np.array(init_rate, dtype=float)
    fresh = np.isnan(rate)
    if fresh.any():
        rate[fresh] = 0.0
        best, _ = _best_response(index, demand, rate)
        rate[fresh] = best[fresh]
    return np.minimum(rate, demand)


def _is_fixed_point(rate: np.ndarray, best: np.ndarray, floor: float = 1.0) -> bool:
    return bool(np.all(np.abs(best - rate) <= _REL_TOL * np.maximum(np.abs(best), floor)))


def maxmin_rates(
    index: AllocationIndex,
    demand: np.ndarray,
    init_rate: np.ndarray | None = None,
    max_iter: int = _MAX_ITER,
) -> np.ndarray:
    """Per-circuit rates for the snapshot in ``index`` under ``demand`` caps."""
    nc = len(index.circuit_ids)
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (nc,):
        raise DegenerateInputError("demand vector does not match the circuit list")
    has_hop = np.zeros(nc, dtype=bool)
    has_hop[index.hop_circ] = True
    if not has_hop.any():
        index.last_iterations = 0
        return np.where(np.isfinite(demand), demand, 0.0)
    floor = max(1.0, float(index.capacity.max(initial=0.0)) * _CAPACITY_ULPS / _REL_TOL)
    seeds = [None] if init_rate is None else [_warm_seed(index, demand, init_rate), None]
    cold = None
    # active-set refinement: read off the bottleneck pattern, solve it exactly
    for seed in seeds:
        if seed is None:
            seed = cold = _progressive_fill(index, demand)
        rate = seed
        best, share = _best_response(index, demand, rate)
        for it in range(_ACTIVE_SET_ROUNDS):
            if _is_fixed_point(rate, best, floor):
                index.last_iterations = it
                return rate
            solved = _solve_structure(index, demand, rate, share)
            if solved is None or np.array_equal(solved, rate):
                break
            rate = solved
            best, share = _best_response(index, demand, rate)
        if _is_fixed_point(rate, best, floor):
            index.last_iterations = _ACTIVE_SET_ROUNDS
            return rate
    # fallback: damped best-response steps from the seed, with periodic exact
    # solves once the pattern has settled. Near-neutral exchanges between
    # circuits make this slow but it does not stall; a constant step matters,
    # since shrinking it freezes the drift.
    rate = cold if cold is not None else _progressive_fill(index, demand)
    best, share = _best_response(index, demand, rate)
    for it in range(1, max_iter + 1):
        step = _DAMPING if it <= _SLOW_AFTER else _SLOW_DAMPING
        rate = rate + step * (best - rate)
        best, share = _best_response(index, demand, rate)
        if _is_fixed_point(rate, best, floor):
            index.last_iterations = _ACTIVE_SET_ROUNDS + it
            return rate
        if it % 16 == 0:
            solved = _solve_structure(index, demand, rate, share)
            if solved is not None:
                b2, _ = _best_response(index, demand, solved)
                if _is_fixed_point(solved, b2, floor):
                    index.last_iterations = _ACTIVE_SET_ROUNDS + it
                    return solved
    raise DegenerateInputError("bandwidth allocation did not converge")


def allocate_bandwidth(network: NetworkState) -> dict[int, float]:
    """Rate in bytes/second for every active circuit.

    Each circuit's ``demand`` acts as an upper bound (0 = idle).
    """
    if not network.circuits:
        return {}
    index = AllocationIndex.build(network)
    demand = np.array([network.circuits[c].demand for c in index.circuit_ids], dtype=float)
    rates = maxmin_rates(index, demand)
    return {cid: float(r) for cid, r in zip(index.circuit_ids, rates)}


def hop_fair_shares(network: NetworkState, rates: dict[int, float]) -> dict[int, list[float]]:
    """Per circuit and relay hop: the rate it could get there if unlimited elsewhere.

    Every other circuit keeps its allocated rate as a fixed demand; the share is
    the two-level water level seen by the circuit at that hop.
    """
    by_relay: dict[str, dict[tuple[str, str], list[int]]] = {}
    for key, members in network.hop_connections.items():
        if is_endpoint(key[0]):
            continue
        by_relay.setdefault(key[0], {})[key] = sorted(members)
    out: dict[int, list[float]] = {}
    for cid, circ in network.circuits.items():
        shares = []
        for hop in circ.relay_hops():
            conns = by_relay[hop[0]]
            cap = network.relays[hop[0]].capacity
            other = {k: sum(rates[c] for c in m if c != cid) for k, m in conns.items() if k != hop}
            conn_share = _level_for_unbounded(cap, list(other.values()), 1)
            within = [rates[c] for c in conns[hop] if c != cid]
            shares.append(_level_for_unbounded(conn_share, within, 1))
        out[cid] = shares
    return out


def _level_for_unbounded(total: float, demands: list[float], n_unbounded: int) -> float:
    """Water level given bounded demands and ``n_unbounded`` unbounded claimants."""
    ds = sorted(d for d in demands if d > 0)
    remaining = total
    k = len(ds) + n_unbounded
    for d in ds:
        if d * k <= remaining:
            remaining -= d
            k -= 1
        else:
            break
    return remaining / k if k else math.inf
