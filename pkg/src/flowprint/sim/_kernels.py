"""Compiled inner loops of the bandwidth allocation.

The arrays describe a network snapshot in compressed form:

* ``hop_circ[h]`` / ``hop_conn[h]``: circuit and connection of relay hop ``h``;
* ``conn_relay[j]``: sending relay of connection ``j``;
* ``conn_ptr`` / ``conn_hops``: hops of each connection (CSR);
* ``relay_ptr`` / ``relay_conns``: connections of each relay (CSR);
* ``circ_ptr`` / ``circ_hops``: hops of each circuit (CSR).
"""

from __future__ import annotations

import numpy as np
from numba import njit

_PIN_TOL = 1e-12
_REPAIR_TOL = 1e-9


@njit(cache=True)
def _sort_group(values, idx, n, s, order):
    """Insertion sort of ``values[idx[:n]]`` into ``s`` with positions in ``order``."""
    for i in range(n):
        v = values[idx[i]]
        k = i
        while k > 0 and s[k - 1] > v:
            s[k] = s[k - 1]
            order[k] = order[k - 1]
            k -= 1
        s[k] = v
        order[k] = i


@njit(cache=True)
def _leave_one_out(s, n, total, p):
    """Level with sorted values ``s[:n]`` except position ``p`` plus one unbounded claimant."""
    used = 0.0
    remaining = n
    for q in range(n):
        if q == p:
            continue
        cand = (total - used) / remaining
        if cand <= s[q]:
            return max(cand, 0.0)
        used += s[q]
        remaining -= 1
    return max(total - used, 0.0)


@njit(cache=True)
def leave_one_out_levels(values, total, out):
    """For each i: L with sum(min(v_k, L) for k != i) + L == total."""
    n = values.size
    idx = np.arange(n)
    s = np.empty(n)
    order = np.empty(n, dtype=np.int64)
    _sort_group(values, idx, n, s, order)
    for p in range(n):
        out[order[p]] = _leave_one_out(s, n, total, p)


@njit(cache=True)
def hop_shares(rate, hop_circ, hop_conn, conn_relay, capacity, conn_ptr, conn_hops, relay_ptr, relay_conns):
    nj = conn_relay.size
    nh = hop_circ.size
    load = np.zeros(nj)
    for h in range(nh):
        load[hop_conn[h]] += rate[hop_circ[h]]
    width = 1
    for r in range(relay_ptr.size - 1):
        width = max(width, relay_ptr[r + 1] - relay_ptr[r])
    for j in range(nj):
        width = max(width, conn_ptr[j + 1] - conn_ptr[j])
    s = np.empty(width)
    order = np.empty(width, dtype=np.int64)
    conn_share = np.empty(nj)
    for r in range(relay_ptr.size - 1):
        a, n = relay_ptr[r], relay_ptr[r + 1] - relay_ptr[r]
        if n == 0:
            continue
        _sort_group(load, relay_conns[a:], n, s, order)
        for p in range(n):
            conn_share[relay_conns[a + order[p]]] = _leave_one_out(s, n, capacity[r], p)
    on_hop = np.empty(nh)
    for h in range(nh):
        on_hop[h] = rate[hop_circ[h]]
    share = np.empty(nh)
    for j in range(nj):
        a, n = conn_ptr[j], conn_ptr[j + 1] - conn_ptr[j]
        _sort_group(on_hop, conn_hops[a:], n, s, order)
        for p in range(n):
            share[conn_hops[a + order[p]]] = _leave_one_out(s, n, conn_share[j], p)
    return share


@njit(cache=True)
def best_response(demand, share, circ_ptr, circ_hops):
    best = demand.copy()
    for c in range(demand.size):
        for k in range(circ_ptr[c], circ_ptr[c + 1]):
            v = share[circ_hops[k]]
            if v < best[c]:
                best[c] = v
    return best


@njit(cache=True)
def structure_system(
    demand, rate, share, hop_circ, hop_conn, conn_relay, capacity, conn_ptr, conn_hops, circ_ptr, circ_hops
):
    """Linear system for the bottleneck pattern read off ``share``.

    Unknowns are the per-circuit level of every saturated connection and the
    per-connection level of every full relay. Returns ``(M, rhs, var_of_circ,
    ok)`` where ``var_of_circ[c]`` is the unknown pinning circuit ``c`` (or -1).
    """
    nc = demand.size
    nj = conn_relay.size
    nr = capacity.size
    limited = np.zeros(nc, dtype=np.bool_)
    bconn = np.full(nc, -1, dtype=np.int64)
    for c in range(nc):
        bh = -1
        bs = np.inf
        for k in range(circ_ptr[c], circ_ptr[c + 1]):
            h = circ_hops[k]
            if bh < 0 or share[h] < bs:
                bh = h
                bs = share[h]
        if bh >= 0 and bs < demand[c] * (1.0 - _PIN_TOL):
            limited[c] = True
            bconn[c] = hop_conn[bh]

    # repair: a connection above its relay's saturated level, or a circuit above
    # its saturated connection's level, must be pinned there as well
    load = np.zeros(nj)
    top = np.zeros(nj)
    for h in range(hop_circ.size):
        v = rate[hop_circ[h]]
        load[hop_conn[h]] += v
        if v > top[hop_conn[h]]:
            top[hop_conn[h]] = v
    is_sat = np.zeros(nj, dtype=np.bool_)
    for c in range(nc):
        if limited[c]:
            is_sat[bconn[c]] = True
    lam = np.full(nr, np.inf)
    for j in range(nj):
        if is_sat[j] and load[j] < lam[conn_relay[j]]:
            lam[conn_relay[j]] = load[j]
    mu = np.full(nj, np.inf)
    for h in range(hop_circ.size):
        c = hop_circ[h]
        if limited[c] and bconn[c] == hop_conn[h] and rate[c] < mu[hop_conn[h]]:
            mu[hop_conn[h]] = rate[c]
    grab_c = np.full(hop_circ.size, -1, dtype=np.int64)
    ng = 0
    for h in range(hop_circ.size):
        c = hop_circ[h]
        j = hop_conn[h]
        v = rate[c]
        pinned_here = limited[c] and bconn[c] == j
        over_conn = (not is_sat[j]) and load[j] > lam[conn_relay[j]] * (1.0 + _REPAIR_TOL)
        if (over_conn and v >= top[j] * (1.0 - _REPAIR_TOL)) or (
            is_sat[j] and (not pinned_here) and v > mu[j] * (1.0 + _REPAIR_TOL)
        ):
            grab_c[ng] = h
            ng += 1
    for i in range(ng):
        h = grab_c[i]
        limited[hop_circ[h]] = True
        bconn[hop_circ[h]] = hop_conn[h]

    # unknown numbering: saturated connections, then full relays (ascending ids)
    sat = np.zeros(nj, dtype=np.bool_)
    for c in range(nc):
        if limited[c]:
            sat[bconn[c]] = True
    mu_of = np.full(nj, -1, dtype=np.int64)
    n_sat = 0
    for j in range(nj):
        if sat[j]:
            mu_of[j] = n_sat
            n_sat += 1
    full = np.zeros(nr, dtype=np.bool_)
    sat_count = np.zeros(nr, dtype=np.int64)
    for j in range(nj):
        if sat[j]:
            full[conn_relay[j]] = True
            sat_count[conn_relay[j]] += 1
    lam_of = np.full(nr, -1, dtype=np.int64)
    size = n_sat
    for r in range(nr):
        if full[r]:
            lam_of[r] = size
            size += 1
    M = np.zeros((size, size))
    rhs = np.zeros(size)
    ok = True
    for h in range(hop_circ.size):
        j = hop_conn[h]
        row = mu_of[j] if mu_of[j] >= 0 else lam_of[conn_relay[j]]
        if row < 0:
            continue
        c = hop_circ[h]
        if limited[c]:
            M[row, mu_of[bconn[c]]] += 1.0
        else:
            d = demand[c]
            if not np.isfinite(d):
                ok = False
            else:
                rhs[row] -= d
    # connection rows: load - lambda = 0; relay rows: n_sat * lambda + other load = capacity
    for j in range(nj):
        if sat[j]:
            M[mu_of[j], lam_of[conn_relay[j]]] -= 1.0
    for r in range(nr):
        if full[r]:
            M[lam_of[r], lam_of[r]] += sat_count[r]
            rhs[lam_of[r]] += capacity[r]
    var_of_circ = np.full(nc, -1, dtype=np.int64)
    for c in range(nc):
        if limited[c]:
            var_of_circ[c] = mu_of[bconn[c]]
    return M, rhs, var_of_circ, ok
