"""Independent reference implementations used only by the test-suite.

None of these import the code paths they check.
"""

from __future__ import annotations

import math
from statistics import NormalDist


def _water_level(total, demands, n_unbounded):
    """Level L with sum(min(d, L)) + n_unbounded * L == total (sorting method)."""
    used = 0.0
    k = len(demands) + n_unbounded
    for d in sorted(demands):
        if (total - used) / k <= d:
            return (total - used) / k
        used += d
        k -= 1
    return (total - used) / n_unbounded if n_unbounded else math.inf


def waterfill_oracle(capacity, circuits, demand=None, tol=1e-9, max_rounds=20000):
    """Two-level max-min allocation by damped iterative water-filling over rates.

    ``capacity``: relay -> bytes/s. ``circuits``: cid -> list of (relay, conn_key).
    ``demand``: optional cid -> cap (0 means idle).
    Each round recomputes every circuit's per-hop water level with the other
    circuits held at their current rates and moves part of the way there.
    """
    demand = demand or {}
    members = {}  # relay -> conn -> [cids]
    for c, hops in circuits.items():
        for relay, conn in hops:
            members.setdefault(relay, {}).setdefault(conn, []).append(c)
    rate = {c: 0.0 for c in circuits}
    for _ in range(max_rounds):
        level = {}  # (relay, conn, cid) -> water level seen by cid there
        for relay, conns in members.items():
            load = {k: sum(rate[m] for m in ms) for k, ms in conns.items()}
            for k, ms in conns.items():
                conn_share = _water_level(capacity[relay], [v for j, v in load.items() if j != k], 1)
                for i, m in enumerate(ms):
                    inner = [rate[o] for o in ms[:i] + ms[i + 1 :]]
                    level[relay, k, m] = _water_level(conn_share, inner, 1)
        target = {}
        for c, hops in circuits.items():
            best = demand.get(c, math.inf)
            for relay, conn in hops:
                best = min(best, level[relay, conn, c])
            target[c] = 0.0 if math.isinf(best) else best
        moved = max((abs(target[c] - rate[c]) / max(target[c], 1e-12) for c in rate), default=0.0)
        for c in rate:
            rate[c] += 0.3 * (target[c] - rate[c])
        if moved < tol:
            return target
    raise RuntimeError("oracle did not converge")


def pearson_def(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def fisher_def(r, n, level=0.95):
    z = 0.5 * math.log((1 + r) / (1 - r))
    zc = NormalDist().inv_cdf(1 - (1 - level) / 2)
    lo, hi = z - zc / math.sqrt(n - 3), z + zc / math.sqrt(n - 3)
    back = lambda v: (math.exp(2 * v) - 1) / (math.exp(2 * v) + 1)
    return back(lo), back(hi)


def entropy_def(p):
    return -sum(q * math.log(q, 2) for q in p if q > 0)


def set_entropy_def(s, p, n):
    # spread p over s relays and 1-p over n-s relays, then plain entropy
    dist = []
    if s:
        dist += [p / s] * s
    if n - s:
        dist += [(1 - p) / (n - s)] * (n - s)
    return entropy_def(dist)


def exhaustive_windowed_max(x, y, w):
    """Max pearson over every contiguous interval with at least ``w`` samples."""
    n = len(x)
    best = None
    for i in range(n):
        for j in range(i + w, n + 1):
            xs, ys = x[i:j], y[i:j]
            if len(set(xs)) == 1 or len(set(ys)) == 1:
                continue
            r = pearson_def(xs, ys)
            if best is None or r > best:
                best = r
    return best


def exclusivity_def(x_active, y_active):
    one = sum(1 for a, b in zip(x_active, y_active) if a != b)
    any_ = sum(1 for a, b in zip(x_active, y_active) if a or b)
    return one / any_
