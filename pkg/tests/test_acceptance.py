"""Acceptance suite: one pass/fail line per headline criterion.

Slow. Every scenario batch is computed once and shared between criteria.
"""

import functools
import math

import numpy as np

from flowprint.errors import UndefinedCorrelationError
from flowprint.harness import io
from flowprint.harness.scenarios import Scenario, run_scenario
from flowprint.sim.allocation import allocate_bandwidth
from flowprint.stats import (
    ThroughputTrace,
    conditional_set_entropy,
    entropy,
    fisher_ci,
    mutual_exclusivity,
    pearson,
    weighted_entropy,
    windowed_max_correlation,
)
from flowprint.streams import CELL_BYTES, INCREMENT_CELLS, CircuitMux, StreamState, run_lengths

from instances import oracle_input, random_instance
from oracles import (
    entropy_def,
    exclusivity_def,
    exhaustive_windowed_max,
    fisher_def,
    pearson_def,
    set_entropy_def,
    waterfill_oracle,
)

TOL = 1e-9
KB = 1024.0

BATCHES = {
    "all_common": dict(kind="all_common", runs=100),
    "none_common": dict(kind="none_common", runs=100),
    "one_common": dict(kind="one_common", runs=100),
    "identify": dict(kind="identify_bottleneck", runs=100),
    "elimination": dict(kind="identify_bottleneck", runs=100, universe_weighting="uniform"),
    "guard": dict(kind="guard_discovery", runs=20),
    "hidden": dict(kind="hidden_service", runs=100),
    "link": dict(kind="link_streams", runs=225),
    "interactive": dict(kind="interactive_pair", runs=100),
}


@functools.cache
def batch(name):
    s = Scenario(seed=0, **BATCHES[name])
    records, summary = run_scenario(s)
    return s, records, summary


def report(capsys, criterion, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
    assert ok, f"{criterion}: {detail}"


def _trace(samples, interval=1.0):
    return ThroughputTrace(0.0, interval, np.asarray(samples, dtype=float))


def _varied(rng, n):
    while True:
        x = rng.random(n) * rng.choice([1.0, 100.0, 1e5])
        if np.ptp(x) > 0:
            return x


def _oracle_mismatches():
    bad = []
    rng = np.random.default_rng(100)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        x, y = _varied(rng, n), _varied(rng, n)
        if abs(pearson(x, y) - pearson_def(list(x), list(y))) > TOL:
            bad.append("pearson")
        r, m, level = float(rng.uniform(-0.999, 0.999)), int(rng.integers(4, 5000)), float(rng.choice([0.9, 0.95]))
        if max(map(abs, np.subtract(fisher_ci(r, m, level), fisher_def(r, m, level)))) > TOL:
            bad.append("fisher_ci")
        p = rng.random(int(rng.integers(1, 30)))
        p[0] += 1e-3
        p /= p.sum()
        if abs(entropy(p) - entropy_def(list(p))) > TOL:
            bad.append("entropy")
        size = int(rng.integers(2, 60))
        k, q = int(rng.integers(1, size)), float(rng.choice([0.0, 1.0, rng.random()]))
        if abs(conditional_set_entropy(k, q, size) - set_entropy_def(k, q, size)) > TOL:
            bad.append("conditional_set_entropy")
        sizes = rng.integers(1, 25, size=int(rng.integers(1, 40)))
        values, counts = np.unique(sizes, return_counts=True)
        obs = [(c / sizes.size, math.log2(v)) for v, c in zip(values, counts)]
        if abs(weighted_entropy(obs) - float(np.mean(np.log2(sizes)))) > TOL:
            bad.append("weighted_entropy")
        n, width = int(rng.integers(10, 200)), int(rng.integers(1, 10))
        xs = rng.random(n) * (rng.random(n) < 0.5) * 10
        ys = rng.random(n) * (rng.random(n) < 0.5) * 10
        nb = n // width
        xa = [float(np.mean(xs[i * width : (i + 1) * width])) > 1.0 for i in range(nb)]
        ya = [float(np.mean(ys[i * width : (i + 1) * width])) > 1.0 for i in range(nb)]
        if any(a or b for a, b in zip(xa, ya)):
            got = mutual_exclusivity(_trace(xs, 0.1), _trace(ys, 0.1), 0.1 * width)
            if abs(got - exclusivity_def(xa, ya)) > TOL:
                bad.append("mutual_exclusivity")
    for n in range(2, 81):
        for _ in range(5):
            w = int(rng.integers(2, n + 1))
            x, y = _varied(rng, n), _varied(rng, n)
            expected = exhaustive_windowed_max(list(x), list(y), w)
            try:
                r, _ = windowed_max_correlation(_trace(x), _trace(y), float(w))
            except UndefinedCorrelationError:
                r = None
            if (r is None) != (expected is None) or (r is not None and abs(r - expected) > TOL):
                bad.append("windowed_max_correlation")
    return bad


def test_oracle_suite(capsys):
    bad = _oracle_mismatches()
    report(capsys, "oracle suite", not bad, f"{len(bad)} mismatches {sorted(set(bad))}")


def test_fairness_suite(capsys):
    worst = 0.0
    for seed in range(1000):
        net = random_instance(seed)
        got = allocate_bandwidth(net)
        want = waterfill_oracle(*oracle_input(net))
        for c in want:
            worst = max(worst, abs(got[c] - want[c]) / max(want[c], 1e-9))
    violations = {name: batch(name)[2]["capacity_violations"] for name in BATCHES}
    ok = worst <= 1e-6 and not any(violations.values())
    report(capsys, "fairness suite", ok, f"worst relative error {worst:.2e}; capacity violations {violations}")


def test_all_common(capsys):
    frac = batch("all_common")[2]["detection_fraction"]
    report(capsys, "all-common detection", frac >= 0.85, f"{frac:.3f} (need >= 0.85)")


def test_none_common(capsys):
    frac = batch("none_common")[2]["detection_fraction"]
    report(capsys, "none-common false positives", frac <= 0.05, f"{frac:.3f} (need <= 0.05)")


def test_one_common(capsys):
    frac = batch("one_common")[2]["detection_fraction"]
    report(capsys, "one-common detection", frac >= 0.75, f"{frac:.3f} (need >= 0.75)")


def test_bottleneck_identification(capsys):
    summary = batch("identify")[2]
    med = summary["median_entropy"]
    detail = f"median entropy {med:.3f} bits of {summary['prior_entropy']:.2f} (need <= 2.8)"
    report(capsys, "bottleneck identification", med <= 2.8, detail)


def test_throughput_elimination(capsys):
    at10 = batch("elimination")[2]["elimination"]["10"]
    drop = at10["entropy_drop"]
    detail = f"entropy drop {drop:.3f} at 10 s (need >= 0.30); bottleneck kept {at10['bottleneck_kept']:.2f}"
    report(capsys, "throughput elimination", drop >= 0.30, detail)


def test_guard_discovery(capsys):
    top = batch("guard")[2]["guard_top_fraction"]
    report(capsys, "guard discovery", top >= 0.90, f"guard top-ranked in {top:.2f} of 20 (need >= 0.90)")


def test_hidden_service(capsys):
    freq = batch("hidden")[2]["detection_frequency"]
    report(capsys, "hidden service", 0.075 <= freq <= 0.175, f"{freq:.3f} (need within [0.075, 0.175])")


def _window_limited_runs():
    """Cell runs of two streams whose acks lag well behind one increment's drain time."""
    bad = total = 0
    rng = np.random.default_rng(5)
    for _ in range(50):
        rate = float(rng.uniform(20, 300)) * KB
        drain = INCREMENT_CELLS * CELL_BYTES / rate
        streams = [StreamState(id=1, circuit=0), StreamState(id=2, circuit=0, start_time=float(rng.uniform(0.01, 2)))]
        mux = CircuitMux(
            streams,
            ack_delay=float(rng.uniform(1.0, 8.0)) * drain,
            ack_jitter=float(rng.uniform(0.0, 0.3)),
            rng=np.random.default_rng(int(rng.integers(2**31))),
            log_runs=True,
        )
        tick = 0.05
        for k in range(int(40.0 / tick)):
            mux.step(rate * tick, k * tick, tick)
        runs = run_lengths(mux.runs)[:-1]
        total += len(runs)
        bad += sum(r % INCREMENT_CELLS != 0 for r in runs)
    return bad, total


def test_stream_linkability(capsys):
    cer = batch("link")[2]["cer"]
    bad, total = _window_limited_runs()
    ok = cer["120"] <= 0.05 and cer["300"] <= 0.03 and bad == 0
    detail = (
        f"CER {cer['120']:.4f} at 120 s (need <= 0.05), {cer['300']:.4f} at 300 s (need <= 0.03); "
        f"{bad} of {total} window-limited runs off the {INCREMENT_CELLS}-cell grid"
    )
    report(capsys, "stream linkability", ok, detail)


def test_interactive_traffic(capsys):
    summary = batch("interactive")[2]
    tpr = summary["tpr_at_fpr_0.05"]
    report(capsys, "interactive traffic", tpr >= 0.5, f"TPR {tpr:.3f} at FPR <= 0.05 (need >= 0.5)")


def test_determinism(capsys, tmp_path):
    differing = []
    for name in BATCHES:
        s, records, summary = batch(name)
        first = io.write_results(tmp_path / f"{name}-a", s, records, summary)
        again = Scenario(seed=0, **BATCHES[name])
        second = io.write_results(tmp_path / f"{name}-b", again, *run_scenario(again))
        if (first / "summary.json").read_bytes() != (second / "summary.json").read_bytes():
            differing.append(name)
    report(capsys, "determinism", not differing, f"summaries differing on rerun: {differing or 'none'}")
