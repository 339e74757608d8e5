import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowprint.errors import DataError, DegenerateInputError
from flowprint.sim.engine import SimConfig, Simulator
from flowprint.sim.network import NetworkState, add_probe_circuit
from flowprint.sim.relays import KB, Relay
from flowprint.stats import ThroughputTrace
from flowprint.traffic import (
    BurstGapModel,
    UtilizationClass,
    classify_utilization,
    fit_model,
    generate_bulk,
    generate_interactive,
    synthetic_model,
)


def _slots(flags, per_slot_bytes=50 * KB, subinterval=5.0, tick=0.1):
    # one burst at the start of every active slot
    k = int(round(subinterval / tick))
    out = np.zeros(len(flags) * k)
    for i, f in enumerate(flags):
        if f:
            out[i * k] = per_slot_bytes / tick
    return ThroughputTrace(0.0, tick, out)


def _moderate_source():
    rng = np.random.default_rng(0)
    return BurstGapModel(tuple(rng.uniform(1e6, 2e6, 200)), tuple(rng.uniform(10.0, 15.0, 200)))


def test_bulk_profile():
    p = generate_bulk(60.0)
    assert p.backlogged and p.demand(1e9) >= 1e9
    assert generate_bulk(0.0).empty
    tr = p.render(100 * KB)
    assert classify_utilization(tr)[0] is UtilizationClass.BULK


def test_point_mass_model_alternates_strictly():
    model = BurstGapModel((50 * KB,), (5.0,))
    prof = generate_interactive(model, 60.0, np.random.default_rng(1))
    assert set(prof.segments) == {(50 * KB, 5.0)}
    tr = prof.render(100 * KB, tick=0.1)
    on = tr.samples > 0
    # 0.5 s of sending, then 5 s idle, repeated
    pattern = np.array(([True] * 5 + [False] * 50) * 11)[: len(tr)]
    assert np.array_equal(on, pattern)


def test_interactive_is_seed_stable():
    model = synthetic_model()
    a = generate_interactive(model, 300.0, np.random.default_rng(5))
    b = generate_interactive(model, 300.0, np.random.default_rng(5))
    assert a == b
    assert sum(g for _, g in a.segments) >= 300.0


def test_gaps_are_silent_in_simulation():
    net = NetworkState([Relay("r0", "r0", 100 * KB)])
    cid = add_probe_circuit(net, "r0")
    sim = Simulator(net, SimConfig(slow_start_ramp=0.0))
    prof = generate_interactive(synthetic_model(), 200.0, np.random.default_rng(2))
    sim.start_flow(cid, prof)
    tr = sim.sample_trace(cid, 200.0)
    # walk the profile: each burst ends on a tick boundary where its gap starts
    cum = np.cumsum(tr.samples * tr.interval)
    k = 0
    sent = 0.0
    for burst, gap in prof.segments:
        sent += burst
        end = int(np.searchsorted(cum, sent * (1 - 1e-6)))
        if end + 1 >= len(tr):
            break
        gap_ticks = int(round(gap / 0.1))
        assert np.all(tr.samples[end + 1 : end + 1 + gap_ticks] == 0.0)
        k += 1
    assert k > 5


def test_all_active_is_bulk():
    cls, frac = classify_utilization(_slots([True] * 120))
    assert frac == 1.0 and cls is UtilizationClass.BULK


def test_half_active_is_moderate():
    flags = [True, False] * 60
    cls, frac = classify_utilization(_slots(flags))
    assert frac == 0.5 and cls is UtilizationClass.MODERATE


def test_class_thresholds():
    assert UtilizationClass.of(0.9) is UtilizationClass.MODERATE
    assert UtilizationClass.of(0.91) is UtilizationClass.BULK
    assert UtilizationClass.of(0.49) is UtilizationClass.LOW


def test_classifier_errors():
    with pytest.raises(DegenerateInputError):
        classify_utilization(ThroughputTrace(0.0, 0.1, []))
    with pytest.raises(DegenerateInputError):
        classify_utilization(ThroughputTrace(0.0, 0.1, [1.0] * 10))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=50, max_size=3000))
def test_fraction_in_unit_interval(samples):
    _, frac = classify_utilization(ThroughputTrace(0.0, 0.1, samples))
    assert 0.0 <= frac <= 1.0


def test_fit_point_mass():
    model = fit_model([_slots([True, False] * 60)])
    assert model.burst_sizes == (50 * KB,)
    assert model.gap_times == (5.0,)


def test_fit_rejects_empty_and_unqualified():
    with pytest.raises(DataError):
        fit_model([])
    with pytest.raises(DataError):
        fit_model([_slots([True] * 120)])
    with pytest.raises(DataError):
        fit_model([_slots([True, False] * 60, per_slot_bytes=50.0)])


def _round_trip_traces(seed, n=40):
    source = _moderate_source()
    rng = np.random.default_rng(seed)
    return source, [generate_interactive(source, 1800.0, rng).render(100 * KB) for _ in range(n)]


def test_fit_generate_round_trip():
    source, traces = _round_trip_traces(3)
    fitted = fit_model(traces)
    assert len(fitted.burst_sizes) == len(traces)
    assert np.mean(fitted.burst_sizes) == pytest.approx(np.mean(source.burst_sizes), rel=0.15)


def test_generated_from_moderate_fit_is_moderate():
    _, traces = _round_trip_traces(4, n=20)
    fitted = fit_model(traces)
    rng = np.random.default_rng(9)
    for _ in range(10):
        tr = generate_interactive(fitted, 1800.0, rng).render(100 * KB)
        assert classify_utilization(tr)[0] is UtilizationClass.MODERATE


def test_fit_is_permutation_invariant():
    _, traces = _round_trip_traces(5, n=12)
    a = fit_model(traces)
    b = fit_model(list(reversed(traces)))
    c = fit_model([traces[i] for i in np.random.default_rng(0).permutation(len(traces))])
    assert a == b == c


def test_json_round_trip(tmp_path):
    model = synthetic_model(samples=50)
    path = tmp_path / "model.json"
    model.save(path)
    assert BurstGapModel.load(path) == model
    assert set(json.loads(path.read_text())) == {"burst_sizes", "gap_times"}


def test_json_rejects_bad_input():
    with pytest.raises(DataError):
        BurstGapModel.from_json('{"burst_sizes": [1]}')
    with pytest.raises(DataError):
        BurstGapModel.from_json('{"burst_sizes": [1], "gap_times": [-1]}')
    with pytest.raises(DataError):
        BurstGapModel.from_json("{oops")


def test_synthetic_model_means():
    model = synthetic_model(samples=20_000)
    assert np.mean(model.burst_sizes) == pytest.approx(100 * KB, rel=0.05)
    assert np.mean(model.gap_times) == pytest.approx(8.0, rel=0.05)
