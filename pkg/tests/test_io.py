import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowprint.errors import DataError
from flowprint.harness import io
from flowprint.harness.scenarios import Scenario, run_scenario, summarize
from flowprint.sim.relays import LOW_CAPACITY_CUTOFF, generate_network
from flowprint.stats import ThroughputTrace

RELAY_CSV = """name,capacity_bytes_per_sec,guard_eligible,exit_eligible
alpha,102400,true,false
beta,2048000,false,true
gamma,51200,1,0
"""


def test_relay_csv_three_rows(tmp_path):
    p = tmp_path / "relays.csv"
    p.write_text(RELAY_CSV)
    relays = io.load_relays(p)
    assert [r.id for r in relays] == ["alpha", "beta", "gamma"]
    assert relays[1].capacity == 2048000.0 and relays[1].exit_eligible and not relays[1].guard_eligible
    assert relays[2].guard_eligible and not relays[2].exit_eligible


def test_relay_json(tmp_path):
    p = tmp_path / "relays.json"
    rows = [
        {"name": "a", "capacity_bytes_per_sec": 1000, "guard_eligible": True, "exit_eligible": True},
        {"name": "b", "capacity_bytes_per_sec": 2000.5, "guard_eligible": False, "exit_eligible": True},
    ]
    p.write_text(json.dumps(rows))
    relays = io.load_relays(p)
    assert [(r.id, r.capacity) for r in relays] == [("a", 1000.0), ("b", 2000.5)]


@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_relay_round_trip(tmp_path, suffix):
    relays = generate_network(30, seed=3, guard_fraction=0.5, exit_fraction=0.5)
    path = tmp_path / f"net{suffix}"
    io.save_relays(relays, path)
    back = io.load_relays(path)
    assert [(r.id, r.capacity, r.guard_eligible, r.exit_eligible) for r in back] == [
        (r.id, r.capacity, r.guard_eligible, r.exit_eligible) for r in relays
    ]


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("name,capacity\nx,1\n", "line 1: header"),
        (RELAY_CSV + "delta,abc,true,true\n", "line 5, field capacity_bytes_per_sec"),
        (RELAY_CSV + "delta,-5,true,true\n", "line 5, field capacity_bytes_per_sec"),
        (RELAY_CSV + "delta,10,maybe,true\n", "line 5, field guard_eligible"),
        (RELAY_CSV + "delta,10,true\n", "line 5: expected 4 fields"),
        (RELAY_CSV + "alpha,10,true,true\n", "duplicate relay name"),
        ('[{"name": "a", "capacity_bytes_per_sec": 1}]', "entry 0: expected keys"),
        ('[{"name": "a", ', "line 1"),
        ("name,capacity_bytes_per_sec,guard_eligible,exit_eligible\n", "no relays"),
    ],
)
def test_relay_diagnostics(tmp_path, text, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=fragment):
        io.load_relays(p)


def test_missing_relay_file(tmp_path):
    with pytest.raises(DataError):
        io.load_relays(tmp_path / "nope.csv")


def test_synthetic_network_low_capacity_share():
    relays = generate_network(5000, seed=0)
    low = np.mean([r.capacity < LOW_CAPACITY_CUTOFF for r in relays])
    assert low == pytest.approx(0.386, abs=0.02)


# traces ---------------------------------------------------------------------------


def test_trace_file_format(tmp_path):
    tr = ThroughputTrace(30.0, 0.1, np.array([0.0, 1234567.891, 5.5]))
    p = tmp_path / "t.csv"
    io.write_trace(tr, p)
    assert p.read_text().splitlines() == ["t_sec,bytes_per_sec", "30.0,0", "30.1,1.23457e+06", "30.2,5.5"]


def _at_precision(samples):
    return np.array([float(io.format_rate(v)) for v in samples])


@settings(max_examples=100, deadline=None)
@given(
    samples=st.lists(st.floats(0.0, 1e8, allow_nan=False), min_size=2, max_size=50),
    start_ticks=st.integers(0, 10_000),
    interval=st.sampled_from([0.1, 0.25, 0.5, 1.0, 2.0]),
)
def test_trace_round_trip(tmp_path_factory, samples, start_ticks, interval):
    p = tmp_path_factory.mktemp("tr") / "t.csv"
    tr = ThroughputTrace(round(start_ticks * interval, 6), interval, np.array(samples))
    io.write_trace(tr, p)
    back = io.read_trace(p)
    assert back.interval == interval
    assert back.start == pytest.approx(tr.start, abs=1e-9)
    assert np.array_equal(back.samples, _at_precision(samples))
    # a second round trip is exact
    io.write_trace(back, p)
    assert io.read_trace(p) == back


def test_trace_with_stream_column(tmp_path):
    tr = ThroughputTrace(0.0, 0.1, np.array([1.0, 2.0]))
    p = tmp_path / "s.csv"
    io.write_trace(tr, p, stream_id=7)
    assert p.read_text().splitlines()[0] == "t_sec,bytes_per_sec,stream_id"
    assert io.read_trace(p) == tr


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "empty file"),
        ("time,rate\n0,1\n", "line 1: header"),
        ("t_sec,bytes_per_sec\n0.0,1\n0.1\n", "line 3: expected 2 fields"),
        ("t_sec,bytes_per_sec\n0.0,1\n0.1,x\n", "line 3, field bytes_per_sec"),
        ("t_sec,bytes_per_sec\n0.0,1\n0.1,-4\n", "line 3, field bytes_per_sec"),
        ("t_sec,bytes_per_sec\n0.0,1\n0.1,1\n0.3,1\n", "line 4, field t_sec"),
        ("t_sec,bytes_per_sec\n0.0,1\n", "at least two samples"),
    ],
)
def test_trace_diagnostics(tmp_path, text, fragment):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=fragment):
        io.read_trace(p)


# results ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_batch():
    s = Scenario(kind="link_streams", runs=2, duration=120.0, link_durations=(60.0, 120.0), keep_traces=True)
    records, summary = run_scenario(s)
    return s, records, summary


def test_results_directory_layout(tmp_path, small_batch):
    s, records, summary = small_batch
    out = io.write_results(tmp_path / "batch", s, records, summary)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config.json", "records.csv", "roc.csv", "summary.json", "traces"]
    config = json.loads((out / "config.json").read_text())
    assert config["seed"] == s.seed and config["config_hash"] == s.config_hash()
    assert len(list((out / "traces").iterdir())) == sum(len(r.traces) for r in records)


def test_summary_recomputed_from_records(tmp_path, small_batch):
    s, records, summary = small_batch
    out = io.write_results(tmp_path / "batch", s, records, summary)
    s2 = io.load_scenario(out)
    assert s2.config_hash() == s.config_hash()
    again = summarize(s2, io.read_records(out / "records.csv"))
    assert json.dumps(again, sort_keys=True) == json.dumps(summary, sort_keys=True)


def test_records_round_trip(tmp_path, small_batch):
    _, records, _ = small_batch
    io.write_records(records, tmp_path / "r.csv")
    back = io.read_records(tmp_path / "r.csv")
    assert [(r.run_index, r.seed, r.truth, r.outputs) for r in back] == [
        (r.run_index, r.seed, r.truth, r.outputs) for r in records
    ]


def test_records_diagnostics(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="line 1"):
        io.read_records(p)
    p.write_text(",".join(io.RECORD_FIELDS) + "\nx,notanint,1,0.1,{},{}\n")
    with pytest.raises(DataError, match="line 2"):
        io.read_records(p)


def test_load_scenario_missing(tmp_path):
    with pytest.raises(DataError):
        io.load_scenario(tmp_path)
