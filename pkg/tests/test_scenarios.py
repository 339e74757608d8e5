import json

import numpy as np
import pytest

from flowprint import cli
from flowprint.errors import ConfigurationError
from flowprint.harness import io
from flowprint.harness.scenarios import Scenario, ScenarioKind, run_one, run_scenario, run_seed
from flowprint.sim.relays import generate_network
from flowprint.stats import ThroughputTrace

# short configurations that exercise every runner in a few seconds
QUICK = {
    ScenarioKind.ALL_COMMON: dict(duration=60.0, min_window=30.0),
    ScenarioKind.NONE_COMMON: dict(duration=60.0, min_window=30.0),
    ScenarioKind.ONE_COMMON: dict(duration=60.0, min_window=30.0),
    ScenarioKind.IDENTIFY_BOTTLENECK: dict(duration=60.0, min_window=30.0),
    ScenarioKind.GUARD_DISCOVERY: dict(duration=40.0, min_window=20.0, reformulations=3),
    ScenarioKind.HIDDEN_SERVICE: dict(duration=60.0, min_window=30.0),
    ScenarioKind.LINK_STREAMS: dict(duration=70.0, link_durations=(60.0, 70.0)),
    ScenarioKind.INTERACTIVE_PAIR: dict(duration=60.0, min_window=30.0),
}


def test_validation_messages():
    with pytest.raises(ConfigurationError, match="runs"):
        Scenario(kind="all_common", runs=0)
    with pytest.raises(ConfigurationError, match="shorter than the window"):
        Scenario(kind="all_common", duration=100.0)
    with pytest.raises(ConfigurationError, match="universe"):
        Scenario(kind="identify_bottleneck", n_relays=10)
    with pytest.raises(ConfigurationError, match="rendezvous"):
        Scenario(kind="hidden_service", path_length=9)
    with pytest.raises(ConfigurationError, match="ramp"):
        Scenario(kind="link_streams", duration=62.0, link_durations=(62.0,))
    with pytest.raises(ValueError):
        Scenario(kind="nonsense")


def test_defaults_follow_kind():
    s = Scenario(kind="identify_bottleneck")
    assert (s.universe, s.min_window, s.threshold) == (25, 300.0, 0.4)
    g = Scenario(kind="guard_discovery")
    assert (g.guard_set_size, g.reformulations, g.universe) == (1, 50, 25)
    assert Scenario(kind="all_common", duration=400.0).eval_at == 300.0
    assert Scenario(kind="one_common", duration=250.0).eval_at == 250.0


def test_config_round_trip_and_hash():
    s = Scenario(kind="interactive_pair", seed=9, runs=3)
    again = Scenario.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again == s and again.config_hash() == s.config_hash()
    assert Scenario(kind="interactive_pair", seed=10, runs=3).config_hash() != s.config_hash()


def test_run_seeds_differ_and_repeat():
    seeds = [run_seed(0, i) for i in range(200)]
    assert len(set(seeds)) == 200
    assert seeds == [run_seed(0, i) for i in range(200)]


@pytest.mark.parametrize("kind", list(ScenarioKind), ids=lambda k: k.value)
def test_single_run_batch(kind):
    s = Scenario(kind=kind, runs=1, **QUICK[kind])
    records, summary = run_scenario(s)
    assert len(records) == 1 and summary["runs"] == 1 and summary["kind"] == kind.value
    assert summary["capacity_violations"] == 0
    assert summary["max_utilization"] <= 1.0
    json.dumps(summary, allow_nan=False)


def test_rerun_reproduces_outputs():
    s = Scenario(kind="one_common", runs=2, **QUICK[ScenarioKind.ONE_COMMON])
    a, sa = run_scenario(s)
    b, sb = run_scenario(s)
    assert json.dumps(sa, sort_keys=True) == json.dumps(sb, sort_keys=True)
    assert [r.outputs for r in a] == [r.outputs for r in b]
    assert run_one(s, 1).outputs == a[1].outputs


def test_different_seeds_give_different_runs():
    q = QUICK[ScenarioKind.ALL_COMMON]
    a = run_one(Scenario(kind="all_common", seed=1, **q), 0)
    b = run_one(Scenario(kind="all_common", seed=2, **q), 0)
    assert a.outputs != b.outputs


def test_fixed_relay_set_is_used():
    relays = generate_network(12, seed=4, prefix="x")
    rec = run_one(Scenario(kind="hidden_service", relays=relays, **QUICK[ScenarioKind.HIDDEN_SERVICE]), 0)
    assert rec.truth["service_relay"].startswith("x")


# command line --------------------------------------------------------------------------


def _moderate_trace(seed):
    rng = np.random.default_rng(seed)
    on = np.repeat(rng.random(120) < 0.7, 5)
    return ThroughputTrace(0.0, 1.0, on * rng.uniform(1e3, 1e4, 600))


def test_cli_gen_network_and_simulate(tmp_path, capsys):
    net = tmp_path / "net.json"
    assert cli.main(["gen-network", "--n-relays", "20", "--seed", "1", "--out", str(net)]) == 0
    assert len(io.load_relays(net)) == 20
    out = tmp_path / "sim"
    code = cli.main(["simulate", "--relays", str(net), "--duration", "10", "--circuits", "2", "--out", str(out)])
    assert code == 0
    traces = sorted((out / "traces").iterdir())
    assert len(traces) == 2
    assert len(io.read_trace(traces[0])) == 100
    assert "capacity violations 0" in capsys.readouterr().out


def test_cli_attack_and_roc(tmp_path, capsys):
    out = tmp_path / "link"
    args = ["attack", "--kind", "link_streams", "--runs", "2", "--duration", "70", "--seed", "3", "--out", str(out)]
    assert cli.main(args) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 3 and summary["runs"] == 2
    first = (out / "roc.csv").read_text()
    assert cli.main(["roc", str(out), "--out", str(tmp_path / "roc.csv")]) == 0
    assert (tmp_path / "roc.csv").read_text() == first
    assert "CER" in capsys.readouterr().out


def test_cli_attack_flags_reach_the_scenario(tmp_path):
    out = tmp_path / "pair"
    args = ["attack", "--kind", "all_common", "--duration", "40", "--window", "20", "--threshold", "0.3",
            "--tick", "0.2", "--out", str(out)]
    assert cli.main(args) == 0
    sc = json.loads((out / "config.json").read_text())["scenario"]
    assert (sc["duration"], sc["min_window"], sc["threshold"], sc["tick"]) == (40.0, 20.0, 0.3, 0.2)


def test_cli_fit_traffic(tmp_path):
    paths = []
    for i in range(3):
        p = tmp_path / f"flow{i}.csv"
        io.write_trace(_moderate_trace(i), p)
        paths.append(str(p))
    model = tmp_path / "model.json"
    assert cli.main(["fit-traffic", *paths, "--out", str(model)]) == 0
    loaded = json.loads(model.read_text())
    assert len(loaded["burst_sizes"]) == 3 and all(g > 0 for g in loaded["gap_times"])


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("name,capacity\n")
    assert cli.main(["simulate", "--relays", str(bad)]) == cli.EXIT_DATA
    assert cli.main(["attack", "--kind", "all_common", "--duration", "100"]) == cli.EXIT_CONFIG
    assert cli.main(["roc", str(tmp_path)]) == cli.EXIT_DATA
    with pytest.raises(SystemExit) as exc:
        cli.main(["attack", "--kind", "bogus"])
    assert exc.value.code == cli.EXIT_CONFIG
    flat = tmp_path / "flat.csv"
    io.write_trace(ThroughputTrace(0.0, 1.0, np.full(700, 5e3)), flat)
    assert cli.main(["fit-traffic", str(flat), "--out", str(tmp_path / "m.json")]) == cli.EXIT_DATA
