"""Seeded experiment scenarios and their summaries.

Every run derives its own seed from ``(scenario seed, run index)``, builds a
fresh network and simulator, and reports plain JSON-ready outputs. Summaries
are computed from those outputs alone, so they can be recomputed from
persisted records.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .. import attacks
from ..errors import ConfigurationError, UndefinedCorrelationError
from ..sim.engine import SimConfig, Simulator
from ..sim.network import NetworkState, add_probe_circuit, draw_guard_set, select_path
from ..sim.relays import Relay, generate_network
from ..stats import ThroughputTrace, pearson, windowed_max_correlation
from ..traffic import BurstGapModel, classify_utilization, generate_interactive, synthetic_model


class ScenarioKind(str, enum.Enum):
    ALL_COMMON = "all_common"
    NONE_COMMON = "none_common"
    ONE_COMMON = "one_common"
    IDENTIFY_BOTTLENECK = "identify_bottleneck"
    GUARD_DISCOVERY = "guard_discovery"
    HIDDEN_SERVICE = "hidden_service"
    LINK_STREAMS = "link_streams"
    INTERACTIVE_PAIR = "interactive_pair"


THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(21))

# per-kind defaults; any Scenario field left as None takes its value from here
_DEFAULTS: dict[ScenarioKind, dict[str, Any]] = {
    ScenarioKind.ALL_COMMON: dict(duration=600.0, threshold=0.5, min_window=300.0, eval_at=300.0),
    ScenarioKind.NONE_COMMON: dict(duration=600.0, threshold=0.5, min_window=300.0, eval_at=300.0),
    ScenarioKind.ONE_COMMON: dict(duration=300.0, threshold=0.4, min_window=200.0, eval_at=300.0),
    ScenarioKind.IDENTIFY_BOTTLENECK: dict(
        duration=600.0, threshold=0.4, min_window=300.0, eval_at=600.0, n_relays=25, universe=25
    ),
    ScenarioKind.GUARD_DISCOVERY: dict(
        duration=300.0, threshold=0.4, min_window=200.0, eval_at=300.0, n_relays=25, universe=25, guard_set_size=1, guard_clients=10
    ),
    ScenarioKind.HIDDEN_SERVICE: dict(duration=600.0, threshold=0.4, min_window=300.0, eval_at=600.0),
    ScenarioKind.LINK_STREAMS: dict(duration=300.0, threshold=0.4, min_window=60.0, eval_at=300.0),
    ScenarioKind.INTERACTIVE_PAIR: dict(duration=600.0, threshold=0.4, min_window=300.0, eval_at=600.0),
}


@dataclass
class Scenario:
    kind: ScenarioKind
    runs: int = 1
    duration: Optional[float] = None  # seconds of measurement after the probe offset
    seed: int = 0
    threshold: Optional[float] = None
    min_window: Optional[float] = None
    eval_at: Optional[float] = None  # measurement length the headline verdict uses
    tick: float = 0.1
    resolution: float = 1.0  # seconds per sample for correlation
    probe_offset: float = 30.0
    n_relays: Optional[int] = None
    universe: Optional[int] = None
    universe_weighting: str = "capacity"  # how universe relays are drawn: "capacity" or "uniform"
    relays: Optional[list[Relay]] = None  # fixed relay set instead of a synthetic one
    background_circuits: Optional[int] = None
    background_on_mean: float = 8.0
    background_off_mean: float = 8.0
    background_lifetime: float = 600.0
    event_grid: float = 3.0
    guard_set_size: Optional[int] = None
    reformulations: int = 50
    guard_clients: Optional[int] = None  # extra background clients sharing the target's guards
    path_length: int = attacks.RENDEZVOUS_HOPS
    ack_delay: float = 0.6
    ack_jitter: float = 0.3
    exclusivity_threshold: float = attacks.DEFAULT_EXCLUSIVITY
    link_durations: tuple = (120.0, 300.0)
    elimination_interval: float = 1.0
    traffic_model: Optional[BurstGapModel] = None
    keep_traces: bool = False

    def __post_init__(self):
        self.kind = ScenarioKind(self.kind)
        eval_defaulted = self.eval_at is None
        for key, value in _DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if eval_defaulted:
            self.eval_at = min(self.eval_at, self.duration)
        if self.n_relays is None:
            self.n_relays = 40
        if self.background_circuits is None:
            self.background_circuits = 2 * self.n_relays
        if self.guard_set_size is None:
            self.guard_set_size = 1
        if self.guard_clients is None:
            self.guard_clients = 0
        self.validate()

    def validate(self) -> None:
        if self.runs < 1:
            raise ConfigurationError("runs must be at least 1")
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        if self.min_window is not None and self.duration < self.min_window:
            raise ConfigurationError(f"duration {self.duration:g} s is shorter than the window {self.min_window:g} s")
        if not 0 < self.eval_at <= self.duration:
            raise ConfigurationError("eval_at must lie in (0, duration]")
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigurationError("threshold must lie in [-1, 1]")
        if self.tick <= 0 or self.resolution < self.tick:
            raise ConfigurationError("need 0 < tick <= resolution")
        if self.probe_offset < 0:
            raise ConfigurationError("probe offset must be non-negative")
        n = len(self.relays) if self.relays is not None else self.n_relays
        if n < 3:
            raise ConfigurationError("a scenario needs at least three relays")
        if self.universe is not None and self.universe > n:
            raise ConfigurationError("universe larger than the relay set")
        if self.universe_weighting not in ("capacity", "uniform"):
            raise ConfigurationError("universe_weighting must be 'capacity' or 'uniform'")
        if self.guard_clients < 0:
            raise ConfigurationError("guard_clients must be non-negative")
        if self.kind is ScenarioKind.GUARD_DISCOVERY and self.reformulations < 1:
            raise ConfigurationError("guard discovery needs at least one reformulation")
        if self.kind is ScenarioKind.HIDDEN_SERVICE and not 1 <= self.path_length <= 8:
            raise ConfigurationError("rendezvous path length must lie in [1, 8]")
        if self.kind is ScenarioKind.LINK_STREAMS:
            if max(self.link_durations) > self.duration:
                raise ConfigurationError("link durations must not exceed the scenario duration")
            # measurement starts after the ramp, so a run yields duration - ramp seconds
            usable = min(min(self.link_durations), self.duration - SimConfig.slow_start_ramp)
            if usable < attacks.MIN_LINK_OVERLAP:
                raise ConfigurationError(
                    f"each link duration must leave {attacks.MIN_LINK_OVERLAP:g} s after the "
                    f"{SimConfig.slow_start_ramp:g} s ramp"
                )
        SimConfig(**self._sim_kwargs(0))

    def _sim_kwargs(self, seed: int) -> dict:
        return dict(
            tick=self.tick,
            seed=seed,
            background_circuits=self.background_circuits,
            guard_set_size=max(1, min(3, self.guard_set_size)),
            background_on_mean=self.background_on_mean,
            background_off_mean=self.background_off_mean,
            background_lifetime=self.background_lifetime,
            event_grid=self.event_grid,
            ack_delay=self.ack_delay,
            ack_jitter=self.ack_jitter,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["relays"] = None if self.relays is None else [asdict(r) for r in self.relays]
        d["traffic_model"] = None if self.traffic_model is None else json.loads(self.traffic_model.to_json())
        d["link_durations"] = list(self.link_durations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        if d.get("relays") is not None:
            d["relays"] = [Relay(**r) for r in d["relays"]]
        if d.get("traffic_model") is not None:
            d["traffic_model"] = BurstGapModel.from_json(json.dumps(d["traffic_model"]))
        if "link_durations" in d:
            d["link_durations"] = tuple(d["link_durations"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    scenario_id: str
    run_index: int
    seed: int
    truth: dict
    outputs: dict
    wall_clock: float = 0.0
    traces: dict = field(default_factory=dict)  # name -> ThroughputTrace


def run_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


# building blocks ----------------------------------------------------------------


class _Run:
    """One seeded simulation with helpers shared by the scenario kinds."""

    def __init__(self, s: Scenario, seed: int, relays: Optional[list[Relay]] = None):
        self.s = s
        self.seed = seed
        self.rng = np.random.default_rng([seed, 1])
        relays = relays if relays is not None else self._relays()
        self.net = NetworkState(relays)
        self.sim = Simulator(self.net, SimConfig(**s._sim_kwargs(seed)))

    def _relays(self) -> list[Relay]:
        s = self.s
        if s.relays is not None:
            return list(s.relays)
        return generate_network(s.n_relays, seed=self.seed)

    @property
    def probe_start(self) -> float:
        return self.s.probe_offset

    def client_circuit(self, guards=None, path=None):
        if path is None:
            guards = guards or draw_guard_set(self.net, self.s.guard_set_size, self.rng)
            path = select_path(self.net, guards, self.rng)
        return self.net.add_circuit(path)

    def disjoint_circuit(self, avoid) -> Any:
        avoid = set(avoid)
        pool = [r for r, rel in self.net.relays.items() if r not in avoid]
        guards = [r for r in pool if self.net.relays[r].guard_eligible]
        for _ in range(1000):
            path = select_path(self.net, guards, self.rng)
            if not avoid & set(path):
                return self.net.add_circuit(path)
        raise ConfigurationError("could not find a path disjoint from the target")

    def bulk(self, cid: int, at: float = 0.0) -> None:
        self.sim.start_bulk(cid, at=at)
        self.sim.watch(cid)

    def measure(self, cid: int, length: Optional[float] = None) -> ThroughputTrace:
        """Trace of ``cid`` from the end of the probes' ramp, resampled."""
        t0 = self.probe_start + self.sim.config.slow_start_ramp
        t1 = self.probe_start + (self.s.duration if length is None else length)
        return self.sim.trace(cid).slice_time(t0, t1).resample(self.s.resolution)

    def finish(self) -> dict:
        self.sim.run_until(self.probe_start + self.s.duration)
        return {"capacity_violations": self.sim.capacity_violations, "max_utilization": self.sim.max_utilization}


def _windowed(x: ThroughputTrace, y: ThroughputTrace, window: float) -> float:
    try:
        return windowed_max_correlation(x, y, window)[0]
    except UndefinedCorrelationError:
        return math.nan


def _eval_points(s: Scenario) -> list[float]:
    step = 60.0
    pts = [step * k for k in range(1, int(s.duration // step) + 1)]
    if s.eval_at not in pts:
        pts.append(s.eval_at)
    return sorted(p for p in pts if p > s.tick)


def _clip(tr: ThroughputTrace, t_end: float) -> ThroughputTrace:
    return tr.slice_time(tr.start, min(tr.end, t_end))


def _r_series(s: Scenario, run: _Run, target: ThroughputTrace, probe: ThroughputTrace) -> dict:
    out = {}
    for T in _eval_points(s):
        end = run.probe_start + T
        out[f"{T:g}"] = _windowed(_clip(target, end), _clip(probe, end), s.min_window)
    return out


def _nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v


# scenario kinds -------------------------------------------------------------------


def _pair(s: Scenario, seed: int, common: bool) -> tuple[dict, dict, dict]:
    run = _Run(s, seed)
    target = run.client_circuit()
    probe = run.client_circuit(path=target.path) if common else run.disjoint_circuit(target.path)
    run.bulk(target.id)
    run.bulk(probe.id, at=run.probe_start)
    checks = run.finish()
    tt, pt = run.measure(target.id), run.measure(probe.id)
    rs = _r_series(s, run, tt, pt)
    r = rs[f"{s.eval_at:g}"]
    truth = {"common_relays": sorted(set(target.path) & set(probe.path)), "path": list(target.path)}
    out = {"r": {k: _nan_to_none(v) for k, v in rs.items()}, "r_eval": _nan_to_none(r), "shared": bool(r > s.threshold)}
    out.update(checks)
    return truth, out, {"target": tt, "probe": pt}


def _one_common(s: Scenario, seed: int):
    run = _Run(s, seed)
    target = run.client_circuit()
    run.bulk(target.id)
    run.sim.track_bottleneck(target.id)
    probes = {}
    for rid in target.path:
        cid = add_probe_circuit(run.net, rid)
        run.bulk(cid, at=run.probe_start)
        probes[rid] = cid
    checks = run.finish()
    tt = run.measure(target.id)
    per_relay = {rid: _r_series(s, run, tt, run.measure(cid)) for rid, cid in probes.items()}
    series = {}
    for key in per_relay[target.path[0]]:
        vals = [per_relay[r][key] for r in target.path if not math.isnan(per_relay[r][key])]
        series[key] = max(vals) if vals else math.nan
    r = series[f"{s.eval_at:g}"]
    bn = run.sim.bottleneck(target.id, run.probe_start, run.probe_start + s.eval_at)
    truth = {"path": list(target.path), "bottleneck": bn}
    out = {
        "r": {k: _nan_to_none(v) for k, v in series.items()},
        "r_eval": _nan_to_none(r),
        "shared": bool(r > s.threshold),
        "per_relay": {rid: _nan_to_none(v[f"{s.eval_at:g}"]) for rid, v in per_relay.items()},
    }
    out.update(checks)
    traces = {"target": tt, **{f"probe_{rid}": run.measure(cid) for rid, cid in probes.items()}}
    return truth, out, traces


def _universe_relays(s: Scenario, seed: int) -> list[Relay]:
    """Relays drawn from a large synthetic population."""
    if s.relays is not None:
        return list(s.relays)
    pool = generate_network(max(10 * s.universe, 200), seed=seed)
    rng = np.random.default_rng([seed, 2])
    w = np.array([r.capacity for r in pool]) if s.universe_weighting == "capacity" else np.ones(len(pool))
    idx = rng.choice(len(pool), size=s.universe, replace=False, p=w / w.sum())
    return [pool[i] for i in sorted(idx)]


def _probe_all(s: Scenario, run: _Run, target, universe: list[str]):
    """Start a probe through every relay; returns relay -> probe circuit id."""
    probes = {}
    for rid in universe:
        cid = add_probe_circuit(run.net, rid)
        run.bulk(cid, at=run.probe_start)
        probes[rid] = cid
    return probes


def _correlated(s: Scenario, run: _Run, tt: ThroughputTrace, probes: dict) -> tuple[list[str], dict]:
    scores = {}
    for rid, cid in sorted(probes.items()):
        scores[rid] = _windowed(tt, run.measure(cid), s.min_window)
    return [rid for rid, r in scores.items() if r > s.threshold], scores


def _identify(s: Scenario, seed: int):
    run = _Run(s, seed, relays=_universe_relays(s, seed))
    universe = sorted(run.net.relays)
    target = run.client_circuit()
    run.bulk(target.id)
    run.sim.track_bottleneck(target.id)
    probes = _probe_all(s, run, target, universe)
    checks = run.finish()
    tt = run.measure(target.id)
    shared, scores = _correlated(s, run, tt, probes)
    bn = run.sim.bottleneck(target.id, run.probe_start, run.probe_start + s.duration)

    # throughput elimination over the raw probe traces, sub-interval by sub-interval
    full_target = run.sim.trace(target.id).slice_time(0.0, run.probe_start + s.duration)
    ramp = run.sim.config.slow_start_ramp
    means = {}
    for rid, cid in probes.items():
        ptr = run.sim.trace(cid).slice_time(run.probe_start, run.probe_start + s.duration)
        means[rid] = attacks.subinterval_means(ptr, s.elimination_interval, skip=ramp)
    target_since_probe = full_target.slice_time(run.probe_start + ramp, full_target.end)
    elimination = {}
    for k in range(1, 7):
        elapsed = 10.0 * k
        surv = _survivors(target_since_probe, means, run.probe_start + elapsed)
        elimination[f"{elapsed:g}"] = sorted(surv)
    truth = {"path": list(target.path), "bottleneck": bn}
    out = {
        "candidates": shared,
        "scores": {k: _nan_to_none(v) for k, v in scores.items()},
        "universe": universe,
        "survivors": elimination,
        "target_mean": full_target.slice_time(run.probe_start, full_target.end).mean(),
    }
    out.update(checks)
    traces = {"target": tt} if not s.keep_traces else {"target": tt, **{f"probe_{r}": run.measure(c) for r, c in probes.items()}}
    return truth, out, traces


def _survivors(target: ThroughputTrace, means: dict, until: float) -> set[str]:
    """Survivors once every sub-interval ending by absolute time ``until`` is counted."""
    return attacks.eliminate_by_throughput(target, means, until - target.start)


def _guard(s: Scenario, seed: int):
    relays = _universe_relays(s, seed)
    rng = np.random.default_rng([seed, 3])
    net0 = NetworkState(relays)
    guards = draw_guard_set(net0, s.guard_set_size, rng)
    posteriors = []
    truth_bn = []
    checks = {"capacity_violations": 0, "max_utilization": 0.0}
    for k in range(s.reformulations):
        run = _Run(s, run_seed(seed, k + 1), relays=relays)
        universe = sorted(run.net.relays)
        target = run.client_circuit(guards=guards)
        if s.guard_clients:
            run.sim.add_background(s.guard_clients, guards=guards)
        run.bulk(target.id)
        run.sim.track_bottleneck(target.id)
        probes = _probe_all(s, run, target, universe)
        c = run.finish()
        checks["capacity_violations"] += c["capacity_violations"]
        checks["max_utilization"] = max(checks["max_utilization"], c["max_utilization"])
        shared, _ = _correlated(s, run, run.measure(target.id), probes)
        posteriors.append(sorted(shared))
        truth_bn.append(run.sim.bottleneck(target.id, run.probe_start, run.probe_start + s.duration))
    board = attacks.GuardScoreboard({r.id: 0 for r in relays})
    for cand in posteriors:
        board.add(attacks.BottleneckPosterior.from_set(cand, 1.0, len(relays)))
    ranking = board.ranking()
    rank_of = {rid: i for i, (rid, _) in enumerate(ranking)}
    counts = [c for _, c in ranking]
    non_guard = [board.counts[r.id] for r in relays if r.id not in guards]
    truth = {"guards": guards, "bottlenecks": truth_bn}
    out = {
        "sets": posteriors,
        "ranking": ranking,
        "guard_ranks": [rank_of[g] for g in guards],
        "guard_top": ranking[0][0] in guards and (len(counts) < 2 or counts[0] > counts[1] or len(guards) > 1),
        "guards_above_median": all(board.counts[g] > float(np.median(non_guard)) for g in guards),
    }
    out.update(checks)
    return truth, out, {}


def _hidden(s: Scenario, seed: int):
    run = _Run(s, seed)
    rng = run.rng
    ids = sorted(run.net.relays)
    path = [ids[i] for i in rng.choice(len(ids), size=s.path_length, replace=False)]
    service_relay = path[-1]
    circ = run.net.add_circuit(path, kind="rendezvous")
    run.bulk(circ.id)
    run.sim.track_bottleneck(circ.id)
    probe = add_probe_circuit(run.net, service_relay)
    run.bulk(probe, at=run.probe_start)
    checks = run.finish()
    tt, pt = run.measure(circ.id), run.measure(probe)
    v = attacks.detect_hidden_service(tt, pt, s.threshold, s.min_window, s.path_length, resolution=None)
    bn = run.sim.bottleneck(circ.id, run.probe_start, run.probe_start + s.duration)
    truth = {"path": path, "service_relay": service_relay, "bottleneck": bn}
    out = {"r": _nan_to_none(v.verdict.r_max), "shared": v.shared, "base_rate": v.base_rate}
    out.update(checks)
    return truth, out, {"target": tt, "probe": pt}


def _link(s: Scenario, seed: int):
    out: dict[str, Any] = {}
    traces = {}
    truth = {}
    for label in ("same", "different"):
        run = _Run(s, run_seed(seed, 1 if label == "same" else 2))
        if label == "same":
            circ = run.client_circuit()
            offsets = list(run.rng.uniform(0.0, 2.0, size=2))
            sids = run.sim.attach_streams(circ.id, 2, offsets=offsets)
            run.sim.start_bulk(circ.id, at=run.probe_start)
            truth["same_path"] = list(circ.path)
        else:
            a = run.client_circuit()
            b = _exit_sharing_circuit(run, a)
            offsets = list(run.rng.uniform(0.0, 2.0, size=2))
            sids = []
            for circ, off in ((a, offsets[0]), (b, offsets[1])):
                sids += run.sim.attach_streams(circ.id, 1, offsets=[off])
                run.sim.start_bulk(circ.id, at=run.probe_start)
            truth["different_paths"] = [list(a.path), list(b.path)]
        for sid in sids:
            run.sim.watch_stream(sid)
        checks = run.finish()
        t0 = run.probe_start + run.sim.config.slow_start_ramp
        xs = [run.sim.stream_trace(sid).slice_time(t0, run.probe_start + s.duration) for sid in sids]
        scores = {}
        for d in s.link_durations:
            r, e, bucket = attacks.link_scores(xs[0].slice_time(t0, t0 + d), xs[1].slice_time(t0, t0 + d))
            scores[f"{d:g}"] = {"r": _nan_to_none(r), "e": _nan_to_none(e), "bucket": _nan_to_none(bucket)}
        out[label] = scores
        out.setdefault("capacity_violations", 0)
        out["capacity_violations"] += checks["capacity_violations"]
        out["max_utilization"] = max(out.get("max_utilization", 0.0), checks["max_utilization"])
        traces[f"{label}_x"], traces[f"{label}_y"] = xs
    return truth, out, traces


def _exit_sharing_circuit(run: _Run, a):
    """A second circuit whose only relay in common with ``a`` is the exit."""
    exit_relay = a.path[-1]
    guards = [r for r, rel in run.net.relays.items() if rel.guard_eligible and r not in a.path]
    for _ in range(1000):
        path = select_path(run.net, guards, run.rng)
        path = (*path[:-1], exit_relay)
        if len(set(path)) == len(path) and not set(path[:-1]) & set(a.path):
            return run.net.add_circuit(path)
    raise ConfigurationError("could not build a second circuit sharing only the exit")


def _interactive(s: Scenario, seed: int):
    model = s.traffic_model or synthetic_model()
    out: dict[str, Any] = {}
    traces = {}
    truth = {}
    for label, common in (("common", True), ("disjoint", False)):
        run = _Run(s, run_seed(seed, 1 if common else 2))
        victim = run.client_circuit()
        attacker = run.client_circuit(path=victim.path) if common else run.disjoint_circuit(victim.path)
        prof = generate_interactive(model, run.probe_start + s.duration, run.rng)
        run.sim.start_flow(victim.id, prof, at=0.0)
        run.sim.watch(victim.id)
        run.bulk(attacker.id, at=run.probe_start)
        checks = run.finish()
        vt, at = run.measure(victim.id), run.measure(attacker.id)
        t0 = run.probe_start + run.sim.config.slow_start_ramp
        t1 = run.probe_start + s.duration
        raw_v = run.sim.trace(victim.id).slice_time(t0, t1)
        raw_a = run.sim.trace(attacker.id).slice_time(t0, t1)
        r = attacks.active_correlation(raw_v, raw_a, s.resolution)
        cls, frac = classify_utilization(run.sim.trace(victim.id))
        out[label] = {"r": _nan_to_none(r), "utilization": frac, "class": cls.value}
        out.setdefault("capacity_violations", 0)
        out["capacity_violations"] += checks["capacity_violations"]
        out["max_utilization"] = max(out.get("max_utilization", 0.0), checks["max_utilization"])
        truth[f"{label}_paths"] = [list(victim.path), list(attacker.path)]
        traces[f"{label}_victim"], traces[f"{label}_attacker"] = vt, at
    return truth, out, traces


_RUNNERS = {
    ScenarioKind.ALL_COMMON: lambda s, seed: _pair(s, seed, True),
    ScenarioKind.NONE_COMMON: lambda s, seed: _pair(s, seed, False),
    ScenarioKind.ONE_COMMON: _one_common,
    ScenarioKind.IDENTIFY_BOTTLENECK: _identify,
    ScenarioKind.GUARD_DISCOVERY: _guard,
    ScenarioKind.HIDDEN_SERVICE: _hidden,
    ScenarioKind.LINK_STREAMS: _link,
    ScenarioKind.INTERACTIVE_PAIR: _interactive,
}


def run_one(s: Scenario, index: int) -> RunRecord:
    seed = run_seed(s.seed, index)
    t = time.perf_counter()
    truth, outputs, traces = _RUNNERS[s.kind](s, seed)
    return RunRecord(
        scenario_id=f"{s.kind.value}-{s.config_hash()}",
        run_index=index,
        seed=seed,
        truth=truth,
        outputs=_jsonable(outputs),
        wall_clock=time.perf_counter() - t,
        traces=traces if s.keep_traces else {},
    )


def run_scenario(s: Scenario) -> tuple[list[RunRecord], dict]:
    s.validate()
    records = [run_one(s, i) for i in range(s.runs)]
    return records, summarize(s, records)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return None if math.isnan(f) else f
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


# summaries ---------------------------------------------------------------------


def _r_or_nan(v) -> float:
    return math.nan if v is None else float(v)


def _fraction_above(values, threshold: float) -> float:
    v = np.array([_r_or_nan(x) for x in values])
    return float(np.mean(np.nan_to_num(v, nan=-np.inf) > threshold)) if v.size else math.nan


def _cdf(values) -> list[list[float]]:
    v = sorted(x for x in (_r_or_nan(y) for y in values) if not math.isnan(x))
    n = len(v)
    return [[x, (i + 1) / n] for i, x in enumerate(v)]


def _pair_summary(s: Scenario, records: list[RunRecord]) -> dict:
    evals = list(records[0].outputs["r"])
    detection = {
        t: {f"{thr:g}": _fraction_above([r.outputs["r"][t] for r in records], thr) for thr in THRESHOLD_GRID}
        for t in evals
    }
    at_eval = [r.outputs["r_eval"] for r in records]
    return {
        "detection_fraction": _fraction_above(at_eval, s.threshold),
        "fraction_above": {f"{thr:g}": _fraction_above(at_eval, thr) for thr in THRESHOLD_GRID},
        "detection_by_duration": detection,
        "correlation_cdf": _cdf(at_eval),
    }


def _identify_summary(s: Scenario, records: list[RunRecord]) -> dict:
    labelled = [(r.outputs["candidates"], r.truth["bottleneck"]) for r in records]
    n = len(records[0].outputs["universe"])
    entropies, sizes = [], []
    for i, r in enumerate(records):
        # inclusion probability estimated from the other runs only
        p = attacks.calibrate_inclusion(labelled[:i] + labelled[i + 1 :]) if len(records) > 1 else 1.0
        post = attacks.BottleneckPosterior.from_set(r.outputs["candidates"], p, n)
        entropies.append(post.entropy_bits)
        sizes.append(len(r.outputs["candidates"]))
    prior = math.log2(n)
    elimination = {}
    for key in records[0].outputs["survivors"]:
        ent = [attacks.set_entropy(r.outputs["survivors"][key], n) for r in records]
        kept = [r.truth["bottleneck"] in r.outputs["survivors"][key] for r in records]
        elimination[key] = {
            "mean_entropy": float(np.mean(ent)),
            "entropy_drop": 1.0 - float(np.mean(ent)) / prior,
            "bottleneck_kept": float(np.mean(kept)),
        }
    return {
        "prior_entropy": prior,
        "inclusion_probability": attacks.calibrate_inclusion(labelled),
        "median_entropy": float(np.median(entropies)),
        "mean_set_size": float(np.mean(sizes)),
        "entropy_cdf": _cdf(entropies),
        "elimination": elimination,
    }


def _guard_summary(s: Scenario, records: list[RunRecord]) -> dict:
    return {
        "guard_top_fraction": float(np.mean([r.outputs["guard_top"] for r in records])),
        "guards_above_median_fraction": float(np.mean([r.outputs["guards_above_median"] for r in records])),
        "guard_ranks": [r.outputs["guard_ranks"] for r in records],
        "scoreboards": [r.outputs["ranking"] for r in records],
    }


def _hidden_summary(s: Scenario, records: list[RunRecord]) -> dict:
    shared = [r.outputs["shared"] for r in records]
    hit = [r.truth["bottleneck"] == r.truth["service_relay"] for r in records]
    return {
        "detection_frequency": float(np.mean(shared)),
        "base_rate": 1.0 / s.path_length,
        "service_bottleneck_frequency": float(np.mean(hit)),
        "correlation_cdf": _cdf([r.outputs["r"] for r in records]),
    }


def _curve_dict(curve: attacks.ErrorRateCurve) -> dict:
    return {"cer": curve.cer, "points": [[list(t), fpr, fnr] for t, fpr, fnr in curve.points]}


def link_curves(s: Scenario, records: list[RunRecord]) -> dict[str, attacks.ErrorRateCurve]:
    out = {}
    for d in (f"{d:g}" for d in s.link_durations):
        rs, es, labels = [], [], []
        for r in records:
            for label in ("same", "different"):
                sc = r.outputs[label][d]
                rs.append(_r_or_nan(sc["r"]))
                es.append(-math.inf if sc["e"] is None else sc["e"])
                labels.append(label == "same")
        out[d] = attacks.joint_threshold_curve(rs, es, labels, attacks.R_GRID, attacks.E_GRID)
    return out


def _link_summary(s: Scenario, records: list[RunRecord]) -> dict:
    curves = link_curves(s, records)
    return {
        "cer": {d: c.cer for d, c in curves.items()},
        "r_threshold": {d: c.points[0][0][0] for d, c in curves.items()},
        "curves": {d: _curve_dict(c) for d, c in curves.items()},
    }


def interactive_curve(records: list[RunRecord]) -> attacks.ErrorRateCurve:
    scores = [r.outputs[k]["r"] for r in records for k in ("common", "disjoint")]
    labels = [k == "common" for _ in records for k in ("common", "disjoint")]
    grid = np.round(np.linspace(-1.0, 1.0, 201), 10)
    return attacks.score_curve([_r_or_nan(v) for v in scores], labels, grid)


def _interactive_summary(s: Scenario, records: list[RunRecord]) -> dict:
    curve = interactive_curve(records)
    classes = [r.outputs[k]["class"] for r in records for k in ("common", "disjoint")]
    return {
        "tpr_at_fpr_0.05": curve.tpr_at_fpr(0.05),
        "tpr_at_fpr_0": curve.tpr_at_fpr(0.0),
        "cer": curve.cer,
        "roc": [[fpr, tpr] for fpr, tpr in curve.roc],
        "moderate_fraction": classes.count("moderate") / len(classes),
    }


_SUMMARIES = {
    ScenarioKind.ALL_COMMON: _pair_summary,
    ScenarioKind.NONE_COMMON: _pair_summary,
    ScenarioKind.ONE_COMMON: _pair_summary,
    ScenarioKind.IDENTIFY_BOTTLENECK: _identify_summary,
    ScenarioKind.GUARD_DISCOVERY: _guard_summary,
    ScenarioKind.HIDDEN_SERVICE: _hidden_summary,
    ScenarioKind.LINK_STREAMS: _link_summary,
    ScenarioKind.INTERACTIVE_PAIR: _interactive_summary,
}


def summarize(s: Scenario, records: list[RunRecord]) -> dict:
    """Aggregate metrics of a batch; independent of wall-clock time."""
    if not records:
        raise ConfigurationError("no runs to summarize")
    out = {
        "kind": s.kind.value,
        "seed": s.seed,
        "runs": len(records),
        "config_hash": s.config_hash(),
        "capacity_violations": int(sum(r.outputs["capacity_violations"] for r in records)),
        "max_utilization": float(max(r.outputs["max_utilization"] for r in records)),
    }
    out.update(_SUMMARIES[s.kind](s, records))
    return _jsonable(out)
