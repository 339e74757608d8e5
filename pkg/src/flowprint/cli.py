"""Command-line entry point.

Exit codes: 0 on success, 1 on a configuration error, 2 on a data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .harness import io
from .harness.scenarios import Scenario, ScenarioKind, interactive_curve, link_curves, run_scenario, summarize
from .sim.engine import SimConfig, Simulator
from .sim.network import NetworkState, draw_guard_set, select_path
from .sim.relays import LOW_CAPACITY_CUTOFF, generate_network
from .traffic import BurstGapModel, fit_model

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

# headline metric printed by `attack` for each kind
_HEADLINES = {
    ScenarioKind.ALL_COMMON: ("detection_fraction",),
    ScenarioKind.NONE_COMMON: ("detection_fraction",),
    ScenarioKind.ONE_COMMON: ("detection_fraction",),
    ScenarioKind.IDENTIFY_BOTTLENECK: ("median_entropy", "inclusion_probability"),
    ScenarioKind.GUARD_DISCOVERY: ("guard_top_fraction", "guards_above_median_fraction"),
    ScenarioKind.HIDDEN_SERVICE: ("detection_frequency", "base_rate"),
    ScenarioKind.LINK_STREAMS: ("cer",),
    ScenarioKind.INTERACTIVE_PAIR: ("tpr_at_fpr_0.05", "cer"),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--tick", type=float, default=0.1, help="seconds per simulator step")
    p.add_argument("--out", type=Path, default=None, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowprint", description="Throughput-fingerprinting simulator and attacks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="run bulk client circuits and write their throughput traces")
    _common(p)
    p.add_argument("--relays", type=Path, default=None, help="relay set (CSV or JSON); synthetic if omitted")
    p.add_argument("--n-relays", type=int, default=40)
    p.add_argument("--circuits", type=int, default=1, help="traced client circuits")
    p.add_argument("--background", type=int, default=None, help="background circuits (default 2 per relay)")

    p = sub.add_parser("attack", help="run a seeded scenario batch and write its results")
    _common(p)
    p.add_argument("--kind", required=True, choices=[k.value for k in ScenarioKind])
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--threshold", type=float, default=None, help="correlation threshold")
    p.add_argument("--window", type=float, default=None, help="minimum correlation window, seconds")
    p.add_argument("--relays", type=Path, default=None, help="relay set (CSV or JSON); synthetic if omitted")
    p.add_argument("--traffic-model", type=Path, default=None, help="burst/gap model JSON for interactive pairs")
    p.add_argument("--keep-traces", action="store_true", help="also write every measured trace")

    p = sub.add_parser("roc", help="recompute error-rate curves from a results directory")
    p.add_argument("results", type=Path)
    p.add_argument("--out", type=Path, default=None, help="CSV file for the curve points")

    p = sub.add_parser("gen-network", help="write a synthetic relay set")
    p.add_argument("--n-relays", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guard-fraction", type=float, default=1.0)
    p.add_argument("--exit-fraction", type=float, default=1.0)
    p.add_argument("--out", type=Path, required=True, help=".csv or .json")

    p = sub.add_parser("fit-traffic", help="fit a burst/gap model to trace CSV files")
    p.add_argument("traces", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True, help="model JSON")
    return parser


def _simulate(args) -> int:
    relays = io.load_relays(args.relays) if args.relays else generate_network(args.n_relays, seed=args.seed)
    duration = 600.0 if args.duration is None else args.duration
    if duration <= 0 or args.circuits < 1:
        raise ConfigurationError("duration and circuits must be positive")
    net = NetworkState(relays)
    background = 2 * len(relays) if args.background is None else args.background
    sim = Simulator(net, SimConfig(tick=args.tick, seed=args.seed, background_circuits=background))
    rng = np.random.default_rng([args.seed, 1])
    cids = []
    for _ in range(args.circuits):
        cid = net.add_circuit(select_path(net, draw_guard_set(net, sim.config.guard_set_size, rng), rng)).id
        sim.start_bulk(cid, at=0.0)
        sim.watch(cid)
        cids.append(cid)
    sim.run_until(duration)
    out = args.out or Path("simulation")
    (out / "traces").mkdir(parents=True, exist_ok=True)
    io.save_relays(relays, out / "relays.csv")
    paths = {}
    for cid in cids:
        io.write_trace(sim.trace(cid), out / "traces" / f"circuit{cid}.csv")
        paths[str(cid)] = list(net.circuits[cid].path)
    (out / "circuits.json").write_text(json.dumps(paths, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(cids)} traces to {out / 'traces'}; capacity violations {sim.capacity_violations}")
    return EXIT_OK


def _attack(args) -> int:
    kwargs = dict(kind=args.kind, runs=args.runs, seed=args.seed, tick=args.tick, keep_traces=args.keep_traces)
    if args.duration is not None:
        kwargs["duration"] = args.duration
    if args.threshold is not None:
        kwargs["threshold"] = args.threshold
    if args.window is not None:
        kwargs["min_window"] = args.window
    if args.relays is not None:
        kwargs["relays"] = io.load_relays(args.relays)
    if args.traffic_model is not None:
        kwargs["traffic_model"] = BurstGapModel.load(args.traffic_model)
    if args.duration is not None:
        # linkability is scored at the standard lengths that fit in the run
        kwargs["link_durations"] = tuple(d for d in (120.0, 300.0) if d <= args.duration) or (args.duration,)
    s = Scenario(**kwargs)
    records, summary = run_scenario(s)
    out = io.write_results(args.out or Path(f"results-{s.kind.value}-{s.seed}"), s, records, summary)
    head = {k: summary[k] for k in _HEADLINES[s.kind]}
    print(f"{s.kind.value}: {json.dumps(head, sort_keys=True)} -> {out}")
    return EXIT_OK


def _roc(args) -> int:
    s = io.load_scenario(args.results)
    records = io.read_records(Path(args.results) / "records.csv")
    if not records:
        raise DataError(f"{args.results}: no records")
    out = args.out or Path(args.results) / "roc.csv"
    if s.kind is ScenarioKind.LINK_STREAMS:
        curves = link_curves(s, records)
        rows = [[float(d), t[0], t[1], fpr, fnr] for d, c in curves.items() for t, fpr, fnr in c.points]
        io.write_table(out, ["duration_sec", "r_threshold", "e_threshold", "fpr", "fnr"], rows)
        for d, c in curves.items():
            print(f"duration {d} s: CER {c.cer:.4f}")
    elif s.kind is ScenarioKind.INTERACTIVE_PAIR:
        c = interactive_curve(records)
        io.write_table(out, ["threshold", "fpr", "fnr"], [[t[0], fpr, fnr] for t, fpr, fnr in c.points])
        print(f"CER {c.cer:.4f}; TPR at FPR <= 0.05: {c.tpr_at_fpr(0.05):.4f}")
    else:
        raise ConfigurationError(f"no error-rate curve for scenario kind {s.kind.value}")
    summary = summarize(s, records)
    print(f"summary recomputed from records; config hash {summary['config_hash']}")
    return EXIT_OK


def _gen_network(args) -> int:
    relays = generate_network(
        args.n_relays, seed=args.seed, guard_fraction=args.guard_fraction, exit_fraction=args.exit_fraction
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    io.save_relays(relays, args.out)
    low = sum(r.capacity < LOW_CAPACITY_CUTOFF for r in relays) / len(relays)
    print(f"wrote {len(relays)} relays to {args.out}; {low:.1%} below 100 KB/s")
    return EXIT_OK


def _fit_traffic(args) -> int:
    model = fit_model([io.read_trace(p) for p in args.traces])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"fitted {len(model.burst_sizes)} flows; mean burst {np.mean(model.burst_sizes):.0f} B, "
          f"mean gap {np.mean(model.gap_times):.2f} s -> {args.out}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _simulate,
    "attack": _attack,
    "roc": _roc,
    "gen-network": _gen_network,
    "fit-traffic": _fit_traffic,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
