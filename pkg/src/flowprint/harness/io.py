"""Relay sets, trace CSVs and result directories on disk."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from ..errors import ConfigurationError, DataError
from ..sim.relays import Relay
from ..stats import ThroughputTrace
from .scenarios import RunRecord, Scenario, ScenarioKind, interactive_curve, link_curves

RELAY_FIELDS = ("name", "capacity_bytes_per_sec", "guard_eligible", "exit_eligible")
TRACE_HEADER = ("t_sec", "bytes_per_sec")
RATE_DIGITS = 6
RECORD_FIELDS = ("scenario_id", "run_index", "seed", "wall_clock", "truth", "outputs")

PathLike = Union[str, Path]


# relay sets ---------------------------------------------------------------------


def _flag(value, where: str) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes"):
        return True
    if text in ("0", "false", "no"):
        return False
    raise DataError(f"{where}: expected a boolean, got {value!r}")


def _relay(row: dict, where: str) -> Relay:
    name = str(row["name"]).strip()
    if not name:
        raise DataError(f"{where}, field name: empty relay name")
    try:
        capacity = float(row["capacity_bytes_per_sec"])
    except (TypeError, ValueError):
        raise DataError(f"{where}, field capacity_bytes_per_sec: not a number: {row['capacity_bytes_per_sec']!r}")
    if not (math.isfinite(capacity) and capacity > 0):
        raise DataError(f"{where}, field capacity_bytes_per_sec: must be a positive number, got {capacity!r}")
    try:
        return Relay(
            id=name,
            name=name,
            capacity=capacity,
            guard_eligible=_flag(row["guard_eligible"], f"{where}, field guard_eligible"),
            exit_eligible=_flag(row["exit_eligible"], f"{where}, field exit_eligible"),
        )
    except ConfigurationError as exc:
        raise DataError(f"{where}: {exc}") from exc


def _relays_from_csv(text: str) -> list[Relay]:
    reader = csv.DictReader(io.StringIO(text))
    header = tuple(h.strip() for h in (reader.fieldnames or ()))
    if set(header) != set(RELAY_FIELDS) or len(header) != len(RELAY_FIELDS):
        raise DataError(f"line 1: header must be {','.join(RELAY_FIELDS)}, got {','.join(header) or 'nothing'}")
    reader.fieldnames = list(header)
    out = []
    for row in reader:
        where = f"line {reader.line_num}"
        if None in row or any(v is None for v in row.values()):
            raise DataError(f"{where}: expected {len(RELAY_FIELDS)} fields")
        out.append(_relay(row, where))
    return out


def _relays_from_json(text: str) -> list[Relay]:
    try:
        items = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(items, list):
        raise DataError("relay JSON must be an array of objects")
    out = []
    for i, item in enumerate(items):
        where = f"entry {i}"
        if not isinstance(item, dict) or set(item) != set(RELAY_FIELDS):
            got = sorted(item) if isinstance(item, dict) else type(item).__name__
            raise DataError(f"{where}: expected keys {', '.join(RELAY_FIELDS)}, got {got}")
        out.append(_relay(item, where))
    return out


def load_relays(source: PathLike) -> list[Relay]:
    """Relay set from a CSV file with a header row or a JSON array of objects."""
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    relays = _relays_from_json(text) if text.lstrip().startswith("[") else _relays_from_csv(text)
    if not relays:
        raise DataError(f"{path}: no relays")
    seen = set()
    for r in relays:
        if r.id in seen:
            raise DataError(f"{path}: duplicate relay name {r.id!r}")
        seen.add(r.id)
    return relays


def save_relays(relays: Iterable[Relay], path: PathLike) -> None:
    path = Path(path)
    rows = [
        {
            "name": r.id,
            "capacity_bytes_per_sec": repr(float(r.capacity)),
            "guard_eligible": str(r.guard_eligible).lower(),
            "exit_eligible": str(r.exit_eligible).lower(),
        }
        for r in relays
    ]
    if path.suffix == ".json":
        for row in rows:
            row["capacity_bytes_per_sec"] = float(row["capacity_bytes_per_sec"])
            row["guard_eligible"] = row["guard_eligible"] == "true"
            row["exit_eligible"] = row["exit_eligible"] == "true"
        path.write_text(json.dumps(rows, indent=1) + "\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RELAY_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# traces -------------------------------------------------------------------------


def _decimals(interval: float) -> int:
    """Decimal places that represent every multiple of ``interval`` exactly."""
    for d in range(10):
        if abs(round(interval, d) - interval) < 1e-9 * max(1.0, interval):
            return d
    return 9


def format_rate(v: float) -> str:
    return f"{float(v):.{RATE_DIGITS}g}"


def write_trace(trace: ThroughputTrace, path: PathLike, stream_id: Optional[int] = None) -> None:
    """One row per sample: start time in fixed-point seconds, then bytes/second.

    A ``stream_id`` adds a third column naming the stream, for debugging.
    """
    d = _decimals(trace.interval)
    header = list(TRACE_HEADER) + (["stream_id"] if stream_id is not None else [])
    lines = [",".join(header)]
    times = trace.start + np.arange(len(trace)) * trace.interval
    for t, v in zip(times, trace.samples):
        row = f"{t:.{d}f},{format_rate(v)}"
        lines.append(row if stream_id is None else f"{row},{stream_id}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path: PathLike) -> ThroughputTrace:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != list(TRACE_HEADER) or header[2:] not in ([], ["stream_id"]):
        raise DataError(f"{path}: line 1: header must start with {','.join(TRACE_HEADER)}")
    times, rates = [], []
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: line {n}: expected {len(header)} fields, got {len(row)}")
        for field, cell in zip(TRACE_HEADER, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: line {n}, field {field}: not a number: {cell!r}")
            if not math.isfinite(v) or (field == "bytes_per_sec" and v < 0):
                raise DataError(f"{path}: line {n}, field {field}: invalid value {cell!r}")
            (times if field == "t_sec" else rates).append(v)
    if len(times) < 2:
        raise DataError(f"{path}: need at least two samples to fix the interval")
    interval = times[1] - times[0]
    d = _decimals(interval)
    interval = round(interval, d)
    if not interval > 0:
        raise DataError(f"{path}: line 3, field t_sec: times must increase")
    for i, t in enumerate(times):
        if abs(t - (times[0] + i * interval)) > 0.5 * 10.0**-d:
            raise DataError(f"{path}: line {i + 2}, field t_sec: samples are not evenly spaced")
    return ThroughputTrace(times[0], interval, np.array(rates))


# results ------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(records: Iterable[RunRecord], path: PathLike) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.scenario_id, r.run_index, r.seed, f"{r.wall_clock:.3f}", _dump(r.truth), _dump(r.outputs)])


def read_records(path: PathLike) -> list[RunRecord]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise DataError(f"{path}: line 1: header must be {','.join(RECORD_FIELDS)}")
        out = []
        for row in reader:
            try:
                out.append(
                    RunRecord(
                        scenario_id=row["scenario_id"],
                        run_index=int(row["run_index"]),
                        seed=int(row["seed"]),
                        truth=json.loads(row["truth"]),
                        outputs=json.loads(row["outputs"]),
                        wall_clock=float(row["wall_clock"]),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}: line {reader.line_num}: {exc}") from exc
    return out


def write_table(path: Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([repr(v) if isinstance(v, float) else v for v in row] for row in rows)


def _plot_tables(s: Scenario, records: list[RunRecord], summary: dict, out: Path) -> None:
    """Plain CSV point lists for CDF and ROC figures."""
    kind = s.kind
    if kind in (ScenarioKind.ALL_COMMON, ScenarioKind.NONE_COMMON, ScenarioKind.ONE_COMMON):
        rows = [
            [float(t), float(thr), frac]
            for t, table in summary["detection_by_duration"].items()
            for thr, frac in table.items()
        ]
        write_table(out / "detection.csv", ["duration_sec", "threshold", "fraction_above"], rows)
        write_table(out / "correlation_cdf.csv", ["correlation", "cdf"], summary["correlation_cdf"])
    elif kind is ScenarioKind.IDENTIFY_BOTTLENECK:
        write_table(out / "entropy_cdf.csv", ["entropy_bits", "cdf"], summary["entropy_cdf"])
        rows = [[float(t), v["mean_entropy"], v["entropy_drop"]] for t, v in summary["elimination"].items()]
        write_table(out / "elimination.csv", ["elapsed_sec", "mean_entropy_bits", "entropy_drop"], rows)
    elif kind is ScenarioKind.GUARD_DISCOVERY:
        rows = [[i, rank, rid, c] for i, board in enumerate(summary["scoreboards"]) for rank, (rid, c) in enumerate(board)]
        write_table(out / "scoreboards.csv", ["repetition", "rank", "relay", "count"], rows)
    elif kind is ScenarioKind.HIDDEN_SERVICE:
        write_table(out / "correlation_cdf.csv", ["correlation", "cdf"], summary["correlation_cdf"])
    elif kind is ScenarioKind.LINK_STREAMS:
        rows = [
            [float(d), t[0], t[1], fpr, fnr]
            for d, curve in link_curves(s, records).items()
            for t, fpr, fnr in curve.points
        ]
        write_table(out / "roc.csv", ["duration_sec", "r_threshold", "e_threshold", "fpr", "fnr"], rows)
    elif kind is ScenarioKind.INTERACTIVE_PAIR:
        rows = [[t[0], fpr, fnr] for t, fpr, fnr in interactive_curve(records).points]
        write_table(out / "roc.csv", ["threshold", "fpr", "fnr"], rows)


def write_results(out_dir: PathLike, s: Scenario, records: list[RunRecord], summary: dict) -> Path:
    """Batch directory: config.json, records.csv, summary.json, traces/ and plot tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {"seed": s.seed, "config_hash": s.config_hash(), "scenario": s.to_dict()}
    (out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
    write_records(records, out / "records.csv")
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1, allow_nan=False) + "\n")
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for r in records:
        for name, tr in sorted(r.traces.items()):
            write_trace(tr, traces / f"run{r.run_index:04d}_{name}.csv")
    _plot_tables(s, records, summary, out)
    return out


def load_scenario(out_dir: PathLike) -> Scenario:
    path = Path(out_dir) / "config.json"
    try:
        config = json.loads(path.read_text())
        return Scenario.from_dict(config["scenario"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from exc
