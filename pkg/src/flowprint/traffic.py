"""Bulk and interactive demand profiles, and the utilization classifier.

Interactive flows alternate a burst (bytes to send) with a gap (idle seconds).
A gap starts once its burst has been delivered, so the nominal timeline of a
profile depends on the rate it is drained at.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, DegenerateInputError
from .stats import ThroughputTrace
from .streams import CELL_BYTES

SUBINTERVAL = 5.0
HORIZON = 600.0
BULK_THRESHOLD = 0.9
MODERATE_THRESHOLD = 0.5
# flows this small are circuit set-up chatter, not traffic
MIN_FLOW_BYTES = 10 * CELL_BYTES

SYNTHETIC_BURST_MEAN = 100 * 1024.0
SYNTHETIC_BURST_SIGMA = 1.0
SYNTHETIC_GAP_MEAN = 8.0


class UtilizationClass(enum.Enum):
    BULK = "bulk"
    MODERATE = "moderate"
    LOW = "low"

    @classmethod
    def of(cls, fraction: float) -> "UtilizationClass":
        if fraction > BULK_THRESHOLD:
            return cls.BULK
        if fraction >= MODERATE_THRESHOLD:
            return cls.MODERATE
        return cls.LOW


@dataclass(frozen=True)
class BurstGapModel:
    """Empirical burst sizes (bytes) and gap lengths (seconds)."""

    burst_sizes: tuple[float, ...]
    gap_times: tuple[float, ...]

    def __post_init__(self):
        for name in ("burst_sizes", "gap_times"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise DataError(f"{name} must not be empty")
            if not all(math.isfinite(v) and v > 0 for v in values):
                raise DataError(f"{name} must be finite and strictly positive")
            object.__setattr__(self, name, values)

    def to_json(self) -> str:
        return json.dumps({"burst_sizes": list(self.burst_sizes), "gap_times": list(self.gap_times)})

    @classmethod
    def from_json(cls, text: str) -> "BurstGapModel":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"model JSON: line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict) or set(obj) != {"burst_sizes", "gap_times"}:
            raise DataError("model JSON must be an object with keys burst_sizes and gap_times")
        for key in ("burst_sizes", "gap_times"):
            if not isinstance(obj[key], list) or not all(isinstance(v, (int, float)) for v in obj[key]):
                raise DataError(f"model JSON: {key} must be an array of numbers")
        return cls(tuple(obj["burst_sizes"]), tuple(obj["gap_times"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BurstGapModel":
        return cls.from_json(Path(path).read_text())


def synthetic_model(samples: int = 1000, seed: int = 0) -> BurstGapModel:
    """Synthetic stand-in for a measured corpus: log-normal bursts, exponential gaps."""
    rng = np.random.default_rng(seed)
    mu = math.log(SYNTHETIC_BURST_MEAN) - SYNTHETIC_BURST_SIGMA**2 / 2
    bursts = rng.lognormal(mu, SYNTHETIC_BURST_SIGMA, samples)
    gaps = rng.exponential(SYNTHETIC_GAP_MEAN, samples)
    return BurstGapModel(tuple(bursts), tuple(np.maximum(gaps, 1e-3)))


@dataclass(frozen=True)
class DemandProfile:
    """What a source wants to send over ``duration`` seconds."""

    duration: float
    backlogged: bool = False
    segments: tuple[tuple[float, float], ...] = field(default_factory=tuple)  # (burst bytes, gap seconds)

    @property
    def empty(self) -> bool:
        return not self.backlogged and not self.segments

    def demand(self, budget: float) -> float:
        """Bytes the source would take of ``budget`` while it has data queued."""
        return math.inf if self.backlogged else budget

    def render(self, rate: float, tick: float = 0.1) -> ThroughputTrace:
        """Throughput when drained at a constant ``rate``."""
        if not rate > 0 or not tick > 0:
            raise DegenerateInputError("rate and tick must be positive")
        n = int(round(self.duration / tick))
        out = np.zeros(n)
        if self.backlogged:
            out[:] = rate * tick
        t = 0.0
        for burst, gap in self.segments:
            if t >= self.duration:
                break
            _spread(out, t, t + burst / rate, rate, tick)
            t += burst / rate + gap
        return ThroughputTrace(0.0, tick, out / tick)


def _spread(out: np.ndarray, t0: float, t1: float, rate: float, tick: float) -> None:
    k = int(t0 // tick)
    while k < out.size and k * tick < t1:
        lo, hi = max(t0, k * tick), min(t1, (k + 1) * tick)
        out[k] += max(0.0, hi - lo) * rate
        k += 1


def generate_bulk(duration: float) -> DemandProfile:
    """Always-backlogged source."""
    if duration < 0:
        raise DegenerateInputError("duration must be non-negative")
    return DemandProfile(duration=float(duration), backlogged=duration > 0)


def generate_interactive(model: BurstGapModel, duration: float, rng: np.random.Generator) -> DemandProfile:
    """Bursts and gaps drawn from the model until the gaps alone cover ``duration``."""
    if duration < 0:
        raise DegenerateInputError("duration must be non-negative")
    bursts = np.asarray(model.burst_sizes)
    gaps = np.asarray(model.gap_times)
    segments = []
    covered = 0.0
    while covered < duration:
        b = float(bursts[rng.integers(bursts.size)])
        g = float(gaps[rng.integers(gaps.size)])
        segments.append((b, g))
        covered += g
    return DemandProfile(duration=float(duration), segments=tuple(segments))


def _activity(trace: ThroughputTrace, subinterval: float) -> tuple[np.ndarray, np.ndarray]:
    """Per whole subinterval: any-traffic flag and bytes carried."""
    k = max(1, int(round(subinterval / trace.interval)))
    nb = len(trace) // k
    if nb == 0:
        raise DegenerateInputError("trace is shorter than one subinterval")
    per = trace.samples[: nb * k].reshape(nb, k) * trace.interval
    return (per > 0).any(axis=1), per.sum(axis=1)


def classify_utilization(
    trace: ThroughputTrace,
    subinterval: float = SUBINTERVAL,
    horizon: float = HORIZON,
) -> tuple[UtilizationClass, float]:
    """Class and active fraction: the mean over ``horizon`` windows of the share
    of ``subinterval`` slots carrying any traffic."""
    if len(trace) == 0:
        raise DegenerateInputError("empty trace")
    active, _ = _activity(trace, subinterval)
    per_window = max(1, int(round(horizon / subinterval)))
    fractions = [active[i : i + per_window].mean() for i in range(0, active.size, per_window)]
    fraction = float(np.mean(fractions))
    return UtilizationClass.of(fraction), fraction


def _runs(flags: np.ndarray) -> list[tuple[bool, int, int]]:
    """Maximal runs as (value, start, stop)."""
    out = []
    start = 0
    for i in range(1, flags.size + 1):
        if i == flags.size or flags[i] != flags[start]:
            out.append((bool(flags[start]), start, i))
            start = i
    return out


def flow_bursts_and_gaps(trace: ThroughputTrace, subinterval: float = SUBINTERVAL) -> tuple[list[float], list[float]]:
    """Bytes of each maximal active run and length of each interior idle run."""
    active, volume = _activity(trace, subinterval)
    bursts, gaps = [], []
    runs = _runs(active)
    for i, (on, a, b) in enumerate(runs):
        if on:
            bursts.append(float(volume[a:b].sum()))
        elif 0 < i < len(runs) - 1:
            gaps.append((b - a) * subinterval)
    return bursts, gaps


def fit_model(
    traces: Iterable[ThroughputTrace],
    subinterval: float = SUBINTERVAL,
    horizon: float = HORIZON,
    min_bytes: float = MIN_FLOW_BYTES,
) -> BurstGapModel:
    """Per-flow average burst size and gap length over moderate-utilization flows."""
    burst_means, gap_means = [], []
    for tr in traces:
        if len(tr) == 0 or tr.total_bytes() <= min_bytes:
            continue
        try:
            cls, _ = classify_utilization(tr, subinterval, horizon)
        except DegenerateInputError:
            continue
        if cls is not UtilizationClass.MODERATE:
            continue
        bursts, gaps = flow_bursts_and_gaps(tr, subinterval)
        if not bursts or not gaps:
            continue
        burst_means.append(float(np.mean(bursts)))
        gap_means.append(float(np.mean(gaps)))
    if not burst_means:
        raise DataError("no moderate-utilization flow with at least one burst and gap")
    return BurstGapModel(tuple(sorted(burst_means)), tuple(sorted(gap_means)))

