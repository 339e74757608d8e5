"""Throughput-fingerprinting attacks built on the statistics module.

All procedures are pure functions of traces. Traces are compared at a common
``resolution`` (seconds per sample) obtained by mean aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, UndefinedCorrelationError
from .stats import (
    BottleneckPosterior,
    ThroughputTrace,
    align,
    micro_timescale,
    mutual_exclusivity,
    pearson,
    windowed_max_correlation,
)

DEFAULT_THRESHOLD = 0.4
DEFAULT_WINDOW = 200.0
DEFAULT_RESOLUTION = 1.0
DEFAULT_EXCLUSIVITY = 0.5
MACRO_INTERVAL = 1.0
MIN_LINK_OVERLAP = 60.0
RENDEZVOUS_HOPS = 8
E_GRID = tuple(round(0.01 * i, 2) for i in range(101))
# the first entry lies below every correlation, so that gate admits any pair with a defined r
R_GRID = (-1.05, *(round(-1.0 + 0.1 * i, 1) for i in range(20)))


# pairwise fingerprinting ------------------------------------------------------


@dataclass(frozen=True)
class FingerprintVerdict:
    r_max: float
    window_used: float  # seconds
    threshold: float
    shared: bool
    interval: tuple[float, float] = (math.nan, math.nan)

    def __post_init__(self):
        if self.shared != (self.r_max > self.threshold):
            raise DegenerateInputError("verdict must be shared exactly when r_max exceeds the threshold")


def fingerprint_pair(
    target: ThroughputTrace,
    probe: ThroughputTrace,
    threshold: float = DEFAULT_THRESHOLD,
    min_window: float = DEFAULT_WINDOW,
    resolution: Optional[float] = DEFAULT_RESOLUTION,
) -> FingerprintVerdict:
    """Shared-relay verdict from the windowed maximum correlation."""
    r, (t0, t1) = windowed_max_correlation(target, probe, min_window, interval=resolution)
    return FingerprintVerdict(r_max=r, window_used=t1 - t0, threshold=threshold, shared=r > threshold, interval=(t0, t1))


def safe_fingerprint(target, probe, threshold=DEFAULT_THRESHOLD, min_window=DEFAULT_WINDOW, resolution=DEFAULT_RESOLUTION):
    """Like :func:`fingerprint_pair`, but a flat series yields an unshared NaN verdict."""
    try:
        return fingerprint_pair(target, probe, threshold, min_window, resolution)
    except UndefinedCorrelationError:
        return FingerprintVerdict(r_max=math.nan, window_used=0.0, threshold=threshold, shared=False)


# bottleneck identification ----------------------------------------------------


def identify_bottleneck(
    target: ThroughputTrace,
    probes: Mapping[str, ThroughputTrace],
    inclusion_probability: float,
    threshold: float = DEFAULT_THRESHOLD,
    min_window: float = 300.0,
    resolution: Optional[float] = DEFAULT_RESOLUTION,
    universe_size: Optional[int] = None,
) -> BottleneckPosterior:
    """Anonymity set of relays whose probe correlates with the target."""
    if not probes:
        raise DegenerateInputError("no probes")
    n = len(probes) if universe_size is None else universe_size
    shared = [
        rid for rid in sorted(probes) if safe_fingerprint(target, probes[rid], threshold, min_window, resolution).shared
    ]
    return BottleneckPosterior.from_set(shared, inclusion_probability, n)


def calibrate_inclusion(runs: Iterable[tuple[Iterable[str], Optional[str]]]) -> float:
    """Share of labelled runs with a non-empty set whose true bottleneck is in it."""
    hits = total = 0
    for candidates, truth in runs:
        cand = set(candidates)
        if not cand:
            continue
        total += 1
        hits += truth in cand
    return hits / total if total else 0.0


# throughput elimination -------------------------------------------------------

ProbeMeans = Union[float, Sequence[tuple[float, float]]]


def _running_mean(target: ThroughputTrace, t: float) -> float:
    k = int(round((t - target.start) / target.interval))
    k = min(k, len(target))
    return float(target.samples[:k].mean()) if k > 0 else math.nan


def eliminate_by_throughput(
    target: ThroughputTrace,
    probe_means: Mapping[str, ProbeMeans],
    elapsed: float,
) -> set[str]:
    """Relays that could still be the target's bottleneck.

    A relay whose probe ever averaged less than the target over a completed
    sub-interval cannot be the bottleneck. ``probe_means`` maps each relay to
    either one mean (compared with the whole target) or a list of
    ``(end_time, mean)`` sub-interval results, of which only those completed by
    ``target.start + elapsed`` count, each compared with the target's running
    mean at its end time.
    """
    if not probe_means:
        raise DegenerateInputError("no probe means")
    cutoff = target.start + elapsed
    survivors = set()
    for rid, m in probe_means.items():
        if isinstance(m, (int, float)):
            out = float(m) < target.mean()
        else:
            out = False
            for end, mean in m:
                if end <= cutoff + 1e-9:
                    ref = _running_mean(target, end)
                    if not math.isnan(ref) and mean < ref:
                        out = True
                        break
        if not out:
            survivors.add(rid)
    return survivors


def subinterval_means(probe: ThroughputTrace, length: float, skip: float = 0.0) -> list[tuple[float, float]]:
    """Means over consecutive ``length``-second sub-intervals after ``skip`` seconds."""
    out = []
    t = probe.start + skip
    while t + length <= probe.end + 1e-9:
        out.append((t + length, probe.slice_time(t, t + length).mean()))
        t += length
    return out


def set_entropy(survivors: Iterable[str], universe_size: int) -> float:
    """Bits left when the bottleneck is uniform over the survivors (prior if none)."""
    k = len(set(survivors))
    return math.log2(k if k else universe_size)


# guard discovery --------------------------------------------------------------


@dataclass
class GuardScoreboard:
    counts: dict[str, int] = field(default_factory=dict)
    runs: int = 0

    def add(self, posterior: BottleneckPosterior) -> None:
        self.runs += 1
        for rid in posterior.candidate_set:
            self.counts[rid] = self.counts.get(rid, 0) + 1

    def ranking(self) -> list[tuple[str, int]]:
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def top(self) -> Optional[str]:
        r = self.ranking()
        return r[0][0] if r else None


def identify_guard(posteriors: Iterable[BottleneckPosterior], universe: Iterable[str] = ()) -> GuardScoreboard:
    """Tally anonymity-set membership across circuit reformulations."""
    board = GuardScoreboard({rid: 0 for rid in universe})
    for p in posteriors:
        board.add(p)
    if board.runs == 0:
        raise DegenerateInputError("need at least one posterior")
    return board


# hidden services --------------------------------------------------------------


@dataclass(frozen=True)
class HiddenServiceVerdict:
    verdict: FingerprintVerdict
    base_rate: float

    @property
    def shared(self) -> bool:
        return self.verdict.shared


def detect_hidden_service(
    target: ThroughputTrace,
    probe: ThroughputTrace,
    threshold: float = DEFAULT_THRESHOLD,
    min_window: float = DEFAULT_WINDOW,
    path_length: int = RENDEZVOUS_HOPS,
    resolution: Optional[float] = DEFAULT_RESOLUTION,
) -> HiddenServiceVerdict:
    """Fingerprint a suspected service relay; reports the chance it is the bottleneck."""
    if path_length < 1:
        raise DegenerateInputError("path length must be positive")
    v = safe_fingerprint(target, probe, threshold, min_window, resolution)
    return HiddenServiceVerdict(verdict=v, base_rate=1.0 / path_length)


# interactive victims -----------------------------------------------------------


def active_correlation(victim: ThroughputTrace, attacker: ThroughputTrace, resolution: float = DEFAULT_RESOLUTION) -> float:
    """Correlation over the ``resolution`` buckets in which the victim sent in every sample.

    Buckets where a burst starts or ends are left out: their victim rate
    reflects how much of the bucket was busy, not the rate it got.
    NaN when fewer than three buckets qualify or either side is flat.
    """
    xs, ys, step, start = align(victim, attacker)
    k = max(1, int(round(resolution / step)))
    n = xs.size // k
    if n == 0:
        return math.nan
    xb = xs[: n * k].reshape(n, k)
    yb = ys[: n * k].reshape(n, k)
    busy = (xb > 0).all(axis=1)
    if busy.sum() < 3:
        return math.nan
    try:
        return pearson(xb[busy].mean(axis=1), yb[busy].mean(axis=1))
    except UndefinedCorrelationError:
        return math.nan


# stream linkability -----------------------------------------------------------


@dataclass(frozen=True)
class LinkabilityVerdict:
    macro_r: float
    exclusivity: float
    thresholds: tuple[float, float]
    linked: bool
    bucket: float = math.nan

    def __post_init__(self):
        r_t, e_t = self.thresholds
        if self.linked != (self.macro_r > r_t and self.exclusivity > e_t):
            raise DegenerateInputError("linked must hold exactly when both thresholds are passed")


def link_scores(x: ThroughputTrace, y: ThroughputTrace) -> tuple[float, float, float]:
    """Macro correlation, micro exclusivity and the bucket used for the latter."""
    xs, ys, step, start = align(x, y)
    if xs.size * step < MIN_LINK_OVERLAP - 1e-9:
        raise DegenerateInputError(f"streams overlap for {xs.size * step:g} s, need {MIN_LINK_OVERLAP:g} s")
    x = ThroughputTrace(start, step, xs)
    y = ThroughputTrace(start, step, ys)
    mx, my = x.resample(max(step, MACRO_INTERVAL)), y.resample(max(step, MACRO_INTERVAL))
    try:
        r = pearson(mx, my)
    except UndefinedCorrelationError:
        r = math.nan
    joint = x.mean() + y.mean()
    if joint <= 0:
        return r, math.nan, math.nan
    bucket = max(step, round(micro_timescale(joint) / step) * step)
    try:
        e = mutual_exclusivity(x, y, bucket)
    except DegenerateInputError:
        e = math.nan
    return r, e, bucket


def link_streams(
    x: ThroughputTrace,
    y: ThroughputTrace,
    r_threshold: float = DEFAULT_THRESHOLD,
    e_threshold: float = DEFAULT_EXCLUSIVITY,
) -> LinkabilityVerdict:
    """Same-circuit verdict: correlated at 1 s and mutually exclusive at the batch timescale."""
    r, e, bucket = link_scores(x, y)
    linked = bool(r > r_threshold and e > e_threshold)
    return LinkabilityVerdict(macro_r=r, exclusivity=e, thresholds=(r_threshold, e_threshold), linked=linked, bucket=bucket)


# error rates ------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorRateCurve:
    points: tuple  # ((threshold pair), fpr, fnr)
    cer: float

    @property
    def roc(self) -> list[tuple[float, float]]:
        """(false positive rate, true positive rate) per threshold."""
        return [(fpr, 1.0 - fnr) for _, fpr, fnr in self.points]

    def tpr_at_fpr(self, max_fpr: float) -> float:
        ok = [1.0 - fnr for _, fpr, fnr in self.points if fpr <= max_fpr]
        return max(ok) if ok else 0.0


def crossover(fpr: Sequence[float], fnr: Sequence[float]) -> float:
    """Error rate where the two curves cross, interpolating between samples.

    ``fpr`` must be non-increasing and ``fnr`` non-decreasing along the sweep.
    """
    d = np.asarray(fpr, dtype=float) - np.asarray(fnr, dtype=float)
    for i in range(d.size):
        if d[i] == 0:
            return float(fpr[i])
        if i + 1 < d.size and d[i] > 0 > d[i + 1]:
            a = d[i] / (d[i] - d[i + 1])
            return float(fpr[i] + a * (fpr[i + 1] - fpr[i]))
    # the curves never cross inside the sweep: report the closer end
    i = int(np.argmin(np.abs(d)))
    return float(max(fpr[i], fnr[i]))


def score_curve(
    scores: Sequence[float],
    labels: Sequence[bool],
    thresholds: Sequence[float],
    threshold_pair=None,
) -> ErrorRateCurve:
    """Sweep one score threshold (decision: score > threshold). NaN scores never fire."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise DegenerateInputError("need both positive and negative examples")
    ts = sorted(float(t) for t in thresholds)
    fpr, fnr, pts = [], [], []
    for t in ts:
        fire = np.nan_to_num(s, nan=-np.inf) > t
        fp = float(np.mean(fire[~y]))
        fn = float(np.mean(~fire[y]))
        fpr.append(fp)
        fnr.append(fn)
        pts.append(((t,) if threshold_pair is None else threshold_pair(t), fp, fn))
    return ErrorRateCurve(points=tuple(pts), cer=crossover(fpr, fnr))


def joint_threshold_curve(
    macro_r: Sequence[float],
    exclusivity: Sequence[float],
    labels: Sequence[bool],
    r_thresholds: Sequence[float],
    e_thresholds: Sequence[float],
) -> ErrorRateCurve:
    """Exclusivity sweep at the correlation threshold with the lowest crossover.

    Ties go to the stricter correlation threshold.
    """
    r = np.nan_to_num(np.asarray(macro_r, dtype=float), nan=-np.inf)
    e = np.asarray(exclusivity, dtype=float)
    best = None
    for r_t in sorted(float(t) for t in r_thresholds):
        scores = np.where(r > r_t, e, -np.inf)
        curve = score_curve(scores, labels, e_thresholds, threshold_pair=lambda t, r_t=r_t: (r_t, t))
        if best is None or curve.cer <= best.cer:
            best = curve
    return best


def error_rate_curve(
    labeled: Sequence[tuple[tuple[ThroughputTrace, ThroughputTrace], bool]],
    durations: Sequence[float],
    r_threshold: float = DEFAULT_THRESHOLD,
    e_thresholds: Optional[Sequence[float]] = None,
    r_thresholds: Optional[Sequence[float]] = None,
) -> dict[float, ErrorRateCurve]:
    """Linkability error rates per observation length.

    Each pair is cut to its first ``d`` seconds. The exclusivity threshold is
    swept with the correlation threshold held at ``r_threshold``, or at the
    best of ``r_thresholds`` when those are given.
    """
    labels = [bool(lab) for _, lab in labeled]
    if all(labels) or not any(labels):
        raise DegenerateInputError("need both same-circuit and different-circuit pairs")
    grid = E_GRID if e_thresholds is None else e_thresholds
    out = {}
    for d in durations:
        rs, es = [], []
        for (x, y), _ in labeled:
            t0 = max(x.start, y.start)
            r, e, _ = link_scores(x.slice_time(t0, t0 + d), y.slice_time(t0, t0 + d))
            rs.append(r)
            es.append(e)
        out[float(d)] = joint_threshold_curve(rs, es, labels, r_thresholds or [r_threshold], grid)
    return out
