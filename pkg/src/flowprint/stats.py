"""Statistical primitives used by every attack.

Correlation (plain and windowed), Fisher-Z confidence intervals, the entropy
family used to score anonymity sets, and the micro-timescale exclusivity
measure for streams sharing a circuit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateInputError, UndefinedCorrelationError

CELL_BYTES = 512
BATCH_CELLS = 50
BATCH_BYTES = CELL_BYTES * BATCH_CELLS  # 25 KB

_GRID_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ThroughputTrace:
    """Uniformly sampled throughput series in bytes/second."""

    start: float
    interval: float
    samples: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.interval > 0:
            raise DataError(f"trace interval must be positive, got {self.interval}")
        arr = np.array(self.samples, dtype=float)
        if arr.ndim != 1:
            raise DataError("trace samples must be one-dimensional")
        if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
            raise DataError("trace samples must be finite and non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ThroughputTrace):
            return NotImplemented
        return (
            self.start == other.start
            and self.interval == other.interval
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None  # mutable-looking payload; never used as a key

    @property
    def duration(self) -> float:
        return len(self) * self.interval

    @property
    def end(self) -> float:
        return self.start + self.duration

    def times(self) -> np.ndarray:
        return self.start + self.interval * np.arange(len(self))

    def mean(self) -> float:
        if not len(self):
            raise DataError("mean of an empty trace")
        return float(self.samples.mean())

    def total_bytes(self) -> float:
        return float(self.samples.sum() * self.interval)

    def slice_time(self, t0: float, t1: float) -> "ThroughputTrace":
        """Samples whose interval starts in ``[t0, t1)``."""
        i0 = max(0, int(math.ceil((t0 - self.start) / self.interval - _GRID_TOL)))
        i1 = min(len(self), int(math.ceil((t1 - self.start) / self.interval - _GRID_TOL)))
        i1 = max(i0, i1)
        return ThroughputTrace(self.start + i0 * self.interval, self.interval, self.samples[i0:i1])

    def head(self, duration: float) -> "ThroughputTrace":
        return self.slice_time(self.start, self.start + duration)

    def resample(self, interval: float) -> "ThroughputTrace":
        """Mean-aggregate onto a coarser grid; a trailing partial bucket is dropped."""
        k = _ratio(interval, self.interval)
        if k == 1:
            return self
        nb = len(self) // k
        agg = self.samples[: nb * k].reshape(nb, k).mean(axis=1)
        return ThroughputTrace(self.start, self.interval * k, agg)


def _ratio(coarse: float, fine: float) -> int:
    k = coarse / fine
    kr = int(round(k))
    if kr < 1 or abs(k - kr) > _GRID_TOL * max(1.0, k):
        raise DataError(f"interval {coarse} is not a whole multiple of {fine}")
    return kr


def align(x: ThroughputTrace, y: ThroughputTrace, interval: float | None = None):
    """Resample to a common interval and cut both traces to their time overlap.

    Returns ``(xs, ys, interval, start)`` with equal-length sample arrays.
    """
    step = max(x.interval, y.interval, interval or 0.0)
    x = x.resample(step) if x.interval != step else x
    y = y.resample(step) if y.interval != step else y
    start = max(x.start, y.start)
    end = min(x.end, y.end)
    if end - start < step * (1 - _GRID_TOL):
        raise DataError("traces do not overlap")
    ix = int(round((start - x.start) / step))
    iy = int(round((start - y.start) / step))
    n = min(len(x) - ix, len(y) - iy)
    return x.samples[ix : ix + n], y.samples[iy : iy + n], step, start


def _as_array(v) -> np.ndarray:
    if isinstance(v, ThroughputTrace):
        return v.samples
    return np.asarray(v, dtype=float)


def pearson(x, y) -> float:
    """Pearson product-moment correlation of two equal-length windows."""
    xs, ys = _as_array(x), _as_array(y)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DataError("pearson needs two equal-length one-dimensional windows")
    if xs.size < 2:
        raise UndefinedCorrelationError("pearson needs at least two samples")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or np.all(xs == xs[0]):
        raise UndefinedCorrelationError("first series has zero variance")
    if syy == 0.0 or np.all(ys == ys[0]):
        raise UndefinedCorrelationError("second series has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def fisher_ci(r: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """Confidence interval for a correlation via the Fisher Z transform."""
    if n <= 3:
        raise DegenerateInputError(f"Fisher interval needs n > 3, got {n}")
    if not -1.0 < r < 1.0:
        raise DegenerateInputError(f"Fisher interval needs |r| < 1, got {r}")
    if not 0.0 < level < 1.0:
        raise DegenerateInputError(f"confidence level must lie in (0, 1), got {level}")
    z = math.atanh(r)
    half = NormalDist().inv_cdf(0.5 + level / 2.0) / math.sqrt(n - 3)
    return math.tanh(z - half), math.tanh(z + half)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    ci_low: float
    ci_high: float
    level: float


def correlate(x, y, level: float = 0.95) -> CorrelationResult:
    """Pearson correlation with its Fisher-Z interval (NaN bounds when n <= 3)."""
    r = pearson(x, y)
    n = int(_as_array(x).size)
    if n <= 3:
        lo = hi = math.nan
    elif abs(r) == 1.0:
        lo = hi = r
    else:
        lo, hi = fisher_ci(r, n, level)
    return CorrelationResult(r=r, n=n, ci_low=lo, ci_high=hi, level=level)


def _next_change(a: np.ndarray) -> np.ndarray:
    """For each i, the first index k > i with a[k] != a[i] (or len(a))."""
    n = a.size
    out = np.empty(n, dtype=np.int64)
    nxt = n
    for i in range(n - 1, -1, -1):
        if i + 1 < n and a[i + 1] != a[i]:
            nxt = i + 1
        out[i] = nxt
    return out


def windowed_max_correlation(
    x: ThroughputTrace,
    y: ThroughputTrace,
    min_window: float,
    interval: float | None = None,
) -> tuple[float, tuple[float, float]]:
    """Maximum correlation over every aligned interval at least ``min_window`` long.

    When the overlap is shorter than ``min_window`` the plain correlation of the
    whole overlap is returned. Constant intervals are skipped. Returns
    ``(r_max, (t_start, t_end))``.
    """
    xs, ys, step, start = align(x, y, interval)
    n = xs.size
    if n * step < min_window * (1 - _GRID_TOL):
        return pearson(xs, ys), (start, start + n * step)
    w = max(2, int(math.ceil(min_window / step - _GRID_TOL)))

    # centre and scale so the running moments stay well conditioned
    cx = xs - xs.mean()
    cy = ys - ys.mean()
    sx_scale = float(np.abs(cx).max()) or 1.0
    sy_scale = float(np.abs(cy).max()) or 1.0
    cx = cx / sx_scale
    cy = cy / sy_scale
    zero = np.zeros(1)
    Sx = np.concatenate([zero, np.cumsum(cx)])
    Sy = np.concatenate([zero, np.cumsum(cy)])
    Sxx = np.concatenate([zero, np.cumsum(cx * cx)])
    Syy = np.concatenate([zero, np.cumsum(cy * cy)])
    Sxy = np.concatenate([zero, np.cumsum(cx * cy)])
    ncx = _next_change(xs)
    ncy = _next_change(ys)

    best = -math.inf
    best_iv = None
    ends = np.arange(n + 1)
    block = max(1, min(n, 200_000 // (n + 1)))
    for i0 in range(0, n - w + 1, block):
        starts = np.arange(i0, min(n - w + 1, i0 + block))
        I = starts[:, None]
        J = ends[None, :]
        L = (J - I).astype(float)
        valid = (J - I >= w) & (J > ncx[starts][:, None]) & (J > ncy[starts][:, None])
        if not valid.any():
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            sx = Sx[J] - Sx[I]
            sy = Sy[J] - Sy[I]
            vx = Sxx[J] - Sxx[I] - sx * sx / L
            vy = Syy[J] - Syy[I] - sy * sy / L
            cov = Sxy[J] - Sxy[I] - sx * sy / L
            r = cov / np.sqrt(vx * vy)
        # cancellation guard: recompute near-degenerate intervals directly
        shaky = valid & ~((vx > 1e-9 * L) & (vy > 1e-9 * L))
        if shaky.any():
            for a, b in zip(*np.nonzero(shaky)):
                i, j = int(starts[a]), int(b)
                r[a, b] = pearson(xs[i:j], ys[i:j])
        r = np.where(valid, np.clip(r, -1.0, 1.0), -np.inf)
        k = int(np.argmax(r))
        a, b = divmod(k, n + 1)
        if r[a, b] > best:
            best = float(r[a, b])
            best_iv = (int(starts[a]), int(b))
    if best_iv is None:
        raise UndefinedCorrelationError("no interval with non-zero variance in both series")
    i, j = best_iv
    return best, (start + i * step, start + j * step)


def _check_distribution(p: Sequence[float], what: str) -> np.ndarray:
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise DegenerateInputError(f"{what} must be a non-empty vector")
    if not np.all(np.isfinite(arr)) or arr.min() < 0:
        raise DegenerateInputError(f"{what} must be finite and non-negative")
    if abs(float(arr.sum()) - 1.0) > 1e-9:
        raise DegenerateInputError(f"{what} must sum to 1 (got {arr.sum():.12g})")
    return arr


def entropy(p: Iterable[float]) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    arr = _check_distribution(list(p), "probability vector")
    nz = arr[arr > 0]
    return float(-(nz * np.log2(nz)).sum())


def conditional_set_entropy(set_size: int, p_in_set: float, universe: int) -> float:
    """Entropy of the relay distribution after learning a candidate set.

    Probability ``p_in_set`` is spread uniformly over the ``set_size``
    candidates and the remainder uniformly over the other relays.
    """
    if not 1 <= set_size <= universe:
        raise DegenerateInputError(f"need 1 <= |S| <= N, got |S|={set_size}, N={universe}")
    if not 0.0 <= p_in_set <= 1.0:
        raise DegenerateInputError(f"P(R_S) must lie in [0, 1], got {p_in_set}")
    rest = universe - set_size
    if rest == 0 and p_in_set < 1.0:
        raise DegenerateInputError("|S| = N leaves no relay outside the set for 1 - P(R_S)")
    h = 0.0
    if p_in_set > 0.0:
        h += p_in_set * (math.log2(set_size) - math.log2(p_in_set))
    if p_in_set < 1.0:
        h += (1.0 - p_in_set) * (math.log2(rest) - math.log2(1.0 - p_in_set))
    return h


@dataclass(frozen=True)
class BottleneckPosterior:
    """Anonymity set for a circuit's bottleneck relay."""

    candidate_set: frozenset
    inclusion_probability: float
    universe_size: int
    entropy_bits: float

    @classmethod
    def from_set(cls, candidates: Iterable[str], p_in_set: float, universe_size: int) -> "BottleneckPosterior":
        """Empty or full candidate sets carry no information: the prior applies."""
        cand = frozenset(candidates)
        if universe_size < 1 or len(cand) > universe_size:
            raise DegenerateInputError(f"candidate set of {len(cand)} does not fit a universe of {universe_size}")
        if not 0.0 <= p_in_set <= 1.0:
            raise DegenerateInputError(f"P(R_S) must lie in [0, 1], got {p_in_set}")
        if not cand or len(cand) == universe_size:
            bits = math.log2(universe_size)
        else:
            bits = conditional_set_entropy(len(cand), p_in_set, universe_size)
        return cls(cand, float(p_in_set), int(universe_size), bits)


def weighted_entropy(observations: Iterable[tuple[float, float]]) -> float:
    """Conditional entropy: sum of P(o) * H(C|o) over observations."""
    obs = list(observations)
    if not obs:
        raise DegenerateInputError("no observations")
    probs = _check_distribution([p for p, _ in obs], "observation weights")
    return float(sum(p * h for p, (_, h) in zip(probs, obs)))


def micro_timescale(mean_throughput: float) -> float:
    """Seconds needed to move one 50-cell batch at the given rate."""
    if not mean_throughput > 0:
        raise DegenerateInputError(f"throughput must be positive, got {mean_throughput}")
    return BATCH_BYTES / mean_throughput


def mutual_exclusivity(
    x: ThroughputTrace,
    y: ThroughputTrace,
    bucket: float,
    active_threshold: float = 1.0,
) -> float:
    """Share of active buckets in which exactly one of the two flows is active.

    The bucket is rounded to the nearest whole number of samples (at least one).
    """
    xs, ys, step, _ = align(x, y)
    if bucket < step * (1 - _GRID_TOL):
        raise DegenerateInputError(f"bucket {bucket} is finer than the trace interval {step}")
    k = max(1, int(round(bucket / step)))
    nb = xs.size // k
    if nb == 0:
        raise DegenerateInputError("traces shorter than one bucket")
    mx = xs[: nb * k].reshape(nb, k).mean(axis=1)
    my = ys[: nb * k].reshape(nb, k).mean(axis=1)
    ax = mx > active_threshold
    ay = my > active_threshold
    either = int(np.count_nonzero(ax | ay))
    if either == 0:
        raise DegenerateInputError("neither flow is active in any bucket")
    return int(np.count_nonzero(ax ^ ay)) / either
