"""Relay records and synthetic relay-set generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigurationError

KB = 1024.0
MB = 1024.0 * KB

# advertised-capacity heterogeneity target: share of relays below 100 KB/s
LOW_CAPACITY_FRACTION = 0.386
LOW_CAPACITY_CUTOFF = 100 * KB
CAPACITY_MIN = 20 * KB
CAPACITY_MAX = 10 * MB


@dataclass(frozen=True)
class ThrottleConfig:
    """Token-bucket limit applied to a relay's client-facing connections."""

    rate_limit: float
    burst: float
    applies_to_non_relays_only: bool = True

    def __post_init__(self):
        if not self.rate_limit > 0:
            raise ConfigurationError("throttle rate_limit must be positive")
        if self.burst < self.rate_limit:
            raise ConfigurationError("throttle burst must cover at least one second at rate_limit")

    @classmethod
    def for_onset(cls, rate_limit: float, expected_rate: float, onset: float = 300.0) -> "ThrottleConfig":
        """Size the bucket so a flow at ``expected_rate`` exhausts it after ``onset`` seconds."""
        if expected_rate <= rate_limit:
            raise ConfigurationError("expected_rate must exceed rate_limit for throttling to start")
        return cls(rate_limit=rate_limit, burst=(expected_rate - rate_limit) * onset)


@dataclass(frozen=True)
class Relay:
    id: str
    name: str
    capacity: float
    guard_eligible: bool = True
    exit_eligible: bool = True
    throttle: Optional[ThrottleConfig] = None

    def __post_init__(self):
        if not self.capacity > 0:
            raise ConfigurationError(f"relay {self.id!r}: capacity must be positive")
        if str(self.id).startswith("@"):
            raise ConfigurationError(f"relay id {self.id!r}: '@' prefix is reserved for endpoints")


def sample_capacities(
    n: int,
    rng: np.random.Generator,
    low_fraction: float = LOW_CAPACITY_FRACTION,
    cmin: float = CAPACITY_MIN,
    cmax: float = CAPACITY_MAX,
    cutoff: float = LOW_CAPACITY_CUTOFF,
) -> np.ndarray:
    """Piecewise log-uniform capacities with ``low_fraction`` of mass below ``cutoff``."""
    if not cmin < cutoff < cmax:
        raise ConfigurationError("need cmin < cutoff < cmax")
    low = rng.random(n) < low_fraction
    u = rng.random(n)
    lo = np.exp(math.log(cmin) + u * (math.log(cutoff) - math.log(cmin)))
    hi = np.exp(math.log(cutoff) + u * (math.log(cmax) - math.log(cutoff)))
    return np.where(low, lo, hi)


def generate_network(
    n: int,
    seed: int,
    guard_fraction: float = 1.0,
    exit_fraction: float = 1.0,
    low_fraction: float = LOW_CAPACITY_FRACTION,
    prefix: str = "r",
) -> list[Relay]:
    """Synthetic relay set; capacities from :func:`sample_capacities`.

    At least three relays are always guard- and exit-eligible so that paths
    can be built.
    """
    if n < 3:
        raise ConfigurationError("a network needs at least three relays")
    rng = np.random.default_rng(seed)
    caps = sample_capacities(n, rng, low_fraction=low_fraction)
    guard = rng.random(n) < guard_fraction
    exit_ = rng.random(n) < exit_fraction
    order = np.argsort(-caps)
    guard[order[:3]] = True
    exit_[order[:3]] = True
    width = len(str(n - 1))
    return [
        Relay(
            id=f"{prefix}{i:0{width}d}",
            name=f"relay{i:0{width}d}",
            capacity=float(round(caps[i], 3)),
            guard_eligible=bool(guard[i]),
            exit_eligible=bool(exit_[i]),
        )
        for i in range(n)
    ]
