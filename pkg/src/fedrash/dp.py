"""Privacy-preserving release of score-metric distributions.

Clients bin their per-sample metric values into server-defined
equal-width buckets, perturb each bucket count with two-sided geometric
noise of parameter exp(-epsilon), truncate to [0, cap], and ship the
noisy histogram. The server sums histograms into a global CDF and reads
quantiles off it.

Adjacency is add/remove one record; a record touches exactly one
bucket, so per-bucket sensitivity is 1 and parallel composition gives
each bucket the full epsilon budget. The budget is treated as
per-histogram; composing across several released histograms is the
caller's concern. The truncation cap is the client's true sample count,
which is itself a (documented) leak surface.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .rng import stream

__all__ = [
    "AggregatedCdf",
    "BinnedCounts",
    "BucketSpec",
    "NoisyHistogram",
    "aggregate",
    "bin_values",
    "cdf_sup_distance",
    "default_bucket_spec",
    "dp_quantile",
    "hist_from_json",
    "hist_to_json",
    "privatize",
    "two_sided_geometric",
]


@dataclass(frozen=True)
class BucketSpec:
    lower: float
    upper: float
    n_buckets: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("need lower < upper")
        if self.n_buckets < 1:
            raise ValueError("need n_buckets >= 1")

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.n_buckets

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n_buckets + 1)


def default_bucket_spec(metric: str, d_out: int = 2, n_buckets: int = 1000) -> BucketSpec:
    """Bucket ranges derived from each metric's value bounds."""
    upper = {"vpr": 1.0, "disagreement": 1.0, "std": 0.5, "rc": math.log2(d_out)}[metric]
    return BucketSpec(0.0, upper, n_buckets)


class BinnedCounts(NamedTuple):
    counts: np.ndarray
    clamped: int  # out-of-range values were clamped into the edge buckets


def bin_values(values: np.ndarray, spec: BucketSpec) -> BinnedCounts:
    """Exact histogram; buckets are left-closed, the final bucket right-closed.

    Values outside [lower, upper] are clamped to the edge buckets and
    counted in the clamped field; the counts always sum to len(values).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return BinnedCounts(np.zeros(spec.n_buckets, dtype=np.int64), 0)
    clamped = int(((v < spec.lower) | (v > spec.upper)).sum())
    idx = np.floor((v - spec.lower) / spec.width).astype(np.int64)
    idx = np.clip(idx, 0, spec.n_buckets - 1)
    counts = np.bincount(idx, minlength=spec.n_buckets).astype(np.int64)
    return BinnedCounts(counts, clamped)


@dataclass(frozen=True, eq=False)
class NoisyHistogram:
    spec: BucketSpec
    counts: np.ndarray
    epsilon: float
    client_id: int = 0

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (self.spec.n_buckets,):
            raise ValueError("counts length must equal n_buckets")
        if (c < 0).any():
            raise ValueError("counts must be nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def two_sided_geometric(rng: np.random.Generator, epsilon: float, size) -> np.ndarray:
    """Integer noise with pmf proportional to exp(-epsilon * |k|).

    Sampled as the difference of two iid geometric variables with
    success probability 1 - exp(-epsilon).
    """
    lam = math.exp(-epsilon)
    p = 1.0 - lam
    if p >= 1.0:  # epsilon so large the noise collapses to zero
        return np.zeros(size, dtype=np.int64)
    return (rng.geometric(p, size) - rng.geometric(p, size)).astype(np.int64)


def privatize(
    hist: np.ndarray,
    epsilon: float,
    cap: int,
    seed: int | None = None,
    client_id: int = 0,
    spec: BucketSpec | None = None,
) -> NoisyHistogram:
    """Perturb bucket counts with two-sided geometric noise, truncated to [0, cap].

    seed=None draws from OS entropy (deployment mode); a seed gives a
    reproducible noise stream for tests. spec defaults to unit range
    when the caller only cares about the counts.
    """
    counts = np.asarray(hist, dtype=np.int64)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if cap < counts.max(initial=0):
        raise ValueError("cap must be >= the largest true count")
    rng = np.random.default_rng() if seed is None else stream(seed, "dp-noise", client_id)
    noisy = counts + two_sided_geometric(rng, epsilon, counts.shape)
    if spec is None:
        spec = BucketSpec(0.0, 1.0, counts.size)
    return NoisyHistogram(
        spec=spec, counts=np.clip(noisy, 0, cap), epsilon=epsilon, client_id=client_id
    )


class AggregatedCdf(NamedTuple):
    spec: BucketSpec
    cdf: np.ndarray
    total: int
    empty: bool


def aggregate(histograms) -> AggregatedCdf:
    """Bucketwise sum of client histograms, normalized into a global CDF.

    All histograms must share one BucketSpec. A zero-mass aggregate is
    returned as the all-zero CDF with empty=True rather than an error.
    """
    histograms = list(histograms)
    if not histograms:
        raise ValueError("need at least one histogram")
    spec = histograms[0].spec
    for h in histograms[1:]:
        if h.spec != spec:
            raise ValueError("histograms must share one bucket spec")
    summed = np.sum([h.counts for h in histograms], axis=0)
    total = int(summed.sum())
    if total == 0:
        return AggregatedCdf(spec, np.zeros(spec.n_buckets), 0, True)
    cdf = np.cumsum(summed) / total
    return AggregatedCdf(spec, cdf, total, False)


def dp_quantile(agg: AggregatedCdf, q: float) -> float:
    """Upper edge of the first bucket whose CDF reaches q, q in (0, 1]."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if agg.empty:
        raise ValueError("cannot take a quantile of an empty aggregate")
    idx = int(np.argmax(agg.cdf >= q))
    return float(agg.spec.edges[idx + 1])


def cdf_sup_distance(a: AggregatedCdf, b: AggregatedCdf) -> float:
    """Sup distance between two CDFs on the same buckets (DP distortion probe)."""
    if a.spec != b.spec:
        raise ValueError("CDFs live on different bucket specs")
    return float(np.abs(a.cdf - b.cdf).max())


# ------------------------------------------------------------- serialization


def hist_to_json(hist: NoisyHistogram) -> str:
    """Client -> server message body for one noisy histogram."""
    return json.dumps(
        {
            "spec": {
                "lower": hist.spec.lower,
                "upper": hist.spec.upper,
                "n_buckets": hist.spec.n_buckets,
            },
            "counts": hist.counts.tolist(),
            "epsilon": hist.epsilon,
            "client_id": hist.client_id,
        },
        sort_keys=True,
    )


def hist_from_json(payload: str) -> NoisyHistogram:
    d = json.loads(payload)
    return NoisyHistogram(
        spec=BucketSpec(**d["spec"]),
        counts=np.array(d["counts"], dtype=np.int64),
        epsilon=d["epsilon"],
        client_id=d["client_id"],
    )
