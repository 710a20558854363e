"""Decision-based and score-based predictive-multiplicity metrics.

Decision-based metrics compare set members' argmax decisions to the
baseline's:

  ambiguity    fraction of samples where any member disagrees with the
               baseline; the federated value is the test-size-weighted
               mean of client values and equals the pooled value exactly
  discrepancy  largest per-member flip fraction; the federated estimator
               max_c (n_c / n) * gamma_c lower-bounds the pooled value
  disagreement per-sample probability that two independently drawn
               members decide differently (binary tasks), closed form
               4 p (1 - p) with p the fraction of members voting 1;
               this equals twice the iid ordered-pair disagreement
               probability, normalized to [0, 1]

Score-based metrics act on one sample's member score rows: Rashomon
capacity (Blahut-Arimoto channel capacity of the members-to-classes
channel, in bits), viable prediction range (max minus min score), and
the population standard deviation of scores. For multi-class tasks VPR
and Std take the worst class (max over classes of the per-class value).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, UnsupportedMetricError
from .predictions import PredictionTensor
from .rashomon import RashomonSelection

__all__ = [
    "AggregateMetrics",
    "PerSampleScores",
    "SCORE_METRICS",
    "ambiguity_centralized",
    "ambiguity_global",
    "ambiguity_local",
    "disagreement",
    "disagreement_values",
    "discrepancy_centralized",
    "discrepancy_federated",
    "discrepancy_local",
    "per_sample_scores",
    "percentile_summary",
    "rashomon_capacity",
    "score_std",
    "vpr",
]

SCORE_METRICS = ("rc", "vpr", "std", "disagreement")
DEFAULT_PERCENTILES = (25, 50, 75, 90, 99)

_RANGES = {
    "vpr": (0.0, 1.0),
    "std": (0.0, 0.5),
    "disagreement": (0.0, 1.0),
    "rc": (0.0, math.inf),
}


@dataclass(frozen=True, eq=False)
class PerSampleScores:
    """One score metric evaluated per (client, sample)."""

    metric: str
    values: dict  # client_id -> (n_test_c,) array

    def __post_init__(self):
        lo, hi = _RANGES[self.metric]
        for cid, vals in self.values.items():
            v = np.asarray(vals, dtype=np.float64)
            if v.size and (v.min() < lo - 1e-9 or v.max() > hi + 1e-9):
                raise ValueError(f"{self.metric} values for client {cid} outside [{lo}, {hi}]")
            v.setflags(write=False)
            self.values[cid] = v

    def pooled(self, clients=None) -> np.ndarray:
        keys = sorted(self.values) if clients is None else list(clients)
        return np.concatenate([self.values[c] for c in keys])


@dataclass(frozen=True, eq=False)
class AggregateMetrics:
    """Stage-iii roll-up for one Rashomon selection."""

    ambiguity: float
    discrepancy: float
    ambiguity_per_client: dict
    discrepancy_per_client: dict
    percentile_tables: dict  # metric -> {percentile: value}


def _member_block(selection: RashomonSelection, stacked: np.ndarray) -> np.ndarray:
    if selection.is_empty:
        raise ValueError("selection has no members")
    return stacked[selection.members]


# ----------------------------------------------------------- decision-based


def ambiguity_local(tensor: PredictionTensor, client: int, selection: RashomonSelection) -> float:
    """Fraction of the client's test samples with any member-vs-baseline conflict."""
    decisions = _member_block(selection, tensor.decisions[client])
    baseline = tensor.decisions[client][selection.baseline_index]
    return float((decisions != baseline[None, :]).any(axis=0).mean())


def ambiguity_global(locals_) -> float:
    """Server-side weighted aggregation of (local ambiguity, n_c) pairs."""
    values = np.array([v for v, _ in locals_], dtype=np.float64)
    counts = np.array([n for _, n in locals_], dtype=np.float64)
    return float((counts / counts.sum()) @ values)


def ambiguity_centralized(
    tensor: PredictionTensor, clients, selection: RashomonSelection
) -> float:
    """Trusted-server path: ambiguity over the pooled test samples."""
    decisions = np.concatenate([tensor.decisions[c] for c in clients], axis=1)
    members = _member_block(selection, decisions)
    baseline = decisions[selection.baseline_index]
    return float((members != baseline[None, :]).any(axis=0).mean())


def discrepancy_local(tensor: PredictionTensor, client: int, selection: RashomonSelection) -> float:
    """Largest fraction of this client's decisions one member flips vs the baseline."""
    decisions = _member_block(selection, tensor.decisions[client])
    baseline = tensor.decisions[client][selection.baseline_index]
    return float((decisions != baseline[None, :]).mean(axis=1).max())


def discrepancy_federated(locals_) -> float:
    """Weighted maximum max_c (n_c / n) * gamma_c over (local value, n_c) pairs."""
    values = np.array([v for v, _ in locals_], dtype=np.float64)
    counts = np.array([n for _, n in locals_], dtype=np.float64)
    return float(((counts / counts.sum()) * values).max())


def discrepancy_centralized(
    tensor: PredictionTensor, clients, selection: RashomonSelection
) -> float:
    """Trusted-server path: discrepancy over the pooled test samples."""
    decisions = np.concatenate([tensor.decisions[c] for c in clients], axis=1)
    members = _member_block(selection, decisions)
    baseline = decisions[selection.baseline_index]
    return float((members != baseline[None, :]).mean(axis=1).max())


def disagreement_values(
    tensor: PredictionTensor, client: int, selection: RashomonSelection, tau: float = 0.5
) -> np.ndarray:
    """Per-sample disagreement 4 p (1 - p), p = fraction of members with score > tau.

    Estimates pairs by drawing two members independently (with
    replacement) from the uniform distribution over the set, doubled per
    the metric's definition; the doubling lands the range on [0, 1] with
    the maximum at an even split.
    """
    scores = _member_block(selection, tensor.binary_scores(client))
    p = (scores > tau).mean(axis=0)
    return 4.0 * p * (1.0 - p)


def disagreement(
    tensor: PredictionTensor,
    client: int,
    sample: int,
    selection: RashomonSelection,
    tau: float = 0.5,
) -> float:
    return float(disagreement_values(tensor, client, selection, tau)[sample])


# -------------------------------------------------------------- score-based


def _ba_capacities(blocks: np.ndarray, tolerance: float, max_iters: int) -> np.ndarray:
    """Blahut-Arimoto capacities (bits) for a batch of channels.

    blocks has shape (n, members, classes); rows are already clipped and
    renormalized. Iterates all channels simultaneously, retiring each one
    once its capacity bracket max_i D_i - sum_i r_i D_i drops below
    tolerance, and returns the lower bounds.

    Binary-output channels are first reduced exactly to their two extreme
    rows: every other row is a convex mixture of them, and mixture rows
    never change capacity. This keeps the iteration in the geometric
    convergence regime when many members score alike.
    """
    if blocks.shape[2] == 2 and blocks.shape[1] > 2:
        pick = np.arange(blocks.shape[0])
        p1 = blocks[:, :, 1]
        blocks = np.stack(
            [blocks[pick, p1.argmin(axis=1)], blocks[pick, p1.argmax(axis=1)]], axis=1
        )
    n, m, _ = blocks.shape
    log_p = np.log(blocks)
    r = np.full((n, m), 1.0 / m)
    out = np.zeros(n)
    active = np.arange(n)
    worst = (0.0, 0.0)
    for _ in range(max_iters):
        p = blocks[active]
        lp = log_p[active]
        ra = r[active]
        q = np.einsum("nm,nmd->nd", ra, p)
        kl_bits = (p * (lp - np.log(q)[:, None, :])).sum(axis=2) / _LN2
        lower = np.einsum("nm,nm->n", ra, kl_bits)
        upper = kl_bits.max(axis=1)
        done = (upper - lower) < tolerance
        if done.any():
            out[active[done]] = lower[done]
        if done.all():
            return out
        keep = ~done
        worst_idx = int(np.argmax(upper[keep] - lower[keep]))
        worst = (float(lower[keep][worst_idx]), float(upper[keep][worst_idx]))
        ra = ra[keep] * np.exp(_LN2 * kl_bits[keep])
        ra /= ra.sum(axis=1, keepdims=True)
        active = active[keep]
        r[active] = ra
    raise ConvergenceError(
        f"Blahut-Arimoto left {active.size} channel(s) above tolerance {tolerance} "
        f"after {max_iters} iterations (worst bracket [{worst[0]}, {worst[1]}])",
        lower=worst[0],
        upper=worst[1],
    )


_LN2 = math.log(2.0)


def _clip_rows(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-12, None)
    return p / p.sum(axis=-1, keepdims=True)


def rashomon_capacity(
    score_rows: np.ndarray, tolerance: float = 1e-9, max_iters: int = 10000
) -> float:
    """Channel capacity (bits) of the members -> classes channel for one sample.

    Blahut-Arimoto iteration from a uniform input distribution; rows are
    clipped to >= 1e-12 and renormalized first. Stops when the capacity
    bracket max_i D_i - sum_i r_i D_i falls below tolerance and returns
    the lower bound; non-convergence raises with the final bracket.
    """
    p = np.asarray(score_rows, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("score_rows must be a non-empty (members, classes) matrix")
    if (p < 0).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("score rows must be probability vectors")
    return float(_ba_capacities(_clip_rows(p)[None, :, :], tolerance, max_iters)[0])


def vpr(score_column: np.ndarray) -> float:
    """Viable prediction range: max - min member score.

    Accepts a (members,) scalar-score vector, or a (members, classes)
    block for multi-class tasks where the per-class range is maximized
    over classes.
    """
    s = np.asarray(score_column, dtype=np.float64)
    if s.ndim == 1:
        return float(np.ptp(s))
    return float(np.ptp(s, axis=0).max())


def score_std(score_column: np.ndarray) -> float:
    """Population standard deviation of member scores (uniform weights).

    Multi-class blocks take the worst class, mirroring the VPR
    convention.
    """
    s = np.asarray(score_column, dtype=np.float64)
    if s.ndim == 1:
        return float(np.std(s))
    return float(np.std(s, axis=0).max())


def per_sample_scores(
    tensor: PredictionTensor,
    clients,
    selection: RashomonSelection,
    metric: str,
    tau: float = 0.5,
    rc_tolerance: float = 1e-9,
    rc_max_iters: int = 10000,
) -> PerSampleScores:
    """Evaluate one score metric per (client, sample) over the selection."""
    if metric not in SCORE_METRICS:
        raise UnsupportedMetricError(f"unknown score metric {metric!r}")
    values = {}
    for cid in clients:
        if metric == "disagreement":
            values[cid] = disagreement_values(tensor, cid, selection, tau)
            continue
        block = _member_block(selection, tensor.scores[cid])  # (members, n, d)
        n = block.shape[1]
        if metric == "rc":
            channels = _clip_rows(np.swapaxes(block, 0, 1))  # (n, members, d)
            values[cid] = _ba_capacities(channels, rc_tolerance, rc_max_iters)
        else:
            fn = vpr if metric == "vpr" else score_std
            if tensor.is_binary:
                scalar = block[:, :, 1]
                values[cid] = np.array([fn(scalar[:, i]) for i in range(n)])
            else:
                values[cid] = np.array([fn(block[:, i, :]) for i in range(n)])
    return PerSampleScores(metric=metric, values=values)


# ----------------------------------------------------------------- summaries


def percentile_summary(per_sample_values: np.ndarray, percentiles=DEFAULT_PERCENTILES) -> dict:
    """Nearest-rank empirical quantiles of the pooled per-sample values."""
    vals = np.sort(np.asarray(per_sample_values, dtype=np.float64))
    if vals.size == 0:
        raise ValueError("need at least one value")
    out = {}
    for p in percentiles:
        if not 0 <= p <= 100:
            raise ValueError(f"percentile {p} outside [0, 100]")
        rank = max(1, math.ceil(p / 100.0 * vals.size))
        out[p] = float(vals[rank - 1])
    return out
