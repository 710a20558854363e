"""Demographic-parity evaluation of Rashomon-set members.

For each sampled member we report accuracy and the demographic parity
gap |P(decision=1 | z=1) - P(decision=1 | z=0)| per client and on the
pooled test rows. A client whose test split lacks one of the sensitive
groups yields an explicit "undefined" status, never a silent zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedMetricError
from .predictions import PredictionTensor
from .rashomon import RashomonSelection
from .rng import stream

__all__ = [
    "FairnessReport",
    "FairnessRow",
    "demographic_parity_gap",
    "fairness_sweep",
    "write_fairness_csv",
]


@dataclass(frozen=True)
class FairnessRow:
    client: str  # client id as string, or "global" for the pooled row
    candidate: int
    accuracy: float
    dp_gap: float | None
    status: str  # "ok" | "undefined"


@dataclass(frozen=True)
class FairnessReport:
    rows: tuple
    sampled_candidates: tuple


def demographic_parity_gap(decisions: np.ndarray, sensitive: np.ndarray) -> float | None:
    """Absolute positive-rate difference between the two sensitive groups.

    Returns None when either group is empty (the gap is undefined).
    """
    dec = np.asarray(decisions)
    z = np.asarray(sensitive)
    if dec.shape != z.shape:
        raise ValueError("decisions and sensitive bits must align")
    mask1 = z == 1
    mask0 = z == 0
    if not mask1.any() or not mask0.any():
        return None
    return float(abs((dec[mask1] == 1).mean() - (dec[mask0] == 1).mean()))


def fairness_sweep(
    tensor: PredictionTensor,
    selection: RashomonSelection,
    sample_k: int = 15,
    seed: int = 0,
) -> FairnessReport:
    """Sample members and report accuracy plus dp gap per client and pooled."""
    if not tensor.is_binary:
        raise UnsupportedMetricError("demographic parity needs a binary task")
    missing = [c for c in tensor.client_ids if tensor.sensitive.get(c) is None]
    if missing:
        raise UnsupportedMetricError(f"no sensitive attribute on clients {missing}")
    if selection.is_empty:
        raise ValueError("selection has no members")

    members = selection.member_indices
    k = min(sample_k, members.size)
    rng = stream(seed, "fairness-sample")
    sampled = np.sort(rng.choice(members, size=k, replace=False))

    rows = []
    for j in sampled:
        for cid in tensor.client_ids:
            gap = demographic_parity_gap(tensor.decisions[cid][j], tensor.sensitive[cid])
            rows.append(
                FairnessRow(
                    client=str(cid),
                    candidate=int(j),
                    accuracy=float(tensor.accuracies[cid][j]),
                    dp_gap=gap,
                    status="ok" if gap is not None else "undefined",
                )
            )
        pooled_dec = np.concatenate([tensor.decisions[c][j] for c in tensor.client_ids])
        pooled_lab = np.concatenate([tensor.labels[c] for c in tensor.client_ids])
        pooled_sen = np.concatenate([tensor.sensitive[c] for c in tensor.client_ids])
        gap = demographic_parity_gap(pooled_dec, pooled_sen)
        rows.append(
            FairnessRow(
                client="global",
                candidate=int(j),
                accuracy=float((pooled_dec == pooled_lab).mean()),
                dp_gap=gap,
                status="ok" if gap is not None else "undefined",
            )
        )
    return FairnessReport(rows=tuple(rows), sampled_candidates=tuple(int(j) for j in sampled))


def write_fairness_csv(report: FairnessReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "candidate", "accuracy", "dp_gap", "status"])
        for row in report.rows:
            writer.writerow(
                [
                    row.client,
                    row.candidate,
                    repr(row.accuracy),
                    "" if row.dp_gap is None else repr(row.dp_gap),
                    row.status,
                ]
            )
