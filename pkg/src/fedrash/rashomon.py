"""Rashomon selections over a candidate pool, under three definitions.

Membership always compares a candidate to the baseline through the
per-client metric difference delta_c = |acc_c(baseline) - acc_c(j)|:

  global       aggregated delta (test-size-weighted mean over the
               evaluation clients, mirroring FedAvg aggregation) within
               epsilon for every constraint
  t-agreement  delta within epsilon on at least ceil(t * |C_E|)
               evaluation clients, t a fraction in (0, 1]
  individual   delta within epsilon on one named client alone

The baseline maximizes test-size-weighted mean accuracy (ties to the
lowest pool index); its delta is zero everywhere, so it belongs to every
selection at any epsilon >= 0. Empty selections are reported as
findings, never raised as errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .predictions import PredictionTensor

__all__ = [
    "PerformanceConstraint",
    "RashomonSelection",
    "build_global",
    "build_individual",
    "build_t_agreement",
    "rashomon_ratio",
    "select_baseline",
    "selection_from_json",
    "selection_to_json",
]

_METRICS = ("accuracy",)


@dataclass(frozen=True)
class PerformanceConstraint:
    epsilon: float
    metric: str = "accuracy"

    def __post_init__(self):
        if self.metric not in _METRICS:
            raise ValueError(f"unsupported constraint metric {self.metric!r}")
        if not math.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class RashomonSelection:
    definition: str  # "global" | "t_agreement" | "individual"
    constraints: tuple
    members: np.ndarray  # bool mask over pool indices
    baseline_index: int
    t: float | None = None
    client_id: int | None = None
    pass_matrix: np.ndarray | None = None  # optional (clients, candidates) audit trail

    def __post_init__(self):
        members = np.asarray(self.members, dtype=bool)
        members.setflags(write=False)
        object.__setattr__(self, "members", members)
        if members.any() and not members[self.baseline_index]:
            raise ValueError("baseline must belong to every nonempty selection")

    @property
    def is_empty(self) -> bool:
        return not self.members.any()

    @property
    def member_indices(self) -> np.ndarray:
        return np.flatnonzero(self.members)

    @property
    def size(self) -> int:
        return int(self.members.sum())


def _delta_matrix(tensor: PredictionTensor, clients, baseline: int) -> np.ndarray:
    """Per-client absolute accuracy gaps to the baseline, shape (C, m)."""
    rows = [np.abs(tensor.accuracies[c] - tensor.accuracies[c][baseline]) for c in clients]
    return np.stack(rows, axis=0)


def select_baseline(tensor: PredictionTensor, eval_clients=None) -> int:
    """Candidate maximizing test-size-weighted mean accuracy, ties -> lowest index."""
    return int(np.argmax(tensor.weighted_accuracy(eval_clients)))


def build_global(
    tensor: PredictionTensor,
    eval_clients,
    constraints,
    baseline: int,
    weighted: bool = True,
) -> RashomonSelection:
    """Membership on the aggregated per-client gaps.

    weighted=True aggregates with test-size weights n_c (the FedAvg
    convention); weighted=False takes the unweighted client mean.
    """
    clients = _resolve_clients(tensor, eval_clients)
    constraints = tuple(constraints)
    delta = _delta_matrix(tensor, clients, baseline)
    if weighted:
        w = np.array([tensor.test_count(c) for c in clients], dtype=np.float64)
        w /= w.sum()
    else:
        w = np.full(len(clients), 1.0 / len(clients))
    aggregated = w @ delta  # (m,)
    members = np.ones(tensor.n_candidates, dtype=bool)
    for con in constraints:
        members &= aggregated <= con.epsilon
    return RashomonSelection(
        definition="global", constraints=constraints, members=members, baseline_index=baseline
    )


def build_t_agreement(
    tensor: PredictionTensor,
    eval_clients,
    constraints,
    baseline: int,
    t: float,
) -> RashomonSelection:
    """Membership when at least ceil(t * |C_E|) clients pass individually."""
    if not 0 < t <= 1:
        raise ValueError("t must be in (0, 1]")
    clients = _resolve_clients(tensor, eval_clients)
    constraints = tuple(constraints)
    passes = _pass_matrix(tensor, clients, constraints, baseline)
    required = math.ceil(t * len(clients))
    members = passes.sum(axis=0) >= required
    return RashomonSelection(
        definition="t_agreement",
        constraints=constraints,
        members=members,
        baseline_index=baseline,
        t=t,
        pass_matrix=passes,
    )


def build_individual(
    tensor: PredictionTensor,
    client_id: int,
    constraints,
    baseline: int,
) -> RashomonSelection:
    """Membership on one client's gaps alone.

    Per-client constraint overrides (the individual-constraints variant)
    are expressed by passing that client's own constraint list.
    """
    if client_id not in tensor.client_ids:
        raise KeyError(f"unknown client {client_id}")
    constraints = tuple(constraints)
    passes = _pass_matrix(tensor, [client_id], constraints, baseline)
    return RashomonSelection(
        definition="individual",
        constraints=constraints,
        members=passes[0],
        baseline_index=baseline,
        client_id=client_id,
    )


def _resolve_clients(tensor: PredictionTensor, eval_clients) -> list:
    clients = list(tensor.client_ids) if eval_clients is None else sorted(eval_clients)
    if not clients:
        raise ValueError("need at least one evaluation client")
    for c in clients:
        if c not in tensor.client_ids:
            raise KeyError(f"unknown client {c}")
    return clients


def _pass_matrix(tensor, clients, constraints, baseline) -> np.ndarray:
    delta = _delta_matrix(tensor, clients, baseline)
    passes = np.ones_like(delta, dtype=bool)
    for con in constraints:
        passes &= delta <= con.epsilon
    return passes


def rashomon_ratio(selection: RashomonSelection, pool_size: int) -> float:
    """Empirical sampled-fraction estimator |members| / pool_size."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    return selection.size / pool_size


# ------------------------------------------------------------- serialization


def selection_to_json(selection: RashomonSelection, include_pass_matrix: bool = False) -> dict:
    out = {
        "definition": selection.definition,
        "constraints": [
            {"metric": c.metric, "epsilon": c.epsilon} for c in selection.constraints
        ],
        "baseline_index": selection.baseline_index,
        "pool_size": int(selection.members.size),
        "member_indices": selection.member_indices.tolist(),
        "empty": selection.is_empty,
    }
    if selection.t is not None:
        out["t"] = selection.t
    if selection.client_id is not None:
        out["client_id"] = selection.client_id
    if include_pass_matrix and selection.pass_matrix is not None:
        out["pass_matrix"] = selection.pass_matrix.astype(int).tolist()
    return out


def selection_from_json(payload: dict) -> RashomonSelection:
    members = np.zeros(payload["pool_size"], dtype=bool)
    members[payload["member_indices"]] = True
    pass_matrix = payload.get("pass_matrix")
    return RashomonSelection(
        definition=payload["definition"],
        constraints=tuple(
            PerformanceConstraint(epsilon=c["epsilon"], metric=c["metric"])
            for c in payload["constraints"]
        ),
        members=members,
        baseline_index=payload["baseline_index"],
        t=payload.get("t"),
        client_id=payload.get("client_id"),
        pass_matrix=None if pass_matrix is None else np.array(pass_matrix, dtype=bool),
    )
