"""Evaluate every candidate on every evaluation client's test split once.

The resulting PredictionTensor is the single read-only object all set
construction and metric computation consume, so inference never reruns
per metric. Argmax ties break to the lowest class index; binary tasks
additionally expose the scalar score P(class 1) with decision threshold
tau (default 0.5).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FederationData
from .errors import DimensionError, UnsupportedMetricError
from .federation import CandidatePool
from .models import forward

__all__ = ["PredictionTensor", "evaluate_pool", "load_tensor", "save_tensor"]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PredictionTensor:
    """Per (client, candidate, sample) class scores plus derived decisions.

    scores[cid] has shape (n_candidates, n_test_c, d_out); decisions and
    accuracies are derived once at construction. All arrays are
    read-only.
    """

    client_ids: tuple
    d_out: int
    n_candidates: int
    scores: dict
    labels: dict
    sensitive: dict

    def __post_init__(self):
        decisions, accuracies = {}, {}
        for cid in self.client_ids:
            block = np.asarray(self.scores[cid], dtype=np.float64)
            if block.ndim != 3 or block.shape[0] != self.n_candidates or block.shape[2] != self.d_out:
                raise DimensionError(f"client {cid}: score block shape {block.shape}")
            if not np.allclose(block.sum(axis=2), 1.0, atol=1e-9):
                raise ValueError(f"client {cid}: score rows must be probability vectors")
            labels = np.asarray(self.labels[cid], dtype=np.int64)
            if labels.shape != (block.shape[1],):
                raise DimensionError(f"client {cid}: labels misaligned with scores")
            # ties break to the lowest class index (np.argmax picks the first max)
            dec = np.argmax(block, axis=2)
            decisions[cid] = _freeze(dec)
            accuracies[cid] = _freeze((dec == labels[None, :]).mean(axis=1))
            self.scores[cid] = _freeze(block)
            self.labels[cid] = _freeze(labels)
            if self.sensitive.get(cid) is not None:
                self.sensitive[cid] = _freeze(np.asarray(self.sensitive[cid], dtype=np.int64))
        object.__setattr__(self, "decisions", decisions)
        object.__setattr__(self, "accuracies", accuracies)

    @property
    def is_binary(self) -> bool:
        return self.d_out == 2

    def test_count(self, client_id: int) -> int:
        return self.scores[client_id].shape[1]

    @property
    def total_test_count(self) -> int:
        return sum(self.test_count(c) for c in self.client_ids)

    def binary_scores(self, client_id: int) -> np.ndarray:
        """Scalar score s = P(class 1), shape (n_candidates, n_test_c)."""
        if not self.is_binary:
            raise UnsupportedMetricError("scalar scores are defined for binary tasks only")
        return self.scores[client_id][:, :, 1]

    def weighted_accuracy(self, eval_clients=None) -> np.ndarray:
        """Test-size-weighted mean accuracy per candidate over eval_clients."""
        clients = self.client_ids if eval_clients is None else tuple(eval_clients)
        weights = np.array([self.test_count(c) for c in clients], dtype=np.float64)
        accs = np.stack([self.accuracies[c] for c in clients], axis=0)  # (C, m)
        return (weights[:, None] * accs).sum(axis=0) / weights.sum()


def evaluate_pool(
    pool: CandidatePool, data: FederationData, eval_clients=None, workers: int = 1
) -> PredictionTensor:
    """Score every candidate on every evaluation client's test split."""
    if eval_clients is None:
        eval_clients = [s.client_id for s in data.shards]
    eval_clients = sorted(int(c) for c in eval_clients)
    for c in eval_clients:
        if not 0 <= c < data.n_clients:
            raise DimensionError(f"unknown evaluation client {c}")
    if pool.records:
        arch = pool.records[0].params.arch
        if arch.d_in != data.d_in or arch.d_out != data.d_out:
            raise DimensionError("pool architecture does not match data dims")

    def score_client(cid: int) -> np.ndarray:
        test = data.shards[cid].test
        return np.stack([forward(rec.params, test.features) for rec in pool.records])

    if workers > 1 and len(eval_clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as tp:
            blocks = list(tp.map(score_client, eval_clients))
    else:
        blocks = [score_client(c) for c in eval_clients]

    return PredictionTensor(
        client_ids=tuple(eval_clients),
        d_out=data.d_out,
        n_candidates=pool.size,
        scores={c: b for c, b in zip(eval_clients, blocks)},
        labels={c: data.shards[c].test.labels for c in eval_clients},
        sensitive={c: data.shards[c].sensitive for c in eval_clients},
    )


def save_tensor(tensor: PredictionTensor, directory) -> None:
    """Binary cache: one f64-LE file per client, row-major (candidate, sample, class)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {
        "client_ids": list(tensor.client_ids),
        "d_out": tensor.d_out,
        "n_candidates": tensor.n_candidates,
        "labels": {str(c): tensor.labels[c].tolist() for c in tensor.client_ids},
        "sensitive": {
            str(c): (None if tensor.sensitive.get(c) is None else tensor.sensitive[c].tolist())
            for c in tensor.client_ids
        },
    }
    with open(directory / "index.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, sort_keys=True)
    for cid in tensor.client_ids:
        (directory / f"client_{cid}.bin").write_bytes(
            tensor.scores[cid].astype("<f8").tobytes()
        )


def load_tensor(directory) -> PredictionTensor:
    directory = Path(directory)
    with open(directory / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)
    client_ids = tuple(index["client_ids"])
    scores, labels, sensitive = {}, {}, {}
    for cid in client_ids:
        raw = np.frombuffer((directory / f"client_{cid}.bin").read_bytes(), dtype="<f8")
        lab = np.array(index["labels"][str(cid)], dtype=np.int64)
        block = raw.reshape(index["n_candidates"], lab.size, index["d_out"])
        scores[cid] = block.astype(np.float64)
        labels[cid] = lab
        sens = index["sensitive"].get(str(cid))
        sensitive[cid] = None if sens is None else np.array(sens, dtype=np.int64)
    return PredictionTensor(
        client_ids=client_ids,
        d_out=index["d_out"],
        n_candidates=index["n_candidates"],
        scores=scores,
        labels=labels,
        sensitive=sensitive,
    )
