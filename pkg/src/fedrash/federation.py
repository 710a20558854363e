"""FL training loop and candidate-pool generation.

One round: the server samples ceil(ratio * C) clients without
replacement, selected clients train from the current global model, and
the server aggregates. Under FedAvg each client runs E local epochs and
the server takes the train-size-weighted average of the returned
models; under FedSGD each client contributes one full-train-batch
gradient and the server applies the weighted gradient sum.

Aggregation weights normalize over the selected subset (n_c / n_psi) so
the FedAvg aggregate stays a convex combination under partial
participation; strict_paper_weights=True divides by the total train
count over all clients instead.

Candidate pools come from re-training over a (seed, participation
ratio, local epochs) grid; each grid cell is an independent job.
"""

from __future__ import annotations

import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import FederationData, federation_digest
from .errors import DimensionError
from .models import Arch, ModelParams, init_model, loss_and_grad, model_from_bytes, model_to_bytes, sgd_epochs
from .rng import stream, stream_seed

__all__ = [
    "CandidatePool",
    "CandidateRecord",
    "FedConfig",
    "PoolGrid",
    "fed_round",
    "generate_pool",
    "load_pool",
    "train_candidate",
]


@dataclass(frozen=True)
class FedConfig:
    rounds: int
    participation_ratio: float
    local_epochs: int
    lr: float
    batch_size: int
    algorithm: str = "fedavg"
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.participation_ratio <= 1:
            raise ValueError("participation_ratio must be in (0, 1]")
        if self.algorithm not in ("fedavg", "fedsgd"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        # local_epochs is ignored under fedsgd (single gradient step per round)
        if self.algorithm == "fedavg" and self.local_epochs < 1:
            raise ValueError("fedavg needs local_epochs >= 1")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("need lr > 0 and batch_size >= 1")


@dataclass(frozen=True, eq=False)
class CandidateRecord:
    params: ModelParams
    config: FedConfig
    pool_index: int


@dataclass(frozen=True, eq=False)
class CandidatePool:
    records: list[CandidateRecord]
    data_manifest_hash: str

    def __post_init__(self):
        archs = {r.params.arch for r in self.records}
        if len(archs) > 1:
            raise ValueError("all pool records must share one architecture")

    @property
    def size(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class PoolGrid:
    seeds: tuple
    participation_ratios: tuple
    local_epochs: tuple
    base: FedConfig

    def __post_init__(self):
        if not (self.seeds and self.participation_ratios and self.local_epochs):
            raise ValueError("grid axes must be non-empty")
        object.__setattr__(self, "seeds", tuple(sorted(self.seeds)))
        object.__setattr__(self, "participation_ratios", tuple(sorted(self.participation_ratios)))
        object.__setattr__(self, "local_epochs", tuple(sorted(self.local_epochs)))

    def cells(self) -> list[FedConfig]:
        """Configs in lexicographic (seed, ratio, epochs) order."""
        out = []
        for seed in self.seeds:
            for ratio in self.participation_ratios:
                for epochs in self.local_epochs:
                    out.append(
                        replace(
                            self.base,
                            seed=seed,
                            participation_ratio=ratio,
                            local_epochs=epochs,
                        )
                    )
        return out


def _check_dims(arch: Arch, data: FederationData):
    if arch.d_in != data.d_in or arch.d_out != data.d_out:
        raise DimensionError(
            f"arch ({arch.d_in}->{arch.d_out}) does not match data "
            f"({data.d_in}->{data.d_out})"
        )


def _select_clients(cfg: FedConfig, n_clients: int, round_index: int) -> np.ndarray:
    k = math.ceil(cfg.participation_ratio * n_clients)
    rng = stream(cfg.seed, "client-select", round_index)
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def fed_round(
    global_model: ModelParams,
    data: FederationData,
    cfg: FedConfig,
    round_index: int,
    strict_paper_weights: bool = False,
) -> ModelParams:
    """One server round: select clients, train locally, aggregate."""
    _check_dims(global_model.arch, data)
    selected = _select_clients(cfg, data.n_clients, round_index)
    train_counts = np.array([data.shards[c].train.n for c in selected], dtype=np.float64)
    if strict_paper_weights:
        denom = float(sum(s.train.n for s in data.shards))
    else:
        denom = float(train_counts.sum())
    weights = train_counts / denom

    if cfg.algorithm == "fedavg":
        aggregate = np.zeros_like(global_model.weights)
        for w_c, c in zip(weights, selected):
            local = sgd_epochs(
                global_model,
                data.shards[c].train,
                lr=cfg.lr,
                epochs=cfg.local_epochs,
                batch_size=cfg.batch_size,
                rng_seed=stream_seed(cfg.seed, "local-sgd", round_index, int(c)),
            )
            aggregate += w_c * local.weights
        return ModelParams(global_model.arch, aggregate)

    # fedsgd: one full-train-batch gradient per selected client
    grad_sum = np.zeros_like(global_model.weights)
    for w_c, c in zip(weights, selected):
        _, grad = loss_and_grad(global_model, data.shards[c].train)
        grad_sum += w_c * grad
    return ModelParams(global_model.arch, global_model.weights - cfg.lr * grad_sum)


def train_candidate(
    data: FederationData,
    cfg: FedConfig,
    arch: Arch | None = None,
    pool_index: int = 0,
    strict_paper_weights: bool = False,
) -> CandidateRecord:
    """Run R rounds from a fresh seeded initialization."""
    if arch is None:
        arch = Arch.linear(data.d_in, data.d_out)
    _check_dims(arch, data)
    model = init_model(arch, cfg.seed)
    for r in range(cfg.rounds):
        model = fed_round(model, data, cfg, r, strict_paper_weights=strict_paper_weights)
    return CandidateRecord(params=model, config=cfg, pool_index=pool_index)


_WORKER_CTX: dict = {}


def _pool_worker_init(data, arch, strict):
    _WORKER_CTX.update(data=data, arch=arch, strict=strict)


def _pool_worker_train(item):
    index, cfg = item
    return train_candidate(
        _WORKER_CTX["data"],
        cfg,
        arch=_WORKER_CTX["arch"],
        pool_index=index,
        strict_paper_weights=_WORKER_CTX["strict"],
    )


# ---------------------------------------------------------------- pool store


def _config_json(cfg: FedConfig) -> dict:
    return {
        "rounds": cfg.rounds,
        "participation_ratio": cfg.participation_ratio,
        "local_epochs": cfg.local_epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
    }


def _arch_json(arch: Arch) -> dict:
    return {"kind": arch.kind, "d_in": arch.d_in, "d_hidden": arch.d_hidden, "d_out": arch.d_out}


def _pool_manifest(grid: PoolGrid, arch: Arch, digest: str) -> dict:
    return {
        "grid": {
            "seeds": list(grid.seeds),
            "participation_ratios": list(grid.participation_ratios),
            "local_epochs": list(grid.local_epochs),
            "base": _config_json(grid.base),
        },
        "arch": _arch_json(arch),
        "data_digest": digest,
    }


def generate_pool(
    data: FederationData,
    grid: PoolGrid,
    arch: Arch | None = None,
    store_dir=None,
    workers: int = 1,
    strict_paper_weights: bool = False,
) -> CandidatePool:
    """Train one candidate per grid cell, optionally persisting incrementally.

    With a store directory, finished candidates are written as they
    complete (binary params + JSON provenance); rerunning after an
    interruption trains only the missing indices, so a resumed pool is
    identical to an uninterrupted one.
    """
    if arch is None:
        arch = Arch.linear(data.d_in, data.d_out)
    _check_dims(arch, data)
    digest = federation_digest(data)
    cells = grid.cells()

    store = Path(store_dir) if store_dir is not None else None
    manifest = _pool_manifest(grid, arch, digest)
    if store is not None:
        store.mkdir(parents=True, exist_ok=True)
        manifest_path = store / "manifest.json"
        if manifest_path.exists():
            with open(manifest_path, encoding="utf-8") as fh:
                existing = json.load(fh)
            if existing != manifest:
                raise ValueError(f"pool store {store} holds a different grid/data manifest")
        else:
            with open(manifest_path, "w", encoding="utf-8") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)

    records: dict[int, CandidateRecord] = {}
    pending = []
    for index, cfg in enumerate(cells):
        if store is not None and (store / f"candidate_{index}.bin").exists():
            params = model_from_bytes((store / f"candidate_{index}.bin").read_bytes())
            records[index] = CandidateRecord(params=params, config=cfg, pool_index=index)
        else:
            pending.append((index, cfg))

    if workers > 1 and len(pending) > 1:
        # training jobs are pure-Python loops, so parallelism needs processes
        methods = multiprocessing.get_all_start_methods()
        ctx = multiprocessing.get_context("fork" if "fork" in methods else None)
        with ProcessPoolExecutor(
            max_workers=workers,
            mp_context=ctx,
            initializer=_pool_worker_init,
            initargs=(data, arch, strict_paper_weights),
        ) as pool:
            trained = list(pool.map(_pool_worker_train, pending, chunksize=1))
    else:
        trained = [
            train_candidate(
                data, cfg, arch=arch, pool_index=index,
                strict_paper_weights=strict_paper_weights,
            )
            for index, cfg in pending
        ]

    for record in trained:
        records[record.pool_index] = record
        if store is not None:
            index = record.pool_index
            (store / f"candidate_{index}.bin").write_bytes(model_to_bytes(record.params))
            with open(store / f"candidate_{index}.json", "w", encoding="utf-8") as fh:
                json.dump(_config_json(record.config), fh, indent=2, sort_keys=True)

    ordered = [records[i] for i in range(len(cells))]
    return CandidatePool(records=ordered, data_manifest_hash=digest)


def load_pool(store_dir) -> CandidatePool:
    """Load a fully persisted pool from its store directory."""
    store = Path(store_dir)
    with open(store / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    g = manifest["grid"]
    grid = PoolGrid(
        seeds=tuple(g["seeds"]),
        participation_ratios=tuple(g["participation_ratios"]),
        local_epochs=tuple(g["local_epochs"]),
        base=FedConfig(**g["base"]),
    )
    cells = grid.cells()
    records = []
    for index, cfg in enumerate(cells):
        blob_path = store / f"candidate_{index}.bin"
        if not blob_path.exists():
            raise FileNotFoundError(f"pool store {store} is missing candidate {index}")
        records.append(
            CandidateRecord(
                params=model_from_bytes(blob_path.read_bytes()), config=cfg, pool_index=index
            )
        )
    return CandidatePool(records=records, data_manifest_hash=manifest["data_digest"])
