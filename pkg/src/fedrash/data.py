"""Dataset ingestion, synthetic generation, client partitioning.

The partitioner simulates heterogeneous clients with Dirichlet label
skew: for each class, client proportions are drawn from
Dirichlet(alpha), small alpha meaning strong skew. Each client's rows
are further split into train/validation/test; the union of all splits
is exactly the input row multiset.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, IngestionError, PartitionError
from .models import Batch
from .rng import stream

__all__ = [
    "ClientShard",
    "FederationData",
    "federation_digest",
    "load_csv",
    "load_federation",
    "partition_dirichlet",
    "save_federation",
    "synth_gaussian",
]

DEFAULT_SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass(frozen=True, eq=False)
class ClientShard:
    """One client's train/validation/test partitions.

    sensitive, when present, is a 0/1 vector aligned to the test rows.
    """

    client_id: int
    train: Batch
    validation: Batch
    test: Batch
    sensitive: np.ndarray | None = None

    def __post_init__(self):
        if self.sensitive is not None:
            s = np.asarray(self.sensitive, dtype=np.int64)
            if s.shape != (self.test.n,):
                raise DimensionError("sensitive vector must align to test rows")
            if not np.isin(s, (0, 1)).all():
                raise ValueError("sensitive bits must be 0/1")
            object.__setattr__(self, "sensitive", s)


@dataclass(frozen=True, eq=False)
class FederationData:
    shards: list[ClientShard]
    d_in: int
    d_out: int
    total_test_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.client_id for s in self.shards]
        if ids != list(range(len(ids))):
            raise ValueError("client_ids must be contiguous from 0")

    @property
    def n_clients(self) -> int:
        return len(self.shards)


# ---------------------------------------------------------------- ingestion


def _parse_schema(schema) -> dict:
    """Normalize a schema mapping: column -> "numeric" | {"categorical": [...]}."""
    if isinstance(schema, (str, Path)):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    if not isinstance(schema, dict) or not schema:
        raise IngestionError("schema must be a non-empty JSON object")
    out = {}
    for col, kind in schema.items():
        if kind == "numeric":
            out[col] = ("numeric", None)
        elif isinstance(kind, dict) and "categorical" in kind:
            levels = list(kind["categorical"])
            if len(levels) != len(set(levels)) or not levels:
                raise IngestionError(f"schema column {col!r}: levels must be unique and non-empty")
            out[col] = ("categorical", levels)
        else:
            raise IngestionError(f"schema column {col!r}: expected \"numeric\" or categorical levels")
    return out


def load_csv(path, label_column: str, sensitive_column: str | None, schema):
    """Load an RFC-4180 CSV (header row, UTF-8) into numeric arrays.

    Columns named in the schema become features, in header order:
    numeric columns are min-max scaled to [0,1] over the whole file
    (constant columns map to 0), categorical columns are one-hot encoded
    in the declared level order. Returns (features, labels, sensitive).
    """
    spec = _parse_schema(schema)
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise IngestionError(f"{path}: no data rows")

    col_index = {name: i for i, name in enumerate(header)}
    for needed in [label_column, *spec.keys()] + ([sensitive_column] if sensitive_column else []):
        if needed not in col_index:
            raise IngestionError(f"{path}: missing column {needed!r}")
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}:{r}: expected {len(header)} cells, got {len(row)}")

    feature_cols = [c for c in header if c in spec]
    blocks = []
    for col in feature_cols:
        kind, levels = spec[col]
        j = col_index[col]
        if kind == "numeric":
            vals = np.empty(len(rows))
            for r, row in enumerate(rows):
                try:
                    vals[r] = float(row[j])
                except ValueError:
                    raise IngestionError(
                        f"{path}:{r + 2}: column {col!r}: unparsable cell {row[j]!r}"
                    ) from None
            lo, hi = vals.min(), vals.max()
            # min == max convention: a constant column scales to all zeros
            scaled = np.zeros_like(vals) if hi == lo else (vals - lo) / (hi - lo)
            blocks.append(scaled[:, None])
        else:
            level_pos = {lv: k for k, lv in enumerate(levels)}
            onehot = np.zeros((len(rows), len(levels)))
            for r, row in enumerate(rows):
                k = level_pos.get(row[j])
                if k is None:
                    raise IngestionError(
                        f"{path}:{r + 2}: column {col!r}: unknown level {row[j]!r}"
                    )
                onehot[r, k] = 1.0
            blocks.append(onehot)
    features = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))

    jl = col_index[label_column]
    raw_labels = [row[jl] for row in rows]
    if label_column in spec and spec[label_column][0] == "categorical":
        order = spec[label_column][1]
    else:
        order = sorted(set(raw_labels))
    label_pos = {lv: k for k, lv in enumerate(order)}
    labels = np.empty(len(rows), dtype=np.int64)
    for r, v in enumerate(raw_labels):
        if v not in label_pos:
            raise IngestionError(f"{path}:{r + 2}: column {label_column!r}: unknown label {v!r}")
        labels[r] = label_pos[v]

    sensitive = None
    if sensitive_column:
        js = col_index[sensitive_column]
        raw = [row[js] for row in rows]
        distinct = sorted(set(raw))
        if distinct in (["0"], ["1"], ["0", "1"]):
            mapping = {"0": 0, "1": 1}
        elif len(distinct) == 2:
            mapping = {distinct[0]: 0, distinct[1]: 1}
        else:
            raise IngestionError(
                f"{path}: column {sensitive_column!r}: need a binary column, "
                f"found {len(distinct)} levels"
            )
        sensitive = np.array([mapping[v] for v in raw], dtype=np.int64)

    return features, labels, sensitive


# ---------------------------------------------------------------- synthesis


def synth_gaussian(n: int, d_in: int, d_out: int, class_separation: float, seed: int):
    """Balanced class-conditional Gaussians.

    Class means sit class_separation apart along one random unit
    direction; features add unit isotropic noise. Deterministic per
    seed; rows are shuffled so labels are not contiguous.
    """
    if n < d_out:
        raise ValueError("need n >= d_out")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    rng = stream(seed, "synth-gaussian")
    direction = rng.standard_normal(d_in)
    direction /= np.linalg.norm(direction)

    counts = np.full(d_out, n // d_out)
    counts[: n % d_out] += 1
    labels = np.repeat(np.arange(d_out), counts)
    offsets = (labels - (d_out - 1) / 2.0) * class_separation
    features = rng.standard_normal((n, d_in)) + offsets[:, None] * direction
    order = rng.permutation(n)
    return features[order], labels[order].astype(np.int64)


# ------------------------------------------------------------- partitioning

_MAX_PARTITION_RETRIES = 100


def partition_dirichlet(
    features: np.ndarray,
    labels: np.ndarray,
    sensitive: np.ndarray | None,
    n_clients: int,
    alpha: float,
    split_fractions=DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> FederationData:
    """Dirichlet label-skew partition into per-client train/val/test shards.

    Every client must end up with at least max(3, d_out) rows in each
    split; the allocation is redrawn (bounded retries) until that holds.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    fractions = np.asarray(split_fractions, dtype=np.float64)
    if fractions.shape != (3,) or (fractions <= 0).any() or abs(fractions.sum() - 1) > 1e-9:
        raise ValueError("split_fractions must be three positive entries summing to 1")

    n = labels.shape[0]
    d_out = int(labels.max()) + 1
    min_per_split = max(3, d_out)
    rng = stream(seed, "partition")

    class_indices = [np.flatnonzero(labels == k) for k in range(d_out)]
    assignment = None
    for _ in range(_MAX_PARTITION_RETRIES):
        client_rows = [[] for _ in range(n_clients)]
        for idx in class_indices:
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(n_clients, alpha)) if n_clients > 1 else np.ones(1)
            cuts = np.floor(np.cumsum(props) * len(idx)).astype(int)
            cuts[-1] = len(idx)
            prev = 0
            for c, cut in enumerate(cuts):
                client_rows[c].extend(idx[prev:cut])
                prev = cut
        splits = [_split_counts(len(r), fractions) for r in client_rows]
        if all(min(sp) >= min_per_split for sp in splits):
            assignment = client_rows
            break
    if assignment is None:
        raise PartitionError(
            f"could not give every client >= {min_per_split} rows per split "
            f"after {_MAX_PARTITION_RETRIES} retries (n={n}, clients={n_clients}, alpha={alpha})"
        )

    shards = []
    total_test = 0
    for cid, row_list in enumerate(assignment):
        rows = rng.permutation(np.array(row_list, dtype=np.int64))
        n_tr, n_va, n_te = _split_counts(len(rows), fractions)
        tr, va, te = rows[:n_tr], rows[n_tr : n_tr + n_va], rows[n_tr + n_va :]
        assert len(te) == n_te
        shard = ClientShard(
            client_id=cid,
            train=Batch(features[tr], labels[tr]),
            validation=Batch(features[va], labels[va]),
            test=Batch(features[te], labels[te]),
            sensitive=None if sensitive is None else np.asarray(sensitive)[te],
        )
        shards.append(shard)
        total_test += n_te
    return FederationData(
        shards=shards,
        d_in=features.shape[1],
        d_out=d_out,
        total_test_count=total_test,
        provenance={"seed": seed, "alpha": alpha, "n_clients": n_clients},
    )


def _split_counts(n_rows: int, fractions: np.ndarray) -> tuple[int, int, int]:
    n_tr = int(fractions[0] * n_rows)
    n_va = int(fractions[1] * n_rows)
    return n_tr, n_va, n_rows - n_tr - n_va


# -------------------------------------------------------------- persistence


def federation_digest(data: FederationData) -> str:
    """Content digest of the partitioned data (shards + dims)."""
    h = hashlib.sha256()
    h.update(f"{data.d_in},{data.d_out},{data.n_clients}".encode())
    for shard in data.shards:
        for batch in (shard.train, shard.validation, shard.test):
            h.update(batch.features.tobytes())
            h.update(batch.labels.tobytes())
        h.update(b"none" if shard.sensitive is None else shard.sensitive.tobytes())
    return h.hexdigest()


def _write_split_csv(path: Path, batch: Batch, sensitive: np.ndarray | None):
    d = batch.features.shape[1]
    header = [f"f{j}" for j in range(d)] + ["label"]
    if sensitive is not None:
        header.append("sensitive")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(batch.n):
            row = [repr(float(v)) for v in batch.features[i]] + [int(batch.labels[i])]
            if sensitive is not None:
                row.append(int(sensitive[i]))
            writer.writerow(row)


def _read_split_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    has_sensitive = header[-1] == "sensitive"
    d = len(header) - (2 if has_sensitive else 1)
    features = np.array([[float(v) for v in row[:d]] for row in rows])
    labels = np.array([int(row[d]) for row in rows], dtype=np.int64)
    sensitive = (
        np.array([int(row[d + 1]) for row in rows], dtype=np.int64) if has_sensitive else None
    )
    return Batch(features, labels), sensitive


def save_federation(data: FederationData, directory) -> None:
    """Persist as per-client CSV triples plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for shard in data.shards:
        cid = shard.client_id
        _write_split_csv(directory / f"client_{cid}_train.csv", shard.train, None)
        _write_split_csv(directory / f"client_{cid}_validation.csv", shard.validation, None)
        _write_split_csv(directory / f"client_{cid}_test.csv", shard.test, shard.sensitive)
        counts[str(cid)] = {
            "train": shard.train.n,
            "validation": shard.validation.n,
            "test": shard.test.n,
        }
    manifest = {
        "d_in": data.d_in,
        "d_out": data.d_out,
        "n_clients": data.n_clients,
        "total_test_count": data.total_test_count,
        "counts": counts,
        "digest": federation_digest(data),
        **data.provenance,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_federation(directory) -> FederationData:
    directory = Path(directory)
    with open(directory / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    shards = []
    for cid in range(manifest["n_clients"]):
        train, _ = _read_split_csv(directory / f"client_{cid}_train.csv")
        validation, _ = _read_split_csv(directory / f"client_{cid}_validation.csv")
        test, sensitive = _read_split_csv(directory / f"client_{cid}_test.csv")
        shards.append(ClientShard(cid, train, validation, test, sensitive))
    provenance = {
        k: manifest[k] for k in ("seed", "alpha", "n_clients") if k in manifest
    }
    return FederationData(
        shards=shards,
        d_in=manifest["d_in"],
        d_out=manifest["d_out"],
        total_test_count=manifest["total_test_count"],
        provenance=provenance,
    )
