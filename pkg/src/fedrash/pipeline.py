"""Three-stage experiment pipeline with content-addressed caching.

Stages: partition -> train-pool -> build-sets -> metrics [-> fairness]
-> report. Each stage persists its artifacts under the output directory
and records a digest of its resolved inputs (config sections, upstream
digests, referenced file contents); a rerun skips stages whose digest
and outputs are intact, so `run-all` twice is a no-op and staged
invocation reproduces `run-all` byte for byte.

Beyond training, the simulated protocol spends one extra communication
round when clients share candidate evaluations (build-sets) and one
when they share metric values (metrics); the accounting log asserts
that the extra rounds never exceed two.
"""

from __future__ import annotations

import csv as csv_mod
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import (
    FederationData,
    load_csv,
    load_federation,
    partition_dirichlet,
    save_federation,
    synth_gaussian,
)
from .dp import aggregate, bin_values, cdf_sup_distance, default_bucket_spec, dp_quantile, privatize
from .errors import StageError
from .fairness import fairness_sweep, write_fairness_csv
from .federation import FedConfig, PoolGrid, generate_pool, load_pool
from .metrics import (
    SCORE_METRICS,
    ambiguity_centralized,
    ambiguity_global,
    ambiguity_local,
    discrepancy_centralized,
    discrepancy_federated,
    discrepancy_local,
    per_sample_scores,
    percentile_summary,
)
from .models import Arch
from .predictions import evaluate_pool, load_tensor, save_tensor
from .rashomon import (
    PerformanceConstraint,
    build_global,
    build_individual,
    build_t_agreement,
    rashomon_ratio,
    select_baseline,
    selection_from_json,
    selection_to_json,
)
from .rng import stream, stream_seed

__all__ = ["STAGES", "Runner", "cell_label", "fmt"]

STAGES = ("partition", "train-pool", "build-sets", "metrics", "fairness", "report")

MAX_EXTRA_ROUNDS = 2


def fmt(x) -> str:
    """Deterministic decimal rendering for CSV cells."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _digest(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cell_label(definition: str, epsilon: float, t=None, client_id=None) -> str:
    label = f"{definition}_eps{epsilon:g}"
    if t is not None:
        label += f"_t{t:g}"
    if client_id is not None:
        label += f"_c{client_id}"
    return label


def variant_label(definition: str, t=None, client_id=None) -> str:
    if definition == "t_agreement":
        return f"t_agreement_t{t:g}"
    if definition == "individual":
        return f"individual_c{client_id}"
    return definition


class Runner:
    """Executes pipeline stages for one experiment configuration."""

    def __init__(self, cfg: ExperimentConfig, output_dir, workers: int = 1, force: bool = False,
                 log=None):
        self.cfg = cfg
        self.out = Path(output_dir)
        self.workers = max(1, workers)
        self.force = force
        self.log = log if log is not None else sys.stderr
        self._digests = self._compute_digests()

    # ------------------------------------------------------------- plumbing

    def _say(self, message: str):
        print(message, file=self.log)

    def _compute_digests(self) -> dict:
        cfg = self.cfg
        data_section = {
            "master_seed": cfg.master_seed,
            "source": cfg.source,
            "synthetic": cfg.synthetic,
            "csv": None,
            "n_clients": cfg.n_clients,
            "alpha": cfg.alpha,
            "split_fractions": list(cfg.split_fractions),
        }
        if cfg.csv is not None:
            data_section["csv"] = {
                "label_column": cfg.csv["label_column"],
                "sensitive_column": cfg.csv.get("sensitive_column"),
                "data_sha": _file_digest(cfg.csv["path"]),
                "schema_sha": _file_digest(cfg.csv["schema"]),
            }
        d = {}
        d["partition"] = _digest(data_section)
        d["train-pool"] = _digest(
            {
                "upstream": d["partition"],
                "arch": [cfg.arch, cfg.d_hidden],
                "grid": [list(cfg.grid_seeds), list(cfg.grid_ratios), list(cfg.grid_epochs)],
                "base": [cfg.rounds, cfg.lr, cfg.batch_size, cfg.algorithm],
                "strict": cfg.strict_paper_weights,
            }
        )
        d["build-sets"] = _digest(
            {
                "upstream": d["train-pool"],
                "epsilon_grid": list(cfg.epsilon_grid),
                "t_grid": list(cfg.t_grid),
                "definitions": list(cfg.definitions),
                "eval_clients": None if cfg.eval_clients is None else list(cfg.eval_clients),
                "individual_clients": cfg.individual_clients
                if not isinstance(cfg.individual_clients, tuple)
                else list(cfg.individual_clients),
                "weighted": cfg.weighted_aggregation,
            }
        )
        d["metrics"] = _digest(
            {
                "upstream": d["build-sets"],
                "metrics": list(cfg.metrics),
                "path": cfg.path,
                "dp_epsilon": cfg.dp_epsilon,
                "n_buckets": cfg.n_buckets,
                "percentiles": list(cfg.percentiles),
                "tau": cfg.tau,
                "emit_exponentiated_rc": cfg.emit_exponentiated_rc,
                "rc": [cfg.rc_tolerance, cfg.rc_max_iters],
            }
        )
        d["fairness"] = _digest(
            {"upstream": d["build-sets"], "sample_k": cfg.fairness_sample_k}
        )
        d["report"] = _digest({"metrics": d["metrics"], "fairness": d["fairness"]})
        return d

    def _stage_dir(self, stage: str) -> Path:
        return self.out / {
            "partition": "data",
            "train-pool": "pool",
            "build-sets": "sets",
            "metrics": "metrics",
            "fairness": "fairness",
            "report": "report",
        }[stage]

    def _cached(self, stage: str) -> bool:
        marker = self._stage_dir(stage) / "stage.json"
        if not marker.exists():
            return False
        try:
            with open(marker, encoding="utf-8") as fh:
                state = json.load(fh)
        except json.JSONDecodeError:
            return False
        if state.get("digest") != self._digests[stage]:
            return False
        return all((self.out / rel).exists() for rel in state.get("outputs", []))

    def _mark(self, stage: str, outputs) -> None:
        marker_dir = self._stage_dir(stage)
        marker_dir.mkdir(parents=True, exist_ok=True)
        rels = sorted(str(Path(p).relative_to(self.out)) for p in outputs)
        with open(marker_dir / "stage.json", "w", encoding="utf-8") as fh:
            json.dump({"digest": self._digests[stage], "outputs": rels}, fh, indent=2)

    def _clear(self, stage: str) -> None:
        target = self._stage_dir(stage)
        if target.exists():
            shutil.rmtree(target)
        if stage == "build-sets":
            predictions = self.out / "predictions"
            if predictions.exists():
                shutil.rmtree(predictions)

    def _record_round(self, stage: str, purpose: str) -> None:
        path = self.out / "communication.json"
        log = {"training_rounds": None, "extra_rounds": {}, "limit": MAX_EXTRA_ROUNDS}
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                log = json.load(fh)
        log["extra_rounds"][stage] = purpose
        if len(log["extra_rounds"]) > MAX_EXTRA_ROUNDS:
            raise StageError(stage, "communication budget exceeded: more than "
                             f"{MAX_EXTRA_ROUNDS} extra rounds beyond training")
        pool_manifest = self.out / "pool" / "manifest.json"
        if pool_manifest.exists():
            with open(pool_manifest, encoding="utf-8") as fh:
                grid = json.load(fh)["grid"]
            n_candidates = (
                len(grid["seeds"]) * len(grid["participation_ratios"]) * len(grid["local_epochs"])
            )
            log["training_rounds"] = n_candidates * grid["base"]["rounds"]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(log, fh, indent=2, sort_keys=True)

    def _write_manifest(self) -> None:
        manifest = {
            "config": self.cfg.raw,
            "master_seed": self.cfg.master_seed,
            "stage_digests": self._digests,
            "versions": {
                "fedrash": __version__,
                "numpy": np.__version__,
                "python": sys.version.split()[0],
            },
        }
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    # ----------------------------------------------------------- public API

    def run(self, stages=None) -> None:
        """Run the requested stages (default: all) in pipeline order."""
        wanted = list(STAGES) if stages is None else list(stages)
        for stage in wanted:
            if stage not in STAGES:
                raise StageError(stage, "unknown stage")
        self._write_manifest()
        for stage in STAGES:
            if stage not in wanted:
                continue
            if stage == "fairness" and self.cfg.fairness_sample_k is None:
                if stages is not None and "fairness" in stages and len(wanted) == 1:
                    raise StageError("fairness", "config has no fairness section")
                continue
            if self.force:
                self._clear(stage)
            if self._cached(stage):
                self._say(f"[{stage}] cached, skipping")
                continue
            self._say(f"[{stage}] running")
            try:
                getattr(self, "_stage_" + stage.replace("-", "_"))()
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - wrap with stage identity
                raise StageError(stage, str(exc)) from exc

    # -------------------------------------------------------------- stage i

    def _stage_partition(self) -> None:
        cfg = self.cfg
        if cfg.source == "synthetic":
            syn = cfg.synthetic
            features, labels = synth_gaussian(
                syn["n"], syn["d_in"], syn["d_out"], syn["class_separation"],
                seed=stream_seed(cfg.master_seed, "synth"),
            )
            sensitive = None
            if syn.get("sensitive_rate") is not None:
                bits = stream(cfg.master_seed, "synth-sensitive").random(syn["n"])
                sensitive = (bits < syn["sensitive_rate"]).astype(np.int64)
        else:
            features, labels, sensitive = load_csv(
                cfg.csv["path"],
                cfg.csv["label_column"],
                cfg.csv.get("sensitive_column"),
                cfg.csv["schema"],
            )
        fed = partition_dirichlet(
            features,
            labels,
            sensitive,
            n_clients=cfg.n_clients,
            alpha=cfg.alpha,
            split_fractions=cfg.split_fractions,
            seed=stream_seed(cfg.master_seed, "partition"),
        )
        out = self._stage_dir("partition")
        save_federation(fed, out)
        self._mark("partition", [out / "manifest.json"])

    def _load_data(self) -> FederationData:
        return load_federation(self._stage_dir("partition"))

    # ------------------------------------------------------------- stage ii

    def _arch(self, data: FederationData) -> Arch:
        if self.cfg.arch == "linear":
            return Arch.linear(data.d_in, data.d_out)
        return Arch.mlp(data.d_in, self.cfg.d_hidden, data.d_out)

    def _stage_train_pool(self) -> None:
        cfg = self.cfg
        data = self._load_data()
        base = FedConfig(
            rounds=cfg.rounds,
            participation_ratio=cfg.grid_ratios[0],
            local_epochs=cfg.grid_epochs[0],
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            algorithm=cfg.algorithm,
            seed=cfg.grid_seeds[0],
        )
        grid = PoolGrid(
            seeds=cfg.grid_seeds,
            participation_ratios=cfg.grid_ratios,
            local_epochs=cfg.grid_epochs,
            base=base,
        )
        out = self._stage_dir("train-pool")
        pool = generate_pool(
            data,
            grid,
            arch=self._arch(data),
            store_dir=out,
            workers=self.workers,
            strict_paper_weights=cfg.strict_paper_weights,
        )
        outputs = [out / "manifest.json"]
        outputs += [out / f"candidate_{i}.bin" for i in range(pool.size)]
        self._mark("train-pool", outputs)

    def _resolve_eval_clients(self, data: FederationData) -> list:
        if self.cfg.eval_clients is None:
            return [s.client_id for s in data.shards]
        bad = [c for c in self.cfg.eval_clients if not 0 <= c < data.n_clients]
        if bad:
            raise StageError("build-sets", f"eval clients {bad} not in the federation")
        return sorted(self.cfg.eval_clients)

    def _resolve_individual_clients(self, eval_clients: list) -> list:
        spec = self.cfg.individual_clients
        if spec == "all":
            return list(eval_clients)
        if isinstance(spec, tuple):
            bad = [c for c in spec if c not in eval_clients]
            if bad:
                raise StageError("build-sets", f"individual clients {bad} are not evaluation clients")
            return sorted(spec)
        k = min(int(spec), len(eval_clients))
        rng = stream(self.cfg.master_seed, "individual-clients")
        return sorted(rng.choice(eval_clients, size=k, replace=False).tolist())

    def _stage_build_sets(self) -> None:
        cfg = self.cfg
        data = self._load_data()
        pool = load_pool(self._stage_dir("train-pool"))
        eval_clients = self._resolve_eval_clients(data)
        tensor = evaluate_pool(pool, data, eval_clients, workers=self.workers)
        pred_dir = self.out / "predictions"
        save_tensor(tensor, pred_dir)

        baseline = select_baseline(tensor)
        cells = []
        for eps in cfg.epsilon_grid:
            constraints = [PerformanceConstraint(epsilon=eps)]
            if "global" in cfg.definitions:
                sel = build_global(tensor, eval_clients, constraints, baseline,
                                   weighted=cfg.weighted_aggregation)
                cells.append({"definition": "global", "epsilon": eps, "t": None,
                              "client_id": None, "selection": selection_to_json(sel)})
            if "t_agreement" in cfg.definitions:
                for t in cfg.t_grid:
                    sel = build_t_agreement(tensor, eval_clients, constraints, baseline, t)
                    cells.append({"definition": "t_agreement", "epsilon": eps, "t": t,
                                  "client_id": None, "selection": selection_to_json(sel)})
            if "individual" in cfg.definitions:
                for cid in self._resolve_individual_clients(eval_clients):
                    sel = build_individual(tensor, cid, constraints, baseline)
                    cells.append({"definition": "individual", "epsilon": eps, "t": None,
                                  "client_id": cid, "selection": selection_to_json(sel)})
        out = self._stage_dir("build-sets")
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "baseline_index": baseline,
            "eval_clients": eval_clients,
            "pool_size": pool.size,
            "cells": cells,
        }
        with open(out / "selections.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        self._record_round("build-sets", "clients share candidate evaluations with the server")
        self._mark("build-sets", [out / "selections.json", pred_dir / "index.json"])

    # ------------------------------------------------------------ stage iii

    def _load_selections(self):
        with open(self._stage_dir("build-sets") / "selections.json", encoding="utf-8") as fh:
            return json.load(fh)

    def _stage_metrics(self) -> None:
        cfg = self.cfg
        tensor = load_tensor(self.out / "predictions")
        payload = self._load_selections()
        eval_clients = payload["eval_clients"]
        pool_size = payload["pool_size"]

        wanted = list(cfg.metrics)
        if "disagreement" in wanted and not tensor.is_binary:
            self._say("[metrics] disagreement skipped: defined for binary tasks only")
            wanted.remove("disagreement")

        out = self._stage_dir("metrics")
        out.mkdir(parents=True, exist_ok=True)
        outputs = []
        cdf_rows = {m: [] for m in wanted if m in SCORE_METRICS}
        dp_cdf_rows = {m: [] for m in wanted if m in SCORE_METRICS} if cfg.path == "dp" else None

        for cell in payload["cells"]:
            selection = selection_from_json(cell["selection"])
            label = cell_label(cell["definition"], cell["epsilon"], cell["t"], cell["client_id"])
            scope_clients = (
                [cell["client_id"]] if cell["definition"] == "individual" else eval_clients
            )
            rows = self._cell_rows(tensor, selection, scope_clients, pool_size, wanted,
                                   cell, cdf_rows, dp_cdf_rows)
            path = out / f"metrics_{label}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv_mod.writer(fh)
                writer.writerow(["metric", "scope", "statistic", "value"])
                writer.writerows(rows)
            outputs.append(path)

        for metric, rows in cdf_rows.items():
            path = out / f"cdf_{metric}.csv"
            _write_cdf_csv(path, rows)
            outputs.append(path)
        if dp_cdf_rows is not None:
            for metric, rows in dp_cdf_rows.items():
                path = out / f"cdf_dp_{metric}.csv"
                _write_cdf_csv(path, rows)
                outputs.append(path)

        self._record_round("metrics", "clients share multiplicity metric values with the server")
        self._mark("metrics", outputs)

    def _cell_rows(self, tensor, selection, scope_clients, pool_size, wanted, cell,
                   cdf_rows, dp_cdf_rows):
        cfg = self.cfg
        rows = [
            ["rashomon", "federated", "set_size", fmt(selection.size)],
            ["rashomon", "federated", "ratio", fmt(rashomon_ratio(selection, pool_size))],
            ["rashomon", "federated", "empty", fmt(int(selection.is_empty))],
            ["rashomon", "federated", "baseline_index", fmt(selection.baseline_index)],
        ]
        if selection.is_empty:
            return rows

        counts = {c: tensor.test_count(c) for c in scope_clients}
        is_individual = cell["definition"] == "individual"

        if "ambiguity" in wanted:
            locals_ = [(ambiguity_local(tensor, c, selection), counts[c]) for c in scope_clients]
            for (value, _), c in zip(locals_, scope_clients):
                rows.append(["ambiguity", str(c), "value", fmt(value)])
            if not is_individual:
                rows.append(["ambiguity", "federated", "value", fmt(ambiguity_global(locals_))])
                rows.append(["ambiguity", "centralized", "value",
                             fmt(ambiguity_centralized(tensor, scope_clients, selection))])
        if "discrepancy" in wanted:
            locals_ = [(discrepancy_local(tensor, c, selection), counts[c]) for c in scope_clients]
            for (value, _), c in zip(locals_, scope_clients):
                rows.append(["discrepancy", str(c), "value", fmt(value)])
            if not is_individual:
                rows.append(["discrepancy", "federated", "value",
                             fmt(discrepancy_federated(locals_))])
                rows.append(["discrepancy", "centralized", "value",
                             fmt(discrepancy_centralized(tensor, scope_clients, selection))])

        scope_name = str(scope_clients[0]) if is_individual else "federated"
        variant = variant_label(cell["definition"], cell["t"], cell["client_id"])
        for metric in wanted:
            if metric not in SCORE_METRICS:
                continue
            scores = per_sample_scores(
                tensor, scope_clients, selection, metric, tau=cfg.tau,
                rc_tolerance=cfg.rc_tolerance, rc_max_iters=cfg.rc_max_iters,
            )
            pooled = scores.pooled(scope_clients)
            table = percentile_summary(pooled, cfg.percentiles)
            for p, v in table.items():
                rows.append([metric, scope_name, f"p{p:g}", fmt(v)])
            if metric == "rc" and cfg.emit_exponentiated_rc:
                for p, v in table.items():
                    rows.append(["rc_pow2", scope_name, f"p{p:g}", fmt(2.0 ** v)])

            spec = default_bucket_spec(metric, tensor.d_out, cfg.n_buckets)
            exact_hists = [
                privatize_free_hist(scores.values[c], spec, c) for c in scope_clients
            ]
            exact_agg = aggregate(exact_hists)
            if not is_individual and metric in cdf_rows:
                cdf_rows[metric].extend(_cdf_table_rows(variant, cell["epsilon"], exact_agg))

            if cfg.path == "dp":
                noisy = [
                    privatize(
                        bin_values(scores.values[c], spec).counts,
                        epsilon=cfg.dp_epsilon,
                        cap=int(scores.values[c].size),
                        seed=stream_seed(cfg.master_seed, "dp-noise", variant,
                                         cell["epsilon"], metric, c),
                        client_id=c,
                        spec=spec,
                    )
                    for c in scope_clients
                ]
                noisy_agg = aggregate(noisy)
                for p in cfg.percentiles:
                    q = min(max(p / 100.0, 1e-12), 1.0)
                    value = dp_quantile(noisy_agg, q) if not noisy_agg.empty else float("nan")
                    rows.append([metric, scope_name, f"dp_p{p:g}", fmt(value)])
                rows.append([metric, scope_name, "dp_cdf_sup_distance",
                             fmt(cdf_sup_distance(noisy_agg, exact_agg))])
                if not is_individual and dp_cdf_rows is not None and metric in dp_cdf_rows:
                    dp_cdf_rows[metric].extend(
                        _cdf_table_rows(variant, cell["epsilon"], noisy_agg)
                    )
        return rows

    # ------------------------------------------------------------- fairness

    def _stage_fairness(self) -> None:
        cfg = self.cfg
        tensor = load_tensor(self.out / "predictions")
        payload = self._load_selections()
        chosen = None
        for cell in payload["cells"]:
            if cell["definition"] != "global":
                continue
            selection = selection_from_json(cell["selection"])
            if selection.size >= cfg.fairness_sample_k:
                chosen = (cell["epsilon"], selection)
                break
        if chosen is None:
            # no epsilon admits sample_k members; fall back to the widest set
            best = None
            for cell in payload["cells"]:
                if cell["definition"] != "global":
                    continue
                selection = selection_from_json(cell["selection"])
                if best is None or selection.size > best[1].size:
                    best = (cell["epsilon"], selection)
            if best is None or best[1].is_empty:
                raise StageError("fairness", "no non-empty global selection available")
            chosen = best
        epsilon, selection = chosen
        report = fairness_sweep(
            tensor, selection, sample_k=cfg.fairness_sample_k,
            seed=stream_seed(cfg.master_seed, "fairness"),
        )
        out = self._stage_dir("fairness")
        out.mkdir(parents=True, exist_ok=True)
        write_fairness_csv(report, out / "report.csv")
        with open(out / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "epsilon": epsilon,
                    "set_size": selection.size,
                    "sampled_candidates": list(report.sampled_candidates),
                },
                fh,
                indent=2,
                sort_keys=True,
            )
        self._mark("fairness", [out / "report.csv", out / "meta.json"])

    # --------------------------------------------------------------- report

    def _stage_report(self) -> None:
        from .report import render_reports

        out = self._stage_dir("report")
        out.mkdir(parents=True, exist_ok=True)
        outputs = render_reports(self, out)
        self._mark("report", outputs)


def privatize_free_hist(values, spec, client_id):
    """Noiseless client histogram wrapped for aggregation (trusted path)."""
    from .dp import NoisyHistogram

    counts = bin_values(values, spec).counts
    return NoisyHistogram(spec=spec, counts=counts, epsilon=float("inf"), client_id=client_id)


def _cdf_table_rows(variant, epsilon, agg):
    """Change-point compressed CDF rows (variant, epsilon, upper_edge, cdf)."""
    edges = agg.spec.edges[1:]
    rows = []
    prev = None
    last_index = len(agg.cdf) - 1
    for i, (edge, value) in enumerate(zip(edges, agg.cdf)):
        if prev is None or value != prev or i == last_index:
            rows.append([variant, epsilon, float(edge), float(value)])
            prev = value
    return rows


def _write_cdf_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["variant", "epsilon", "upper_edge", "cdf"])
        for variant, epsilon, edge, value in rows:
            writer.writerow([variant, fmt(float(epsilon)), fmt(edge), fmt(value)])
