"""fedrash: federated Rashomon sets and predictive multiplicity analysis.

A deterministic cross-silo FL simulator that trains a pool of candidate
models, builds Rashomon selections under global / t-agreement /
individual definitions, and computes decision- and score-based
multiplicity metrics, with an optional differentially private release
path and a demographic-parity stage.
"""

__version__ = "0.1.0"

from .data import (
    ClientShard,
    FederationData,
    load_csv,
    partition_dirichlet,
    synth_gaussian,
)
from .dp import BucketSpec, NoisyHistogram, aggregate, bin_values, dp_quantile, privatize
from .errors import (
    ConfigError,
    ConvergenceError,
    DimensionError,
    FedrashError,
    IngestionError,
    PartitionError,
    StageError,
    UnsupportedMetricError,
)
from .fairness import demographic_parity_gap, fairness_sweep
from .federation import CandidatePool, FedConfig, PoolGrid, fed_round, generate_pool, train_candidate
from .metrics import (
    ambiguity_global,
    ambiguity_local,
    disagreement,
    discrepancy_federated,
    discrepancy_local,
    percentile_summary,
    rashomon_capacity,
    score_std,
    vpr,
)
from .models import Arch, Batch, ModelParams, forward, init_model, loss_and_grad, sgd_epochs
from .predictions import PredictionTensor, evaluate_pool
from .rashomon import (
    PerformanceConstraint,
    RashomonSelection,
    build_global,
    build_individual,
    build_t_agreement,
    rashomon_ratio,
    select_baseline,
)
