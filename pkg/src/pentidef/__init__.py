"""Federated intrusion-detection simulator with a CKA-based poisoning defense."""

from .aggregators import coord_median, fed_avg, flare_aggregate, fedcc, krum, krum_index, mmd
from .attacks import AttackConfig, GanConfig
from .datahub import Dataset, PartitionPlan, load_csv, partition, split_train_test, synth_generate
from .defense import AutoEncoder, PenTiDef, TwoMeans1D, cka, cluster_scores, run_pentidef
from .ledger import Ledger, Workload, bench_run
from .neuralcore import LayerSpec, MetricsReport, MLPClassifier, ModelWeights, TrainConfig, init_network, train_local
from .privacy import PrivacyBudget, gaussian_sigma, perturb
from .simulation import SimulationConfig, load_config, run_simulation

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AutoEncoder", "Dataset", "GanConfig", "LayerSpec", "Ledger",
    "MLPClassifier", "MetricsReport", "ModelWeights", "PartitionPlan", "PenTiDef", "PrivacyBudget",
    "SimulationConfig", "TrainConfig", "TwoMeans1D", "Workload", "bench_run", "cka",
    "cluster_scores", "coord_median", "fed_avg", "fedcc", "flare_aggregate", "gaussian_sigma",
    "init_network", "krum", "krum_index", "load_config", "load_csv", "mmd", "partition",
    "perturb", "run_pentidef", "run_simulation", "split_train_test", "synth_generate",
    "train_local",
]
