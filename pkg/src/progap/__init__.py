"""Progressive graph neural networks with private, cached neighborhood aggregation."""

from .estimator import ProgapClassifier
from .graph import Graph, SbmSpec, SplitMasks, bound_degree, generate_sbm, load_graph, split_nodes
from .nap import AggregateCache, NapConfig, cached_nap, nap
from .privacy import (
    AccountingReport,
    CalibrationError,
    PrivacySpec,
    RdpCurve,
    account,
    calibrate,
    edge_epsilon_closed_form,
    rdp_to_dp,
)
from .trainer import ModelConfig, ProgapModel, TrainConfig, evaluate, forward_stage, train_progressive

__all__ = [
    "AccountingReport", "AggregateCache", "CalibrationError", "Graph", "ModelConfig",
    "NapConfig", "PrivacySpec", "ProgapClassifier", "ProgapModel", "RdpCurve", "SbmSpec",
    "SplitMasks", "TrainConfig", "account", "bound_degree", "cached_nap", "calibrate",
    "edge_epsilon_closed_form", "evaluate", "forward_stage", "generate_sbm", "load_graph",
    "nap", "rdp_to_dp", "split_nodes", "train_progressive",
]

__version__ = "0.1.0"
