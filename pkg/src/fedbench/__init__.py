"""FedBench - federated learning architectures compared on MNIST over a simulated network."""

__version__ = "0.1.0"

from .models import (
    ArchitectureKind,
    ExperimentConfig,
    KpiSample,
    LatencyModel,
    RoundRecord,
    RunRecord,
    TopologyPlan,
)
from .nn import Hyperparams, MlpModel, init_model, train_local
from .fedproto import ProtocolEngine, fedavg, plan_topology, run_experiment
from .netsim import MessageBus, decode_model, encode_model
from .kpi import ModelEvaluator, confusion, metrics_from_confusion
from .report import TradeoffTable, emit_csv, emit_json, tradeoff_table
from .defaults import ExperimentDefaults, ExitCodes

__all__ = [
    "ArchitectureKind",
    "ExperimentConfig",
    "KpiSample",
    "LatencyModel",
    "RoundRecord",
    "RunRecord",
    "TopologyPlan",
    "Hyperparams",
    "MlpModel",
    "init_model",
    "train_local",
    "ProtocolEngine",
    "fedavg",
    "plan_topology",
    "run_experiment",
    "MessageBus",
    "decode_model",
    "encode_model",
    "ModelEvaluator",
    "confusion",
    "metrics_from_confusion",
    "TradeoffTable",
    "emit_csv",
    "emit_json",
    "tradeoff_table",
    "ExperimentDefaults",
    "ExitCodes",
]
