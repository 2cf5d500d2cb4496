"""Default experiment settings and named constants.

This module keeps every default of the benchmark in one place so the CLI,
the config loader and the protocol engine agree on them.
"""

import os
from typing import List, Tuple

from .errors import ConfigError


class ExperimentDefaults:
    """Centralized defaults for experiments and sweeps."""

    # Federation schedule
    ROUNDS: int = 10
    EPOCHS_PER_ROUND: int = 3
    MASTER_SEED: int = 7

    # Model and optimizer
    LAYER_DIMS: Tuple[int, ...] = (784, 256, 128, 10)
    LEARNING_RATE: float = 0.1
    BATCH_SIZE: int = 64

    # Aggregation
    WEIGHTING: str = "uniform"
    DFL_TOPOLOGY: str = "full"
    WORKERS: int = 1

    # Reporting
    CONVERGENCE_THRESHOLD: float = 0.90

    # Sweep grid
    SWEEP_ARCHS: List[str] = ["cfl", "dfl", "sdfl"]
    SWEEP_NODES: List[int] = [3, 4, 6, 8]

    # Paths (overridable through the environment)
    DATA_DIR: str = "data/mnist"
    OUT_DIR: str = "results"

    @classmethod
    def data_dir(cls) -> str:
        """MNIST directory from FEDBENCH_DATA_DIR, falling back to the default."""
        return os.getenv("FEDBENCH_DATA_DIR") or cls.DATA_DIR

    @classmethod
    def out_dir(cls) -> str:
        """Output root from FEDBENCH_OUT_DIR, falling back to the default."""
        return os.getenv("FEDBENCH_OUT_DIR") or cls.OUT_DIR

    @classmethod
    def master_seed(cls) -> int:
        """Master seed from FEDBENCH_SEED, falling back to the default."""
        value = os.getenv("FEDBENCH_SEED")
        if value is None or value.strip() == "":
            return cls.MASTER_SEED
        try:
            return int(value, 0)
        except ValueError:
            raise ConfigError(f"FEDBENCH_SEED must be an integer, got {value!r}")


class SeedStreams:
    """Node indices reserved for experiment-level random streams.

    Participant streams use their own index (0..N-1); the values below sit far
    above any realistic federation size so they never collide with a node.
    """

    AGGREGATOR: int = 1 << 20
    LATENCY: int = (1 << 20) + 1


class KpiNames:
    """Names of the reported KPIs, in output order."""

    METRICS: List[str] = ["accuracy", "precision", "recall", "f1", "loss"]
    COUNTERS: List[str] = ["bytes_sent", "bytes_received", "flops"]
    SERIES: List[str] = ["accuracy", "precision", "recall", "f1", "loss", "bytes", "flops"]

    CSV_HEADER: str = "round,node,accuracy,precision,recall,f1,loss,bytes_sent,bytes_received,flops"

    N_CLASSES: int = 10


class ExitCodes:
    """Process exit codes of the CLI."""

    SUCCESS: int = 0
    RUNTIME: int = 1
    CONFIG: int = 2
    DATA: int = 3
