"""Data models and configuration structures."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .defaults import ExperimentDefaults
from .errors import ConfigError
from .nn import Hyperparams, MlpModel


class ArchitectureKind(str, Enum):
    """Federated learning architecture."""

    CFL = "cfl"
    DFL = "dfl"
    SDFL = "sdfl"

    @classmethod
    def parse(cls, value: str) -> "ArchitectureKind":
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ConfigError(f"invalid arch {value!r}; valid values: {valid}")

    @property
    def order(self) -> int:
        return list(ArchitectureKind).index(self)


class NodeRole(str, Enum):
    TRAINER = "trainer"
    AGGREGATOR = "aggregator"
    SERVER = "server"


class MessageKind(str, Enum):
    UPLOAD = "model-upload"
    BROADCAST = "model-broadcast"


@dataclass(frozen=True)
class LatencyModel:
    """Per-message latency in simulated time units.

    kind is one of "zero", "fixed" (always ``delay``) or "uniform"
    (integer drawn from [low, high] inclusive with the bus's seeded stream).
    """

    kind: str = "zero"
    delay: int = 0
    low: int = 0
    high: int = 0

    @classmethod
    def parse(cls, text: str) -> "LatencyModel":
        """
        Parse ``zero``, ``fixed:D`` or ``uniform:LO:HI``.

        Raises:
            ConfigError: On malformed text
        """
        parts = str(text).strip().lower().split(":")
        try:
            if parts == ["zero"]:
                model = cls()
            elif parts[0] == "fixed" and len(parts) == 2:
                model = cls(kind="fixed", delay=int(parts[1]))
            elif parts[0] == "uniform" and len(parts) == 3:
                model = cls(kind="uniform", low=int(parts[1]), high=int(parts[2]))
            else:
                raise ValueError(text)
        except ValueError:
            raise ConfigError(f"invalid latency {text!r}; expected zero, fixed:D or uniform:LO:HI")
        problems = model.validate()
        if problems:
            raise ConfigError(problems)
        return model

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.delay}"
        if self.kind == "uniform":
            return f"uniform:{self.low}:{self.high}"
        return "zero"

    def validate(self) -> List[str]:
        problems = []
        if self.kind not in ("zero", "fixed", "uniform"):
            problems.append(f"latency kind must be zero, fixed or uniform, got {self.kind!r}")
        if self.kind == "fixed" and self.delay < 0:
            problems.append(f"fixed latency must be >= 0, got {self.delay}")
        if self.kind == "uniform" and not (0 <= self.low <= self.high):
            problems.append(f"uniform latency needs 0 <= low <= high, got {self.low}:{self.high}")
        return problems


@dataclass
class ExperimentConfig:
    """Fully resolved configuration of one experiment run."""

    arch: ArchitectureKind = ArchitectureKind.DFL
    n_participants: int = 3
    rounds: int = ExperimentDefaults.ROUNDS
    master_seed: int = ExperimentDefaults.MASTER_SEED
    hyper: Hyperparams = field(default_factory=Hyperparams)
    layer_dims: Tuple[int, ...] = ExperimentDefaults.LAYER_DIMS
    latency: LatencyModel = field(default_factory=LatencyModel)
    round_deadline: Optional[int] = None
    weighting: str = ExperimentDefaults.WEIGHTING
    dfl_topology: str = ExperimentDefaults.DFL_TOPOLOGY
    workers: int = ExperimentDefaults.WORKERS
    convergence_threshold: float = ExperimentDefaults.CONVERGENCE_THRESHOLD
    record_process_time: bool = False

    # Keys accepted in config files; nested "hyper" objects are flattened.
    FIELDS = (
        "arch", "n_participants", "rounds", "epochs_per_round", "master_seed",
        "learning_rate", "batch_size", "layer_dims", "latency", "round_deadline",
        "weighting", "dfl_topology", "workers", "convergence_threshold", "record_process_time",
    )

    @property
    def epochs_per_round(self) -> int:
        return self.hyper.epochs_per_round

    def validate(self) -> List[str]:
        """Return every configuration problem as a separate message."""
        problems = []
        if self.n_participants < 1:
            problems.append(f"n_participants must be >= 1, got {self.n_participants}")
        if self.rounds < 0:
            problems.append(f"rounds must be >= 0, got {self.rounds}")
        if not 0 <= self.master_seed < (1 << 64):
            problems.append(f"master_seed must fit in 64 unsigned bits, got {self.master_seed}")
        problems.extend(self.hyper.validate())
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            problems.append(f"layer_dims needs >= 2 entries, all >= 1, got {list(self.layer_dims)}")
        problems.extend(self.latency.validate())
        if self.round_deadline is not None and self.round_deadline < 0:
            problems.append(f"round_deadline must be >= 0, got {self.round_deadline}")
        if self.weighting not in ("uniform", "samples"):
            problems.append(f"weighting must be uniform or samples, got {self.weighting!r}")
        if self.dfl_topology not in ("full", "ring"):
            problems.append(f"dfl_topology must be full or ring, got {self.dfl_topology!r}")
        if self.workers < 1:
            problems.append(f"workers must be >= 1, got {self.workers}")
        if not 0 < self.convergence_threshold < 1:
            problems.append(f"convergence_threshold must be in (0, 1), got {self.convergence_threshold}")
        return problems

    def check(self) -> "ExperimentConfig":
        problems = self.validate()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "arch": self.arch.value,
            "n_participants": self.n_participants,
            "rounds": self.rounds,
            "epochs_per_round": self.hyper.epochs_per_round,
            "master_seed": self.master_seed,
            "learning_rate": float(self.hyper.learning_rate),
            "batch_size": self.hyper.batch_size,
            "layer_dims": list(self.layer_dims),
            "latency": self.latency.describe(),
            "round_deadline": self.round_deadline,
            "weighting": self.weighting,
            "dfl_topology": self.dfl_topology,
            "workers": self.workers,
            "convergence_threshold": float(self.convergence_threshold),
            "record_process_time": self.record_process_time,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """
        Build a config from a (possibly partial) dictionary.

        Args:
            data: Config values; missing keys keep the values of ``base``
            base: Starting config (defaults when omitted)

        Returns:
            New config (not yet validated)

        Raises:
            ConfigError: Unknown keys or values of the wrong type, all listed
        """
        values = dict(data)
        hyper_block = values.pop("hyper", None)
        if isinstance(hyper_block, dict):
            for key in ("learning_rate", "batch_size", "epochs_per_round"):
                if key in hyper_block:
                    values.setdefault(key, hyper_block[key])

        problems = [f"unknown config key {key!r}" for key in sorted(values) if key not in cls.FIELDS]
        merged = (base or cls()).to_dict()

        def fallback(key, convert):
            return convert(merged[key]) if merged[key] is not None else None

        def take(key, convert):
            if key not in values:
                return fallback(key, convert)
            raw = values[key]
            if raw is None:
                return None
            try:
                if convert is int and (isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer())):
                    raise ValueError(raw)
                return convert(raw)
            except ConfigError as e:
                problems.extend(f"{key}: {p}" for p in e.problems)
            except (TypeError, ValueError):
                problems.append(f"{key}: invalid value {raw!r}")
            return fallback(key, convert)

        def to_bool(raw):
            if isinstance(raw, bool):
                return raw
            raise ValueError(raw)

        def to_dims(raw):
            if isinstance(raw, (str, bytes)) or not hasattr(raw, "__iter__"):
                raise ValueError(raw)
            return tuple(int(d) for d in raw)

        def to_latency(raw):
            if isinstance(raw, dict):
                return LatencyModel(
                    kind=str(raw.get("kind", "zero")),
                    delay=int(raw.get("delay", 0)),
                    low=int(raw.get("low", 0)),
                    high=int(raw.get("high", 0)),
                )
            return LatencyModel.parse(raw)

        arch = take("arch", ArchitectureKind.parse)
        config = cls(
            arch=arch,
            n_participants=take("n_participants", int),
            rounds=take("rounds", int),
            master_seed=take("master_seed", int),
            hyper=Hyperparams(
                learning_rate=take("learning_rate", float),
                batch_size=take("batch_size", int),
                epochs_per_round=take("epochs_per_round", int),
            ),
            layer_dims=take("layer_dims", to_dims),
            latency=take("latency", to_latency),
            round_deadline=take("round_deadline", int),
            weighting=take("weighting", str),
            dfl_topology=take("dfl_topology", str),
            workers=take("workers", int),
            convergence_threshold=take("convergence_threshold", float),
            record_process_time=take("record_process_time", to_bool),
        )
        if problems:
            raise ConfigError(problems)
        return config


class Edge(NamedTuple):
    """One model transfer of a round."""

    sender: int
    receiver: int
    kind: MessageKind


@dataclass
class TopologyPlan:
    """Directed model transfers of one round, in send order."""

    arch: ArchitectureKind
    round: int
    n_participants: int
    edges: List[Edge]
    aggregator: Optional[int] = None
    server: Optional[int] = None

    @property
    def transfer_count(self) -> int:
        return len(self.edges)

    @property
    def uploads(self) -> List[Edge]:
        return [e for e in self.edges if e.kind == MessageKind.UPLOAD]

    @property
    def downloads(self) -> List[Edge]:
        return [e for e in self.edges if e.kind == MessageKind.BROADCAST]

    def senders_to(self, receiver: int) -> List[int]:
        return [e.sender for e in self.edges if e.receiver == receiver]


@dataclass(eq=False)
class Message:
    """A model transfer travelling over the simulated bus."""

    round: int
    sender: int
    receiver: int
    kind: MessageKind
    payload: bytes
    send_time: int = 0
    deliver_time: int = 0
    n_samples: int = 0

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass(eq=False)
class NodeState:
    """A participant (or the CFL server) between rounds."""

    id: int
    model: MlpModel
    part: np.ndarray
    role: NodeRole = NodeRole.TRAINER
    rng: Optional[np.random.Generator] = None

    @property
    def n_samples(self) -> int:
        return len(self.part)


@dataclass
class KpiSample:
    """KPIs of one node (or the federation average when node is None) in one round."""

    node: Optional[int]
    round: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    loss: float
    bytes_sent: int = 0
    bytes_received: int = 0
    flops: int = 0
    process_seconds: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "node": self.node,
            "round": self.round,
            "accuracy": float(self.accuracy),
            "precision": float(self.precision),
            "recall": float(self.recall),
            "f1": float(self.f1),
            "loss": float(self.loss),
            "bytes_sent": int(self.bytes_sent),
            "bytes_received": int(self.bytes_received),
            "flops": int(self.flops),
        }
        if self.process_seconds is not None:
            data["process_seconds"] = float(self.process_seconds)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KpiSample":
        return cls(**data)


@dataclass
class RoundRecord:
    """Everything recorded for one round."""

    round: int
    samples: List[KpiSample]
    federation: KpiSample
    aggregator: Optional[int] = None
    delivered: int = 0
    dropped: int = 0
    bytes_total: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "round": self.round,
            "aggregator": self.aggregator,
            "delivered": self.delivered,
            "dropped": self.dropped,
            "bytes_total": self.bytes_total,
            "samples": [s.to_dict() for s in self.samples],
            "federation": self.federation.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RoundRecord":
        return cls(
            round=data["round"],
            samples=[KpiSample.from_dict(s) for s in data["samples"]],
            federation=KpiSample.from_dict(data["federation"]),
            aggregator=data.get("aggregator"),
            delivered=data.get("delivered", 0),
            dropped=data.get("dropped", 0),
            bytes_total=data.get("bytes_total", 0),
        )


@dataclass
class RunRecord:
    """Complete outcome of one experiment; the unit of reporting."""

    config: Dict[str, Any]
    seeds: Dict[str, Any]
    param_count: int
    encoded_size: int
    rounds: List[RoundRecord]
    ledger: Dict[str, Any]
    convergence_round: Optional[int] = None

    @property
    def arch(self) -> str:
        return self.config["arch"]

    @property
    def n_participants(self) -> int:
        return self.config["n_participants"]

    @property
    def final(self) -> KpiSample:
        return self.rounds[-1].federation

    @property
    def total_bytes(self) -> int:
        return int(self.ledger.get("total", 0))

    @property
    def total_flops(self) -> int:
        return int(sum(r.federation.flops for r in self.rounds))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "param_count": self.param_count,
            "encoded_size": self.encoded_size,
            "convergence_round": self.convergence_round,
            "final": self.final.to_dict(),
            "rounds": [r.to_dict() for r in self.rounds],
            "ledger": self.ledger,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            config=data["config"],
            seeds=data["seeds"],
            param_count=data["param_count"],
            encoded_size=data["encoded_size"],
            rounds=[RoundRecord.from_dict(r) for r in data["rounds"]],
            ledger=data["ledger"],
            convergence_round=data.get("convergence_round"),
        )
