"""Protocol engine for centralized, decentralized and semi-decentralized FL.

Every architecture runs as synchronous rounds: local training, model
exchange over the simulated bus, FedAvg aggregation, then evaluation of
every participant on the global test set.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .defaults import SeedStreams
from .errors import ConfigError
from .kpi import ModelEvaluator, average_over_participants, convergence_round
from .mnist import LabeledDataset, PartitionPlan, stratified_partition
from .models import (
    ArchitectureKind,
    Edge,
    ExperimentConfig,
    Message,
    MessageKind,
    NodeRole,
    NodeState,
    RoundRecord,
    RunRecord,
    TopologyPlan,
)
from .netsim import MessageBus, decode_model, encode_model, encoded_size
from .nn import MlpModel, flop_count, init_model, train_local

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
ROUND_MIX = 0xBF58476D1CE4E5B9


def derive_node_seed(master_seed: int, node_index: int, round_index: int) -> int:
    """
    Seed of the random stream owned by one node in one round.

    SplitMix64 finalizer over
    ``master ^ (node * 0x9E3779B97F4A7C15) ^ (round * 0xBF58476D1CE4E5B9)``.
    This mapping is part of the record format and must never change.
    """
    z = (master_seed ^ ((node_index * GOLDEN_GAMMA) & MASK64) ^ ((round_index * ROUND_MIX) & MASK64)) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fedavg(models: Sequence[MlpModel], weights: Optional[Sequence[float]] = None) -> MlpModel:
    """
    Parameter-wise (weighted) arithmetic mean of congruent models.

    Sums are accumulated in float64 and rounded back to the parameter dtype.

    Args:
        models: Non-empty list of models with identical shapes
        weights: Optional non-negative weight per model (equal when omitted)

    Returns:
        Averaged model

    Raises:
        ValueError: Empty list, bad weights or all-zero weights
        ShapeMismatchError: If the models are not shape-congruent
    """
    if not models:
        raise ValueError("fedavg needs at least one model")
    first = models[0]
    for other in models[1:]:
        first.check_congruent(other)

    if weights is None:
        w = np.ones(len(models), dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != len(models):
            raise ValueError(f"{len(w)} weights for {len(models)} models")
        if not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("fedavg weights must be finite and non-negative")
    total = float(w.sum())
    if total <= 0:
        raise ValueError("fedavg weights sum to zero")

    dtype = first.dtype

    def average(tensors: List[np.ndarray]) -> np.ndarray:
        acc = np.zeros(tensors[0].shape, dtype=np.float64)
        for weight, tensor in zip(w, tensors):
            if weight == 1.0:
                acc += tensor
            elif weight != 0.0:
                acc += weight * tensor.astype(np.float64)
        return (acc / total).astype(dtype)

    return MlpModel(
        weights=[average([m.weights[k] for m in models]) for k in range(first.n_layers)],
        biases=[average([m.biases[k] for m in models]) for k in range(first.n_layers)],
    )


def plan_topology(
    arch: ArchitectureKind,
    n_participants: int,
    round_index: int,
    aggregator: Optional[int] = None,
    dfl_topology: str = "full",
) -> TopologyPlan:
    """
    Model transfers of one round.

    CFL: N uploads to the server (node id N), then N downloads.
    DFL: every ordered peer pair of the full mesh, N(N-1) transfers
    (the ring variant sends to the two ring neighbours only).
    SDFL: N-1 uploads to the round's aggregator, then N-1 downloads.

    Args:
        arch: Architecture
        n_participants: Number of participants N
        round_index: Round number (recorded in the plan)
        aggregator: Aggregating participant, required for SDFL
        dfl_topology: "full" or "ring" (DFL only)

    Returns:
        Topology plan with uploads listed before downloads

    Raises:
        ValueError: N = 0, SDFL without (or with an invalid) aggregator
    """
    arch = ArchitectureKind(arch)
    n = int(n_participants)
    if n < 1:
        raise ValueError(f"n_participants must be >= 1, got {n}")

    if arch == ArchitectureKind.CFL:
        server = n
        edges = [Edge(i, server, MessageKind.UPLOAD) for i in range(n)]
        edges += [Edge(server, i, MessageKind.BROADCAST) for i in range(n)]
        return TopologyPlan(arch, round_index, n, edges, server=server)

    if arch == ArchitectureKind.DFL:
        if dfl_topology == "ring" and n >= 3:
            edges = []
            for i in range(n):
                edges.append(Edge(i, (i + 1) % n, MessageKind.UPLOAD))
                edges.append(Edge(i, (i - 1) % n, MessageKind.UPLOAD))
        elif dfl_topology in ("full", "ring"):
            edges = [Edge(i, j, MessageKind.UPLOAD) for i in range(n) for j in range(n) if i != j]
        else:
            raise ValueError(f"unknown DFL topology {dfl_topology!r}")
        return TopologyPlan(arch, round_index, n, edges)

    if aggregator is None:
        raise ValueError("SDFL round needs an aggregator")
    if not 0 <= aggregator < n:
        raise ValueError(f"aggregator {aggregator} is not a participant (0..{n - 1})")
    others = [i for i in range(n) if i != aggregator]
    edges = [Edge(i, aggregator, MessageKind.UPLOAD) for i in others]
    edges += [Edge(aggregator, i, MessageKind.BROADCAST) for i in others]
    return TopologyPlan(arch, round_index, n, edges, aggregator=aggregator)


def select_aggregator(participants: Sequence[int], round_index: int, rng: np.random.Generator) -> int:
    """
    Uniform random aggregator for a round.

    The experiment-level stream advances once per call; ``round_index`` is
    accepted for the record only. Repeats across rounds are allowed.

    Raises:
        ValueError: If there are no participants
    """
    if len(participants) == 0:
        raise ValueError(f"no participants to choose an aggregator from in round {round_index}")
    return participants[int(rng.integers(len(participants)))]


class ProtocolEngine:
    """Runs one experiment round by round."""

    def __init__(
        self,
        config: ExperimentConfig,
        train: LabeledDataset,
        test: LabeledDataset,
        verbose: bool = False,
        on_round: Optional[Callable[[RoundRecord], None]] = None,
    ):
        """
        Initialize the engine.

        Args:
            config: Experiment configuration (validated here)
            train: Training set to partition among participants
            test: Global test set every node evaluates on
            verbose: Print progress messages
            on_round: Called with each finished RoundRecord (round 0 included)

        Raises:
            ConfigError: Invalid config or datasets that do not fit it
        """
        self.config = config.check()
        problems = []
        if train.n_features != config.layer_dims[0]:
            problems.append(f"training data has {train.n_features} features but layer_dims starts with {config.layer_dims[0]}")
        if test.n_features != config.layer_dims[0]:
            problems.append(f"test data has {test.n_features} features but layer_dims starts with {config.layer_dims[0]}")
        if config.n_participants > len(train):
            problems.append(f"n_participants ({config.n_participants}) exceeds training set size ({len(train)})")
        if len(test) == 0:
            problems.append("test set is empty")
        if problems:
            raise ConfigError(problems)

        self.train = train
        self.test = test
        self.verbose = verbose
        self.on_round = on_round

        seed = config.master_seed
        self.arch = config.arch
        self.participants = list(range(config.n_participants))
        self.bus = MessageBus(config.latency, derive_node_seed(seed, SeedStreams.LATENCY, 0))
        self.aggregator_rng = np.random.default_rng(derive_node_seed(seed, SeedStreams.AGGREGATOR, 0))
        self.evaluator = ModelEvaluator(test)

        self.partition: Optional[PartitionPlan] = None
        self.server: Optional[NodeState] = None
        self._local_data: Dict[int, LabeledDataset] = {}
        self.rounds: List[RoundRecord] = []

    def _log(self, message: str) -> None:
        if self.verbose:
            print(message)

    def initialize(self) -> List[NodeState]:
        """
        Build the shared initial model, partition the data and record round 0.

        Returns:
            Participant states, ordered by node id
        """
        config = self.config
        initial = init_model(config.layer_dims, config.master_seed)
        self.partition = stratified_partition(self.train, config.n_participants, config.master_seed)
        self._log(f"Partitioned {len(self.train)} samples into {config.n_participants} parts: {self.partition.sizes}")

        states = [
            NodeState(id=i, model=initial.copy(), part=self.partition.parts[i])
            for i in self.participants
        ]
        for state in states:
            self._local_data[state.id] = self.train.subset(state.part)
        if self.arch == ArchitectureKind.CFL:
            self.server = NodeState(
                id=config.n_participants,
                model=initial.copy(),
                part=np.empty(0, dtype=np.int64),
                role=NodeRole.SERVER,
            )

        samples = [self.evaluator.sample(s.id, 0, s.model) for s in states]
        self._finish_round(RoundRecord(round=0, samples=samples, federation=average_over_participants(samples)))
        return states

    def _finish_round(self, record: RoundRecord) -> RoundRecord:
        self.rounds.append(record)
        if self.on_round is not None:
            self.on_round(record)
        return record

    def _train_node(self, state: NodeState, round_no: int) -> Tuple[MlpModel, int, Optional[float]]:
        state.rng = np.random.default_rng(derive_node_seed(self.config.master_seed, state.id, round_no))
        started = time.process_time() if self.config.record_process_time else None
        data = self._local_data[state.id]
        model, _ = train_local(state.model, data, self.config.hyper, state.rng)
        seconds = time.process_time() - started if started is not None else None
        return model, flop_count(model, len(data), self.config.epochs_per_round), seconds

    def _weights(self, counts: List[int]) -> Optional[List[float]]:
        if self.config.weighting == "samples":
            return [float(c) for c in counts]
        return None

    def _aggregate(self, contributions: List[Tuple[int, MlpModel, int]]) -> MlpModel:
        """FedAvg over (sender, model, n_samples) triples, in sender order."""
        contributions = sorted(contributions, key=lambda c: c[0])
        return fedavg([c[1] for c in contributions], self._weights([c[2] for c in contributions]))

    def _ready_time(self, delivered: List[Message]) -> int:
        if self.config.round_deadline is not None:
            return self.config.round_deadline
        return max((m.deliver_time for m in delivered), default=0)

    def run_round(self, states: List[NodeState], round_index: int) -> Tuple[List[NodeState], RoundRecord]:
        """
        Execute one synchronous round.

        Args:
            states: Participant states from the previous round
            round_index: Zero-based training round (< config.rounds); it is
                recorded as round ``round_index + 1`` since round 0 holds the
                initial evaluation

        Returns:
            Tuple of (updated states, round record)

        Raises:
            CodecError, ShapeMismatchError, BusError: Propagated from the exchange
        """
        config = self.config
        if not 0 <= round_index < config.rounds:
            raise ValueError(f"round index {round_index} outside 0..{config.rounds - 1}")
        round_no = round_index + 1
        n = config.n_participants

        aggregator = None
        if self.arch == ArchitectureKind.SDFL:
            aggregator = select_aggregator(self.participants, round_no, self.aggregator_rng)
        for state in states:
            state.role = NodeRole.AGGREGATOR if state.id == aggregator else NodeRole.TRAINER

        # (a) local training
        if config.workers > 1 and len(states) > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(lambda s: self._train_node(s, round_no), states))
        else:
            results = [self._train_node(s, round_no) for s in states]
        trained = {s.id: r[0] for s, r in zip(states, results)}
        flops = {s.id: r[1] for s, r in zip(states, results)}
        seconds = {s.id: r[2] for s, r in zip(states, results)}
        counts = {s.id: s.n_samples for s in states}

        # (b) exchange and (c) aggregation
        bus = self.bus
        bus.begin_round(round_no)
        ledger_before = {node: bus.ledger.node_totals(node) for node in self.participants}
        total_before = bus.ledger.total
        plan = plan_topology(self.arch, n, round_no, aggregator, config.dfl_topology)
        payloads = {i: encode_model(trained[i]) for i in self.participants}
        decoded: Dict[bytes, MlpModel] = {}

        def receive(message: Message, reference: MlpModel) -> MlpModel:
            key = message.payload
            if key not in decoded:
                decoded[key] = decode_model(message.payload)
            reference.check_congruent(decoded[key])
            return decoded[key]

        def send_all(edges: List[Edge], payload_of, send_time: int, samples_of) -> None:
            for edge in edges:
                bus.send(Message(
                    round=round_no,
                    sender=edge.sender,
                    receiver=edge.receiver,
                    kind=edge.kind,
                    payload=payload_of(edge.sender),
                    send_time=send_time,
                    n_samples=samples_of(edge.sender),
                ))

        delivered_count = 0
        dropped_count = 0
        deadline = config.round_deadline
        new_models: Dict[int, MlpModel] = {}

        if self.arch == ArchitectureKind.CFL:
            server = self.server
            send_all(plan.uploads, payloads.__getitem__, 0, counts.__getitem__)
            delivered, dropped = bus.collect(server.id, deadline)
            delivered_count += len(delivered)
            dropped_count += dropped
            if delivered:
                server.model = self._aggregate(
                    [(m.sender, receive(m, server.model), m.n_samples) for m in delivered]
                )
            global_payload = encode_model(server.model)
            send_all(plan.downloads, lambda _: global_payload, self._ready_time(delivered), lambda _: 0)
            for i in self.participants:
                inbox, _ = bus.collect(i)
                delivered_count += len(inbox)
                new_models[i] = receive(inbox[-1], trained[i]).copy() if inbox else trained[i]

        elif self.arch == ArchitectureKind.DFL:
            send_all(plan.edges, payloads.__getitem__, 0, counts.__getitem__)
            for i in self.participants:
                delivered, dropped = bus.collect(i, deadline)
                delivered_count += len(delivered)
                dropped_count += dropped
                contributions = [(i, trained[i], counts[i])]
                contributions += [(m.sender, receive(m, trained[i]), m.n_samples) for m in delivered]
                new_models[i] = self._aggregate(contributions)

        else:
            send_all(plan.uploads, payloads.__getitem__, 0, counts.__getitem__)
            delivered, dropped = bus.collect(aggregator, deadline)
            delivered_count += len(delivered)
            dropped_count += dropped
            contributions = [(aggregator, trained[aggregator], counts[aggregator])]
            contributions += [(m.sender, receive(m, trained[aggregator]), m.n_samples) for m in delivered]
            aggregated = self._aggregate(contributions)
            new_models[aggregator] = aggregated
            aggregated_payload = encode_model(aggregated)
            send_all(plan.downloads, lambda _: aggregated_payload, self._ready_time(delivered), lambda _: 0)
            for i in self.participants:
                if i == aggregator:
                    continue
                inbox, _ = bus.collect(i)
                delivered_count += len(inbox)
                new_models[i] = receive(inbox[-1], trained[i]).copy() if inbox else trained[i]

        # (d) evaluation
        samples = []
        for state in states:
            state.model = new_models[state.id]
            sent_before, received_before = ledger_before[state.id]
            sent_after, received_after = bus.ledger.node_totals(state.id)
            samples.append(self.evaluator.sample(
                state.id,
                round_no,
                state.model,
                bytes_sent=sent_after - sent_before,
                bytes_received=received_after - received_before,
                flops=flops[state.id],
                process_seconds=seconds[state.id],
            ))

        record = RoundRecord(
            round=round_no,
            samples=samples,
            federation=average_over_participants(samples),
            aggregator=aggregator,
            delivered=delivered_count,
            dropped=dropped_count,
            bytes_total=bus.ledger.total - total_before,
        )
        return states, self._finish_round(record)

    def seeds(self) -> Dict[str, object]:
        """Every derived seed of the run, for the record."""
        seed = self.config.master_seed
        return {
            "master_seed": seed,
            "init_seed": seed,
            "partition_seed": seed,
            "aggregator_stream": derive_node_seed(seed, SeedStreams.AGGREGATOR, 0),
            "latency_stream": derive_node_seed(seed, SeedStreams.LATENCY, 0),
            "node_round_seeds": [
                [derive_node_seed(seed, i, r) for i in self.participants]
                for r in range(1, self.config.rounds + 1)
            ],
        }

    def run(self) -> RunRecord:
        """Run every round and assemble the RunRecord."""
        config = self.config
        self._log(
            f"Running {config.arch.value.upper()} with {config.n_participants} participants, "
            f"{config.rounds} rounds x {config.epochs_per_round} epochs (seed {config.master_seed})"
        )
        states = self.initialize()
        for round_index in range(config.rounds):
            states, _ = self.run_round(states, round_index)

        record = RunRecord(
            config=config.to_dict(),
            seeds=self.seeds(),
            param_count=states[0].model.param_count,
            encoded_size=encoded_size(config.layer_dims),
            rounds=list(self.rounds),
            ledger=self.bus.ledger.snapshot(),
        )
        record.convergence_round = convergence_round(record, config.convergence_threshold)
        return record


def run_experiment(
    config: ExperimentConfig,
    datasets: Tuple[LabeledDataset, LabeledDataset],
    verbose: bool = False,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
) -> RunRecord:
    """
    Run a complete experiment.

    Args:
        config: Experiment configuration
        datasets: Tuple of (train, test)
        verbose: Print progress messages
        on_round: Called with each finished RoundRecord

    Returns:
        Complete RunRecord (rounds 0..config.rounds)

    Raises:
        ConfigError: With every validation failure listed
    """
    train, test = datasets
    return ProtocolEngine(config, train, test, verbose=verbose, on_round=on_round).run()
