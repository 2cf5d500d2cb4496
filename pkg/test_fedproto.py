#!/usr/bin/env python3
"""Tests for FedAvg, topology plans, seed derivation and the protocol engine."""

import numpy as np
import pytest

from conftest import SMALL_DIMS, small_config
from src.fedbench.errors import ConfigError, ShapeMismatchError
from src.fedbench.fedproto import (
    ProtocolEngine,
    derive_node_seed,
    fedavg,
    plan_topology,
    run_experiment,
    select_aggregator,
)
from src.fedbench.models import ArchitectureKind, LatencyModel, MessageKind
from src.fedbench.netsim import encoded_size
from src.fedbench.nn import MlpModel, init_model, zeros_model
from src.fedbench.report import canonical_json

TRANSFERS = {
    ArchitectureKind.CFL: lambda n: 2 * n,
    ArchitectureKind.DFL: lambda n: n * (n - 1),
    ArchitectureKind.SDFL: lambda n: 2 * (n - 1),
}


def test_derive_node_seed_is_stable_and_distinct():
    assert derive_node_seed(7, 0, 1) == derive_node_seed(7, 0, 1)
    seeds = {derive_node_seed(7, node, r) for node in range(8) for r in range(11)}
    assert len(seeds) == 88
    assert all(0 <= s < 2**64 for s in seeds)
    assert derive_node_seed(7, 1, 2) != derive_node_seed(8, 1, 2)


def test_fedavg_of_identical_models_is_identity():
    model = init_model(SMALL_DIMS, seed=3)
    for k in (1, 2, 3, 7):
        assert fedavg([model.copy() for _ in range(k)]).equals(model)


def test_fedavg_of_opposite_models_is_zero():
    model = init_model(SMALL_DIMS, seed=3)
    negated = MlpModel(weights=[-w for w in model.weights], biases=[-b for b in model.biases])
    assert fedavg([model, negated]).equals(zeros_model(SMALL_DIMS))


def test_fedavg_matches_elementwise_mean():
    rng = np.random.default_rng(5)
    for _ in range(100):
        k = int(rng.integers(1, 9))
        models = [init_model([6, 5, 3], seed=int(rng.integers(1 << 32))) for _ in range(k)]
        averaged = fedavg(models)
        for layer in range(2):
            expected = np.mean([m.weights[layer].astype(np.float64) for m in models], axis=0)
            assert np.abs(averaged.weights[layer] - expected).max() <= 1e-7


def test_fedavg_weighted():
    a = zeros_model([2, 2])
    b = MlpModel(weights=[np.full((2, 2), 4.0, dtype=np.float32)], biases=[np.full(2, 4.0, dtype=np.float32)])
    averaged = fedavg([a, b], weights=[3, 1])
    assert averaged.weights[0].tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_fedavg_errors():
    with pytest.raises(ValueError):
        fedavg([])
    with pytest.raises(ShapeMismatchError):
        fedavg([init_model([4, 3], seed=0), init_model([4, 2], seed=0)])
    with pytest.raises(ValueError):
        fedavg([zeros_model([2, 2])] * 2, weights=[0, 0])
    with pytest.raises(ValueError):
        fedavg([zeros_model([2, 2])] * 2, weights=[1])


@pytest.mark.parametrize("arch", list(ArchitectureKind))
@pytest.mark.parametrize("n", range(1, 17))
def test_plan_transfer_counts(arch, n):
    plan = plan_topology(arch, n, round_index=1, aggregator=0 if arch == ArchitectureKind.SDFL else None)
    assert plan.transfer_count == TRANSFERS[arch](n)


def test_cfl_plan_routes_through_server():
    plan = plan_topology(ArchitectureKind.CFL, 3, 1)
    assert plan.server == 3
    assert [(e.sender, e.receiver) for e in plan.uploads] == [(0, 3), (1, 3), (2, 3)]
    assert [(e.sender, e.receiver) for e in plan.downloads] == [(3, 0), (3, 1), (3, 2)]


def test_sdfl_plan_uses_aggregator():
    plan = plan_topology(ArchitectureKind.SDFL, 4, 1, aggregator=2)
    assert sorted(plan.senders_to(2)) == [0, 1, 3]
    assert all(e.sender == 2 for e in plan.edges if e.kind == MessageKind.BROADCAST)


def test_dfl_ring_topology():
    plan = plan_topology(ArchitectureKind.DFL, 5, 1, dfl_topology="ring")
    assert plan.transfer_count == 10
    assert sorted(plan.senders_to(0)) == [1, 4]
    assert plan_topology(ArchitectureKind.DFL, 2, 1, dfl_topology="ring").transfer_count == 2


def test_plan_errors():
    with pytest.raises(ValueError):
        plan_topology(ArchitectureKind.DFL, 0, 1)
    with pytest.raises(ValueError):
        plan_topology(ArchitectureKind.SDFL, 3, 1)
    with pytest.raises(ValueError):
        plan_topology(ArchitectureKind.SDFL, 3, 1, aggregator=3)


def test_select_aggregator():
    a = [select_aggregator([0, 1, 2, 3], r, np.random.default_rng(1)) for r in range(1, 5)]
    rng = np.random.default_rng(9)
    picks = [select_aggregator([0, 1, 2, 3], r, rng) for r in range(200)]
    assert set(picks) == {0, 1, 2, 3}
    assert len(set(a)) == 1
    with pytest.raises(ValueError):
        select_aggregator([], 1, rng)


@pytest.mark.parametrize("arch", list(ArchitectureKind))
@pytest.mark.parametrize("n", [3, 4])
def test_zero_latency_byte_accounting(arch, n, train_set, test_set):
    config = small_config(arch, n=n, rounds=2)
    record = run_experiment(config, (train_set, test_set))
    expected = 2 * encoded_size(SMALL_DIMS) * TRANSFERS[arch](n)
    assert record.total_bytes == expected
    assert sum(r.bytes_total for r in record.rounds) == expected
    assert record.rounds[0].bytes_total == 0
    assert record.encoded_size == encoded_size(SMALL_DIMS)


def test_record_shape(tiny_record):
    assert len(tiny_record.rounds) == 3
    assert [r.round for r in tiny_record.rounds] == [0, 1, 2]
    assert all(len(r.samples) == 3 for r in tiny_record.rounds)
    assert tiny_record.rounds[0].federation.flops == 0
    n_samples = 300
    assert tiny_record.rounds[1].federation.flops == 6 * init_model(SMALL_DIMS, 0).param_count * n_samples
    assert len(tiny_record.seeds["node_round_seeds"]) == 2


def test_zero_rounds_records_only_initial_evaluation(train_set, test_set):
    record = run_experiment(small_config("cfl", n=3, rounds=0), (train_set, test_set))
    assert [r.round for r in record.rounds] == [0]
    assert record.total_bytes == 0


def _models_per_round(arch, train_set, test_set, n=4, rounds=2):
    engine = ProtocolEngine(small_config(arch, n=n, rounds=rounds), train_set, test_set)
    states = engine.initialize()
    history = []
    for r in range(rounds):
        states, _ = engine.run_round(states, r)
        history.append([s.model.copy() for s in states])
    return history, engine


def test_synchronous_equivalence(train_set, test_set):
    cfl, cfl_engine = _models_per_round("cfl", train_set, test_set)
    dfl, dfl_engine = _models_per_round("dfl", train_set, test_set)
    sdfl, sdfl_engine = _models_per_round("sdfl", train_set, test_set)
    for round_models in zip(cfl, dfl, sdfl):
        reference = round_models[0][0]
        for models in round_models:
            for model in models:
                assert model.max_abs_diff(reference) <= 1e-6
    traces = [[r.federation.accuracy for r in e.rounds] for e in (cfl_engine, dfl_engine, sdfl_engine)]
    for trace in traces[1:]:
        assert np.abs(np.array(trace) - np.array(traces[0])).max() <= 1e-3


def test_runs_are_deterministic(train_set, test_set):
    config = small_config("sdfl", n=3, rounds=2, latency=LatencyModel.parse("uniform:1:9"))
    a = run_experiment(config, (train_set, test_set))
    b = run_experiment(config, (train_set, test_set))
    assert canonical_json(a.to_dict()) == canonical_json(b.to_dict())


def test_parallel_training_is_bitwise_identical(train_set, test_set):
    a = run_experiment(small_config("dfl", n=4, rounds=1), (train_set, test_set))
    b = run_experiment(small_config("dfl", n=4, rounds=1, workers=3), (train_set, test_set))
    assert [r.to_dict() for r in a.rounds] == [r.to_dict() for r in b.rounds]
    assert a.ledger == b.ledger


def test_single_participant(train_set, test_set):
    for arch in ArchitectureKind:
        record = run_experiment(small_config(arch, n=1, rounds=1), (train_set, test_set))
        expected = 2 * encoded_size(SMALL_DIMS) if arch == ArchitectureKind.CFL else 0
        assert record.total_bytes == expected


def test_sdfl_records_aggregator(train_set, test_set):
    record = run_experiment(small_config("sdfl", n=4, rounds=3), (train_set, test_set))
    assert all(0 <= r.aggregator < 4 for r in record.rounds[1:])
    assert record.rounds[0].aggregator is None


def test_deadline_drops_uploads_in_cfl(train_set, test_set):
    config = small_config("cfl", n=3, rounds=1, latency=LatencyModel.parse("fixed:5"), round_deadline=2)
    engine = ProtocolEngine(config, train_set, test_set)
    states = engine.initialize()
    initial = states[0].model.copy()
    states, record = engine.run_round(states, 0)
    assert record.dropped == 3
    assert record.bytes_total == 6 * encoded_size(SMALL_DIMS)
    for state in states:
        assert state.model.equals(initial)


def test_deadline_in_dfl_keeps_local_models(train_set, test_set):
    config = small_config("dfl", n=3, rounds=1, latency=LatencyModel.parse("fixed:5"), round_deadline=4)
    engine = ProtocolEngine(config, train_set, test_set)
    states = engine.initialize()
    states, record = engine.run_round(states, 0)
    assert record.dropped == 6
    assert record.delivered == 0
    assert not states[0].model.equals(states[1].model)


def test_generous_deadline_drops_nothing(train_set, test_set):
    config = small_config("sdfl", n=4, rounds=1, latency=LatencyModel.parse("uniform:1:3"), round_deadline=3)
    record = run_experiment(config, (train_set, test_set))
    assert record.rounds[1].dropped == 0


def test_sample_weighting_runs(train_set, test_set):
    record = run_experiment(small_config("cfl", n=3, rounds=1, weighting="samples"), (train_set, test_set))
    assert record.config["weighting"] == "samples"


def test_engine_rejects_mismatched_data(train_set, test_set):
    with pytest.raises(ConfigError):
        ProtocolEngine(small_config("dfl", layer_dims=(784, 10)), train_set, test_set)
    with pytest.raises(ConfigError):
        ProtocolEngine(small_config("dfl", n=500), train_set, test_set)


def test_run_round_rejects_out_of_range_index(train_set, test_set):
    engine = ProtocolEngine(small_config("dfl", rounds=1), train_set, test_set)
    states = engine.initialize()
    with pytest.raises(ValueError):
        engine.run_round(states, 1)


def test_training_improves_accuracy(train_set, test_set):
    record = run_experiment(small_config("cfl", n=3, rounds=4, epochs_per_round=2), (train_set, test_set))
    assert record.final.accuracy > record.rounds[0].federation.accuracy
    assert record.final.accuracy > 0.5


def test_derive_node_seed_separates_nodes_and_rounds():
    rng = np.random.default_rng(17)
    for s in rng.integers(0, 2**63, size=1000, dtype=np.int64).tolist():
        assert derive_node_seed(s, 0, 0) != derive_node_seed(s, 1, 0)
        assert derive_node_seed(s, 2, 3) != derive_node_seed(s, 2, 4)


def test_select_aggregator_is_uniform():
    rng = np.random.default_rng(derive_node_seed(7, 1 << 20, 0))
    picks = [select_aggregator([0, 1, 2, 3], r, rng) for r in range(10000)]
    counts = np.bincount(picks, minlength=4)
    assert all(abs(c - 2500) <= 200 for c in counts)
    assert select_aggregator([5], 1, rng) == 5
