import numpy as np
import pytest

import engine as engine_module
from config import ContractError, FederationConfig, SimulationError
from datasets import FederatedData, LabeledDataset, gen_blobs, quadratic_testbed
from engine import (
    FederatedEngine, RoundResult, ds_round, fslp_round, local_sgd, pretrain_server, run,
    sample_clients,
)
from export_manager import write_trace_csv
from loss_models import SoftmaxRegression, quadratic_party_models
from rng import StreamFactory
from round_trace import RoundTrace
from theory import composite_minimum_quadratic

CROSS = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]


def _cfg(**overrides):
    params = dict(algorithm="FSL", num_clients=4, clients_per_round=4, local_steps=2,
                  server_steps=2, eta_l=0.05, rounds=20, batch_size=4, eta_g=1.0,
                  eta_0=0.05, gamma=1.0)
    params.update(overrides)
    return FederationConfig(**params)


def _rows(traces):
    return [t.to_row() for t in traces]


def _random_testbed(N, d, samples, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(N, d)).tolist()
    server = rng.normal(size=d).tolist()
    return (quadratic_testbed(centers, server, samples_per_party=samples),
            quadratic_party_models(centers, server))


def _blob_federation(num_clients=2, n0=6):
    blobs = gen_blobs(3, 12, 4, 0.8, seed=6)
    order = np.random.default_rng(0).permutation(len(blobs))
    server = blobs.subset(np.sort(order[:n0]))
    rest = np.array_split(np.sort(order[n0:]), num_clients)
    return FederatedData([blobs.subset(idx) for idx in rest], server)


# ---------------------------------------------------------------------------
# LocalSGD & sampling
# ---------------------------------------------------------------------------

def test_local_sgd_full_batch_contracts_to_the_center(quad_data, quad_models):
    x = np.array([2.0, -1.0])
    center = np.array([1.0, 0.0])
    y = local_sgd(x, 0.1, 5, quad_data.clients[0], quad_models.client(0), 4,
                  np.random.default_rng(0))
    np.testing.assert_allclose(y, center + 0.9 ** 5 * (x - center), rtol=1e-12)


def test_local_sgd_records_the_iterates_before_each_step(quad_data, quad_model):
    record = []
    x = np.array([0.3, 0.3])
    local_sgd(x, 0.1, 3, quad_data.clients[0], quad_model, 4, np.random.default_rng(0), record)
    assert len(record) == 3
    np.testing.assert_array_equal(record[0], x)


def test_local_sgd_without_steps_returns_a_copy(quad_data, quad_model):
    x = np.array([0.3, 0.3])
    y = local_sgd(x, 0.1, 0, quad_data.clients[0], quad_model, 4, np.random.default_rng(0))
    np.testing.assert_array_equal(y, x)
    assert y is not x


def test_local_sgd_rejects_negative_arguments(quad_data, quad_model):
    with pytest.raises(SimulationError):
        local_sgd(np.zeros(2), -0.1, 1, quad_data.clients[0], quad_model, 4, np.random.default_rng(0))


def test_sample_clients_is_sorted_distinct_and_reproducible():
    a = sample_clients(10, 4, StreamFactory(2).sampling(3))
    b = sample_clients(10, 4, StreamFactory(2).sampling(3))
    assert a == b
    assert list(a) == sorted(set(a)) and len(a) == 4
    assert sample_clients(5, 5, np.random.default_rng(0)) == (0, 1, 2, 3, 4)
    with pytest.raises(SimulationError):
        sample_clients(3, 4, np.random.default_rng(0))


def test_sampling_is_uniform_over_clients():
    draws = 100_000
    counts = np.zeros(10)
    streams = StreamFactory(0)
    for t in range(draws):
        for i in sample_clients(10, 4, streams.sampling(t)):
            counts[i] += 1
    p = 4 / 10
    stderr = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(counts / draws - p) <= 3 * stderr)


def test_round_result_rejects_duplicate_clients():
    with pytest.raises(SimulationError):
        RoundResult(round=0, params_digest="", delta_norm=0.0, sampled=(1, 1))


# ---------------------------------------------------------------------------
# Round formulas
# ---------------------------------------------------------------------------

def test_fsl_matches_hand_computed_incremental_gradient_iteration(quad_data, quad_models):
    cfg = _cfg(rounds=500, local_steps=2, server_steps=2, gamma=1.0)
    engine = FederatedEngine(cfg, quad_data, quad_models)
    engine.run()

    centers = [np.array(c) for c in CROSS]
    x = quad_models.init_params(StreamFactory(cfg.master_seed).init())
    for _ in range(cfg.rounds):
        updates = []
        for c in centers:
            y = x.copy()
            for _ in range(cfg.local_steps):
                y = y - cfg.eta_l * (y - c)
            updates.append(y - x)
        w = x + cfg.eta_g * np.mean(updates, axis=0)
        for _ in range(cfg.server_steps):
            w = w - cfg.gamma * cfg.eta_0 * w
        x = w
    np.testing.assert_allclose(engine.params, x, rtol=1e-12, atol=1e-15)


def test_single_client_fsl_is_an_incremental_gradient_method():
    client, server = np.array([1.5, -0.5]), np.array([-1.0, 2.0])
    data = quadratic_testbed([client], server, samples_per_party=2)
    models = quadratic_party_models([client], server)
    cfg = _cfg(num_clients=1, clients_per_round=1, local_steps=1, server_steps=1,
               batch_size=2, rounds=1000, eta_l=0.1, eta_0=0.1, gamma=0.5)
    engine = FederatedEngine(cfg, data, models)
    engine.run()
    x = models.init_params(StreamFactory(0).init())
    for _ in range(1000):
        x = x - 0.1 * (x - client)
        x = x - 0.5 * 0.1 * (x - server)
    np.testing.assert_allclose(engine.params, x, rtol=1e-12)


def test_large_server_weight_drives_the_model_to_the_server_minimizer(quad_data_shifted,
                                                                      quad_models_shifted):
    gamma = 50.0
    cfg = _cfg(gamma=gamma, eta_0=0.01, rounds=300)
    engine = FederatedEngine(cfg, quad_data_shifted, quad_models_shifted)
    engine.run()
    server = np.array([0.5, 0.0])
    np.testing.assert_allclose(engine.params, composite_minimum_quadratic(CROSS, server, gamma),
                               atol=0.01)
    assert np.linalg.norm(engine.params - server) < 0.02

    mild = FederatedEngine(_cfg(gamma=1.0, eta_0=0.01, rounds=300), quad_data_shifted,
                           quad_models_shifted)
    mild.run()
    assert np.linalg.norm(mild.params - server) > 0.3


def test_ds_round_trains_on_client_data_joined_with_server_data():
    data = _blob_federation()
    model = SoftmaxRegression(4, 3)
    cfg = _cfg(algorithm="DS", num_clients=2, clients_per_round=2, local_steps=1,
               server_steps=0, batch_size=100, eta_g=1.0)
    engine = FederatedEngine(cfg, data, model)
    assert [len(c) for c in engine.train_clients] == [21, 21]

    x = np.random.default_rng(3).normal(scale=0.3, size=model.dim)
    x_next, _ = ds_round(x, engine.train_clients, data.server, cfg, model, engine.streams)
    grads = [model.full_grad(x, c.concat(data.server)).grad for c in data.clients]
    expected = x - cfg.eta_g * cfg.eta_l * np.mean(grads, axis=0)
    np.testing.assert_allclose(x_next, expected, rtol=1e-12, atol=1e-15)


def test_ds_coincides_with_fedavg_on_the_quadratic_testbed(quad_data_shifted, quad_models_shifted):
    base = dict(server_steps=0, rounds=10)
    ds = run(_cfg(algorithm="DS", **base), quad_data_shifted, quad_models_shifted)
    fedavg = run(_cfg(algorithm="FedAvg", **base), quad_data_shifted, quad_models_shifted)
    assert [t.params_digest for t in ds] == [t.params_digest for t in fedavg]


def test_fslp_round_weights_the_server_update(quad_data_shifted, quad_models_shifted):
    cfg = _cfg(algorithm="FSLp", local_steps=1, server_steps=1, gamma=2.0, eta_0=0.1,
               fslp_server_weight=0.25, eta_g=1.5)
    streams = StreamFactory(0)
    x = np.array([0.2, 0.4])
    x_next, _ = fslp_round(x, quad_data_shifted.clients, quad_data_shifted.server, cfg,
                           quad_models_shifted, streams)
    client_delta = np.mean([-cfg.eta_l * (x - np.array(c)) for c in CROSS], axis=0)
    server_delta = -cfg.gamma * cfg.eta_0 * (x - np.array([0.5, 0.0]))
    expected = x + cfg.eta_g * (0.75 * client_delta + 0.25 * server_delta)
    np.testing.assert_allclose(x_next, expected, rtol=1e-12)


def test_single_client_fedavg_is_gradient_descent():
    center = np.array([2.0, -1.0])
    data = quadratic_testbed([center], [0.0, 0.0], samples_per_party=3)
    models = quadratic_party_models([center], [0.0, 0.0])
    cfg = _cfg(algorithm="FedAvg", num_clients=1, clients_per_round=1, local_steps=1,
               server_steps=0, rounds=30, batch_size=3, eta_l=0.2)
    engine = FederatedEngine(cfg, data, models)
    traces = engine.run()
    x = models.init_params(StreamFactory(0).init())
    for _ in range(30):
        x = x - 0.2 * (x - center)
    np.testing.assert_allclose(engine.params, x, rtol=1e-12)
    assert traces[-1].train_loss == pytest.approx(0.5 * float((x - center) @ (x - center)))


def test_fsl_without_server_data_is_fedavg():
    centers = [[1.0, 0.0], [0.0, 1.0]]
    full = quadratic_testbed(centers, [0.0, 0.0], samples_per_party=4)
    data = FederatedData(full.clients, LabeledDataset.empty(2, 1))
    models = quadratic_party_models(centers, [0.0, 0.0])
    fsl = run(_cfg(num_clients=2, clients_per_round=2), data, models)
    fedavg = run(_cfg(algorithm="FedAvg", num_clients=2, clients_per_round=2), data, models)
    assert [t.params_digest for t in fsl] == [t.params_digest for t in fedavg]


# ---------------------------------------------------------------------------
# Exact gradients
# ---------------------------------------------------------------------------

def test_quadratic_parties_always_use_exact_gradients(quad_data_shifted, quad_models_shifted):
    engine = FederatedEngine(_cfg(batch_size=1), quad_data_shifted, quad_models_shifted)
    assert engine.exact_gradients()


def test_classifier_gradients_are_exact_only_with_full_batches():
    data = _blob_federation()
    model = SoftmaxRegression(4, 3)
    base = dict(num_clients=2, clients_per_round=2)
    assert not FederatedEngine(_cfg(batch_size=5, **base), data, model).exact_gradients()
    assert FederatedEngine(_cfg(batch_size=15, **base), data, model).exact_gradients()
    assert not FederatedEngine(_cfg(batch_size=15, server_batch_size=3, **base), data,
                               model).exact_gradients()
    assert FederatedEngine(_cfg(algorithm="FedAvg", server_steps=0, batch_size=15,
                                server_batch_size=3, **base), data, model).exact_gradients()
    assert not FederatedEngine(_cfg(algorithm="DS", server_steps=0, batch_size=15, **base),
                               data, model).exact_gradients()


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------

def test_runs_are_deterministic_per_seed():
    data, models = _random_testbed(6, 3, 10, seed=4)
    cfg = _cfg(num_clients=6, clients_per_round=3, batch_size=4, record_drift=True)
    assert _rows(run(cfg, data, models)) == _rows(run(cfg, data, models))
    other = run(_cfg(num_clients=6, clients_per_round=3, batch_size=4, master_seed=1), data, models)
    assert _rows(run(cfg, data, models))[-1] != _rows(other)[-1]


def test_thread_count_does_not_change_the_trace():
    data, models = _random_testbed(8, 3, 10, seed=5)
    base = dict(num_clients=8, clients_per_round=4, batch_size=3, record_drift=True, rounds=15)
    serial = run(_cfg(workers=1, **base), data, models)
    threaded = run(_cfg(workers=4, **base), data, models)
    assert _rows(serial) == _rows(threaded)


def test_fedavg_and_fsl_without_server_weight_write_identical_csv(tmp_path):
    data, models = _random_testbed(10, 10, 12, seed=7)
    base = dict(num_clients=10, clients_per_round=4, local_steps=5, server_steps=5,
                batch_size=4, rounds=100, record_drift=True, eta_g=None, eta_0=None)
    fedavg = run(_cfg(algorithm="FedAvg", **base), data, models)
    fsl = run(_cfg(algorithm="FSL", gamma=0.0, **base), data, models)
    a = write_trace_csv(fedavg, tmp_path / "fedavg.csv")
    b = write_trace_csv(fsl, tmp_path / "fsl.csv")
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

def test_zero_rounds_gives_an_empty_trace(quad_data, quad_models):
    engine = FederatedEngine(_cfg(rounds=0), quad_data, quad_models)
    assert engine.run() == []
    np.testing.assert_array_equal(engine.params, engine.initial_params())


def test_metrics_stride_leaves_empty_diagnostics(quad_data, quad_models):
    traces = run(_cfg(rounds=7, metrics_stride=3), quad_data, quad_models)
    evaluated = [t.round for t in traces if t.has_diagnostics]
    assert evaluated == [0, 3, 6]
    assert all(not np.isnan(t.train_loss) for t in traces)


def test_first_row_diagnostics_are_at_the_initial_point(quad_data_shifted, quad_models_shifted):
    cfg = _cfg()
    engine = FederatedEngine(cfg, quad_data_shifted, quad_models_shifted)
    x0 = engine.initial_params()
    first = engine.run()[0]
    assert first.grad_norm_F == pytest.approx(np.linalg.norm(x0), rel=1e-12)
    assert first.xi_sq == pytest.approx(0.25, rel=1e-12)
    assert first.G_sq == pytest.approx(1.0, rel=1e-12)
    assert first.grad_norm_f0 == pytest.approx(np.linalg.norm(x0 - [0.5, 0.0]), rel=1e-12)


def test_pretraining_moves_towards_server_data(quad_data_shifted, quad_models_shifted):
    models = quad_models_shifted
    fsl = FederatedEngine(_cfg(pretrain_epochs=3, pretrain_lr=0.5), quad_data_shifted, models)
    fedavg = FederatedEngine(_cfg(algorithm="FedAvg", server_steps=0, pretrain_epochs=3,
                                  pretrain_lr=0.5), quad_data_shifted, models)
    x0 = models.init_params(StreamFactory(0).init())
    server = np.array([0.5, 0.0])
    np.testing.assert_allclose(fsl.initial_params(), server + 0.5 ** 3 * (x0 - server), rtol=1e-12)
    np.testing.assert_array_equal(fedavg.initial_params(), x0)


def test_pretrain_without_epochs_is_identity(quad_data, quad_model):
    x0 = np.array([1.0, 2.0])
    out = pretrain_server(x0, quad_data.server, 0, 0.1, 4, quad_model, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x0)


def test_exact_drift_simulates_unsampled_clients_without_changing_the_model():
    data, models = _random_testbed(6, 2, 8, seed=2)
    base = dict(num_clients=6, clients_per_round=2, batch_size=4, record_drift=True, rounds=10)
    estimated = run(_cfg(**base), data, models)
    exact = run(_cfg(exact_drift=True, **base), data, models)
    assert all(t.drift_estimated for t in estimated)
    assert not any(t.drift_estimated for t in exact)
    assert [t.params_digest for t in estimated] == [t.params_digest for t in exact]
    assert any(a.Ec_drift != b.Ec_drift for a, b in zip(estimated, exact))


def test_drift_is_empty_unless_recorded(quad_data, quad_models):
    traces = run(_cfg(rounds=3), quad_data, quad_models)
    assert all(np.isnan(t.Ec_drift) and np.isnan(t.E0_drift) for t in traces)


def test_party_model_count_must_match_the_clients(quad_data):
    with pytest.raises(ContractError):
        FederatedEngine(_cfg(), quad_data, quadratic_party_models(CROSS[:3], [0.0, 0.0]))


def test_out_of_range_trace_values_are_rejected_by_the_run_loop(quad_data, quad_models,
                                                                monkeypatch):
    monkeypatch.setattr(engine_module, "accuracy", lambda model, x, data: 1.5)
    with pytest.raises(ContractError):
        run(_cfg(rounds=2), quad_data, quad_models)


def test_out_of_range_trace_values_are_not_written(tmp_path):
    trace = RoundTrace(round=0)
    trace.delta_norm = -1.0
    with pytest.raises(ContractError):
        write_trace_csv([trace], tmp_path / "bad.csv")
    assert not (tmp_path / "bad.csv").exists()


def test_divergence_raises_simulation_error():
    centers = [[1.0, 0.0], [-1.0, 0.0]]
    data = quadratic_testbed(centers, [0.0, 0.0], samples_per_party=2)
    cfg = _cfg(algorithm="FedAvg", num_clients=2, clients_per_round=2, server_steps=0,
               eta_l=1e200, batch_size=2)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(SimulationError):
            run(cfg, data, quadratic_party_models(centers, [0.0, 0.0]))
