import math

import numpy as np
import pytest

from config import BoundViolation, ConfigError, FederationConfig
from engine import FederatedEngine, fsl_round
from loss_models import quadratic_party_models
from metrics import objective_values
from rng import StreamFactory
from theory import (
    TheoryConstants, client_drift_bound, composite_minimum_quadratic, derive_constants,
    descent_bound, descent_step_cap, error_order, exact_constants_for_quadratics,
    gradient_relation_gap, h_floor, scaled_step_sizes, server_drift_bound, stationarity_bound,
    strict_step_cap, validate_step_sizes,
)

from conftest import CROSS_CENTERS


def _protocol(**overrides):
    params = dict(algorithm="FSL", num_clients=4, clients_per_round=4, local_steps=2,
                  server_steps=2, eta_l=0.05, eta_g=1.0, eta_0=0.05, gamma=1.0, rounds=200,
                  batch_size=4, record_drift=True)
    params.update(overrides)
    return FederationConfig(**params)


def _quadratic_run(data, cfg, server_center):
    tc = exact_constants_for_quadratics(CROSS_CENTERS, server_center).with_protocol(cfg)
    engine = FederatedEngine(cfg, data, quadratic_party_models(CROSS_CENTERS, server_center))
    return tc, engine.run()


# ---------------------------------------------------------------------------
# Derived constants
# ---------------------------------------------------------------------------

def test_participation_factor():
    assert derive_constants(TheoryConstants(L=1.0, N=10, S=4)).rho_s == pytest.approx(6 / 9)
    assert derive_constants(TheoryConstants(L=1.0, N=10, S=10)).rho_s == 0.0
    assert derive_constants(TheoryConstants(L=1.0, N=1, S=1)).rho_s == 0.0


def test_kappa_takes_the_larger_branch():
    assert derive_constants(TheoryConstants(L=1.0, gamma=1.0, eta_g=1.0)).kappa == 5.0
    assert derive_constants(TheoryConstants(L=1.0, gamma=2.0, eta_g=1.0)).kappa == 32.0


def test_h_tends_to_gamma_plus_half_for_small_steps():
    dc = derive_constants(TheoryConstants(L=1.0, gamma=1.5, K0=1, eta_0=1e-12))
    assert dc.h == pytest.approx(2.0, abs=1e-9)


def test_invalid_constants_name_their_field():
    with pytest.raises(ConfigError) as err:
        TheoryConstants(L=0.0)
    assert err.value.field == "L"
    with pytest.raises(ConfigError) as err:
        TheoryConstants(L=1.0, N=2, S=3)
    assert err.value.field == "S"


def test_with_protocol_binds_the_run_parameters():
    cfg = _protocol(clients_per_round=2)
    tc = TheoryConstants(L=2.0, G=1.0).with_protocol(cfg)
    assert (tc.N, tc.S, tc.K, tc.K0) == (4, 2, 2, 2)
    assert (tc.gamma, tc.eta_l, tc.eta_g, tc.eta_0) == (1.0, 0.05, 1.0, 0.05)
    assert tc.L == 2.0 and tc.G == 1.0


# ---------------------------------------------------------------------------
# Step-size caps
# ---------------------------------------------------------------------------

def test_descent_cap_examples():
    assert descent_step_cap(TheoryConstants(L=1.0, gamma=1.0, eta_g=2.0)) == pytest.approx(2 / 9)
    assert descent_step_cap(TheoryConstants(L=1.0, gamma=0.0, eta_g=1.0)) == pytest.approx(2 / 9)
    caps = [descent_step_cap(TheoryConstants(L=L, gamma=1.0)) for L in (0.5, 1.0, 10.0, 1e6)]
    assert all(a > b for a, b in zip(caps, caps[1:]))


def test_strict_cap_example():
    tc = TheoryConstants(L=1.0, gamma=1.0, eta_g=1.0)
    cap = strict_step_cap(tc)
    assert cap == pytest.approx(0.025)
    at_cap = derive_constants(TheoryConstants(L=1.0, gamma=1.0, eta_g=1.0, K0=1, eta_0=cap))
    assert at_cap.h >= 1.0


@pytest.mark.parametrize("gamma", [0.0, 0.5, 1.0, 1.5, 2.0])
@pytest.mark.parametrize("eta_g", [1.0, 2.0, math.sqrt(10)])
@pytest.mark.parametrize("L", [0.5, 1.0, 2.0])
def test_h_floor_holds_under_the_strict_cap(gamma, eta_g, L):
    base = TheoryConstants(L=L, gamma=gamma, eta_g=eta_g)
    tc = TheoryConstants(L=L, gamma=gamma, eta_g=eta_g, K0=1, eta_0=strict_step_cap(base))
    assert derive_constants(tc).h >= h_floor(gamma) - 1e-12


def test_validate_step_sizes():
    ok = TheoryConstants(L=1.0, gamma=1.0, K=2, K0=2, eta_l=0.05, eta_g=1.0, eta_0=0.05)
    validate_step_sizes(ok)
    with pytest.raises(BoundViolation, match="differs"):
        validate_step_sizes(TheoryConstants(L=1.0, gamma=1.0, K=2, K0=2, eta_l=0.05, eta_g=1.0,
                                            eta_0=0.04))
    with pytest.raises(BoundViolation, match="exceeds"):
        validate_step_sizes(TheoryConstants(L=1.0, gamma=1.0, K=2, K0=2, eta_l=0.5, eta_g=1.0,
                                            eta_0=0.5))


# ---------------------------------------------------------------------------
# Bound formulas
# ---------------------------------------------------------------------------

def _noiseless(**overrides):
    params = dict(L=1.0, gamma=1.0, K=1, K0=1, eta_l=0.1, eta_g=1.0, eta_0=0.1)
    params.update(overrides)
    return TheoryConstants(**params)


def test_descent_bound_at_a_noiseless_stationary_point_is_the_objective():
    tc = _noiseless()
    assert descent_bound(tc, derive_constants(tc), 3.5, 0.0) == pytest.approx(3.5)


def test_descent_bound_without_server_weight_keeps_the_heterogeneity_term():
    tc = _noiseless(gamma=0.0, G=1.0, N=4, S=4, eta_g=2.0, eta_l=0.05)
    dc = derive_constants(tc)
    assert dc.phi == pytest.approx(2.0 / 4.0)
    a = tc.step
    expected = 2.0 - a * dc.h * 0.3 + 8 * a ** 3 * dc.phi
    assert descent_bound(tc, dc, 2.0, 0.3) == pytest.approx(expected)


def test_descent_bound_rejects_steps_above_the_cap():
    tc = _noiseless(eta_l=1.0, eta_0=1.0)
    with pytest.raises(BoundViolation):
        descent_bound(tc, derive_constants(tc), 1.0, 1.0)


def test_stationarity_bound_limits():
    tc = _noiseless(G=1.0, N=4, S=4)
    dc = derive_constants(tc)
    floor = stationarity_bound(tc, dc, 0.0, 1)
    assert stationarity_bound(tc, dc, 2.0, 10 ** 12) == pytest.approx(floor, rel=1e-9)
    assert stationarity_bound(tc, dc, 2.0, 10) > stationarity_bound(tc, dc, 2.0, 100)
    quiet = _noiseless()
    assert stationarity_bound(quiet, derive_constants(quiet), 0.0, 50) == 0.0
    with pytest.raises(BoundViolation):
        stationarity_bound(tc, dc, 1.0, 0)


def test_drift_bound_premises_are_enforced():
    tc = _noiseless(K=4, eta_l=0.1)
    with pytest.raises(BoundViolation):
        client_drift_bound(tc, 1.0)
    steep = _noiseless(gamma=3.0)
    with pytest.raises(BoundViolation):
        server_drift_bound(steep, derive_constants(steep), 0.0, 1.0, 1.0)


def test_gradient_relation_gap_is_non_negative(rng):
    for _ in range(100):
        g_F, g_f0 = rng.normal(size=5), rng.normal(size=5)
        gamma = float(rng.uniform(0, 3))
        g_Ft = (g_F + gamma * g_f0) / (1 + gamma)
        xi = float((g_f0 - g_F) @ (g_f0 - g_F))
        assert gradient_relation_gap(g_F @ g_F, g_Ft @ g_Ft, xi, gamma) >= -1e-12


# ---------------------------------------------------------------------------
# Error orders
# ---------------------------------------------------------------------------

def test_without_server_weight_the_error_constant_is_the_fedavg_one():
    tc = TheoryConstants(L=1.0, G=2.0, sigma=0.5, N=10, S=4, K=3)
    dc = derive_constants(tc)
    assert dc.m_sq == pytest.approx(0.25 + (6 / 9) * 3 * 4.0)


def test_doubling_rounds_shrinks_the_slow_term_by_root_two():
    tc = TheoryConstants(L=1.0, G=1.0, sigma=0.3, sigma0=0.2, N=10, S=4, K=5, gamma=1.0)
    for regime in ("a", "b", "c"):
        a, b = error_order(tc, 100, 1.0, regime), error_order(tc, 200, 1.0, regime)
        assert b.slow_term == pytest.approx(a.slow_term / math.sqrt(2))
        assert b.fast_term == pytest.approx(a.fast_term / 2)


def test_heterogeneity_fades_with_server_weight():
    terms = [error_order(TheoryConstants(L=1.0, G=1.0, N=10, S=4, K=5, gamma=g), 100).slow_term
             for g in (1.0, 10.0, 100.0)]
    assert terms[0] > terms[1] > terms[2]


def test_error_order_arguments():
    tc = TheoryConstants(L=1.0)
    with pytest.raises(ValueError):
        error_order(tc, 0)
    with pytest.raises(ValueError):
        error_order(tc, 10, regime="d")


def test_scaled_step_sizes_satisfy_the_identity():
    tc = scaled_step_sizes(TheoryConstants(L=2.0, N=10, S=4, K=5, gamma=1.0), 400)
    assert tc.eta_g == 2.0 and tc.K0 == 5
    assert tc.K * tc.eta_l * tc.eta_g == pytest.approx(tc.step, rel=1e-12)
    assert tc.step == pytest.approx(math.sqrt(20) / (math.sqrt(800) * 2))


# ---------------------------------------------------------------------------
# Quadratic testbed
# ---------------------------------------------------------------------------

def test_exact_constants_examples():
    tc = exact_constants_for_quadratics([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    assert (tc.L, tc.G ** 2, tc.xi_bar ** 2) == (1.0, 1.0, 0.0)
    assert exact_constants_for_quadratics([[1.0, 0.0], [-1.0, 0.0]], [0.0, 1.0]).xi_bar ** 2 == 1.0
    same = exact_constants_for_quadratics([[2.0, 2.0]] * 3, [2.0, 2.0])
    assert same.G == 0.0 and same.xi_bar == 0.0 and same.N == same.S == 3


def test_composite_minimum_is_stationary(quad_data_shifted, quad_models_shifted):
    x_star = composite_minimum_quadratic(CROSS_CENTERS, [0.5, 0.0], 1.5)
    np.testing.assert_allclose(x_star, [0.3, 0.0])
    ov = objective_values(x_star, quad_data_shifted.clients, quad_data_shifted.server,
                          quad_models_shifted, 1.5)
    assert ov.grad_Ftilde_sq == pytest.approx(0.0, abs=1e-28)


@pytest.mark.parametrize("server_center", [[0.0, 0.0], [0.5, 0.0]])
def test_descent_inequality_holds_every_round(server_center):
    from datasets import quadratic_testbed

    data = quadratic_testbed(CROSS_CENTERS, server_center, samples_per_party=4)
    tc, traces = _quadratic_run(data, _protocol(), server_center)
    dc = derive_constants(tc)
    assert tc.G ** 2 == pytest.approx(1.0)
    for now, nxt in zip(traces, traces[1:]):
        bound = descent_bound(tc, dc, now.Ftilde, now.grad_norm_Ftilde ** 2, now.xi_sq)
        assert nxt.Ftilde <= bound + 1e-12


@pytest.mark.parametrize("server_center", [[0.0, 0.0], [0.5, 0.0]])
def test_drift_bounds_hold_every_round(server_center):
    from datasets import quadratic_testbed

    data = quadratic_testbed(CROSS_CENTERS, server_center, samples_per_party=4)
    tc, traces = _quadratic_run(data, _protocol(), server_center)
    dc = derive_constants(tc)
    for t in traces:
        assert t.Ec_drift <= client_drift_bound(tc, t.grad_norm_F ** 2) + 1e-12
        assert t.E0_drift <= server_drift_bound(tc, dc, t.Ec_drift, t.grad_norm_F ** 2,
                                                t.grad_norm_f0 ** 2) + 1e-12


@pytest.mark.parametrize("server_center", [[0.0, 0.0], [0.5, 0.0]])
def test_stationarity_bound_dominates_observed_gradients(server_center):
    from datasets import quadratic_testbed

    data = quadratic_testbed(CROSS_CENTERS, server_center, samples_per_party=4)
    cfg = _protocol()
    tc, traces = _quadratic_run(data, cfg, server_center)
    dc = derive_constants(tc)
    x_star = composite_minimum_quadratic(CROSS_CENTERS, server_center, cfg.gamma)
    models = quadratic_party_models(CROSS_CENTERS, server_center)
    f_star = objective_values(x_star, data.clients, data.server, models, cfg.gamma).Ftilde
    d0 = traces[0].Ftilde - f_star
    for T in (10, 50, 200):
        observed = min(t.grad_norm_Ftilde ** 2 for t in traces[:T])
        assert observed <= stationarity_bound(tc, dc, d0, T)


@pytest.mark.slow
def test_descent_inequality_holds_in_expectation_with_partial_participation(quad_data_shifted,
                                                                            quad_models_shifted):
    cfg = _protocol(clients_per_round=2)
    tc = exact_constants_for_quadratics(CROSS_CENTERS, [0.5, 0.0]).with_protocol(cfg)
    dc = derive_constants(tc)
    clients, server = quad_data_shifted.clients, quad_data_shifted.server
    x = np.array([0.8, -0.6])
    models = quad_models_shifted
    now = objective_values(x, clients, server, models, cfg.gamma)
    streams = StreamFactory(0)
    values = np.empty(1000)
    for k in range(values.size):
        x_next, _ = fsl_round(x, clients, server, cfg, models, streams.fork(k))
        values[k] = objective_values(x_next, clients, server, models, cfg.gamma).Ftilde
    bound = descent_bound(tc, dc, now.Ftilde, now.grad_Ftilde_sq, now.xi_sq)
    stderr = values.std(ddof=1) / math.sqrt(values.size)
    assert values.mean() <= bound + 3 * stderr
