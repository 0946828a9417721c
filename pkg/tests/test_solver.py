import csv
import math

import numpy as np
import pytest

from resgd.linops import DenseSensingMatrix, FidelityProblem, fidelity_gradient
from resgd.problems import make_gaussian_cs
from resgd.regularizer import FilterBank, RegularizerBounds, r_eta_gradient
from resgd.solver import (
    TRACE_HEADER,
    ConfigError,
    SolverConfig,
    b_step,
    combined_step,
    compute_L_eta,
    iteration_bound,
    objective_F_eta,
    objective_parts,
    run,
    select_step,
    u_step,
    v_step,
    write_trace_csv,
)


def scalar_problem(z=0.0):
    return FidelityProblem(DenseSensingMatrix.identity(1), [z])


def small_cs(seed, h=4, w=4, ratio=0.75, d=2, gain=0.8):
    inst = make_gaussian_cs(h, w, ratio, seed=seed, x_true=np.random.default_rng(seed).uniform(0, 1, h * w))
    fb = FilterBank.random((h, w), d=d, seed=seed + 1, gain=gain)
    return inst.problem, fb


# -- objective and steps ---------------------------------------------------------

def test_objective_scalar_example():
    fb = FilterBank.identity((1, 1))
    assert objective_F_eta(scalar_problem(), fb, np.array([2.0]), 1.0) == 3.5


def test_objective_at_origin_identity_bank():
    # sigma(0) = delta / 4, so the regularizer is not exactly zero at x = 0
    fb = FilterBank.identity((2, 2), delta=0.1)
    p = FidelityProblem(DenseSensingMatrix.identity(4), np.zeros(4))
    expect = 4 * 0.025 ** 2 / (2 * 0.5)
    assert objective_F_eta(p, fb, np.zeros(4), 0.5) == pytest.approx(expect, rel=1e-14)


def test_objective_is_sum_of_parts():
    p, fb = small_cs(0)
    x = np.random.default_rng(1).standard_normal(p.op.n_in)
    f, r = objective_parts(p, fb, x, 0.1)
    assert objective_F_eta(p, fb, x, 0.1) == f + r


def test_b_step_examples():
    p = FidelityProblem(DenseSensingMatrix.identity(2), np.zeros(2))
    np.testing.assert_array_equal(b_step(np.ones(2), 0.5, p), [0.5, 0.5])
    np.testing.assert_array_equal(b_step(np.ones(2), 0.0, p), [1.0, 1.0])
    p = FidelityProblem(DenseSensingMatrix.identity(2), np.ones(2))
    np.testing.assert_array_equal(b_step(np.ones(2), 0.7, p), [1.0, 1.0])


def test_u_step_equal_steps_halve():
    fb, eta = FilterBank.random((3, 3), d=2, seed=4), 0.1
    b = np.random.default_rng(0).standard_normal(9)
    alpha = beta = 0.2
    gamma = combined_step(alpha, beta)
    assert gamma == 0.1
    np.testing.assert_allclose(u_step(b, gamma, fb, eta), b - 0.1 * r_eta_gradient(fb, b, eta), atol=1e-15)


def test_u_step_flat_region_is_identity():
    fb = FilterBank.identity((2, 2))
    b = np.full(4, -3.0)
    np.testing.assert_array_equal(u_step(b, 0.3, fb, 0.1), b)


def test_u_step_zeroes_quadratic_model_gradient():
    p, fb = small_cs(3)
    eta = 0.05
    rng = np.random.default_rng(2)
    for alpha, beta in [(0.01, 0.01), (0.02, 0.005), (0.003, 0.1)]:
        x = rng.standard_normal(p.op.n_in)
        b = b_step(x, alpha, p)
        u = u_step(b, combined_step(alpha, beta), fb, eta)
        model_grad = (fidelity_gradient(p, x) + (u - x) / alpha
                      + r_eta_gradient(fb, b, eta) + (u - b) / beta)
        assert np.linalg.norm(model_grad) <= 1e-10


def test_v_step_example():
    ker = np.zeros((1, 1, 3, 3))
    ker[0, 0, 1, 1] = 1.0
    fb = FilterBank((1, 2), ker, ker, 2 * ker)
    x = np.array([3.0, 5.0])  # linear sigma region, block norms > eta
    np.testing.assert_array_equal(r_eta_gradient(fb, x, 0.1), [2.0, 2.0])
    np.testing.assert_array_equal(v_step(np.array([1.0, 0.0]), 0.5, x, fb, 0.1), [0.0, -1.0])


def test_v_step_is_gradient_step():
    p, fb = small_cs(5)
    eta, alpha = 0.05, 0.013
    x = np.random.default_rng(3).standard_normal(p.op.n_in)
    v = v_step(b_step(x, alpha, p), alpha, x, fb, eta)
    direct = x - alpha * (fidelity_gradient(p, x) + r_eta_gradient(fb, x, eta))
    np.testing.assert_allclose(v, direct, atol=1e-12)


def test_v_step_stationary_point_fixed():
    fb = FilterBank.identity((2, 2))
    x = np.full(4, -1.0)
    p = FidelityProblem(DenseSensingMatrix.identity(4), x)
    np.testing.assert_array_equal(v_step(b_step(x, 0.4, p), 0.4, x, fb, 0.1), x)


def test_select_step_branches():
    fb = FilterBank.identity((1, 1))  # dead sigma region for negative x: F = x^2 / 2
    p = scalar_problem()
    u, v = np.array([-math.sqrt(2)]), np.array([-2.0])
    assert objective_F_eta(p, fb, u, 1.0) == pytest.approx(1.0)
    assert objective_F_eta(p, fb, v, 1.0) == 2.0
    x, chose_u = select_step(u, v, p, fb, 1.0)
    assert chose_u and x is u
    x, chose_u = select_step(v, u, p, fb, 1.0)
    assert not chose_u and x is u
    w = v.copy()
    x, chose_u = select_step(w, v, p, fb, 1.0)
    assert chose_u and x is w


# -- constants -----------------------------------------------------------------

def test_compute_L_eta_examples():
    assert compute_L_eta(1.0, RegularizerBounds(M=2.0, L_g=0.5, m=4, eta=0.1)) == pytest.approx(43.0, rel=1e-14)
    assert compute_L_eta(2.5, RegularizerBounds(M=0.0, L_g=0.0, m=9, eta=0.3)) == 2.5
    a = compute_L_eta(1.0, RegularizerBounds(M=2.0, L_g=0.5, m=4, eta=0.2))
    b = compute_L_eta(1.0, RegularizerBounds(M=2.0, L_g=0.5, m=4, eta=0.1))
    assert b - a == pytest.approx(4.0 / 0.2, rel=1e-12)
    with pytest.raises(ValueError):
        compute_L_eta(1.0, RegularizerBounds(M=1.0, L_g=1.0, m=1, eta=0.0))


def test_iteration_bound_examples():
    cfg = SolverConfig(eps=0.1, alpha_bar=2.0, beta_bar=1.5)
    assert iteration_bound(10.0, 0.0, cfg, 43.0) == 688001
    assert iteration_bound(5.0, 5.0, cfg, 43.0) == 1
    coarse = iteration_bound(10.0, 0.0, SolverConfig(eps=0.2), 43.0)
    assert coarse == 172001  # eps doubled: bound divides by four
    with pytest.raises(ValueError):
        iteration_bound(0.0, 1.0, cfg, 43.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(alpha_bar=1.5, beta_bar=2.0)
    with pytest.raises(ConfigError):
        SolverConfig(beta_bar=1.0)
    with pytest.raises(ConfigError):
        SolverConfig(eps=0.0)
    with pytest.raises(ValueError):
        SolverConfig(eta=-1.0)


def test_step_outside_interval_is_config_error():
    p, fb = small_cs(1)
    with pytest.raises(ConfigError):
        run(p, fb, np.zeros(p.op.n_in), SolverConfig(alphas=[10.0], max_iters=3))


# -- runs ------------------------------------------------------------------------

def test_scalar_run_reaches_minimizer():
    # sigma(0) = delta / 4 moves the minimizer to about -delta / 10, well inside eps
    eps = 1e-3
    fb = FilterBank.identity((1, 1), delta=eps)
    res = run(scalar_problem(), fb, np.array([2.0]), SolverConfig(eta=1.0, eps=eps, max_iters=200_000))
    assert res.status == "converged"
    F = res.F_values
    assert np.all(np.diff(F) <= 1e-12)
    assert abs(res.x[0]) <= eps


def test_fixed_point_terminates_immediately():
    fb = FilterBank.identity((2, 2))
    x0 = np.full(4, -1.0)
    p = FidelityProblem(DenseSensingMatrix.identity(4), x0)
    res = run(p, fb, x0, SolverConfig(eps=1e-8))
    assert res.status == "converged"
    assert len(res.trace) == 1 and res.trace[0].k == 1
    np.testing.assert_array_equal(res.x, x0)
    assert res.n_updates == 0


def test_zero_budget():
    p, fb = small_cs(2)
    res = run(p, fb, np.zeros(p.op.n_in), SolverConfig(max_iters=0))
    assert res.status == "max_iters" and res.trace == []


def test_small_cs_converges_within_bound():
    p, fb = small_cs(7)
    cfg = SolverConfig(eta=0.05, eps=1e-4, max_iters=50_000)
    x0 = p.op.adjoint_apply(p.z)
    res = run(p, fb, x0, cfg)
    assert res.status == "converged"
    F0 = objective_F_eta(p, fb, x0, cfg.eta)
    F_star = min(res.F_values.min(), F0)
    assert res.n_updates <= iteration_bound(F0, F_star, cfg, res.L_eta)


def test_descent_and_sufficient_decrease():
    p, fb = small_cs(11)
    cfg = SolverConfig(eta=0.02, eps=1e-6, max_iters=300)
    res = run(p, fb, np.random.default_rng(0).standard_normal(p.op.n_in), cfg)
    for rec in res.trace:
        assert rec.F_eta <= rec.F_prev + 1e-12
        if rec.k < len(res.trace) or res.status != "converged":
            assert rec.F_eta <= rec.F_v
            bound = -(cfg.beta_bar - 1) * res.L_eta / 2 * rec.step_norm_v ** 2
            assert rec.F_v - rec.F_prev <= bound + 1e-10


def test_gradient_proxy_identity():
    p, fb = small_cs(13)
    eta, alpha = 0.03, 0.002
    x = np.random.default_rng(4).standard_normal(p.op.n_in)
    v = v_step(b_step(x, alpha, p), alpha, x, fb, eta)
    grad = fidelity_gradient(p, x) + r_eta_gradient(fb, x, eta)
    assert np.linalg.norm(x - v) / alpha == pytest.approx(np.linalg.norm(grad), rel=1e-10)


def test_without_u_step_is_plain_gradient_descent():
    p, fb = small_cs(17)
    cfg = SolverConfig(eta=0.05, eps=1e-12, max_iters=25, use_u_step=False)
    x0 = np.random.default_rng(5).standard_normal(p.op.n_in)
    res = run(p, fb, x0, cfg)
    alpha = 1.0 / (cfg.beta_bar * res.L_eta)
    x = x0.copy()
    for _ in range(25):
        x = x - alpha * (fidelity_gradient(p, x) + r_eta_gradient(fb, x, cfg.eta))
    np.testing.assert_allclose(res.x, x, atol=1e-12)
    assert not any(r.chose_u for r in res.trace)


def test_eta_equals_eps_regime():
    p, fb = small_cs(19)
    res = run(p, fb, np.zeros(p.op.n_in), SolverConfig(eta=0.5, eps=0.01, eta_equals_eps=True, max_iters=5))
    assert res.eta == 0.01


def test_underestimated_lipschitz_reports_divergence():
    p, fb = small_cs(23, gain=2.0)
    x0 = np.random.default_rng(6).standard_normal(p.op.n_in) * 3
    res = run(p, fb, x0, SolverConfig(eta=0.01, L_eta=1e-3, max_iters=50))
    assert res.status == "diverged"


def test_trace_csv(tmp_path):
    p, fb = small_cs(29)
    res = run(p, fb, np.zeros(p.op.n_in), SolverConfig(max_iters=4, eps=1e-12))
    path = tmp_path / "trace.csv"
    write_trace_csv(path, res.trace)
    rows = list(csv.reader(path.open()))
    assert rows[0] == TRACE_HEADER
    assert len(rows) == 5
    assert float(rows[1][1]) == res.trace[0].F_eta  # 17 significant digits round-trip


def test_combined_step_halves_equal_steps_exactly():
    rng = np.random.default_rng(0)
    for alpha in rng.uniform(1e-6, 10, 1000):
        assert combined_step(alpha, alpha) == alpha / 2
    assert combined_step(0.2, 0.6) == pytest.approx(0.15, rel=1e-15)
