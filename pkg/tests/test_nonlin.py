import math

import numpy as np
import pytest

from odemarkov.chain import ChainModel, random_chain, stationary
from odemarkov.errors import NoConvergence, SingularJacobian
from odemarkov.nonlin import (
    NonlinearProblem,
    alpha_scaling_experiment,
    average_field,
    integrate_ode,
    interpolated_overlay,
    jacobian_fd,
    linear_embedding,
    scaled_limit_field,
    simulate_nonlinear,
    simulate_sensitivity,
    solve_equilibrium,
    tanh_problem,
    write_overlay_csv,
)
from odemarkov.simlin import SimConfig


@pytest.fixture(scope="module")
def tanh():
    return tanh_problem()


@pytest.mark.parametrize("g", [-2.0, -0.3, 0.0, 0.7, 3.0])
def test_tanh_average_field(tanh, g):
    assert average_field(tanh, np.array([g]))[0] == pytest.approx(2 * (g + 0.5 * math.tanh(g)), abs=1e-14)


def test_linear_embedding_average_field():
    model = random_chain(2, 4, 3)
    prob = linear_embedding(model)
    g = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(prob.fbar(g), stationary(model).Mbar @ g, atol=1e-13)


def test_tanh_equilibrium(tanh):
    eq = solve_equilibrium(tanh, guess=[1.5])
    assert abs(eq.xstar[0]) < 1e-12
    assert eq.Mbar_nl[0, 0] == pytest.approx(3.0, abs=1e-7)
    assert eq.exponentially_stable


def test_shifted_vector_equilibrium():
    prob = tanh_problem(k=2, center=(0.5, -1.0))
    eq = solve_equilibrium(prob)
    np.testing.assert_allclose(eq.xstar, [0.5, -1.0], atol=1e-10)
    np.testing.assert_allclose(eq.Mbar_nl, 3.0 * np.eye(2), atol=1e-6)


def test_equilibrium_failure():
    chain = ChainModel(np.ones((1, 1)), np.zeros((1, 1, 1)))
    prob = NonlinearProblem(chain, lambda g, i: np.ones_like(g) + g * g, name="no-root")
    with pytest.raises(SingularJacobian):
        solve_equilibrium(prob)
    with pytest.raises(NoConvergence):
        solve_equilibrium(prob, guess=[1.0])


def test_jacobian_fd_against_analytic():
    A = np.array([[1.0, 2.0], [-0.5, 3.0]])

    def F(g):
        return A @ g + np.array([math.sin(g[0]), g[1] ** 3])

    g = np.array([0.4, -0.2])
    exact = A + np.diag([math.cos(g[0]), 3 * g[1] ** 2])
    np.testing.assert_allclose(jacobian_fd(F, g), exact, atol=1e-8)
    np.testing.assert_allclose(jacobian_fd(F, g, "forward"), exact, atol=1e-5)


def test_scaled_limit(tanh):
    r = np.array([1.0, 10.0, 100.0, 1000.0, 10000.0])
    lim = scaled_limit_field(tanh, np.array([1.0]), r)
    assert lim.values[-1, 0] == pytest.approx(2.0, abs=1e-3)
    assert np.all(np.diff(lim.successive_diffs[1:]) < 0)


def test_ode_exponential_decay():
    prob = linear_embedding(ChainModel(np.ones((1, 1)), 0.7 * np.ones((1, 1, 1))))
    traj = integrate_ode(prob, [2.0], 5.0, 0.01)
    np.testing.assert_allclose(traj.states[:, 0], 2.0 * np.exp(-0.7 * traj.times), atol=1e-9)
    assert traj.error_per_unit_time <= 1e-8


def test_ode_tanh_error_estimate(tanh):
    traj = integrate_ode(tanh, [1.0], 4.0, 0.01)
    assert traj.error_per_unit_time <= 1e-8
    assert abs(traj.states[-1, 0]) < 1e-4


def test_noise_free_linear_embedding_contracts(sr2):
    prob = linear_embedding(sr2)
    cfg = SimConfig(alpha=0.1, T=300, trials=20, seed=3, x0=(1.0, -2.0))
    st = simulate_nonlinear(prob, cfg, equilibrium=np.zeros(2))
    assert st.eps2_mean[0] == pytest.approx(5.0)
    assert st.eps2_mean[-1] < 1e-20


def test_nonlinear_workers_do_not_change_results(tanh):
    cfg = SimConfig(alpha=0.05, T=200, trials=600, seed=8, noise_cov=1.0)
    a = simulate_nonlinear(tanh, cfg, delta=0.2, workers=1)
    b = simulate_nonlinear(tanh, cfg, delta=0.2, workers=3)
    np.testing.assert_array_equal(a.eps2_mean, b.eps2_mean)
    assert a.exceedance == b.exceedance
    np.testing.assert_array_equal(a.path0, b.path0)


def test_scalar_tanh_mean_square_error_order(tanh):
    # linearised stationary variance: alpha s / (2 * 3) to first order
    cfg = SimConfig(alpha=0.02, T=1500, trials=400, seed=1, noise_cov=1.0)
    st = simulate_nonlinear(tanh, cfg)
    assert st.tail_mean_eps2 == pytest.approx(0.02 / 6, rel=0.25)


def test_scaling_table(tmp_path, tanh):
    tab = alpha_scaling_experiment(tanh, [0.02, 0.04, 0.08], T=800, trials=200, seed=4, delta=0.2)
    assert tab.band_ok
    assert tab.exceedance_monotone
    assert len(tab.paths) == 3 and tab.paths[0].shape == (801, 1)
    path = tmp_path / "scal.csv"
    tab.to_csv(path)
    assert path.read_text().splitlines()[1] == "alpha,tail_eps2,ci,ratio,exceedance"


def test_sensitivity_linear_embedding(sr2):
    prob = linear_embedding(sr2)
    rep = simulate_sensitivity(prob, SimConfig(alpha=0.1, T=1000, trials=50, seed=2))
    assert rep.sign == -1
    # the mean log-norm rate lies between the a.s. Lyapunov exponent and log xi
    assert 0.5 * math.log(0.8) - 0.01 <= rep.exponent <= math.log(0.9) + 0.01


def test_overlay(tmp_path, tanh):
    cfg = SimConfig(alpha=0.05, T=100, trials=1, seed=0, x0=(1.0,), noise_cov=0.1)
    st = simulate_nonlinear(tanh, cfg)
    times, X, gamma = interpolated_overlay(tanh, st.path0, 0.05)
    assert times.shape == (101,) and X.shape == (101, 1) and gamma.shape == (101, 1)
    assert times[-1] == pytest.approx(5.0)
    assert gamma[0, 0] == 1.0
    out = tmp_path / "o.csv"
    write_overlay_csv(out, times, X, gamma)
    assert out.read_text().splitlines()[1] == "t,X0,gamma0"


@pytest.mark.parametrize("g0", [-10.0, -1.0, 0.5, 10.0])
def test_tanh_ode_monotone_approach(tanh, g0):
    traj = integrate_ode(tanh, [g0], 6.0, 0.01)
    x = traj.states[:, 0]
    assert np.all(np.sign(x) == np.sign(g0))
    assert np.all(np.diff(np.abs(x)) < 0)


def test_ode_started_at_equilibrium_stays(tanh):
    traj = integrate_ode(tanh, [0.0], 2.0, 0.01)
    assert np.all(traj.states == 0.0)


def test_ode_unit_decay_global_error():
    prob = linear_embedding(ChainModel(np.ones((1, 1)), np.ones((1, 1, 1))))
    traj = integrate_ode(prob, [1.0], 5.0, 1e-3)
    assert np.max(np.abs(traj.states[:, 0] - np.exp(-traj.times))) <= 1e-8
