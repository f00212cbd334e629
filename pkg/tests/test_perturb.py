import json

import numpy as np
import pytest

from odemarkov.chain import ChainModel, random_chain, stationary
from odemarkov.errors import FitFailure, HypothesisViolated
from odemarkov.perturb import (
    _min_eigen,
    centered_gains,
    clt_covariance,
    derivative_report,
    eta_prime_zero,
    fd_first,
    fd_second,
    future_sum,
    lambda_dprime_zero,
    lambda_prime_zero,
    lms_local_profile,
    mbar_spectrum,
)


def eligible_chains(count, symmetric=False, start=0):
    """Seeded random chains whose averaged gain has real, distinct eigenvalues."""
    rng = np.random.default_rng(start)
    out = []
    while len(out) < count:
        n, k = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        model = random_chain(int(rng.integers(2**31)), n, k, symmetric=symmetric)
        flags = mbar_spectrum(stationary(model).Mbar)[3]
        if flags["real_eigenvalues"] and flags["distinct_eigenvalues"]:
            out.append(model)
    return out


def test_shift_register_first_derivatives(sr2):
    info = stationary(sr2)
    assert lambda_prime_zero(info) == pytest.approx(-1.0, abs=1e-12)
    assert eta_prime_zero(info) == pytest.approx(-2.0, abs=1e-12)


def test_shift_register_report_flags_repeated_eigenvalues(sr2):
    rep = derivative_report(sr2)
    assert rep.lambda_dprime0_analytic is None
    assert rep.hypothesis_flags["distinct_eigenvalues"] is False
    assert any("lambda''" in n for n in rep.notes)
    assert rep.fd_lambda_prime0 == pytest.approx(-1.0, abs=1e-6)
    assert rep.fd_eta_prime0 == pytest.approx(-2.0, abs=1e-6)
    assert rep.fd_lambda_dprime0 == pytest.approx(0.0, abs=1e-4)
    # xi^Q = 1 - 2 alpha + 2 alpha^2 near zero
    assert rep.eta_dprime0_fd == pytest.approx(4.0, abs=1e-4)
    with pytest.raises(HypothesisViolated):
        lambda_dprime_zero(sr2)


def test_single_state_slope(diag_chain):
    info = stationary(diag_chain)
    assert lambda_prime_zero(info) == pytest.approx(-2.0)
    # a deterministic gain has no fluctuation term
    assert lambda_dprime_zero(diag_chain) == pytest.approx(0.0, abs=1e-14)
    assert fd_second(diag_chain, "L") == pytest.approx(0.0, abs=1e-6)


def test_complex_mbar_rejected():
    rot = np.array([[1.0, -1.0], [1.0, 1.0]])
    model = ChainModel(np.ones((1, 1)), rot[None])
    with pytest.raises(HypothesisViolated):
        lambda_prime_zero(stationary(model))
    rep = derivative_report(model)
    assert rep.lambda_prime0 is None and rep.hypothesis_flags["real_eigenvalues"] is False


@pytest.mark.parametrize("model", eligible_chains(6, start=1), ids=lambda m: m.name)
def test_analytic_matches_fd(model):
    info = stationary(model)
    assert abs(lambda_prime_zero(info) - fd_first(model, "L")) <= 1e-6
    assert abs(eta_prime_zero(info) - fd_first(model, "Q")) <= 1e-6
    assert abs(lambda_dprime_zero(model, info) - fd_second(model, "L")) <= 1e-4


@pytest.mark.parametrize("model", eligible_chains(4, symmetric=True, start=2), ids=lambda m: m.name)
def test_symmetric_trace_identity(model):
    rep = derivative_report(model)
    assert rep.hypothesis_flags["symmetric_m"]
    assert abs(rep.lambda_dprime0_analytic - np.trace(rep.Gamma - rep.Sigma)) <= 1e-8


def test_nonsymmetric_second_derivative_ordering():
    # a chain where the two index orders of the correlation sum disagree
    model = random_chain(7, 3, 2, gain_scale=1.0)
    info = stationary(model)
    flags = mbar_spectrum(info.Mbar)[3]
    assert flags["real_eigenvalues"] and flags["distinct_eigenvalues"]
    fd = fd_second(model, "L")
    assert abs(lambda_dprime_zero(model, info) - fd) <= 1e-4
    lmin, v0, r0, _ = _min_eigen(info.Mbar)
    C = centered_gains(model, info)
    S = future_sum(info, C)
    swapped = 2.0 * np.einsum("i,a,iab,ibc,c->", info.pi, v0, C, S, r0)
    assert abs(swapped - fd) > 1e-3


def test_clt_covariance_iid_chain():
    pi = np.array([0.2, 0.3, 0.5])
    P = np.tile(pi, (3, 1))
    m = np.random.default_rng(0).standard_normal((3, 2, 2))
    model = ChainModel(P, m)
    info = stationary(model)
    Gamma, Sigma = clt_covariance(model, info, np.array([1.0, -2.0]))
    np.testing.assert_allclose(Gamma, Sigma, atol=1e-13)
    np.testing.assert_allclose(Sigma, Sigma.T, atol=1e-15)
    assert np.all(np.linalg.eigvalsh(Sigma) >= -1e-14)


def test_clt_covariance_matches_lag_series():
    model = random_chain(4, 3, 1, mix=0.3)
    info = stationary(model)
    Gamma, _ = clt_covariance(model, info, np.ones(1))
    # direct series: sum over lags of pi-weighted autocovariances
    F = (model.m - info.Mbar)[:, :, 0]
    D = np.diag(info.pi)
    acc = F.T @ D @ F
    Pl = np.eye(3)
    for _ in range(200):
        Pl = Pl @ model.P
        c = F.T @ D @ Pl @ F
        acc = acc + c + c.T
    np.testing.assert_allclose(Gamma, acc, atol=1e-12)


def test_local_profile_true_closed_form(sr2):
    prof = lms_local_profile(sr2, eta_ref=lambda a: 1 - 2 * a + 2 * a * a, probe_max=1.2)
    assert prof.lam_residual <= 1e-8
    assert prof.eta_residual <= 1e-8
    assert prof.linear_until == pytest.approx(0.5)
    np.testing.assert_allclose(prof.eta_quadratic_coeffs, [2.0, -2.0, 1.0], atol=1e-8)
    assert prof.eta_dprime0 == pytest.approx(4.0, abs=1e-8)
    assert prof.eta_tprime0 == pytest.approx(0.0, abs=1e-4)


def test_local_profile_reports_departure(sr2):
    with pytest.raises(FitFailure) as exc:
        lms_local_profile(sr2, probe_max=0.2)
    err = exc.value
    assert "eta" in str(err)
    assert err.alpha == pytest.approx(1e-3 * np.ceil(np.sqrt(1e-8) / 1e-3))
    assert err.profile.lam_residual <= 1e-8


def test_report_json(tmp_path, sr2):
    path = tmp_path / "d.json"
    derivative_report(sr2).to_json(path)
    doc = json.loads(path.read_text())
    assert doc["lambda_dprime0_analytic"] is None
    assert doc["deltas"]["lambda_prime0"] < 1e-6
    assert np.asarray(doc["Gamma"]).shape == (2, 2)
