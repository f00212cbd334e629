"""Derivatives of the dominant eigenvalues of ``L_alpha`` and ``Q_alpha`` at zero gain.

Analytic values come from the averaged gain ``Mbar`` and the fundamental
matrix ``Z``; the finite-difference counterparts are read off the dense
eigenvalue curves and serve as an independent check.
"""
from dataclasses import dataclass, field
import json

import numpy as np
import scipy.linalg

from .chain import stationary
from .errors import FitFailure, HypothesisViolated
from .oper import build, eigenvalues

FD_STEP_FIRST = 1e-4
FD_STEP_SECOND = 1e-3


def _real_tol(A):
    return 1e-10 * max(1.0, np.linalg.norm(A, np.inf))


def mbar_spectrum(Mbar):
    """Eigenvalues, left/right eigenvectors of ``Mbar`` and hypothesis flags."""
    ev, VL, VR = scipy.linalg.eig(Mbar, left=True, right=True)
    tol = _real_tol(Mbar)
    real = bool(np.all(np.abs(ev.imag) <= tol))
    if real:
        srt = np.sort(ev.real)
        distinct = bool(np.all(np.diff(srt) > 1e-8 * max(1.0, np.abs(srt).max()))) if srt.size > 1 else True
    else:
        distinct = len(np.unique(np.round(ev, 10))) == len(ev)
    return ev, VL, VR, {"real_eigenvalues": real, "distinct_eigenvalues": distinct}


def _min_eigen(Mbar):
    ev, VL, VR, flags = mbar_spectrum(Mbar)
    if not flags["real_eigenvalues"]:
        raise HypothesisViolated(f"Mbar has non-real eigenvalues {ev}")
    i = int(np.argmin(ev.real))
    r0 = VR[:, i].real
    v0 = VL[:, i].real
    s = v0 @ r0
    if abs(s) < 1e-12:
        raise HypothesisViolated("left and right eigenvectors of lambda_min(Mbar) are orthogonal")
    r0 = r0 / np.linalg.norm(r0)
    v0 = v0 / (v0 @ r0)
    return float(ev[i].real), v0, r0, flags


def lambda_prime_zero(info):
    """``d lambda / d alpha`` at 0, equal to ``-lambda_min(Mbar)``."""
    return -_min_eigen(info.Mbar)[0]


def eta_prime_zero(info):
    """``d eta / d alpha`` at 0, equal to ``-2 lambda_min(Mbar)``."""
    return -2.0 * _min_eigen(info.Mbar)[0]


def centered_gains(model, info):
    return model.m - info.Mbar[None]


def future_sum(info, g):
    """``sum_{l>=0} P^{l+1} g`` for a centered function ``g`` (first axis = state).

    For ``pi g = 0`` the series equals ``(Z - I) g``.
    """
    n = info.Z.shape[0]
    return np.tensordot(info.Z - np.eye(n), g, axes=(1, 0))


def lambda_dprime_zero(model, info=None):
    """Second derivative of the maximal eigenvalue of ``L_alpha`` at 0.

    Evaluates ``2 sum_{l>=0} v0^T E_pi[(M_{l+1} - Mbar)(M_0 - Mbar)] r0`` with
    ``v0^T r0 = 1``, where ``v0`` / ``r0`` are the left / right eigenvectors
    of ``lambda_min(Mbar)``.  Requires real, distinct eigenvalues of ``Mbar``.
    """
    info = stationary(model) if info is None else info
    lmin, v0, r0, flags = _min_eigen(info.Mbar)
    if not flags["distinct_eigenvalues"]:
        raise HypothesisViolated("Mbar has repeated eigenvalues")
    C = centered_gains(model, info)
    S = future_sum(info, C)  # S[i] = sum_l E_i[M_{l+1} - Mbar]
    return 2.0 * float(np.einsum("i,a,iab,ibc,c->", info.pi, v0, S, C, r0))


def clt_covariance(model, info, v):
    """Long-run and one-step covariance of ``F_t = (M_t - Mbar) v``.

    Returns ``(Gamma, Sigma)`` with ``Sigma = E_pi[F F^T]`` and
    ``Gamma = Sigma + sum_{l>=1} (E[F_0 F_l^T] + E[F_l F_0^T])``.
    """
    v = np.asarray(v, dtype=float)
    if not np.linalg.norm(v) > 0:
        raise ValueError("v must be non-zero")
    F = centered_gains(model, info) @ v  # (n, k)
    Sigma = F.T @ (info.pi[:, None] * F)
    C = F.T @ (info.pi[:, None] * future_sum(info, F))
    Gamma = Sigma + C + C.T
    return Gamma, Sigma


def branch_value(model, kind, alpha, target):
    """Eigenvalue of the lifted operator nearest to ``target`` (real part)."""
    ev = eigenvalues(build(model, kind, alpha))
    return float(ev[np.argmin(np.abs(ev - target))].real)


def dominant_value(model, kind, alpha):
    ev = eigenvalues(build(model, kind, alpha))
    return float(np.max(np.abs(ev)))


def _branch_samples(model, kind, h):
    """Dominant branch at ``0``, ``h`` and ``2h``, continued to ``-h``.

    The negative side is the eigenvalue nearest to the quadratic extrapolation
    from the positive side.  The branch maximal for ``alpha > 0`` is generally
    not maximal for ``alpha < 0``, and branches sharing a first derivative
    only separate at second order.
    """
    f0 = dominant_value(model, kind, 0.0)
    fh = dominant_value(model, kind, h)
    f2h = dominant_value(model, kind, 2 * h)
    fmh = branch_value(model, kind, -h, 3 * f0 - 3 * fh + f2h)
    return fmh, f0, fh


def fd_first(model, kind, h=FD_STEP_FIRST):
    fmh, _, fh = _branch_samples(model, kind, h)
    return (fh - fmh) / (2 * h)


def fd_second(model, kind, h=FD_STEP_SECOND):
    fmh, f0, fh = _branch_samples(model, kind, h)
    return (fh - 2 * f0 + fmh) / (h * h)


@dataclass
class DerivativeReport:
    lambda_prime0: float | None
    lambda_dprime0_analytic: float | None
    eta_prime0: float | None
    eta_dprime0_fd: float
    fd_lambda_prime0: float
    fd_lambda_dprime0: float
    fd_eta_prime0: float
    Gamma: np.ndarray | None
    Sigma: np.ndarray | None
    v0: np.ndarray | None
    r0: np.ndarray | None
    hypothesis_flags: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def deltas(self):
        def d(a, b):
            return None if a is None or b is None else abs(a - b)

        return {
            "lambda_prime0": d(self.lambda_prime0, self.fd_lambda_prime0),
            "lambda_dprime0": d(self.lambda_dprime0_analytic, self.fd_lambda_dprime0),
            "eta_prime0": d(self.eta_prime0, self.fd_eta_prime0),
        }

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "lambda_prime0": self.lambda_prime0,
            "lambda_dprime0_analytic": self.lambda_dprime0_analytic,
            "eta_prime0": self.eta_prime0,
            "eta_dprime0_fd": self.eta_dprime0_fd,
            "fd_lambda_prime0": self.fd_lambda_prime0,
            "fd_lambda_dprime0": self.fd_lambda_dprime0,
            "fd_eta_prime0": self.fd_eta_prime0,
            "deltas": self.deltas(),
            "Gamma": arr(self.Gamma),
            "Sigma": arr(self.Sigma),
            "v0": arr(self.v0),
            "r0": arr(self.r0),
            "hypothesis_flags": self.hypothesis_flags,
            "notes": self.notes,
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def derivative_report(model, info=None):
    """Analytic derivatives where the hypotheses hold, finite differences always."""
    info = stationary(model) if info is None else info
    symmetric = bool(np.allclose(model.m, model.m.transpose(0, 2, 1), atol=1e-14))
    _, _, _, flags = mbar_spectrum(info.Mbar)
    flags = dict(flags, symmetric_m=symmetric)
    notes = []
    lp = ep = ldd = None
    v0 = r0 = Gamma = Sigma = None
    try:
        lmin, v0, r0, _ = _min_eigen(info.Mbar)
        lp = -lmin
        ep = -2.0 * lmin
        Gamma, Sigma = clt_covariance(model, info, v0)
    except HypothesisViolated as exc:
        notes.append(f"first derivatives unavailable: {exc}")
    if flags["real_eigenvalues"] and flags["distinct_eigenvalues"]:
        ldd = lambda_dprime_zero(model, info)
    else:
        notes.append("analytic lambda'' omitted: Mbar eigenvalues are not real and distinct")
    return DerivativeReport(
        lambda_prime0=lp,
        lambda_dprime0_analytic=ldd,
        eta_prime0=ep,
        eta_dprime0_fd=fd_second(model, "Q"),
        fd_lambda_prime0=fd_first(model, "L"),
        fd_lambda_dprime0=fd_second(model, "L"),
        fd_eta_prime0=fd_first(model, "Q"),
        Gamma=Gamma,
        Sigma=Sigma,
        v0=v0,
        r0=r0,
        hypothesis_flags=flags,
        notes=notes,
    )


@dataclass
class LocalProfile:
    alphas: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    lam_residual: float
    eta_residual: float
    linear_until: float
    quadratic_until: float
    eta_dprime0: float
    eta_tprime0: float
    eta_quadratic_coeffs: list


def _fit_extent(alphas, values, ref, tol):
    bad = np.flatnonzero(np.abs(values - ref) > tol)
    return float(alphas[-1]) if bad.size == 0 else float(alphas[bad[0] - 1]) if bad[0] > 0 else 0.0


def lms_local_profile(model, alpha_max=0.1, step=1e-3, tol=1e-8, probe_max=2.0,
                      lam_ref=lambda a: 1.0 - a, eta_ref=lambda a: (1.0 - a) ** 2):
    """Check that ``xi_alpha`` is linear and ``xi^Q_alpha`` quadratic near zero.

    On ``[0, alpha_max]`` with spacing ``step`` the two spectral radii must
    match ``lam_ref`` and ``eta_ref`` within ``tol``, otherwise
    :class:`FitFailure` is raised at the first offending gain.  The scan
    continues to ``probe_max`` to locate where each closed form stops holding.
    """
    n_fit = int(round(alpha_max / step))
    n_probe = int(round(probe_max / step))
    alphas = np.arange(n_probe + 1) * step
    lam = np.array([dominant_value(model, "L", a) for a in alphas])
    eta = np.array([dominant_value(model, "Q", a) for a in alphas])
    lam_ref_v = lam_ref(alphas)
    eta_ref_v = eta_ref(alphas)
    fit = slice(0, n_fit + 1)
    lam_res = float(np.max(np.abs(lam[fit] - lam_ref_v[fit])))
    eta_res = float(np.max(np.abs(eta[fit] - eta_ref_v[fit])))
    h = 1e-2
    e0, e1, e2, e3 = (dominant_value(model, "Q", j * h) for j in range(4))
    coeffs = np.polyfit(alphas[fit], eta[fit], 2)
    profile = LocalProfile(
        alphas=alphas,
        lam=lam,
        eta=eta,
        lam_residual=lam_res,
        eta_residual=eta_res,
        linear_until=_fit_extent(alphas, lam, lam_ref_v, tol),
        quadratic_until=_fit_extent(alphas, eta, eta_ref_v, tol),
        eta_dprime0=(e2 - 2 * e1 + e0) / h**2,
        eta_tprime0=(e3 - 3 * e2 + 3 * e1 - e0) / h**3,
        eta_quadratic_coeffs=[float(c) for c in coeffs],
    )
    for name, vals, ref in (("lambda", lam, lam_ref_v), ("eta", eta, eta_ref_v)):
        dev = np.abs(vals[fit] - ref[fit])
        bad = np.flatnonzero(dev > tol)
        if bad.size:
            i = int(bad[0])
            err = FitFailure(
                f"{name}_alpha departs from its closed form at alpha={alphas[i]:.6g} "
                f"(residual {dev[i]:.3g} > {tol:g})",
                alpha=float(alphas[i]),
                residual=float(dev[i]),
            )
            err.profile = profile
            raise err
    return profile
