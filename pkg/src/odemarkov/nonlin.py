"""Nonlinear recursion ``X[t+1] = X[t] - alpha (f(X[t], Phi[t+1]) + W[t+1])``.

The averaged field is ``fbar(g) = sum_i pi[i] f(g, i)``.  The recursion is an
Euler step of ``dg/dt = -fbar(g)``, so an equilibrium ``x*`` is exponentially
stable when every eigenvalue of the Jacobian of ``fbar`` at ``x*`` has a
positive real part.  Reports carry :data:`SIGN_NOTE` to make that reading
explicit.

``f`` is a black box called as ``f(gamma, state)`` with ``gamma`` of shape
``(..., k)`` and integer ``state`` broadcastable to ``gamma.shape[:-1]``.  It
must be a pure function.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
import json
import math

import numpy as np

from . import kernels
from .chain import ChainModel, stationary
from .errors import Blowup, NoConvergence, SingularJacobian
from .oper import fmt
from .rng import RNG_ID, block_ranges, draw_block
from .simlin import BLOCK_SIZE, Z95, SimConfig, noise_factor
from .kernels import OVERFLOW_NORM

SIGN_NOTE = ("sign convention: averaged ODE integrated as dgamma/dt = -fbar(gamma), the flow "
             "whose Euler step is the recursion X - alpha f(X, Phi)")


@dataclass(eq=False)
class NonlinearProblem:
    chain: ChainModel
    f: object
    name: str = "custom"
    lipschitz_hint: float = 1.0
    description: str = ""

    @cached_property
    def info(self):
        return stationary(self.chain)

    @property
    def k(self):
        return self.chain.k

    def fbar(self, gamma):
        return average_field(self, gamma)


def average_field(problem, gamma):
    gamma = np.asarray(gamma, dtype=float)
    out = np.zeros(np.broadcast_shapes(gamma.shape, (problem.k,)))
    for i, p in enumerate(problem.info.pi):
        out = out + p * problem.f(gamma, i)
    return out


# -- fixtures -----------------------------------------------------------------

def linear_embedding(chain):
    """``f(g, i) = m[i] g``; the recursion is the linear one driven by ``Phi[t+1]``."""
    m = chain.m

    def f(gamma, state):
        return np.einsum("...ij,...j->...i", m[state], gamma)

    return NonlinearProblem(chain, f, name=f"linear[{chain.name}]",
                            lipschitz_hint=float(np.abs(m).sum(axis=2).max()),
                            description="f(g,i) = m[i] g; fbar(g) = Mbar g; x* = 0; grad fbar = Mbar")


def tanh_chain(a=(1.0, 3.0), P=((0.7, 0.3), (0.3, 0.7)), k=1):
    n = len(a)
    return ChainModel(np.asarray(P, dtype=float), np.zeros((n, k, k)), None,
                      [f"a={v:g}" for v in a], name="tanh")


def tanh_problem(a=(1.0, 3.0), P=((0.7, 0.3), (0.3, 0.7)), k=1, center=0.0):
    """``f(g, i) = a[i] (g - c + 0.5 tanh(g - c))`` componentwise.

    With the default two-state symmetric chain ``pi = (1/2, 1/2)``, so
    ``fbar(g) = 2 (g - c + 0.5 tanh(g - c))``, ``x* = c`` and the Jacobian
    there is ``abar * 1.5 = 3`` times the identity.
    """
    chain = tanh_chain(a, P, k)
    a = np.asarray(a, dtype=float)
    c = np.broadcast_to(np.asarray(center, dtype=float), (k,)).copy()

    def f(gamma, state):
        d = gamma - c
        return a[state][..., None] * (d + 0.5 * np.tanh(d))

    return NonlinearProblem(chain, f, name="tanh", lipschitz_hint=1.5 * float(a.max()),
                            description="f(g,i) = a[i](g-c+0.5 tanh(g-c)); x* = c; grad fbar = 1.5 abar I")


FIXTURES = {
    "tanh": lambda chain=None: tanh_problem(),
    "linear": lambda chain=None: linear_embedding(chain),
}


# -- deterministic analysis -----------------------------------------------------

def fd_step(gamma):
    return 1e-6 * (1.0 + np.linalg.norm(gamma))


def jacobian_fd(F, gamma, scheme="central", h=None):
    """Finite-difference Jacobian of ``F`` at ``gamma`` (column ``j`` = d/d gamma_j)."""
    gamma = np.asarray(gamma, dtype=float)
    h = fd_step(gamma) if h is None else h
    k = gamma.size
    J = np.empty((k, k))
    f0 = F(gamma) if scheme != "central" else None
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        if scheme == "central":
            J[:, j] = (F(gamma + e) - F(gamma - e)) / (2 * h)
        elif scheme == "forward":
            J[:, j] = (F(gamma + e) - f0) / h
        elif scheme == "backward":
            J[:, j] = (f0 - F(gamma - e)) / h
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return J


@dataclass
class ScaledLimit:
    r_values: np.ndarray
    values: np.ndarray
    successive_diffs: np.ndarray


def scaled_limit_field(problem, gamma, r_values):
    """``fbar(r gamma) / r`` for each ``r``; the differences diagnose the ``r -> inf`` limit."""
    r_values = np.asarray(r_values, dtype=float)
    if np.any(r_values <= 0) or np.any(np.diff(r_values) <= 0):
        raise ValueError("r_values must be positive and increasing")
    gamma = np.asarray(gamma, dtype=float)
    vals = np.array([average_field(problem, r * gamma) / r for r in r_values])
    diffs = np.linalg.norm(np.diff(vals, axis=0), axis=1)
    return ScaledLimit(r_values, vals, diffs)


@dataclass
class EquilibriumInfo:
    xstar: np.ndarray
    Mbar_nl: np.ndarray
    eig_real_parts: np.ndarray
    exponentially_stable: bool
    residual: float
    iterations: int
    jacobian_fb_gap: float
    sign_note: str = SIGN_NOTE


def solve_equilibrium(problem, guess=None, max_iter=100, tol=1e-12):
    """Damped Newton on ``fbar = 0`` with central-difference Jacobians."""
    F = problem.fbar
    x = np.zeros(problem.k) if guess is None else np.asarray(guess, dtype=float).copy()
    fx = F(x)
    nf = np.linalg.norm(fx)
    it = 0
    while nf > tol:
        if it >= max_iter:
            raise NoConvergence(f"Newton did not converge in {max_iter} iterations (|fbar| = {nf:.3g})")
        J = jacobian_fd(F, x)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14:
            raise SingularJacobian(f"Jacobian of fbar is singular near {x}")
        step = np.linalg.solve(J, -fx)
        t = 1.0
        for _ in range(40):
            x_new = x + t * step
            f_new = F(x_new)
            if np.linalg.norm(f_new) < nf:
                break
            t *= 0.5
        else:
            break
        x, fx, nf = x_new, f_new, np.linalg.norm(f_new)
        it += 1
        if np.linalg.norm(t * step) <= 1e-15 * (1 + np.linalg.norm(x)):
            break
    if nf > 1e-9:
        raise NoConvergence(f"Newton stalled with |fbar| = {nf:.3g}")
    J = jacobian_fd(F, x)
    gap = float(np.max(np.abs(jacobian_fd(F, x, "forward") - jacobian_fd(F, x, "backward"))))
    re = np.sort(np.linalg.eigvals(J).real)
    return EquilibriumInfo(x, J, re, bool(np.all(re > 0)), float(nf), it, gap)


@dataclass
class OdeTrajectory:
    times: np.ndarray
    states: np.ndarray
    error_per_unit_time: float
    sign_note: str = SIGN_NOTE


def _rk4(F, y0, t_end, dt):
    n = int(round(t_end / dt))
    if not math.isclose(n * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t_end must be a multiple of dt")
    ys = np.empty((n + 1, y0.size))
    ys[0] = y = y0
    for i in range(n):
        k1 = F(y)
        k2 = F(y + 0.5 * dt * k1)
        k3 = F(y + 0.5 * dt * k2)
        k4 = F(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.linalg.norm(y) <= 1e12:
            raise Blowup(f"ODE solution exceeded 1e12 at t = {(i + 1) * dt:g}")
        ys[i + 1] = y
    return np.arange(n + 1) * dt, ys


def integrate_ode(problem, gamma0, t_end, dt):
    """Fixed-step RK4 for ``dg/dt = -fbar(g)`` with a step-halving error estimate."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    y0 = np.asarray(gamma0, dtype=float).reshape(problem.k)

    def F(y):
        return -average_field(problem, y)

    times, ys = _rk4(F, y0, t_end, dt)
    _, ys_half = _rk4(F, y0, t_end, dt / 2)
    err = float(np.max(np.linalg.norm(ys - ys_half[::2], axis=1))) * 16.0 / 15.0
    return OdeTrajectory(times, ys, err / max(t_end, 1e-300))


# -- stochastic simulation ------------------------------------------------------

def _batch_jacobian(f, X, states):
    """Central-difference Jacobians of ``f(., state)`` at every row of ``X``."""
    B, k = X.shape
    h = 1e-6 * (1.0 + np.linalg.norm(X, axis=1))
    J = np.empty((B, k, k))
    for j in range(k):
        E = np.zeros((B, k))
        E[:, j] = h
        J[:, :, j] = (f(X + E, states) - f(X - E, states)) / (2 * h)[:, None]
    return J


def _nonlinear_block(problem, cfg, xstar, R, trials, sensitivity, keep_path):
    k = problem.k
    chain = problem.chain
    info = problem.info
    cum = kernels.transition_cumsum(chain.P)
    u0, U, Z = draw_block(cfg.seed, trials, cfg.T, k, noise=R is not None)
    start = kernels.initial_states(u0, cfg.phi0, info.pi)
    states = kernels.chain_paths(cum, start, U)
    B = len(trials)
    X = np.broadcast_to(cfg.initial_x(k), (B, k)).copy()
    eps2 = np.empty((B, cfg.T + 1))
    eps2[:, 0] = np.sum((X - xstar) ** 2, axis=1)
    over = np.zeros(B, dtype=bool)
    dev_max = 0.0
    use_w = cfg.use_w and np.any(chain.w != 0)
    S = logn = None
    if sensitivity:
        S = np.broadcast_to(np.eye(k) / math.sqrt(k), (B, k, k)).copy()
        logn = np.zeros(B)
    path = np.empty((cfg.T + 1, k)) if keep_path else None
    if keep_path:
        path[0] = X[0]
    for t in range(cfg.T):
        s_next = states[:, t + 1]
        fx = problem.f(X, s_next)
        fb = sum(p * problem.f(X, i) for i, p in enumerate(info.pi))
        dev_max = max(dev_max, float(np.max(np.sum((fx - fb) ** 2, axis=1))))
        if sensitivity:
            J = _batch_jacobian(problem.f, X, s_next)
            S = S - cfg.alpha * np.einsum("bij,bjk->bik", J, S)
            nrm = np.sqrt(np.einsum("bij,bij->b", S, S))
            logn += np.log(nrm)
            S /= nrm[:, None, None]
        step = fx
        if use_w:
            step = step + chain.w[s_next]
        if R is not None:
            step = step + Z[:, t] @ R.T
        Xn = X - cfg.alpha * step
        bad = ~(np.linalg.norm(Xn, axis=1) <= OVERFLOW_NORM)
        over |= bad
        X = np.where(over[:, None], X, Xn)
        eps2[:, t + 1] = np.sum((X - xstar) ** 2, axis=1)
        if keep_path:
            path[t + 1] = X[0]
    return eps2, over, dev_max, logn, path


def _map_blocks(fn, trials, workers):
    blocks = block_ranges(trials, BLOCK_SIZE)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, blocks))
    return [fn(b) for b in blocks]


@dataclass
class NonlinearStats:
    alpha: float
    xstar: np.ndarray
    times: np.ndarray
    eps2_mean: np.ndarray
    tail_mean_eps2: float
    tail_ci: float
    exceedance: float | None
    delta: float | None
    max_f_deviation2: float
    overflowed: int
    path0: np.ndarray
    metadata: dict = field(default_factory=dict)


def simulate_nonlinear(problem, cfg, delta=None, equilibrium=None, workers=1):
    """Error ``eps_t = ||X_t - x*||`` statistics; the tail is the last quarter of steps.

    ``exceedance`` is the fraction of tail (trial, step) pairs with
    ``eps >= delta``.  ``max_f_deviation2`` records the largest observed
    ``||f(X, Phi) - fbar(X)||^2`` along the simulated paths.
    """
    eq = solve_equilibrium(problem) if equilibrium is None else equilibrium
    xstar = np.asarray(eq.xstar if hasattr(eq, "xstar") else eq, dtype=float)
    R = noise_factor(cfg.noise_cov, problem.k)

    def block(tr):
        with np.errstate(over="ignore", invalid="ignore"):
            return _nonlinear_block(problem, cfg, xstar, R, tr, False, tr[0] == 0)

    results = _map_blocks(block, cfg.trials, workers)
    times = np.arange(cfg.T + 1)
    tail = times >= 0.75 * cfg.T
    total = np.zeros(cfg.T + 1)
    per_trial_tail = []
    hits = 0
    count = 0
    dev = 0.0
    over = 0
    for eps2, o, d, _, _ in results:
        total += eps2.sum(axis=0)
        per_trial_tail.append(eps2[:, tail].mean(axis=1))
        if delta is not None:
            hits += int(np.sum(eps2[:, tail] >= delta * delta))
            count += eps2[:, tail].size
        dev = max(dev, d)
        over += int(o.sum())
    ptt = np.concatenate(per_trial_tail)
    ci = Z95 * float(ptt.std(ddof=1)) / math.sqrt(len(ptt)) if len(ptt) > 1 else 0.0
    meta = {"alpha": cfg.alpha, "T": cfg.T, "trials": cfg.trials, "seed": cfg.seed,
            "rng": RNG_ID, "problem": problem.name, "sign_note": SIGN_NOTE}
    return NonlinearStats(
        alpha=cfg.alpha,
        xstar=xstar,
        times=times,
        eps2_mean=total / cfg.trials,
        tail_mean_eps2=float(ptt.mean()),
        tail_ci=ci,
        exceedance=(hits / count) if delta is not None else None,
        delta=delta,
        max_f_deviation2=dev,
        overflowed=over,
        path0=results[0][4],
        metadata=meta,
    )


@dataclass
class SensitivityReport:
    alpha: float
    exponents: np.ndarray
    exponent: float
    ci: float

    @property
    def sign(self):
        return int(np.sign(self.exponent))


def simulate_sensitivity(problem, cfg, equilibrium=None, workers=1):
    """Empirical top Lyapunov exponent of ``S[t+1] = (I - alpha J[t+1]) S[t]``, ``S[0] = I``.

    ``J[t+1]`` is the central-difference Jacobian of ``f(., Phi[t+1])`` at
    ``X[t]``.  ``S`` is renormalised every step and the exponent of a trial is
    ``log(||S_T||_F / ||S_0||_F) / T``.
    """
    eq = solve_equilibrium(problem) if equilibrium is None else equilibrium
    xstar = np.asarray(eq.xstar if hasattr(eq, "xstar") else eq, dtype=float)
    R = noise_factor(cfg.noise_cov, problem.k)

    def block(tr):
        with np.errstate(over="ignore", invalid="ignore"):
            return _nonlinear_block(problem, cfg, xstar, R, tr, True, False)

    results = _map_blocks(block, cfg.trials, workers)
    ex = np.concatenate([r[3] for r in results]) / cfg.T
    ci = Z95 * float(ex.std(ddof=1)) / math.sqrt(len(ex)) if len(ex) > 1 else 0.0
    return SensitivityReport(cfg.alpha, ex, float(ex.mean()), ci)


@dataclass
class ScalingTable:
    alphas: np.ndarray
    tail_eps2: np.ndarray
    tail_ci: np.ndarray
    ratios: np.ndarray
    exceedance: np.ndarray
    delta: float | None
    band: float
    band_limit: float = 3.0
    paths: list = field(default_factory=list)
    overflowed: list = field(default_factory=list)

    @property
    def band_ok(self):
        return bool(self.band <= self.band_limit) if np.isfinite(self.band) else True

    @property
    def exceedance_monotone(self):
        """Exceedance is non-increasing as alpha decreases."""
        if self.delta is None:
            return True
        order = np.argsort(self.alphas)
        e = self.exceedance[order]
        return bool(np.all(np.diff(e) >= 0))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            meta = {"delta": self.delta, "band": self.band if np.isfinite(self.band) else None,
                    "band_ok": self.band_ok, "exceedance_monotone": self.exceedance_monotone,
                    "sign_note": SIGN_NOTE}
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("alpha,tail_eps2,ci,ratio,exceedance\n")
            for row in zip(self.alphas, self.tail_eps2, self.tail_ci, self.ratios, self.exceedance):
                fh.write(",".join(fmt(v) for v in row) + "\n")


def alpha_scaling_experiment(problem, alphas, T, trials, seed, noise_cov=1.0, delta=None,
                             x0=None, workers=1, zero_tol=1e-300):
    """Tail-mean ``eps^2`` and ``eps^2 / alpha`` for each gain, on common random numbers."""
    eq = solve_equilibrium(problem)
    rows = []
    paths = []
    over = []
    for a in alphas:
        cfg = SimConfig(alpha=float(a), T=T, trials=trials, seed=seed,
                        x0=None if x0 is None else tuple(x0), noise_cov=noise_cov)
        st = simulate_nonlinear(problem, cfg, delta=delta, equilibrium=eq, workers=workers)
        rows.append((st.tail_mean_eps2, st.tail_ci, st.exceedance if delta is not None else math.nan))
        paths.append(st.path0)
        over.append(st.overflowed)
    alphas = np.asarray(alphas, dtype=float)
    e2 = np.array([r[0] for r in rows])
    ci = np.array([r[1] for r in rows])
    exc = np.array([r[2] for r in rows])
    ratios = np.where(e2 > zero_tol, e2 / alphas, 0.0)
    pos = ratios[ratios > 0]
    band = float(pos.max() / pos.min()) if pos.size == len(ratios) and pos.size else math.nan
    return ScalingTable(alphas, e2, ci, ratios, exc, delta, band, paths=paths,
                        overflowed=over)


def interpolated_overlay(problem, path, alpha, substeps=10):
    """Recursion path on the time grid ``t_j = j alpha`` beside the ODE solution.

    Returns ``(times, X, gamma_ode)``; the ODE starts from ``path[0]`` and is
    integrated with RK4 at ``alpha / substeps``.
    """
    path = np.asarray(path, dtype=float)
    n = path.shape[0] - 1
    times = np.arange(n + 1) * alpha
    traj = integrate_ode(problem, path[0], n * alpha, alpha / substeps)
    return times, path, traj.states[::substeps]


def write_overlay_csv(path, times, X, gamma):
    k = X.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps({"sign_note": SIGN_NOTE}) + "\n")
        fh.write(",".join(["t"] + [f"X{i}" for i in range(k)] + [f"gamma{i}" for i in range(k)]) + "\n")
        for t, x, g in zip(times, X, gamma):
            fh.write(",".join(fmt(v) for v in (t, *x, *g)) + "\n")
