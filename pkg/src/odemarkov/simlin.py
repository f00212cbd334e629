"""Monte Carlo engine for ``X[t+1] = (I - alpha m(Phi[t])) X[t] + W[t+1]``.

Trials use independent counter-based streams (see :mod:`odemarkov.rng`) and
are processed in fixed-size blocks whose partial statistics are merged in
block order, so results are bit-identical for any number of workers.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import math

import numpy as np

from . import kernels
from .chain import stationary
from .errors import ConfigError, UnstableGain
from .oper import build_L, build_Q, fmt, gain_factors, spectral_radius
from .rng import RNG_ID, block_ranges, draw_block

BLOCK_SIZE = 256
Z95 = 1.959963984540054
DIVERGENCE_SLOPE = 0.05
FLAT_SLOPE = 1e-3


def noise_factor(cov, k):
    """Square root ``R`` with ``R R^T = cov``; ``None`` when there is no noise.

    A scalar ``s`` means covariance ``s I``.
    """
    if cov is None:
        return None
    C = np.asarray(cov, dtype=float)
    if C.ndim == 0:
        C = float(C) * np.eye(k)
    if C.shape != (k, k):
        raise ConfigError(f"noise covariance must be {k}x{k}, got {C.shape}")
    if not np.allclose(C, C.T, atol=1e-12):
        raise ConfigError("noise covariance must be symmetric")
    d, V = np.linalg.eigh(C)
    if d.min() < -1e-12 * max(1.0, abs(d).max()):
        raise ConfigError("noise covariance must be positive semidefinite")
    if not np.any(d > 0):
        return None
    return V * np.sqrt(np.clip(d, 0.0, None))


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``phi0`` is an initial state index or ``"stationary"`` (draw from ``pi``).
    ``noise_cov`` adds an i.i.d. Gaussian term with that covariance (scalar
    ``s`` means ``s I``) on top of the per-state disturbance ``w``, which is
    included when ``use_w`` is true.
    """

    alpha: float
    T: int
    trials: int
    seed: int
    x0: tuple | None = None
    phi0: object = "stationary"
    noise_cov: object = None
    use_w: bool = True

    def __post_init__(self):
        if int(self.T) < 1 or int(self.trials) < 1:
            raise ConfigError("T and trials must be >= 1")
        if int(self.seed) < 0:
            raise ConfigError("seed must be a non-negative integer")

    def initial_x(self, k):
        if self.x0 is None:
            return np.zeros(k)
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (k,):
            raise ConfigError(f"x0 must have length {k}")
        return x0


class _Moments:
    """Running per-step mean and sum of squared deviations, merged in order."""

    def __init__(self, size):
        self.n = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros(size)

    def merge_block(self, x):
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n

    def half_width(self):
        if self.n < 2:
            return np.zeros_like(self.mean)
        return Z95 * np.sqrt(self.m2 / (self.n - 1) / self.n)


def _run_blocks(fn, trials, workers):
    blocks = block_ranges(trials, BLOCK_SIZE)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, blocks))
    return [fn(b) for b in blocks]


def _disturbance(model, states, Z, R, use_w):
    W = None
    if use_w and np.any(model.w != 0):
        W = model.w[states[:, 1:]]
    if R is not None:
        noise = Z @ R.T
        W = noise if W is None else W + noise
    return W


def _tail_slope(times, m2):
    q = times >= 0.75 * times[-1]
    tail = m2[q]
    if not np.all(np.isfinite(tail)):
        return math.inf
    if np.all(tail == 0):
        return 0.0
    if np.any(tail == 0):
        return -math.inf
    if q.sum() < 2:
        return 0.0
    return float(np.polyfit(times[q], np.log(tail), 1)[0])


def classify(times, m2, overflowed):
    """``diverged`` on overflow or tail log-slope > 0.05; ``converged`` if the
    tail log-slope is at most 1e-3 (flat or decaying); else ``inconclusive``."""
    slope = _tail_slope(times, m2)
    if overflowed or slope > DIVERGENCE_SLOPE:
        return "diverged", slope
    if slope <= FLAT_SLOPE:
        return "converged", slope
    return "inconclusive", slope


@dataclass
class TrajectoryStats:
    times: np.ndarray
    m2: np.ndarray
    ci: np.ndarray
    classification: str
    sigma2_hat: float | None
    tail_slope: float
    overflowed: int
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path):
        meta = dict(self.metadata, classification=self.classification,
                    sigma2_hat=self.sigma2_hat, tail_slope=self.tail_slope,
                    overflowed=self.overflowed)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("t,m2,ci\n")
            for t, m, c in zip(self.times, self.m2, self.ci):
                fh.write(f"{int(t)},{fmt(m)},{fmt(c)}\n")


def _prepare(model, cfg):
    info = stationary(model)
    cum = kernels.transition_cumsum(model.P)
    gains = np.ascontiguousarray(gain_factors(model, cfg.alpha))
    R = noise_factor(cfg.noise_cov, model.k)
    return info, cum, gains, R


def simulate_linear(model, cfg, workers=1):
    """Second-moment statistics of ``||X_t||^2`` over ``cfg.trials`` paths."""
    info, cum, gains, R = _prepare(model, cfg)
    x0 = cfg.initial_x(model.k)

    def block(trials):
        u0, U, Z = draw_block(cfg.seed, trials, cfg.T, model.k, noise=R is not None)
        start = kernels.initial_states(u0, cfg.phi0, info.pi)
        states = kernels.chain_paths(cum, start, U)
        W = _disturbance(model, states, Z, R, cfg.use_w)
        with np.errstate(over="ignore", invalid="ignore"):
            x2, over = kernels.linear_norms(states, gains, x0, W, W is not None)
        return x2, int(over.sum())

    acc = _Moments(cfg.T + 1)
    overflowed = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for x2, over in _run_blocks(block, cfg.trials, workers):
            acc.merge_block(x2)
            overflowed += over
    times = np.arange(cfg.T + 1)
    label, slope = classify(times, acc.mean, overflowed > 0)
    tail = times >= 0.75 * cfg.T
    sigma2 = float(acc.mean[tail].mean()) if label == "converged" else None
    meta = {
        "alpha": cfg.alpha,
        "T": cfg.T,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "phi0": cfg.phi0,
        "rng": RNG_ID,
        "backend": kernels.BACKEND,
    }
    return TrajectoryStats(times, acc.mean, acc.half_width(), label, sigma2, slope, overflowed, meta)


def q_radius(model, alpha):
    return spectral_radius(build_Q(model, alpha))


def _require_stable(model, alpha):
    xq = q_radius(model, alpha)
    if not xq < 1.0:
        raise UnstableGain(f"alpha={alpha} is outside the stability region (xi^Q = {xq:.6g})")
    return xq


def _fit_rate(x, y):
    use = np.isfinite(y) & (y > 0)
    if use.sum() < 2:
        return math.nan
    return float(np.polyfit(x[use], np.log(y[use]), 1)[0])


@dataclass
class CouplingReport:
    depths: list
    D: np.ndarray
    ci: np.ndarray
    slope: float
    q_rate: float
    l_rate: float


def backward_couple(model, alpha, depths, seed, trials=1000, noise_cov=None,
                    use_w=True, workers=1):
    """Paths started at ``-n`` from zero, for every ``n`` in ``depths``, on one
    shared realisation of the chain and noise.

    ``D[i] = E||X_0^(n_i) - X_0^(n_{i+1})||^2`` for consecutive depths; the
    slope is fitted to ``log D`` against ``min(n_i, n_{i+1})``.
    """
    depths = [int(d) for d in depths]
    if not depths or min(depths) < 0:
        raise ConfigError("depths must be non-negative integers")
    xq = _require_stable(model, alpha)
    info = stationary(model)
    cum = kernels.transition_cumsum(model.P)
    gains = np.ascontiguousarray(gain_factors(model, alpha))
    R = noise_factor(noise_cov, model.k)
    N = max(depths)
    darr = np.asarray(depths, dtype=np.int64)

    def block(tr):
        u0, U, Z = draw_block(seed, tr, max(N, 1), model.k, noise=R is not None)
        start = kernels.initial_states(u0, "stationary", info.pi)
        states = kernels.chain_paths(cum, start, U[:, :N])
        W = _disturbance(model, states, None if Z is None else Z[:, :N], R, use_w)
        ends = kernels.coupled_endpoints(states, gains, W, W is not None, darr)
        return np.sum((ends[:, :-1] - ends[:, 1:]) ** 2, axis=2)

    acc = _Moments(max(len(depths) - 1, 0))
    for diffs in _run_blocks(block, trials, workers):
        acc.merge_block(diffs)
    mins = np.minimum(darr[:-1], darr[1:]).astype(float)
    slope = _fit_rate(mins, acc.mean) if len(depths) > 2 else math.nan
    return CouplingReport(depths, acc.mean, acc.half_width(), slope, math.log(xq),
                          2 * math.log(spectral_radius(build_L(model, alpha))))


@dataclass
class DecayReport:
    times: np.ndarray
    d2: np.ndarray
    ci: np.ndarray
    rate: float
    predicted_rate: float
    q_rate: float
    relative_error: float
    tolerance: float = 0.2

    @property
    def within_tolerance(self):
        return self.relative_error <= self.tolerance

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            meta = {"rate": self.rate, "predicted_rate": self.predicted_rate,
                    "q_rate": self.q_rate, "relative_error": self.relative_error}
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("t,d2,ci\n")
            for t, d, c in zip(self.times, self.d2, self.ci):
                fh.write(f"{int(t)},{fmt(d)},{fmt(c)}\n")


def stationarity_convergence(model, alpha, gamma, T, trials, seed, workers=1, fit_from=0.25):
    """Decay of ``E||X_t(gamma) - X_t(0)||^2`` under a stationary chain.

    The difference obeys the noise-free product recursion, so it is simulated
    directly from ``X_0 = gamma``.  The rate is the slope of ``log d2`` over
    ``t >= fit_from * T`` and is compared with ``2 log xi_alpha``.
    """
    _require_stable(model, alpha)
    xq = q_radius(model, alpha)
    cfg = SimConfig(alpha=alpha, T=T, trials=trials, seed=seed, x0=tuple(np.ravel(gamma)),
                    phi0="stationary", noise_cov=None, use_w=False)
    stats = simulate_linear(model, cfg, workers=workers)
    times = stats.times
    fit = times >= fit_from * T
    rate = _fit_rate(times[fit], stats.m2[fit])
    predicted = 2 * math.log(spectral_radius(build_L(model, alpha)))
    rel = abs(rate - predicted) / abs(predicted) if predicted != 0 and np.isfinite(rate) else math.nan
    return DecayReport(times, stats.m2, stats.ci, rate, predicted, math.log(xq), rel)
