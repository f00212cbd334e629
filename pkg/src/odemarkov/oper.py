"""Lifted Markov operators and their spectra.

For a chain with ``n`` states and gain dimension ``k`` the operator

    (L_alpha f)(x) = E_x[(I - alpha m(Phi_1))^T f(Phi_1)]

acts on stacked vectors ``f = [f(x_0); ...; f(x_{n-1})]`` of length ``n k``.
The second-moment operator

    (Q_alpha F)(x) = E_x[(I - alpha m(Phi_1))^T F(Phi_1) (I - alpha m(Phi_1))]

acts on matrix-valued functions, each ``F(x_i)`` vectorised column-major, so
``vec(B^T F B) = (B^T kron B^T) vec(F)``.  Both are dense block matrices with
block ``(i, j)`` equal to ``P[i, j]`` times the per-state factor of state ``j``.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import json
import math

import numpy as np
import scipy.linalg

from .errors import CapacityExceeded, ConvergenceFailure, NotDominant

MAX_DIM = 4096
LAYOUT_L = "block(i,j) = P[i,j] * (I - alpha m[j])^T; state-major, k per block"
LAYOUT_Q = ("block(i,j) = P[i,j] * kron(B_j^T, B_j^T), B_j = I - alpha m[j]; "
            "state-major, column-major vec of k x k per block")
STRICT_ONE = 1.0 - 1e-12


@dataclass(frozen=True)
class LiftedOperator:
    kind: str
    alpha: float
    A: np.ndarray
    n: int
    k: int
    layout: str = ""

    @property
    def dim(self):
        return self.A.shape[0]


def _check_dim(dim):
    if dim > MAX_DIM:
        raise CapacityExceeded(f"lifted dimension {dim} exceeds the dense cap {MAX_DIM}")


def gain_factors(model, alpha):
    """``B_j = I - alpha m[j]`` for every state, shape ``(n, k, k)``."""
    return np.eye(model.k)[None] - alpha * model.m


def build_L(model, alpha):
    n, k = model.n, model.k
    _check_dim(n * k)
    Bt = gain_factors(model, alpha).transpose(0, 2, 1)
    blocks = model.P[:, :, None, None] * Bt[None]
    A = blocks.transpose(0, 2, 1, 3).reshape(n * k, n * k)
    return LiftedOperator("L", float(alpha), A, n, k, LAYOUT_L)


def build_Q(model, alpha):
    n, k = model.n, model.k
    _check_dim(n * k * k)
    Bt = gain_factors(model, alpha).transpose(0, 2, 1)
    K = np.einsum("jab,jcd->jacbd", Bt, Bt).reshape(n, k * k, k * k)
    blocks = model.P[:, :, None, None] * K[None]
    A = blocks.transpose(0, 2, 1, 3).reshape(n * k * k, n * k * k)
    return LiftedOperator("Q", float(alpha), A, n, k, LAYOUT_Q)


def build(model, kind, alpha):
    if kind == "L":
        return build_L(model, alpha)
    if kind == "Q":
        return build_Q(model, alpha)
    raise ValueError(f"kind must be 'L' or 'Q', got {kind!r}")


def _matrix(op):
    return op.A if isinstance(op, LiftedOperator) else np.asarray(op, dtype=float)


def eigenvalues(op):
    try:
        return scipy.linalg.eigvals(_matrix(op))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceFailure(f"dense eigenvalue solve failed: {exc}") from None


def spectral_radius(op):
    """Largest eigenvalue modulus from a dense nonsymmetric eigensolve."""
    ev = eigenvalues(op)
    if not np.all(np.isfinite(ev)):
        raise ConvergenceFailure("eigenvalue solve returned non-finite values")
    return float(np.max(np.abs(ev))) if ev.size else 0.0


def growth_rate_estimate(op, t_max=2048):
    """``||A^t||_inf^(1/t)`` at ``t = t_max``, by binary powering in log scale.

    With ``V = 1`` the weighted norm is equivalent to the sup norm, so this
    converges to the spectral radius; it shares no code with the eigensolver.
    """
    if t_max < 16:
        raise ValueError("t_max must be at least 16")
    A = _matrix(op)
    result, log_result = None, 0.0
    base, log_base = A.copy(), 0.0
    t = int(t_max)
    while t:
        if t & 1:
            if result is None:
                result, log_result = base.copy(), log_base
            else:
                result, log_result = result @ base, log_result + log_base
            s = np.linalg.norm(result, np.inf)
            if s == 0.0:
                return 0.0
            result /= s
            log_result += math.log(s)
        t >>= 1
        if t:
            base = base @ base
            log_base *= 2.0
            s = np.linalg.norm(base, np.inf)
            if s == 0.0:
                return 0.0
            base /= s
            log_base += math.log(s)
    return math.exp(log_result / t_max)


@dataclass
class EigenPair:
    """Dominant eigenpair with ``mu @ A = lam mu``, ``A @ h = lam h`` and ``mu @ h = 1``.

    ``h`` has unit sup norm and its entry of largest modulus equals ``+1``.
    ``multiplicity`` counts eigenvalues numerically equal to ``lam``.
    """

    lam: complex
    h: np.ndarray
    mu: np.ndarray
    is_real: bool
    multiplicity: int = 1

    @property
    def modulus(self):
        return abs(self.lam)


def _cluster_tol(lam):
    return 1e-7 * max(1.0, abs(lam))


def _dominant_index(ev):
    xi = np.max(np.abs(ev))
    tol = _cluster_tol(xi)
    cands = np.flatnonzero(np.abs(ev) >= xi - tol)
    # prefer the largest real part, then the positive imaginary part
    best = max(cands, key=lambda i: (round(ev[i].real / tol), ev[i].imag))
    return int(best)


def _eigen_decomposition(A):
    try:
        ev, VL, VR = scipy.linalg.eig(A, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConvergenceFailure(f"dense eigen decomposition failed: {exc}") from None
    if not np.all(np.isfinite(ev)):
        raise ConvergenceFailure("eigen decomposition returned non-finite values")
    return ev, VL, VR


def _biorthogonal_cluster(ev, VL, VR, lam):
    """Right basis ``H`` and dual left basis ``U`` (``U.T @ H = I``) for ``lam``."""
    idx = np.flatnonzero(np.abs(ev - lam) <= _cluster_tol(lam))
    H = VR[:, idx]
    U = VL[:, idx].conj()
    G = U.T @ H
    if np.linalg.cond(G) > 1e10:
        return H, None
    return H, U @ np.linalg.inv(G).T


def perron_eigenpair(op):
    A = _matrix(op)
    ev, VL, VR = _eigen_decomposition(A)
    i = _dominant_index(ev)
    lam = ev[i]
    tol = _cluster_tol(lam)
    is_real = abs(lam.imag) <= tol
    if is_real:
        lam = complex(lam.real, 0.0)
    H, U = _biorthogonal_cluster(ev, VL, VR, lam)
    h = H[:, 0]
    if U is None:
        mu = VL[:, i].conj()
        mu = mu / (mu @ h)
    else:
        mu = U[:, 0]
    c = h[np.argmax(np.abs(h))]
    h = h / c
    mu = mu * c
    if is_real:
        h, mu = h.real.copy(), mu.real.copy()
        mu = mu / (mu @ h)
    return EigenPair(lam if not is_real else lam.real, h, mu, bool(is_real), H.shape[1])


@dataclass
class SpectralReport:
    kind: str
    alphas: np.ndarray
    xi: np.ndarray
    perron: list
    branch_id: np.ndarray
    breakpoints: list
    ok: np.ndarray
    region_O: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    @property
    def lam(self):
        return np.array([p.lam if p is not None else np.nan for p in self.perron], dtype=complex)

    def segments(self):
        """Index ranges of constant ``branch_id`` over successfully solved points."""
        out = []
        start = None
        for i, b in enumerate(self.branch_id):
            if start is None or b != self.branch_id[start]:
                if start is not None:
                    out.append((start, i))
                start = i
        if start is not None:
            out.append((start, len(self.branch_id)))
        return [(lo, hi) for lo, hi in out if self.branch_id[lo] >= 0]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["alpha", "xi", "lambda_re", "lambda_im", "is_real", "branch_id"])
            for a, x, p, b in zip(self.alphas, self.xi, self.perron, self.branch_id):
                if p is None:
                    writer.writerow([fmt(a), "nan", "nan", "nan", "", int(b)])
                    continue
                lam = complex(p.lam)
                writer.writerow([fmt(a), fmt(x), fmt(lam.real), fmt(lam.imag),
                                 int(p.is_real), int(b)])


def fmt(x):
    """17 significant digits, round-trip exact."""
    return format(float(x), ".17g")


def write_region_json(region, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([[float(lo), float(hi)] for lo, hi in region], fh)
        fh.write("\n")


def _solve_point(model, kind, alpha):
    op = build(model, kind, alpha)
    ev = eigenvalues(op)
    if not np.all(np.isfinite(ev)):
        raise ConvergenceFailure("non-finite eigenvalues")
    return ev, perron_eigenpair(op)


def _extrapolate(history, a):
    """Polynomial extrapolation through the last (up to) three tracked points."""
    pts = history[-3:]
    xs = [p[0] for p in pts]
    out = 0.0
    for i, (ai, li) in enumerate(pts):
        w = 1.0
        for j, aj in enumerate(xs):
            if j != i:
                w *= (a - aj) / (ai - aj)
        out += w * li
    return out


def _track_branches(alphas, spectra, xi, ok):
    """Nearest-eigenvalue continuation; a new branch starts when the tracked one stops being maximal."""
    N = len(alphas)
    branch = np.full(N, -1, dtype=int)
    breakpoints = []
    current = -1
    history = []  # (alpha, tracked eigenvalue) on the current branch
    for i in range(N):
        if not ok[i]:
            history = []
            continue
        ev = spectra[i]
        # near-defective clusters are only resolved to ~sqrt(eps)
        tol = 1e-6 * max(1.0, xi[i])
        if len(history) >= 3:
            pred = _extrapolate(history, alphas[i])
            tracked = ev[np.argmin(np.abs(ev - pred))]
            if abs(tracked) >= xi[i] - tol:
                branch[i] = current
                history.append((alphas[i], tracked))
                continue
            breakpoints.append(0.5 * (alphas[i - 1] + alphas[i]))
        elif history:
            # degenerate clusters split at second order, so fewer than three
            # points cannot tell the branches apart; stay on the maximum
            branch[i] = current
            history.append((alphas[i], ev[_dominant_index(ev)]))
            continue
        current += 1
        branch[i] = current
        history = [(alphas[i], ev[_dominant_index(ev)])]
    return branch, breakpoints


def region_from_grid(alphas, xi):
    """Maximal runs of grid points with ``xi < 1`` as ``(lo, hi)`` pairs."""
    out = []
    lo = None
    for a, x in zip(alphas, xi):
        inside = x < STRICT_ONE and a > 0
        if inside and lo is None:
            lo = a
        if not inside and lo is not None:
            out.append((lo, prev))
            lo = None
        prev = a
    if lo is not None:
        out.append((lo, prev))
    return out


def scan_curve(model, kind, alphas, workers=1):
    """Spectral radius and Perron pair of ``L_alpha`` or ``Q_alpha`` over a grid.

    Grid points are solved independently (optionally on ``workers`` threads);
    branch tracking runs afterwards as a sequential pass, so the report does
    not depend on ``workers``.  Points whose eigensolve fails are flagged in
    ``ok`` and ``errors`` without aborting the scan.
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("alphas must be a non-empty 1-d grid")
    if np.any(np.diff(alphas) <= 0) or alphas[0] < 0:
        raise ValueError("alphas must be strictly increasing and start at >= 0")

    def task(a):
        try:
            return _solve_point(model, kind, a)
        except ConvergenceFailure as exc:
            return exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, alphas))
    else:
        results = [task(a) for a in alphas]
    N = alphas.size
    xi = np.full(N, np.nan)
    ok = np.zeros(N, dtype=bool)
    perron = [None] * N
    spectra = [None] * N
    errors = {}
    for i, r in enumerate(results):
        if isinstance(r, Exception):
            errors[i] = str(r)
            continue
        ev, pair = r
        spectra[i] = ev
        xi[i] = float(np.max(np.abs(ev)))
        perron[i] = pair
        ok[i] = True
    branch, breakpoints = _track_branches(alphas, spectra, xi, ok)
    region = region_from_grid(alphas, xi) if kind == "Q" else []
    return SpectralReport(kind, alphas, xi, perron, branch, breakpoints, ok, region, errors)


def segment_fits(report, degree=2):
    """Least-squares polynomial fit of ``xi`` on each branch segment.

    Returns a list of dicts with ``alpha_lo``, ``alpha_hi``, ``coeffs`` (highest
    power first) and the max absolute ``residual``.
    """
    fits = []
    for lo, hi in report.segments():
        a = report.alphas[lo:hi]
        x = report.xi[lo:hi]
        deg = min(degree, len(a) - 1)
        coeffs = np.polyfit(a, x, deg) if deg > 0 else np.array([x[0]])
        resid = float(np.max(np.abs(np.polyval(coeffs, a) - x)))
        fits.append({
            "branch_id": int(report.branch_id[lo]),
            "alpha_lo": float(a[0]),
            "alpha_hi": float(a[-1]),
            "coeffs": [float(c) for c in coeffs],
            "residual": resid,
        })
    return fits


def stability_region(model, alpha_max, resolution=1e-2, xi_tol=1e-9):
    """Intervals of ``alpha`` in ``(0, alpha_max]`` where ``xi^Q_alpha < 1``.

    The grid has spacing ``resolution``; each crossing of 1 is refined by
    bisection until the bracket is below ``resolution * 1e-2`` and the
    endpoint satisfies ``|xi^Q - 1| <= xi_tol`` (or the bracket collapses).
    """
    if alpha_max <= 0 or resolution <= 0:
        raise ValueError("alpha_max and resolution must be positive")

    def q_radius(a):
        return spectral_radius(build_Q(model, a))

    n_steps = max(1, int(math.ceil(alpha_max / resolution - 1e-12)))
    grid = np.linspace(0.0, alpha_max, n_steps + 1)
    inside = np.array([False] + [q_radius(a) < STRICT_ONE for a in grid[1:]])

    def refine(a_in, a_out):
        """Bisect between a point inside and one outside the region."""
        for _ in range(200):
            mid = 0.5 * (a_in + a_out)
            x = q_radius(mid)
            if x < STRICT_ONE:
                a_in = mid
            else:
                a_out = mid
            if abs(a_out - a_in) <= resolution * 1e-2 and abs(x - 1.0) <= xi_tol:
                break
            if abs(a_out - a_in) <= 4 * np.finfo(float).eps * max(1.0, abs(a_in)):
                break
        return 0.5 * (a_in + a_out)

    intervals = []
    i = 1
    N = len(grid)
    while i < N:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < N and inside[j + 1]:
            j += 1
        if i == 1:
            # (0, grid[1]] starts the region whenever the small-gain limit is stable
            lo = 0.0 if q_radius(grid[1] * 1e-6) < STRICT_ONE else refine(grid[1], grid[0])
        else:
            lo = refine(grid[i], grid[i - 1])
        hi = refine(grid[j], grid[j + 1]) if j + 1 < N else float(grid[j])
        intervals.append((float(lo), float(hi)))
        i = j + 1
    return intervals


@dataclass
class ErgodicDecay:
    lam: float
    rank: int
    times: np.ndarray
    residuals: np.ndarray
    slope: float
    final_residual: float
    projector: np.ndarray


def spectral_projector(op):
    """Eigenprojector of the dominant eigenvalue; requires it real, semisimple and strictly dominant."""
    A = _matrix(op)
    ev, VL, VR = _eigen_decomposition(A)
    i = _dominant_index(ev)
    lam = ev[i]
    tol = _cluster_tol(lam)
    if abs(lam.imag) > tol or lam.real <= 0:
        raise NotDominant(f"dominant eigenvalue {lam} is not real and positive")
    in_cluster = np.abs(ev - lam) <= tol
    rest = np.abs(ev[~in_cluster])
    if rest.size and rest.max() > abs(lam) - 1e-8:
        raise NotDominant(f"no spectral gap: |lambda| = {abs(lam)}, next modulus {rest.max()}")
    H, U = _biorthogonal_cluster(ev, VL, VR, lam)
    if U is None:
        raise NotDominant("dominant eigenvalue is defective (no eigenprojector)")
    return float(lam.real), (H @ U.T).real, H.shape[1]


def multiplicative_ergodic_check(op, t_max=200):
    """Residuals ``r_t = ||lam^-t A^t - Pi||_inf`` for ``t = 1..t_max``.

    ``Pi`` is the eigenprojector of the dominant eigenvalue (``h mu^T`` when it
    is simple).  The slope is a least-squares fit of ``log r_t`` over the
    points above the roundoff floor.
    """
    lam, proj, rank = spectral_projector(op)
    A = _matrix(op) / lam
    B = np.eye(A.shape[0])
    res = np.empty(t_max)
    for t in range(t_max):
        B = A @ B
        res[t] = np.linalg.norm(B - proj, np.inf)
    times = np.arange(1, t_max + 1)
    floor = 1e-13 * max(1.0, np.linalg.norm(proj, np.inf))
    use = res > floor
    if use.sum() >= 2:
        slope = float(np.polyfit(times[use], np.log(res[use]), 1)[0])
    elif use.sum() < len(res):
        # immediately at the roundoff floor: decay faster than we can resolve
        slope = -np.inf
    else:
        slope = 0.0
    return ErgodicDecay(lam, rank, times, res, slope, float(res[-1]), proj)
