"""Hot path kernels for Monte Carlo simulation of the linear recursion.

Every kernel exists twice: a numba ``@njit`` version looping over trials and
time, and a numpy version vectorised over trials.  The module-level names
(``chain_paths``, ``linear_norms``, ``coupled_endpoints``) dispatch to one of
them according to :data:`odemarkov._config.USE_NUMBA`.

Both versions consume identical pre-drawn random inputs, so they agree up to
floating point summation order.
"""
import numpy as np

from ._config import HAVE_NUMBA, USE_NUMBA, numba_options

OVERFLOW_NORM = 1e150


def transition_cumsum(P):
    """Row cumulative sums with the last column pinned to exactly 1."""
    cum = np.cumsum(np.asarray(P, dtype=float), axis=1)
    cum[:, -1] = 1.0
    return cum


def initial_states(u0, phi0, pi):
    """Initial chain states: ``phi0`` index, or draws from ``pi`` if ``"stationary"``."""
    if isinstance(phi0, str):
        if phi0 != "stationary":
            raise ValueError(f"phi0 must be an index or 'stationary', got {phi0!r}")
        cpi = np.cumsum(pi)
        cpi[-1] = 1.0
        return np.minimum(np.searchsorted(cpi, u0, side="right"), len(pi) - 1).astype(np.int64)
    return np.full(len(u0), int(phi0), dtype=np.int64)


# -- numpy versions ----------------------------------------------------------

def chain_paths_numpy(cum, start, U):
    B, T = U.shape
    n = cum.shape[0]
    states = np.empty((B, T + 1), dtype=np.int64)
    states[:, 0] = start
    cur = np.asarray(start, dtype=np.int64)
    for t in range(T):
        rows = cum[cur]
        nxt = np.sum(rows <= U[:, t, None], axis=1)
        cur = np.minimum(nxt, n - 1)
        states[:, t + 1] = cur
    return states


def linear_norms_numpy(states, gains, x0, W, has_noise):
    B, T1 = states.shape
    T = T1 - 1
    k = gains.shape[1]
    X = np.broadcast_to(np.asarray(x0, dtype=float), (B, k)).copy()
    x2 = np.empty((B, T1))
    x2[:, 0] = np.einsum("bi,bi->b", X, X)
    overflowed = np.zeros(B, dtype=np.bool_)
    for t in range(T):
        Xn = np.einsum("bij,bj->bi", gains[states[:, t]], X)
        if has_noise:
            Xn += W[:, t]
        nrm2 = np.einsum("bi,bi->b", Xn, Xn)
        bad = ~(nrm2 <= OVERFLOW_NORM * OVERFLOW_NORM)
        overflowed |= bad
        X = np.where(overflowed[:, None], X, Xn)
        x2[:, t + 1] = np.einsum("bi,bi->b", X, X)
    return x2, overflowed


def coupled_endpoints_numpy(states, gains, W, has_noise, depths):
    B, T1 = states.shape
    N = T1 - 1
    k = gains.shape[1]
    out = np.empty((B, len(depths), k))
    for d, depth in enumerate(depths):
        X = np.zeros((B, k))
        for t in range(N - depth, N):
            X = np.einsum("bij,bj->bi", gains[states[:, t]], X)
            if has_noise:
                X += W[:, t]
        out[:, d] = X
    return out


# -- numba versions ----------------------------------------------------------

def _chain_paths_loop(cum, start, U):
    B, T = U.shape
    n = cum.shape[0]
    states = np.empty((B, T + 1), dtype=np.int64)
    for b in range(B):
        cur = start[b]
        states[b, 0] = cur
        for t in range(T):
            u = U[b, t]
            j = 0
            for c in range(n):
                if cum[cur, c] <= u:
                    j += 1
            if j > n - 1:
                j = n - 1
            cur = j
            states[b, t + 1] = cur
    return states


def _linear_norms_loop(states, gains, x0, W, has_noise):
    B, T1 = states.shape
    T = T1 - 1
    k = gains.shape[1]
    lim2 = OVERFLOW_NORM * OVERFLOW_NORM
    x2 = np.empty((B, T1))
    overflowed = np.zeros(B, dtype=np.bool_)
    X = np.empty(k)
    Xn = np.empty(k)
    for b in range(B):
        s = 0.0
        for i in range(k):
            X[i] = x0[i]
            s += X[i] * X[i]
        x2[b, 0] = s
        frozen = False
        for t in range(T):
            if not frozen:
                g = gains[states[b, t]]
                s = 0.0
                for i in range(k):
                    acc = 0.0
                    for j in range(k):
                        acc += g[i, j] * X[j]
                    if has_noise:
                        acc += W[b, t, i]
                    Xn[i] = acc
                    s += acc * acc
                if not (s <= lim2):
                    frozen = True
                    overflowed[b] = True
                else:
                    for i in range(k):
                        X[i] = Xn[i]
            s = 0.0
            for i in range(k):
                s += X[i] * X[i]
            x2[b, t + 1] = s
    return x2, overflowed


def _coupled_endpoints_loop(states, gains, W, has_noise, depths):
    B, T1 = states.shape
    N = T1 - 1
    k = gains.shape[1]
    D = depths.shape[0]
    out = np.empty((B, D, k))
    X = np.empty(k)
    Xn = np.empty(k)
    for b in range(B):
        for d in range(D):
            for i in range(k):
                X[i] = 0.0
            for t in range(N - depths[d], N):
                g = gains[states[b, t]]
                for i in range(k):
                    acc = 0.0
                    for j in range(k):
                        acc += g[i, j] * X[j]
                    if has_noise:
                        acc += W[b, t, i]
                    Xn[i] = acc
                for i in range(k):
                    X[i] = Xn[i]
            for i in range(k):
                out[b, d, i] = X[i]
    return out


if HAVE_NUMBA:
    from numba import njit

    chain_paths_numba = njit(**numba_options)(_chain_paths_loop)
    _linear_norms_nb = njit(**numba_options)(_linear_norms_loop)
    _coupled_endpoints_nb = njit(**numba_options)(_coupled_endpoints_loop)

    def linear_norms_numba(states, gains, x0, W, has_noise):
        if W is None:
            W = np.zeros((1, 1, gains.shape[1]))
        return _linear_norms_nb(states, gains, np.ascontiguousarray(x0, dtype=np.float64),
                                W, bool(has_noise))

    def coupled_endpoints_numba(states, gains, W, has_noise, depths):
        if W is None:
            W = np.zeros((1, 1, gains.shape[1]))
        return _coupled_endpoints_nb(states, gains, W, bool(has_noise),
                                     np.asarray(depths, dtype=np.int64))
else:  # pragma: no cover
    chain_paths_numba = linear_norms_numba = coupled_endpoints_numba = None


if USE_NUMBA:
    chain_paths = chain_paths_numba
    linear_norms = linear_norms_numba
    coupled_endpoints = coupled_endpoints_numba
    BACKEND = "numba"
else:
    chain_paths = chain_paths_numpy
    linear_norms = linear_norms_numpy
    coupled_endpoints = coupled_endpoints_numpy
    BACKEND = "numpy"
