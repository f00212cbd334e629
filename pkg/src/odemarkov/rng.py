"""Counter-based random streams, one per trial.

Trial ``i`` of a run with master seed ``s`` draws from Philox4x64-10 keyed by
the 128-bit integer ``(i << 64) | s`` with the counter starting at zero.  The
stream for a trial therefore never depends on how trials are batched or which
worker runs them.  Within one trial the draw order is fixed:

1. one uniform for the initial chain state,
2. ``T`` uniforms for the chain transitions,
3. ``T * k`` standard normals (row-major, time first) for the additive noise.
"""
import numpy as np

RNG_ID = "philox4x64-10;key=(trial<<64)|seed;draws=u0,u[T],z[T,k]"

_MASK64 = (1 << 64) - 1


def trial_generator(seed, trial):
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.Philox(key=(int(trial) << 64) | seed))


def draw_block(seed, trials, T, k, noise=True):
    """Draw the random inputs for the trials listed in ``trials``.

    Returns ``(u0, U, Z)`` with shapes ``(B,)``, ``(B, T)`` and ``(B, T, k)``;
    ``Z`` is ``None`` when ``noise`` is false.  The normals are always drawn
    after the uniforms so the chain path of a trial is the same with or
    without noise.
    """
    trials = list(trials)
    B = len(trials)
    u0 = np.empty(B)
    U = np.empty((B, T))
    Z = np.empty((B, T, k)) if noise else None
    for b, trial in enumerate(trials):
        g = trial_generator(seed, trial)
        u0[b] = g.random()
        U[b] = g.random(T)
        if noise:
            Z[b] = g.standard_normal((T, k))
    return u0, U, Z


def block_ranges(trials, block_size):
    """Fixed partition of ``range(trials)``; independent of the worker count."""
    return [range(lo, min(lo + block_size, trials)) for lo in range(0, trials, block_size)]
