"""Finite Markov chain environments.

A :class:`ChainModel` couples a transition matrix with a per-state gain matrix
``m[i]`` and disturbance vector ``w[i]``; the recursion driven by it is
``X[t+1] = (I - alpha m(Phi[t])) X[t] + W[t+1]``.
"""
from dataclasses import dataclass, field
import itertools
import json

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatch,
    NegativeProbability,
    OutOfRange,
    ParseError,
    RowSumDefect,
    SingularSystem,
    StochasticityError,
    ValidationError,
)

ROW_SUM_TOL = 1e-12
MAX_SHIFT_REGISTER = 12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChainModel:
    """Markov chain with state-dependent gain and disturbance.

    Parameters
    ----------
    P : (n, n) array_like
        Row-stochastic transition matrix.
    m : (n, k, k) array_like
        Gain matrix ``m(x_i)`` for every state.
    w : (n, k) array_like, optional
        Disturbance ``w(x_i)``; zeros when omitted.
    labels : sequence of str, optional
        State labels; ``"0" .. "n-1"`` when omitted.
    """

    P: np.ndarray
    m: np.ndarray
    w: np.ndarray = None
    labels: tuple = None
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        try:
            m = np.array(self.m, dtype=float)
        except ValueError as exc:
            raise DimensionMismatch(f"m is not an array of equal-sized matrices: {exc}") from None
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise DimensionMismatch(f"P must be a non-empty square matrix, got shape {P.shape}")
        n = P.shape[0]
        if m.ndim != 3 or m.shape[0] != n or m.shape[1] != m.shape[2] or m.shape[1] == 0:
            raise DimensionMismatch(f"m must have shape ({n}, k, k), got {m.shape}")
        k = m.shape[1]
        if self.w is None:
            w = np.zeros((n, k))
        else:
            w = np.array(self.w, dtype=float)
            if w.shape != (n, k):
                raise DimensionMismatch(f"w must have shape ({n}, {k}), got {w.shape}")
        labels = tuple(str(i) for i in range(n)) if self.labels is None else tuple(map(str, self.labels))
        if len(labels) != n:
            raise DimensionMismatch(f"expected {n} labels, got {len(labels)}")
        object.__setattr__(self, "P", _frozen(P))
        object.__setattr__(self, "m", _frozen(m))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def k(self):
        return self.m.shape[1]

    def with_disturbance(self, w):
        """Copy of the chain with a different disturbance function."""
        return ChainModel(self.P, self.m, w, self.labels, name=self.name)

    def to_dict(self):
        return {
            "k": self.k,
            "states": list(self.labels),
            "P": self.P.tolist(),
            "m": self.m.tolist(),
            "w": self.w.tolist(),
        }


@dataclass(frozen=True)
class ValidationReport:
    row_sum_defects: np.ndarray
    min_entry: float
    primitive_power: int | None
    irreducible: bool
    finite: bool

    @property
    def reducible(self):
        return not self.irreducible

    @property
    def periodic(self):
        return self.irreducible and self.primitive_power is None

    @property
    def ok(self):
        return self.finite and self.primitive_power is not None

    def describe(self):
        if not self.finite:
            return "non-finite entries in m or w"
        if self.reducible:
            return "chain is reducible"
        if self.periodic:
            return "chain is periodic (no power of P is entrywise positive)"
        return f"ok (P^{self.primitive_power} > 0)"


def _primitive_power(P):
    """Smallest t <= n^2 with P^t entrywise positive, using the support pattern."""
    n = P.shape[0]
    S = (P > 0).astype(np.int64)
    Q = S.copy()
    for t in range(1, n * n + 1):
        if Q.all():
            return t
        Q = np.minimum(Q @ S, 1)
    return None


def validate_chain(model):
    """Check stochasticity, finiteness and primitivity of ``model``.

    Raises :class:`RowSumDefect` or :class:`NegativeProbability` when ``P`` is
    not stochastic.  Reducibility and periodicity are reported, not raised.
    """
    P = model.P
    defects = P.sum(axis=1) - 1.0
    min_entry = float(P.min())
    if min_entry < 0:
        i, j = np.unravel_index(np.argmin(P), P.shape)
        raise NegativeProbability(f"P[{i}][{j}] = {P[i, j]!r} is negative")
    bad = np.flatnonzero(np.abs(defects) > ROW_SUM_TOL)
    if bad.size:
        i = int(bad[0])
        raise RowSumDefect(f"row {i} of P sums to {P[i].sum()!r}, expected 1")
    n_comp, _ = connected_components(P > 0, directed=True, connection="strong")
    finite = bool(np.isfinite(model.m).all() and np.isfinite(model.w).all())
    return ValidationReport(
        row_sum_defects=defects,
        min_entry=min_entry,
        primitive_power=_primitive_power(P),
        irreducible=n_comp == 1,
        finite=finite,
    )


@dataclass(frozen=True)
class StationaryInfo:
    """Stationary law ``pi``, fundamental matrix ``Z`` and the averaged gain/disturbance."""

    pi: np.ndarray
    Z: np.ndarray
    Mbar: np.ndarray
    Wbar: np.ndarray


def stationary(model):
    """Solve ``pi P = pi`` directly and form ``Z = (I - P + 1 pi^T)^-1``."""
    P = model.P
    n = model.n
    ones = np.ones((n, n))
    A = np.eye(n) - P + ones
    if np.linalg.cond(A) > 1e13:
        raise SingularSystem("I - P + 11^T is singular; the chain is not irreducible")
    pi = scipy.linalg.solve(A.T, np.ones(n))
    pi = pi / pi.sum()
    F = np.eye(n) - P + np.outer(np.ones(n), pi)
    if np.linalg.cond(F) > 1e13:
        raise SingularSystem("I - P + 1 pi^T is numerically singular")
    Z = scipy.linalg.inv(F)
    Mbar = np.einsum("i,ijk->jk", pi, model.m)
    Wbar = pi @ model.w
    return StationaryInfo(_frozen(pi), _frozen(Z), _frozen(Mbar), _frozen(Wbar))


def shift_register_states(L):
    """State vectors of the length-``L`` shift register, ``+1`` before ``-1``.

    Row ``i`` is ``(s_t, s_{t-1}, ..., s_{t-L+1})`` where bit ``L-1-j`` of ``i``
    is set iff ``s_{t-j} = -1``.  For ``L = 2`` the order is ``++, +-, -+, --``.
    """
    return np.array(list(itertools.product((1.0, -1.0), repeat=L)))


def build_shift_register(L):
    """Chain of regressors ``phi_t = (s_t, ..., s_{t-L+1})`` with i.i.d. fair signs.

    Gains are ``m[i] = phi_i phi_i^T`` (the LMS error recursion) and the
    disturbance is zero.
    """
    if not isinstance(L, (int, np.integer)) or not 1 <= L <= MAX_SHIFT_REGISTER:
        raise OutOfRange(f"shift register length must be in [1, {MAX_SHIFT_REGISTER}], got {L!r}")
    L = int(L)
    n = 2**L
    phi = shift_register_states(L)
    P = np.zeros((n, n))
    for i in range(n):
        for new_bit in (0, 1):
            P[i, (new_bit << (L - 1)) | (i >> 1)] += 0.5
    m = np.einsum("ni,nj->nij", phi, phi)
    labels = ["".join("+" if s > 0 else "-" for s in row) for row in phi]
    return ChainModel(P, m, None, labels, name=f"shift_register:{L}")


# -- config files --------------------------------------------------------------

BUILTINS = {"shift_register": build_shift_register}


def _field_array(doc, key, ndim_hint):
    try:
        return np.array(doc[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field {key!r}: expected a numeric {ndim_hint}: {exc}") from None


def chain_from_dict(doc, source="<dict>"):
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")
    if "builtin" in doc:
        spec = doc["builtin"]
        if not isinstance(spec, dict) or "type" not in spec:
            raise ParseError(f"{source}: field 'builtin' must be an object with a 'type'")
        kind = str(spec["type"]).replace("-", "_")
        if kind not in BUILTINS:
            raise ParseError(f"{source}: unknown builtin type {spec['type']!r}")
        try:
            length = int(spec["length"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{source}: field 'builtin.length' must be an integer") from None
        return BUILTINS[kind](length)
    for key in ("P", "m"):
        if key not in doc:
            raise ParseError(f"{source}: missing required field {key!r}")
    P = _field_array(doc, "P", "matrix")
    n = P.shape[0] if P.ndim else 0
    k = doc.get("k")
    raw_m = doc["m"]
    if not isinstance(raw_m, list) or len(raw_m) != n:
        raise ParseError(f"{source}: field 'm' must list one matrix per state ({n})")
    mats = []
    for i, item in enumerate(raw_m):
        try:
            a = np.array(item, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{source}: field 'm[{i}]': {exc}") from None
        if k is None:
            k = int(round(np.sqrt(a.size)))
        if a.size != int(k) ** 2:
            raise ParseError(f"{source}: field 'm[{i}]' has {a.size} entries, expected k*k = {int(k)**2}")
        mats.append(a.reshape(int(k), int(k)))
    w = _field_array(doc, "w", "array of vectors") if "w" in doc else None
    labels = doc.get("states")
    try:
        return ChainModel(P, np.array(mats), w, labels, name=str(doc.get("name", source)))
    except DimensionMismatch as exc:
        raise ParseError(f"{source}: {exc}") from None


def load_chain(path):
    """Read and validate a chain config file (JSON)."""
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read chain config {path!r}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    model = chain_from_dict(doc, source=path)
    try:
        report = validate_chain(model)
    except StochasticityError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if not report.ok:
        raise ValidationError(f"{path}: {report.describe()}", report)
    return model


def save_chain(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


def random_chain(rng, n, k, symmetric=False, mix=0.5, gain_shift=1.5, gain_scale=0.5):
    """Random primitive chain: Dirichlet rows blended with the uniform law.

    ``mix`` is the weight of the uniform law, which bounds the spectral gap of
    ``P`` below by ``mix``.  Gains are ``gain_shift I`` plus Gaussian noise of
    scale ``gain_scale``, symmetrised when ``symmetric`` is set.
    """
    rng = np.random.default_rng(rng)
    P = (1 - mix) * rng.dirichlet(np.ones(n), size=n) + mix / n
    P /= P.sum(axis=1, keepdims=True)
    m = gain_scale * rng.standard_normal((n, k, k))
    if symmetric:
        m = 0.5 * (m + m.transpose(0, 2, 1))
    m = m + gain_shift * np.eye(k)
    return ChainModel(P, m, None, name=f"random(n={n},k={k},sym={symmetric})")
