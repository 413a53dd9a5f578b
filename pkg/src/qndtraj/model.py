"""System models for non-demolition measurement.

A :class:`QndModel` stores the diagonal data of a measurement scheme in its
pointer basis (Hamiltonian eigenvalues and one eigenvalue vector per
measurement channel).  A :class:`GeneralModel` stores arbitrary matrices and
is used for full density-matrix simulation and for structural checks.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

DIAG_TOL = 1e-12
ND_TOL = 1e-10
HERMITIAN_TOL = 1e-12


class ModelError(ValueError):
    """Malformed model input."""


class DiagonalityError(ModelError):
    """The operators are not diagonal in the requested pointer basis.

    ``entries`` lists ``(operator, alpha, beta)`` for every offending
    off-diagonal element; operator names are ``"H"`` or ``"C_i"``.
    """

    def __init__(self, entries):
        self.entries = list(entries)
        shown = ", ".join(f"({op}, {a}, {b})" for op, a, b in self.entries[:8])
        more = "" if len(self.entries) <= 8 else f" ... ({len(self.entries)} total)"
        super().__init__(f"model is not diagonal in the pointer basis: {shown}{more}")


class DegenerateRate(ModelError):
    """A conditioning pointer has zero intensity on some counting channel."""


class ChannelKind(str, Enum):
    DIFFUSIVE = "diffusive"
    COUNTING = "counting"


@dataclass(frozen=True)
class PointerBasis:
    dim: int
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.dim < 2:
            raise ModelError(f"pointer basis needs dim >= 2, got {self.dim}")
        labels = tuple(self.labels) if self.labels else tuple(str(a) for a in range(self.dim))
        if len(labels) != self.dim:
            raise ModelError(f"{len(labels)} labels given for dim {self.dim}")
        if len(set(labels)) != self.dim:
            raise ModelError("pointer labels must be distinct")
        object.__setattr__(self, "labels", labels)

    @classmethod
    def standard(cls, dim: int) -> "PointerBasis":
        return cls(dim)


@dataclass(frozen=True)
class Channel:
    """One measurement channel with eigenvalues ``c[alpha]`` in the pointer basis."""

    kind: ChannelKind
    c: np.ndarray
    r: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        kind = ChannelKind(self.kind)
        c = np.array(self.c, dtype=complex).reshape(-1)
        c.setflags(write=False)
        r = 2.0 * c.real
        theta = c.real**2 + c.imag**2
        r.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "theta", theta)

    @property
    def is_counting(self) -> bool:
        return self.kind is ChannelKind.COUNTING


def _order_channels(channels):
    # diffusive block first, relative order preserved within each block
    diff = [ch for ch in channels if ch.kind is ChannelKind.DIFFUSIVE]
    count = [ch for ch in channels if ch.kind is ChannelKind.COUNTING]
    return tuple(diff + count)


@dataclass(frozen=True)
class QndModel:
    """Diagonal (non-demolition) model.

    Channels are reordered at construction so that all diffusive channels
    come first, followed by the counting channels.
    """

    basis: PointerBasis
    epsilon: np.ndarray
    channels: tuple[Channel, ...]

    def __post_init__(self):
        eps = np.array(self.epsilon, dtype=float).reshape(-1)
        if eps.shape[0] != self.basis.dim:
            raise ModelError(f"epsilon has length {eps.shape[0]}, expected {self.basis.dim}")
        eps.setflags(write=False)
        chans = []
        for ch in self.channels:
            if not isinstance(ch, Channel):
                ch = Channel(*ch)
            if ch.c.shape[0] != self.basis.dim:
                raise ModelError(
                    f"channel eigenvalue vector has length {ch.c.shape[0]}, expected {self.basis.dim}"
                )
            chans.append(ch)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "channels", _order_channels(chans))

    @classmethod
    def from_arrays(cls, epsilon=None, diffusive=(), counting=(), labels=()):
        """Build a model from eigenvalue vectors, one per channel."""
        vecs = [np.asarray(v) for v in (*diffusive, *counting)]
        if epsilon is None:
            if not vecs:
                raise ModelError("cannot infer dimension without epsilon or channels")
            epsilon = np.zeros(len(vecs[0]))
        dim = len(epsilon)
        chans = [Channel(ChannelKind.DIFFUSIVE, v) for v in diffusive]
        chans += [Channel(ChannelKind.COUNTING, v) for v in counting]
        return cls(PointerBasis(dim, tuple(labels)), epsilon, tuple(chans))

    @property
    def dim(self) -> int:
        return self.basis.dim

    @property
    def n_diffusive(self) -> int:
        return sum(1 for ch in self.channels if not ch.is_counting)

    @property
    def n_counting(self) -> int:
        return len(self.channels) - self.n_diffusive

    @property
    def r(self) -> np.ndarray:
        """``(n_diffusive, dim)`` array of r(i|alpha) for diffusive channels."""
        rows = [ch.r for ch in self.channels if not ch.is_counting]
        return np.array(rows, dtype=float).reshape(len(rows), self.dim)

    @property
    def theta(self) -> np.ndarray:
        """``(n_counting, dim)`` array of theta(i|alpha) for counting channels."""
        rows = [ch.theta for ch in self.channels if ch.is_counting]
        return np.array(rows, dtype=float).reshape(len(rows), self.dim)

    def max_intensity(self) -> float:
        th = self.theta
        return float(th.max()) if th.size else 0.0

    def to_general(self) -> "GeneralModel":
        return embed(self)

    def canonical_text(self) -> str:
        from .modelfile import format_model

        return format_model(self)

    def model_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


@dataclass(frozen=True)
class GeneralModel:
    """Arbitrary Hermitian Hamiltonian plus measurement operators."""

    H: np.ndarray
    C: tuple[np.ndarray, ...]
    kinds: tuple[ChannelKind, ...]

    def __post_init__(self):
        H = np.array(self.H, dtype=complex)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ModelError(f"H must be square, got shape {H.shape}")
        d = H.shape[0]
        if np.max(np.abs(H - H.conj().T)) > HERMITIAN_TOL:
            raise ModelError("H is not Hermitian")
        if len(self.C) != len(self.kinds):
            raise ModelError("one kind per measurement operator is required")
        ops = []
        for i, C in enumerate(self.C):
            C = np.array(C, dtype=complex)
            if C.shape != (d, d):
                raise ModelError(f"C_{i} has shape {C.shape}, expected {(d, d)}")
            C.setflags(write=False)
            ops.append(C)
        kinds = [ChannelKind(k) for k in self.kinds]
        order = [i for i, k in enumerate(kinds) if k is ChannelKind.DIFFUSIVE]
        order += [i for i, k in enumerate(kinds) if k is ChannelKind.COUNTING]
        H.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "C", tuple(ops[i] for i in order))
        object.__setattr__(self, "kinds", tuple(kinds[i] for i in order))

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def n_diffusive(self) -> int:
        return sum(1 for k in self.kinds if k is ChannelKind.DIFFUSIVE)

    @property
    def n_counting(self) -> int:
        return len(self.kinds) - self.n_diffusive

    def max_intensity(self) -> float:
        """Upper bound of v_i(rho) over states: the largest eigenvalue of C_i^* C_i."""
        bound = 0.0
        for C, k in zip(self.C, self.kinds):
            if k is ChannelKind.COUNTING:
                bound = max(bound, float(np.linalg.eigvalsh(C.conj().T @ C).max()))
        return bound

    def model_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.H).tobytes())
        for C, k in zip(self.C, self.kinds):
            h.update(k.value.encode())
            h.update(np.ascontiguousarray(C).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class RateTable:
    """Convergence rates between pointers.

    ``Lambda[a, g]`` is the exponential rate at which q_a/q_g decays when the
    trajectory collapses onto ``g``; ``lambda_hit[a, g]`` is the rate of the
    first extinguishing jump for ``a`` under that conditioning.
    """

    Lambda: np.ndarray
    lambda_hit: np.ndarray

    @property
    def min_rate(self) -> float:
        off = self.Lambda[~np.eye(self.Lambda.shape[0], dtype=bool)]
        return float(off.min())


def embed(model: QndModel) -> GeneralModel:
    H = np.diag(model.epsilon).astype(complex)
    C = tuple(np.diag(ch.c) for ch in model.channels)
    return GeneralModel(H, C, tuple(ch.kind for ch in model.channels))


def _offdiag_entries(name, M, tol, upper=False):
    d = M.shape[0]
    return [
        (name, a, b)
        for a in range(d)
        for b in range(a + 1 if upper else 0, d)
        if a != b and abs(M[a, b]) > tol
    ]


def diagonalize(model: GeneralModel, basis: PointerBasis | None = None, tol: float = DIAG_TOL) -> QndModel:
    """Read off the diagonal decomposition, or raise :class:`DiagonalityError`.

    Operators are taken to be expressed in ``basis`` already.
    """
    basis = basis or PointerBasis(model.dim)
    if basis.dim != model.dim:
        raise ModelError(f"basis dim {basis.dim} does not match model dim {model.dim}")
    # H is Hermitian, so one triangle names every violation
    bad = _offdiag_entries("H", model.H, tol, upper=True)
    for i, C in enumerate(model.C):
        bad += _offdiag_entries(f"C_{i}", C, tol)
    if bad:
        raise DiagonalityError(bad)
    eps = np.real(np.diag(model.H)).copy()
    chans = tuple(Channel(k, np.diag(C).copy()) for C, k in zip(model.C, model.kinds))
    return QndModel(basis, eps, chans)


def _lindblad_dense(model: GeneralModel, rho: np.ndarray) -> np.ndarray:
    out = -1j * (model.H @ rho - rho @ model.H)
    for C in model.C:
        Cd = C.conj().T
        CdC = Cd @ C
        out += C @ rho @ Cd - 0.5 * (CdC @ rho + rho @ CdC)
    return out


@dataclass
class NondemolitionReport:
    ok: bool
    violations: list = field(default_factory=list)
    # alphas where L(|a><a|)_{bb} != 0 for some b != a
    population_leaks: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def check_nondemolition(model: GeneralModel, basis: PointerBasis | None = None, tol: float = DIAG_TOL) -> NondemolitionReport:
    """Decide whether pointer states are left invariant by the measurement.

    Besides the diagonality test this evaluates the Lindblad generator on
    every pointer projector and reports those that leak population.
    """
    try:
        diagonalize(model, basis, tol)
        violations = []
    except DiagonalityError as err:
        violations = err.entries
    d = model.dim
    leaks = []
    for a in range(d):
        P = np.zeros((d, d), dtype=complex)
        P[a, a] = 1.0
        L = _lindblad_dense(model, P)
        for b in range(d):
            if b != a and abs(L[b, b]) > tol:
                leaks.append((a, b, float(L[b, b].real)))
    return NondemolitionReport(not violations, violations, leaks)


def check_nd_assumption(model: QndModel, tol: float = ND_TOL):
    """Return ``(ok, pairs)`` where ``pairs`` cannot be told apart by any channel."""
    r, theta = model.r, model.theta
    pairs = []
    for a in range(model.dim):
        for b in range(a + 1, model.dim):
            same_r = np.all(np.abs(r[:, a] - r[:, b]) <= tol)
            same_theta = np.all(np.abs(theta[:, a] - theta[:, b]) <= tol)
            if same_r and same_theta:
                pairs.append((a, b))
    return not pairs, pairs


def _counting_rate(theta_a: float, theta_g: float) -> float:
    # theta_g * [x - 1 - ln x] with x = theta_a / theta_g
    if theta_a == 0.0:
        return math.inf
    x = theta_a / theta_g
    return theta_g * (x - 1.0 - math.log(x))


def rate_table(model: QndModel, conditioning: Sequence[int] | None = None) -> RateTable:
    """Exponential collapse rates and extinction rates for every pointer pair.

    ``Lambda[a, g]`` sums one half of the squared r-gap over diffusive
    channels and ``theta_g (x - 1 - ln x)`` over counting channels with
    ``x = theta_a / theta_g``.  It is ``+inf`` when some counting channel
    has ``theta_a == 0`` (the population dies in finite time instead).

    Raises :class:`DegenerateRate` when a pointer listed in ``conditioning``
    (all pointers by default) has zero intensity on a counting channel.
    """
    d = model.dim
    r, theta = model.r, model.theta
    cond = range(d) if conditioning is None else conditioning
    for g in cond:
        for i in range(theta.shape[0]):
            if theta[i, g] == 0.0:
                raise DegenerateRate(f"theta({i}|{g}) = 0: conditioning on pointer {g} is undefined")
    Lam = np.zeros((d, d))
    hit = np.zeros((d, d))
    for g in range(d):
        for a in range(d):
            if a == g:
                continue
            diff = 0.5 * float(np.sum((r[:, a] - r[:, g]) ** 2))
            cnt = 0.0
            for i in range(theta.shape[0]):
                if theta[i, g] == 0.0:
                    # g is not a valid conditioning pointer; rate undefined
                    cnt = math.nan
                    break
                cnt += _counting_rate(theta[i, a], theta[i, g])
            Lam[a, g] = diff + cnt
    for a in range(d):
        dead = theta[:, a] == 0.0
        hit[a] = theta[dead].sum(axis=0) if dead.any() else 0.0
    return RateTable(Lam, hit)


def compare_diffusive_counting_rates(c_alpha: float, c_upsilon: float):
    """Rates of a single Hermitian channel read out diffusively vs by counting.

    Returns ``(rate_diffusive, rate_counting, holds)`` where ``holds`` says
    whether the diffusive rate does not exceed the counting one.
    """
    if c_alpha == 0 or c_upsilon == 0:
        raise ValueError("eigenvalues must be nonzero")
    r_diff = (c_alpha - c_upsilon) ** 2
    x = c_alpha**2 / c_upsilon**2
    r_count = -(c_upsilon**2) * (math.log(x) + 1.0 - x)
    return r_diff, r_count, r_diff <= r_count + 1e-12
