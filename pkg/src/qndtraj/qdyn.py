"""Density-matrix dynamics under continuous measurement.

Generators of the stochastic master equation, a single Euler step with
thinned jumps, and trajectory integrators for the full density matrix and
for the closed population system of diagonal models.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import GridMismatch, StateInvalid, StepTooLarge
from .model import GeneralModel, QndModel, embed
from .noise import physical_noise

log = logging.getLogger(__name__)

MAX_JUMP_PROB = 0.1
REPAIR_CLIP = 1e-8
INVALID_EIG = 1e-6


# --- states ---------------------------------------------------------------

def pointer_state(dim: int, alpha: int) -> np.ndarray:
    rho = np.zeros((dim, dim), dtype=complex)
    rho[alpha, alpha] = 1.0
    return rho


def diagonal_state(q) -> np.ndarray:
    return np.diag(np.asarray(q, dtype=float)).astype(complex)


def check_density(rho, tol: float = 1e-10, eig_tol: float = 1e-8) -> np.ndarray:
    """Validate and return ``rho`` as a complex array."""
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError(f"density matrix must be square, got shape {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho).real - 1.0) > tol:
        raise ValueError(f"density matrix trace is {np.trace(rho).real}, expected 1")
    if np.linalg.eigvalsh(rho)[0] < -eig_tol:
        raise ValueError("density matrix is not positive semidefinite")
    return rho


def check_simplex(q, tol: float = 1e-10) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if np.any(q < -tol) or abs(q.sum() - 1.0) > tol:
        raise ValueError(f"populations {q} are not a probability vector")
    return q


def _as_general(model) -> GeneralModel:
    return embed(model) if isinstance(model, QndModel) else model


def _check_dims(model, rho):
    if rho.shape != (model.dim, model.dim):
        raise ValueError(f"state has shape {rho.shape}, model dim is {model.dim}")


# --- generators -----------------------------------------------------------

def lindblad(model, rho) -> np.ndarray:
    """Lindblad generator ``-i[H, rho] + sum_i (C rho C^* - {C^*C, rho}/2)``."""
    model = _as_general(model)
    rho = np.asarray(rho, dtype=complex)
    _check_dims(model, rho)
    out = -1j * (model.H @ rho - rho @ model.H)
    for C in model.C:
        Cd = C.conj().T
        CdC = Cd @ C
        out = out + C @ rho @ Cd - 0.5 * (CdC @ rho + rho @ CdC)
    return out


@dataclass
class Generators:
    J: list
    v: np.ndarray
    H: list


def generators(model, rho) -> Generators:
    """Jump maps ``J_i``, intensities ``v_i`` and diffusion terms ``H_i`` for every channel."""
    model = _as_general(model)
    rho = np.asarray(rho, dtype=complex)
    _check_dims(model, rho)
    J, v, Hs = [], [], []
    for C in model.C:
        Cd = C.conj().T
        Ji = C @ rho @ Cd
        J.append(Ji)
        v.append(np.trace(Ji).real)
        Hs.append(C @ rho + rho @ Cd - np.trace((C + Cd) @ rho).real * rho)
    return Generators(J, np.array(v), Hs)


# --- records and trajectories -------------------------------------------

@dataclass
class NoiseIncrements:
    """Driving noise for a single step: ``dW`` per diffusive channel, ``u`` per counting channel."""

    dW: np.ndarray
    u: np.ndarray


@dataclass
class MeasurementRecord:
    """What the experimenter sees, at step resolution.

    ``dy[k, i]`` is the diffusive output increment over ``[t_k, t_{k+1})``
    and ``jumps[k, j]`` flags a count on channel ``j`` in that step; the
    count is dated ``t_{k+1}``.
    """

    dt: float
    dy: np.ndarray
    jumps: np.ndarray

    @property
    def n_steps(self) -> int:
        return max(self.dy.shape[0], self.jumps.shape[0])

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    def y(self) -> np.ndarray:
        """Cumulative diffusive outputs, shape ``(K+1, p)``, starting at 0."""
        out = np.zeros((self.n_steps + 1, self.dy.shape[1]))
        np.cumsum(self.dy, axis=0, out=out[1:])
        return out

    def counts(self) -> np.ndarray:
        """Cumulative counts ``N_j(t_k)``, shape ``(K+1, m)``."""
        out = np.zeros((self.n_steps + 1, self.jumps.shape[1]), dtype=np.int64)
        np.cumsum(self.jumps, axis=0, out=out[1:])
        return out

    def jump_times(self) -> list[np.ndarray]:
        return [(np.flatnonzero(self.jumps[:, j]) + 1) * self.dt for j in range(self.jumps.shape[1])]

    def first_jump_step(self, channels) -> int | None:
        """Index ``j`` of the grid time ``t_j`` of the first jump on any of ``channels``."""
        channels = list(channels)
        if not channels:
            return None
        hits = np.flatnonzero(self.jumps[:, channels].any(axis=1))
        return int(hits[0]) + 1 if hits.size else None


@dataclass
class Trajectory:
    times: np.ndarray
    q: np.ndarray
    record: MeasurementRecord
    seed: int
    index: int = 0
    states: np.ndarray | None = None
    clips: int = 0
    repairs: int = 0
    stride: int = 1

    @property
    def final(self) -> np.ndarray:
        return self.q[-1]


def n_steps(T: float, dt: float) -> int:
    if dt <= 0 or T <= 0:
        raise ValueError("T and dt must be positive")
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * max(T, 1.0):
        raise GridMismatch(f"T = {T} is not an integer multiple of dt = {dt}")
    return K


def stored_indices(K: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    idx = np.arange(0, K + 1, stride)
    if idx[-1] != K:
        idx = np.append(idx, K)
    return idx


def check_step(model, dt: float):
    bound = model.max_intensity() * dt
    if bound > MAX_JUMP_PROB:
        raise StepTooLarge(
            f"step-size guard: max jump intensity * dt = {bound:.4g} exceeds {MAX_JUMP_PROB}"
        )


def _repair(rho):
    """Symmetrise, clip eigenvalues below -1e-8 and renormalise, in place."""
    w, V = np.linalg.eigh(rho)
    if w[0] < -INVALID_EIG:
        raise StateInvalid(f"eigenvalue {w[0]:.3g} below {-INVALID_EIG} after step")
    w = np.where(w < -REPAIR_CLIP, 0.0, w)
    new = (V * w) @ V.conj().T
    new = 0.5 * (new + new.conj().T)
    rho[...] = new / np.trace(new).real


def _sme_arrays(model: GeneralModel):
    C = np.ascontiguousarray(np.array(model.C, dtype=complex).reshape(len(model.C), model.dim, model.dim))
    CdC = np.ascontiguousarray(np.conj(np.transpose(C, (0, 2, 1))) @ C)
    return np.ascontiguousarray(model.H), C, CdC


def _run_sme(model, rho, dW, u, dt, stride, q_out, states_out, dy_out, jump_out, backend=None):
    kern = kernels.get(backend)
    H, C, CdC = _sme_arrays(model)
    K = max(dW.shape[0], u.shape[0])
    repairs = 0
    k = 0
    while k < K:
        k = kern.sme_steps(rho, H, C, CdC, model.n_diffusive, dW, u, dt, stride, k,
                           q_out, states_out, dy_out, jump_out)
        if k < K:
            _repair(rho)
            repairs += 1
            row = kernels.python.store_row(k + 1, K, stride)
            if row >= 0:
                q_out[row] = np.diag(rho).real
                if states_out is not None:
                    states_out[row] = rho
            k += 1
    return repairs


def step_sme(model, rho, dt: float, noise: NoiseIncrements, backend=None) -> np.ndarray:
    """One Euler step of the SME with thinned jumps; returns the new state."""
    model = _as_general(model)
    check_step(model, dt)
    rho = np.array(rho, dtype=complex, order="C")
    _check_dims(model, rho)
    dW = np.ascontiguousarray(np.asarray(noise.dW, dtype=float).reshape(1, model.n_diffusive))
    u = np.ascontiguousarray(np.asarray(noise.u, dtype=float).reshape(1, model.n_counting))
    q_out = np.empty((2, model.dim))
    _run_sme(model, rho, dW, u, dt, 1, q_out, None,
             np.empty((1, model.n_diffusive)), np.empty((1, model.n_counting), dtype=np.uint8), backend)
    return rho


def simulate_trajectory(model, rho0, T: float, dt: float, seed: int, index: int = 0,
                        stride: int = 1, store_states: bool = False, backend=None) -> Trajectory:
    """Integrate the full stochastic master equation under the physical measure."""
    model = _as_general(model)
    check_step(model, dt)
    rho = np.array(check_density(rho0), dtype=complex, order="C")
    _check_dims(model, rho)
    K = n_steps(T, dt)
    dW, u = physical_noise(model.n_diffusive, model.n_counting, K, dt, seed, index)
    idx = stored_indices(K, stride)
    q_out = np.empty((idx.size, model.dim))
    q_out[0] = np.diag(rho).real
    states = None
    if store_states:
        states = np.empty((idx.size, model.dim, model.dim), dtype=complex)
        states[0] = rho
    dy = np.empty((K, model.n_diffusive))
    jumps = np.zeros((K, model.n_counting), dtype=np.uint8)
    repairs = _run_sme(model, rho, dW, u, dt, stride, q_out, states, dy, jumps, backend)
    if repairs:
        log.debug("trajectory %d: %d eigenvalue repairs", index, repairs)
    return Trajectory(idx * dt, q_out, MeasurementRecord(dt, dy, jumps), seed, index,
                      states, 0, repairs, stride)


def _pop_arrays(model: QndModel):
    return np.ascontiguousarray(model.r), np.ascontiguousarray(model.theta)


def simulate_q_diag(model: QndModel, q0, T: float, dt: float, seed: int, index: int = 0,
                    stride: int = 1, backend=None) -> Trajectory:
    """Integrate only the populations of a diagonal model (off-diagonals decouple)."""
    check_step(model, dt)
    q0 = check_simplex(q0)
    if q0.size != model.dim:
        raise ValueError(f"q0 has {q0.size} entries, model dim is {model.dim}")
    K = n_steps(T, dt)
    dW, u = physical_noise(model.n_diffusive, model.n_counting, K, dt, seed, index)
    return _qdiag_from_noise(model, q0, dW, u, dt, stride, seed, index, backend)


def _qdiag_from_noise(model, q0, dW, u, dt, stride, seed=0, index=0, backend=None):
    r, theta = _pop_arrays(model)
    K = max(dW.shape[0], u.shape[0])
    idx = stored_indices(K, stride)
    q_out = np.empty((idx.size, model.dim))
    dy = np.empty((K, model.n_diffusive))
    jumps = np.zeros((K, model.n_counting), dtype=np.uint8)
    clips = kernels.get(backend).qdiag_simulate(
        np.asarray(q0, dtype=float), r, theta, dW, u, dt, stride, q_out, dy, jumps
    )
    return Trajectory(idx * dt, q_out, MeasurementRecord(dt, dy, jumps), seed, index,
                      None, int(clips), 0, stride)


def recover_noise(model: QndModel, traj: Trajectory) -> np.ndarray:
    """Brownian increments ``dW`` behind a population trajectory stored at stride 1."""
    if traj.stride != 1:
        raise GridMismatch("noise recovery needs every step stored")
    rbar = traj.q[:-1] @ model.r.T
    return traj.record.dy - rbar * traj.record.dt
