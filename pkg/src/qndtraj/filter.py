"""Estimated populations driven only by the measurement record.

The filter never sees the hidden Brownian increments or the true
populations: it consumes the output increments ``dy`` and the count flags
of a :class:`~qndtraj.qdyn.MeasurementRecord`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .conditioned import fit_window, ols_slope
from .errors import DegenerateFilter, GridMismatch
from .model import QndModel
from .qdyn import Trajectory, check_simplex, stored_indices

COLLAPSE_THRESHOLD = 1 - 1e-6


@dataclass
class FilterSeries:
    times: np.ndarray
    q: np.ndarray
    clips: int = 0


@dataclass
class FilterRun:
    q0: np.ndarray
    q_tilde0: np.ndarray
    times: np.ndarray
    q_true: np.ndarray
    q_tilde: np.ndarray
    clips: int = 0

    @property
    def trace_distance(self) -> np.ndarray:
        return 0.5 * np.abs(self.q_true - self.q_tilde).sum(axis=1)

    def log_ratio(self, alpha: int, gamma: int) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.q_tilde[:, alpha]) - np.log(self.q_tilde[:, gamma])


def filter_q_diag(model: QndModel, record, q_tilde0, dt: float, stride: int = 1, backend=None) -> FilterSeries:
    """Integrate the estimated populations from ``record``.

    Uses the same Euler step, jump maps and clipping as the population
    integrator, so starting from the true initial populations reproduces
    the true path exactly.
    """
    if abs(record.dt - dt) > 1e-15 * max(dt, 1.0):
        raise GridMismatch(f"record step {record.dt} differs from dt = {dt}")
    q_tilde0 = check_simplex(q_tilde0)
    if q_tilde0.size != model.dim:
        raise ValueError(f"q_tilde0 has {q_tilde0.size} entries, model dim is {model.dim}")
    p, m = model.n_diffusive, model.n_counting
    if record.dy.shape[1] != p or record.jumps.shape[1] != m:
        raise GridMismatch("record channels do not match the model")
    K = record.n_steps
    dy = np.ascontiguousarray(record.dy, dtype=float).reshape(K, p)
    jumps = np.ascontiguousarray(record.jumps, dtype=np.uint8).reshape(K, m)
    idx = stored_indices(K, stride)
    out = np.empty((idx.size, model.dim))
    clips, bad_step, bad_channel = kernels.get(backend).qdiag_filter(
        q_tilde0, np.ascontiguousarray(model.r), np.ascontiguousarray(model.theta),
        dy, jumps, dt, stride, out,
    )
    if bad_step >= 0:
        raise DegenerateFilter(
            f"count on channel {bad_channel} at t = {(bad_step + 1) * dt:g} while the estimate gives it zero intensity"
        )
    return FilterSeries(idx * dt, out, int(clips))


def run_filter(model: QndModel, traj: Trajectory, q_tilde0, backend=None) -> FilterRun:
    """Filter the record of ``traj`` and pair the estimate with the true populations."""
    q0 = traj.q[0]
    q_tilde0 = check_simplex(q_tilde0)
    if np.any((q_tilde0 == 0) & (q0 > 0)):
        warnings.warn(
            "estimate assigns zero weight to a pointer the true state occupies; "
            "stability is not guaranteed",
            RuntimeWarning,
            stacklevel=2,
        )
    series = filter_q_diag(model, traj.record, q_tilde0, traj.record.dt, traj.stride, backend)
    return FilterRun(q0.copy(), q_tilde0, series.times, traj.q, series.q, series.clips)


def detect_limit(q_final, threshold: float = COLLAPSE_THRESHOLD):
    a = int(np.argmax(q_final))
    return a if q_final[a] >= threshold else None


def filter_log_ratio_slope(run: FilterRun, alpha: int, window=None, burn_in: float = 0.1) -> float:
    """Slope of ``log(q~_alpha / q~_limit)``, the limit being read off the filter's own final state."""
    ups = detect_limit(run.q_tilde[-1])
    if ups is None:
        raise ValueError("filter has not collapsed; cannot identify the limit pointer")
    if alpha == ups:
        return 0.0
    mask = fit_window(run.times, window, burn_in)
    y = run.log_ratio(alpha, ups)[mask]
    if np.any(np.isneginf(y)):
        return -np.inf
    return ols_slope(run.times[mask], y)
