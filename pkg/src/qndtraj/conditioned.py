"""Trajectories conditioned on the collapse outcome, in log space.

Under the tilted measure for pointer ``gamma`` the innovation processes
become a standard Brownian motion and homogeneous Poisson processes with
rates ``theta(i|gamma)``; the population ratios are then explicit
functionals of those drivers.  Everything is kept as log-populations since
the ratios span hundreds of orders of magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import DegenerateConditioning, GridMismatch, InsufficientWindow
from .model import QndModel, rate_table
from .noise import CONDITIONED, channel_streams
from .qdyn import check_simplex, n_steps, stored_indices

MIN_WINDOW_POINTS = 10


@dataclass
class LogPopulations:
    times: np.ndarray
    logq: np.ndarray  # (rows, d); -inf encodes q = 0

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.logq)

    def normalization_error(self) -> float:
        return float(np.max(np.abs(logsumexp(self.logq, axis=1))))


@dataclass
class ConditionedNoise:
    """Drivers under the tilted measure.

    ``X`` is the Brownian path at the stored grid times, ``jump_times`` the
    exact Poisson arrival times per counting channel and ``counts`` those
    arrivals counted on the stored grid (an arrival at ``tau`` is counted
    from the first grid time ``>= tau``).
    """

    gamma: int
    times: np.ndarray
    X: np.ndarray
    jump_times: list
    counts: np.ndarray

    def first_jump_time(self, channels) -> float:
        firsts = [self.jump_times[j][0] for j in channels if self.jump_times[j].size]
        return min(firsts) if firsts else np.inf


@dataclass
class ConditionedPath:
    noise: ConditionedNoise
    logq: LogPopulations


def _log_ratio_paths(model: QndModel, gamma: int, q0, times, X, counts):
    """``log(q_a / q_gamma)`` for every pointer on the given grid."""
    r, theta = model.r, model.theta
    with np.errstate(divide="ignore"):
        base = np.log(q0) - np.log(q0[gamma])
    out = np.broadcast_to(base, (times.size, model.dim)).copy()
    for i in range(r.shape[0]):
        gap = r[i] - r[i, gamma]
        out += np.outer(X[:, i], gap) - 0.5 * np.outer(times, gap**2)
    for j in range(theta.shape[0]):
        tg = theta[j, gamma]
        for a in range(model.dim):
            ta = theta[j, a]
            if ta == 0.0:
                # finite-time extinction at the first count
                out[:, a] = np.where(counts[:, j] > 0, -np.inf, out[:, a] + tg * times)
            else:
                out[:, a] += counts[:, j] * np.log(ta / tg) - (ta - tg) * times
    return out


def simulate_under_q_gamma(model: QndModel, gamma: int, q0, T: float, dt: float, seed: int,
                           index: int = 0, stride: int = 1) -> ConditionedPath:
    """Sample a trajectory distributed as the physical one given collapse onto ``gamma``."""
    q0 = check_simplex(q0)
    if not 0 <= gamma < model.dim:
        raise ValueError(f"gamma = {gamma} is not a pointer index")
    if q0[gamma] <= 0:
        raise ValueError(f"q0[{gamma}] must be positive to condition on it")
    theta = model.theta
    if theta.size and np.any(theta[:, gamma] == 0.0):
        raise DegenerateConditioning(f"theta(i|{gamma}) = 0 on some counting channel")
    K = n_steps(T, dt)
    idx = stored_indices(K, stride)
    times = idx * dt
    p, m = model.n_diffusive, model.n_counting
    streams = channel_streams(seed, index, p + m, CONDITIONED)
    X = np.zeros((idx.size, p))
    for i in range(p):
        path = np.concatenate(([0.0], np.cumsum(streams[i].standard_normal(K) * np.sqrt(dt))))
        X[:, i] = path[idx]
    jump_times, counts = [], np.zeros((idx.size, m), dtype=np.int64)
    for j in range(m):
        rate = theta[j, gamma]
        arrivals = []
        t = streams[p + j].exponential(1.0 / rate)
        while t <= T:
            arrivals.append(t)
            t += streams[p + j].exponential(1.0 / rate)
        arrivals = np.array(arrivals)
        jump_times.append(arrivals)
        # snap to the grid: counted from ceil(tau/dt)
        steps = np.ceil(arrivals / dt - 1e-12).astype(np.int64)
        counts[:, j] = np.searchsorted(np.sort(steps), idx, side="right")
    ratios = _log_ratio_paths(model, gamma, q0, times, X, counts)
    logq = ratios - logsumexp(ratios, axis=1, keepdims=True)
    noise = ConditionedNoise(gamma, times, X, jump_times, counts)
    return ConditionedPath(noise, LogPopulations(times, logq))


def doleans_log_q(model: QndModel, q0, dW, jumps, dt: float, stride: int = 1, backend=None) -> LogPopulations:
    """Evaluate the stochastic-exponential solution for the populations.

    ``dW`` holds the Brownian increments ``(K, p)`` and ``jumps`` the count
    flags ``(K, m)`` on the same grid; the averages inside the exponent are
    taken from the normalised populations at the left grid point.
    """
    q0 = check_simplex(q0)
    dW = np.asarray(dW, dtype=float)
    jumps = np.asarray(jumps, dtype=np.uint8)
    K = dW.shape[0] if model.n_diffusive else jumps.shape[0]
    dW = np.ascontiguousarray(dW.reshape(K, model.n_diffusive))
    jumps = np.ascontiguousarray(jumps.reshape(K, model.n_counting))
    if model.n_diffusive and model.n_counting and dW.shape[0] != jumps.shape[0]:
        raise GridMismatch("Brownian and counting paths have different lengths")
    idx = stored_indices(K, stride)
    out = np.empty((idx.size, model.dim))
    with np.errstate(divide="ignore"):
        logq0 = np.log(q0)
    logq0 = logq0 - logsumexp(logq0)
    kernels.get(backend).doleans_logq(
        logq0, np.ascontiguousarray(model.r), np.ascontiguousarray(model.theta),
        dW, jumps, dt, stride, out,
    )
    return LogPopulations(idx * dt, out)


def ols_slope(t, y) -> float:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    tc = t - t.mean()
    return float(np.dot(tc, y - y.mean()) / np.dot(tc, tc))


def fit_window(times, window=None, burn_in: float = 0.1):
    times = np.asarray(times)
    if window is None:
        window = (burn_in * times[-1], times[-1])
    t0, t1 = window
    mask = (times >= t0 - 1e-12) & (times <= t1 + 1e-12)
    if mask.sum() < MIN_WINDOW_POINTS:
        raise InsufficientWindow(f"only {int(mask.sum())} grid points in window {window}")
    return mask


def log_ratio_slope(logq: LogPopulations, alpha: int, gamma: int, window=None, burn_in: float = 0.1) -> float:
    """Least-squares slope of ``log q_alpha - log q_gamma`` over the fit window.

    The default window discards the first 10% of the horizon.  Returns
    ``-inf`` if ``q_alpha`` is extinct inside the window.
    """
    mask = fit_window(logq.times, window, burn_in)
    if alpha == gamma:
        return 0.0
    lg = logq.logq[mask, gamma]
    if not np.all(np.isfinite(lg)):
        raise ValueError(f"q_{gamma} vanishes inside the fit window")
    la = logq.logq[mask, alpha]
    if np.any(np.isneginf(la)):
        return -np.inf
    return ols_slope(logq.times[mask], la - lg)


def hitting_time_cdf(model: QndModel, q0, alpha: int, t):
    """Probability that ``q_alpha`` has been extinguished by time ``t``.

    A mixture of exponentials weighted by the initial populations; the mass
    of pointers ``beta`` with zero extinction rate stays at infinity.
    """
    q0 = np.asarray(q0, dtype=float)
    t = np.asarray(t, dtype=float)
    theta = model.theta
    if theta.size == 0 or not np.any(theta[:, alpha] == 0.0):
        return np.zeros_like(t) if t.ndim else 0.0
    lam = rate_table(model, conditioning=()).lambda_hit[alpha]
    tt = t[..., None]
    with np.errstate(invalid="ignore"):
        surv = np.where(lam == 0.0, 1.0, np.exp(-lam * tt))
    out = 1.0 - np.sum(q0 * surv, axis=-1)
    return out if t.ndim else float(out)
