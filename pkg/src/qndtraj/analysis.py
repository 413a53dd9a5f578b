"""Hypothesis tests over trajectory ensembles.

All reductions use correctly rounded summation (:func:`math.fsum`) so every
statistic is exactly invariant under reordering of the ensemble.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .conditioned import LogPopulations, hitting_time_cdf, log_ratio_slope
from .model import QndModel, rate_table

COLLAPSE_THRESHOLD = 1 - 1e-6
RATE_TOLERANCE = 0.10


class TooManyUnresolved(ValueError):
    pass


class NoExtinctionChannels(ValueError):
    pass


class EmptyCell(ValueError):
    pass


def fsum_mean(x, axis=0) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    out = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])]) / n
    return out.reshape(x.shape[1:])


def fsum_std(x, axis=0, ddof=1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=float), axis, 0)
    n = x.shape[0]
    dev = (x - fsum_mean(x)) ** 2
    flat = dev.reshape(n, -1)
    var = np.array([math.fsum(flat[:, j]) for j in range(flat.shape[1])]) / (n - ddof)
    return np.sqrt(var).reshape(x.shape[1:])


def detect_collapse(q, threshold: float = COLLAPSE_THRESHOLD):
    """Pointer index whose final population reaches ``threshold``, else ``None``."""
    q = np.asarray(q, dtype=float)
    final = q[-1] if q.ndim == 2 else q
    a = int(np.argmax(final))
    return a if final[a] >= threshold else None


def values_at(times, series, checkpoints) -> np.ndarray:
    times = np.asarray(times)
    rows = []
    for t in checkpoints:
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"checkpoint t = {t} is not a stored grid time")
        rows.append(series[k])
    return np.array(rows)


@dataclass
class EnsembleSummary:
    n: int
    collapse_counts: np.ndarray
    unresolved: int
    checkpoints: np.ndarray = field(default_factory=lambda: np.zeros(0))
    means: np.ndarray | None = None
    se: np.ndarray | None = None
    clips: int = 0
    repairs: int = 0

    @property
    def collapse_frequencies(self) -> np.ndarray:
        return self.collapse_counts / self.n


def summarize(trajectories, checkpoints=(), threshold: float = COLLAPSE_THRESHOLD) -> EnsembleSummary:
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("empty ensemble")
    d = trajectories[0].q.shape[1]
    counts = np.zeros(d, dtype=np.int64)
    unresolved = 0
    for tr in trajectories:
        a = detect_collapse(tr.q, threshold)
        if a is None:
            unresolved += 1
        else:
            counts[a] += 1
    cps = np.asarray(checkpoints, dtype=float)
    means = se = None
    if cps.size:
        vals = np.array([values_at(tr.times, tr.q, cps) for tr in trajectories])
        means = fsum_mean(vals)
        se = fsum_std(vals) / math.sqrt(len(trajectories))
    return EnsembleSummary(
        len(trajectories), counts, unresolved, cps, means, se,
        sum(tr.clips for tr in trajectories), sum(tr.repairs for tr in trajectories),
    )


@dataclass
class CheckResult:
    name: str
    statistic: float
    pvalue: float | None
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "name": self.name,
            "statistic": _json_float(self.statistic),
            "pvalue": _json_float(self.pvalue),
            "passed": bool(self.passed),
            **{k: _jsonable(v) for k, v in self.details.items()},
        }


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (float, np.floating)):
        return _json_float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _pool_cells(observed, expected, min_expected=5.0):
    """Merge the smallest-expectation cells until each has expectation >= ``min_expected``."""
    cells = sorted(zip(expected, observed), key=lambda c: c[0])
    cells = [[e, o] for e, o in cells]
    while len(cells) > 1 and cells[0][0] < min_expected:
        e, o = cells.pop(0)
        cells[0][0] += e
        cells[0][1] += o
        cells.sort(key=lambda c: c[0])
    return np.array([c[1] for c in cells], float), np.array([c[0] for c in cells], float)


def born_test(summary: EnsembleSummary, q0, alpha: float = 0.01, max_unresolved: float = 0.01) -> CheckResult:
    """Pearson chi-square of collapse counts against the initial populations."""
    q0 = np.asarray(q0, dtype=float)
    if summary.unresolved >= max_unresolved * summary.n:
        raise TooManyUnresolved(f"{summary.unresolved} of {summary.n} trajectories unresolved")
    n_res = summary.n - summary.unresolved
    obs, exp = _pool_cells(summary.collapse_counts, n_res * q0)
    dof = len(obs) - 1
    mask = exp > 0
    stat = float(np.sum((obs[mask] - exp[mask]) ** 2 / exp[mask]))
    if np.any(obs[~mask] > 0):
        stat = math.inf
    pvalue = float(stats.chi2.sf(stat, dof)) if dof > 0 else (1.0 if stat == 0 else 0.0)
    return CheckResult(
        "born", stat, pvalue, pvalue > alpha,
        {"dof": dof, "counts": summary.collapse_counts, "unresolved": summary.unresolved, "n": summary.n, "q0": q0},
    )


def martingale_test(samples, q0, checkpoints=None, z_max: float = 3.0) -> CheckResult:
    """z-scores of ensemble means against the initial populations.

    ``samples`` has shape ``(N, n_checkpoints, d)``.
    """
    samples = np.asarray(samples, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    n = samples.shape[0]
    if n < 100:
        raise ValueError(f"martingale test needs N >= 100, got {n}")
    mean = fsum_mean(samples)
    se = fsum_std(samples) / math.sqrt(n)
    diff = mean - q0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf * np.sign(diff)))
    worst = float(np.max(np.abs(z)))
    return CheckResult(
        "martingale", worst, None, worst <= z_max,
        {"z": z, "mean": mean, "se": se, "checkpoints": checkpoints if checkpoints is not None else [], "n": n},
    )


def censored_ks(samples, cdf, horizon: float):
    """KS distance between the empirical law of ``samples`` and ``cdf`` on ``[0, horizon]``.

    Samples beyond the horizon (including ``inf``) are censored: they only
    count through the empirical mass above ``horizon``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    seen = x[x <= horizon]
    F = np.asarray(cdf(seen), dtype=float)
    i = np.arange(1, seen.size + 1)
    d_plus = np.max(i / n - F) if seen.size else 0.0
    d_minus = np.max(F - (i - 1) / n) if seen.size else 0.0
    d_end = abs(seen.size / n - float(cdf(horizon)))
    return float(max(d_plus, d_minus, d_end, 0.0))


def hitting_time_test(model: QndModel, q0, alpha: int, extinction_times, horizon: float,
                      level: float = 0.01, z_max: float = 3.0) -> CheckResult:
    """Compare extinction times of ``q_alpha`` with the exponential-mixture law.

    Never-extinct paths (``inf``) are censored at ``horizon``; their fraction
    is tested separately against ``1 - CDF(horizon)`` with a binomial z-score.
    """
    theta = model.theta
    if theta.size == 0 or not np.any(theta[:, alpha] == 0.0):
        raise NoExtinctionChannels(f"no counting channel has theta(i|{alpha}) = 0")
    times = np.asarray(extinction_times, dtype=float)
    n = times.size

    def cdf(t):
        return hitting_time_cdf(model, q0, alpha, t)

    D = censored_ks(times, cdf, horizon)
    pvalue = float(stats.kstwo(n).sf(D))
    p_never = 1.0 - float(cdf(horizon))
    never = int(np.sum(times > horizon))
    sd = math.sqrt(n * p_never * (1 - p_never)) if 0 < p_never < 1 else 0.0
    z = (never - n * p_never) / sd if sd > 0 else (0.0 if never == n * p_never else math.inf)
    return CheckResult(
        "hitting_time", D, pvalue, pvalue > level and abs(z) <= z_max,
        {
            "alpha": alpha, "n": n, "never_extinct": never, "never_fraction": never / n,
            "expected_never_fraction": p_never, "never_z": z,
            "cdf_at_infinity": float(cdf(np.inf)),
        },
    )


@dataclass
class RateCell:
    alpha: int
    gamma: int
    n: int
    slope: float
    se: float
    target: float
    rel_error: float

    @property
    def flagged(self) -> bool:
        return not (self.rel_error <= RATE_TOLERANCE)


def _cell(alpha, gamma, slopes, target):
    slopes = np.asarray(slopes, dtype=float)
    n = slopes.size
    mean = float(fsum_mean(slopes)) if n else math.nan
    se = float(fsum_std(slopes)) / math.sqrt(n) if n > 1 else math.nan
    if target == 0:
        rel = abs(mean)
    else:
        rel = abs(mean - target) / abs(target)
    return RateCell(alpha, gamma, n, mean, se, target, rel)


def rate_report(model: QndModel, paths, mode: str = "detected", q0=None,
                burn_in: float = 0.1, min_n_for_empty: int = 500) -> list[RateCell]:
    """Aggregate log-ratio slopes per (alpha, gamma) cell against ``-Lambda[alpha, gamma]``.

    ``mode="detected"``: ``paths`` are population trajectories (anything with
    ``times`` and ``q``); the limit pointer is read off each final state and
    unresolved paths are skipped.  ``mode="direct"``: ``paths`` are
    ``(gamma, LogPopulations)`` pairs from conditioned sampling.
    """
    table = rate_table(model, conditioning=())
    groups: dict[int, list[LogPopulations]] = {}
    if mode == "detected":
        for tr in paths:
            g = detect_collapse(tr.q)
            if g is None:
                continue
            with np.errstate(divide="ignore"):
                groups.setdefault(g, []).append(LogPopulations(tr.times, np.log(tr.q)))
        n_total = len(paths)
        if q0 is not None and n_total >= min_n_for_empty:
            for g in np.flatnonzero(np.asarray(q0) > 0):
                if int(g) not in groups:
                    raise EmptyCell(f"no trajectory collapsed onto pointer {g} out of {n_total}")
    elif mode == "direct":
        for g, lp in paths:
            groups.setdefault(int(g), []).append(lp)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    cells = []
    for g in sorted(groups):
        for a in range(model.dim):
            if q0 is not None and q0[a] == 0:
                continue
            target = -table.Lambda[a, g]
            if not math.isfinite(target):
                continue
            slopes = [log_ratio_slope(lp, a, g, burn_in=burn_in) for lp in groups[g]]
            slopes = [s for s in slopes if math.isfinite(s)]
            cells.append(_cell(a, g, slopes, target))
    return cells


def girsanov_ks(conditioned_sample, physical_subsample, level: float = 0.01) -> CheckResult:
    res = stats.ks_2samp(conditioned_sample, physical_subsample)
    return CheckResult(
        "girsanov", float(res.statistic), float(res.pvalue), res.pvalue > level,
        {"n_conditioned": len(conditioned_sample), "n_physical": len(physical_subsample)},
    )
