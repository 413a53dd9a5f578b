import math
import warnings

import numpy as np
import pytest

from qndtraj import kernels
from qndtraj.errors import DegenerateFilter, GridMismatch
from qndtraj.filter import detect_limit, filter_log_ratio_slope, filter_q_diag, run_filter
from qndtraj.model import QndModel
from qndtraj.qdyn import MeasurementRecord, simulate_q_diag

DIFF = QndModel.from_arrays(diffusive=[[1, -1]])
COUNT = QndModel.from_arrays(counting=[[2, 1]])
MIXED = QndModel.from_arrays(diffusive=[[1, -1]], counting=[[2, 1]])
HIT = QndModel.from_arrays(diffusive=[[0.5, -0.5]], counting=[[0, math.sqrt(2)]])
BACKENDS = ["python"] + (["cython"] if kernels.compiled is not None else [])


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("model", [DIFF, MIXED, HIT])
def test_identical_initialization_is_bit_exact(model, backend):
    q0 = [0.3, 0.7]
    for idx in range(5):
        tr = simulate_q_diag(model, q0, 5, 1e-3, seed=1, index=idx, stride=1, backend=backend)
        run = run_filter(model, tr, q0, backend=backend)
        np.testing.assert_array_equal(run.q_tilde, tr.q)


def test_identical_initialization_with_stride():
    tr = simulate_q_diag(MIXED, [0.3, 0.7], 2, 1e-3, seed=2, stride=7)
    run = run_filter(MIXED, tr, [0.3, 0.7])
    np.testing.assert_array_equal(run.q_tilde, tr.q)
    assert run.trace_distance.max() == 0


def test_mismatched_filter_forgets_initial_condition():
    close = 0
    for idx in range(100):
        tr = simulate_q_diag(DIFF, [0.3, 0.7], 5, 1e-3, seed=3, index=idx, stride=50)
        run = run_filter(DIFF, tr, [0.5, 0.5])
        close += run.trace_distance[-1] <= 0.01
    assert close >= 95


def test_filter_inherits_extinction():
    for idx in range(30):
        tr = simulate_q_diag(HIT, [0.5, 0.5], 3, 1e-3, seed=4, index=idx)
        k = tr.record.first_jump_step([0])
        run = run_filter(HIT, tr, [0.8, 0.2])
        if k is not None:
            assert np.all(run.q_tilde[k:, 0] == 0.0) and run.q_tilde[k - 1, 0] > 0


def test_filter_simplex():
    tr = simulate_q_diag(MIXED, [0.3, 0.7], 5, 1e-3, seed=5)
    run = run_filter(MIXED, tr, [0.9, 0.1])
    assert np.max(np.abs(run.q_tilde.sum(axis=1) - 1)) <= 1e-8
    assert run.q_tilde.min() >= 0 and run.q_tilde.max() <= 1


def test_degenerate_filter():
    # a count on a channel the estimate says is silent
    rec = MeasurementRecord(1e-3, np.zeros((10, 0)), np.eye(10, 1, k=-3, dtype=np.uint8))
    with pytest.raises(DegenerateFilter):
        filter_q_diag(QndModel.from_arrays(counting=[[0, 1]]), rec, [1.0, 0.0], 1e-3)


def test_grid_mismatch():
    tr = simulate_q_diag(DIFF, [0.5, 0.5], 1, 1e-3, seed=0)
    with pytest.raises(GridMismatch):
        filter_q_diag(DIFF, tr.record, [0.5, 0.5], 2e-3)
    with pytest.raises(GridMismatch):
        filter_q_diag(MIXED, tr.record, [0.5, 0.5], 1e-3)


def test_zero_weight_warning():
    tr = simulate_q_diag(DIFF, [0.5, 0.5], 1, 1e-3, seed=0)
    with pytest.warns(RuntimeWarning):
        run_filter(DIFF, tr, [1.0, 0.0])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_filter(DIFF, tr, [0.4, 0.6])


def test_detect_limit():
    assert detect_limit(np.array([0.0, 1.0])) == 1
    assert detect_limit(np.array([0.4, 0.6])) is None


def test_slope_at_limit_is_zero():
    tr = simulate_q_diag(DIFF, [0.3, 0.7], 5, 1e-3, seed=6, stride=10)
    run = run_filter(DIFF, tr, [0.5, 0.5])
    ups = detect_limit(run.q_tilde[-1])
    assert filter_log_ratio_slope(run, ups) == 0.0


def _filter_slopes(model, q_tilde0, T, n, seed, stride):
    slopes = []
    for idx in range(n):
        tr = simulate_q_diag(model, [0.5, 0.5], T, 1e-3, seed=seed, index=idx, stride=stride)
        run = run_filter(model, tr, q_tilde0)
        ups = detect_limit(run.q_tilde[-1])
        if ups == 1:
            slopes.append(filter_log_ratio_slope(run, 0))
    return np.array(slopes)


def test_filter_slope_diffusive():
    s = _filter_slopes(DIFF, [0.9, 0.1], 10, 200, 7, 10)
    assert s.size > 60
    assert s.mean() == pytest.approx(-8, rel=0.1)


def test_filter_slope_counting():
    s = _filter_slopes(COUNT, [0.9, 0.1], 25, 200, 8, 25)
    assert s.size > 60
    assert s.mean() == pytest.approx(-1.6137056388801094, rel=0.1)
