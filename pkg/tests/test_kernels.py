import os
import subprocess
import sys

import numpy as np
import pytest

from qndtraj import kernels
from qndtraj.filter import filter_q_diag
from qndtraj.model import GeneralModel, QndModel, embed
from qndtraj.noise import physical_noise
from qndtraj.qdyn import _qdiag_from_noise, _run_sme, diagonal_state, stored_indices

needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")


def random_model(rng, d):
    p, m = rng.integers(0, 3), rng.integers(1, 3)
    diff = rng.normal(size=(p, d)) + 1j * rng.normal(size=(p, d))
    cnt = rng.uniform(0.2, 2, size=(m, d)) * rng.choice([-1, 1], size=(m, d))
    return QndModel.from_arrays(diffusive=diff, counting=cnt)


def test_backend_selection():
    assert kernels.get("python") is kernels.python
    assert kernels.get() is kernels.active
    with pytest.raises(ValueError):
        kernels.get("fortran")


def test_pure_python_env_flag():
    env = {**os.environ, "QNDTRAJ_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "import qndtraj; print(qndtraj.BACKEND)"],
                         capture_output=True, text=True, env=env)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_is_default():
    if not os.environ.get("QNDTRAJ_PURE_PYTHON"):
        assert kernels.BACKEND == "cython"


@pytest.mark.parametrize("stride", [1, 3, 7])
def test_store_row_convention(stride):
    K = 20
    idx = stored_indices(K, stride)
    rows = [kernels.python.store_row(j, K, stride) for j in range(K + 1)]
    stored = [j for j, r in enumerate(rows) if r >= 0]
    assert stored == list(idx)
    assert [rows[j] for j in stored] == list(range(idx.size))


@needs_compiled
def test_population_kernels_bit_identical():
    rng = np.random.default_rng(0)
    for trial in range(20):
        d = int(rng.integers(2, 5))
        m = random_model(rng, d)
        q0 = rng.dirichlet(np.ones(d))
        dW, u = physical_noise(m.n_diffusive, m.n_counting, 2000, 1e-3, trial, 0)
        a = _qdiag_from_noise(m, q0, dW, u, 1e-3, 3, backend="python")
        b = _qdiag_from_noise(m, q0, dW, u, 1e-3, 3, backend="cython")
        np.testing.assert_array_equal(a.q, b.q)
        np.testing.assert_array_equal(a.record.dy, b.record.dy)
        np.testing.assert_array_equal(a.record.jumps, b.record.jumps)
        assert a.clips == b.clips
        qt = rng.dirichlet(np.ones(d))
        fa = filter_q_diag(m, a.record, qt, 1e-3, 5, backend="python")
        fb = filter_q_diag(m, a.record, qt, 1e-3, 5, backend="cython")
        np.testing.assert_array_equal(fa.q, fb.q)


@needs_compiled
def test_sme_kernels_agree():
    rng = np.random.default_rng(1)
    for trial in range(5):
        d = int(rng.integers(2, 4))
        g = embed(random_model(rng, d))
        # an off-diagonal Hamiltonian so coherences matter
        g = GeneralModel(g.H + 0.3 * (np.eye(d, k=1) + np.eye(d, k=-1)), g.C, g.kinds)
        dW, u = physical_noise(g.n_diffusive, g.n_counting, 1000, 1e-3, trial, 0)
        q0 = rng.dirichlet(np.ones(d))
        outs = []
        for backend in ("python", "cython"):
            rho = np.array(diagonal_state(q0), complex)
            q_out = np.empty((1001, d))
            states = np.empty((1001, d, d), complex)
            dy = np.empty((1000, g.n_diffusive))
            jumps = np.zeros((1000, g.n_counting), np.uint8)
            _run_sme(g, rho, dW, u, 1e-3, 1, q_out, states, dy, jumps, backend)
            outs.append((q_out[1:], states[1:], dy, jumps))
        np.testing.assert_array_equal(outs[0][3], outs[1][3])
        np.testing.assert_allclose(outs[0][1], outs[1][1], atol=1e-12)
        np.testing.assert_allclose(outs[0][2], outs[1][2], atol=1e-12)
