import math

import numpy as np
import pytest

from qndtraj import kernels
from qndtraj.errors import GridMismatch, StepTooLarge
from qndtraj.model import ChannelKind, GeneralModel, QndModel, embed
from qndtraj.noise import physical_noise
from qndtraj.qdyn import (
    NoiseIncrements,
    check_density,
    diagonal_state,
    generators,
    lindblad,
    n_steps,
    pointer_state,
    simulate_q_diag,
    simulate_trajectory,
    step_sme,
    stored_indices,
)

D, C = ChannelKind.DIFFUSIVE, ChannelKind.COUNTING
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
BACKENDS = ["python"] + (["cython"] if kernels.compiled is not None else [])


def dense_generators(H, Cs, rho):
    """Naive entrywise evaluation used as an independent oracle."""
    d = rho.shape[0]
    out = []
    for Cm in Cs:
        Cd = Cm.conj().T
        J = np.zeros((d, d), complex)
        for a in range(d):
            for b in range(d):
                J[a, b] = sum(Cm[a, k] * rho[k, l] * Cd[l, b] for k in range(d) for l in range(d))
        v = sum(J[a, a] for a in range(d)).real
        mean = sum(((Cm + Cd) @ rho)[a, a] for a in range(d)).real
        Hm = Cm @ rho + rho @ Cd - mean * rho
        out.append((J, v, Hm))
    return out


def random_density(rng, d):
    A = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real


def test_lindblad_diagonal_model_on_diagonal_state():
    m = QndModel.from_arrays(epsilon=[1, -2, 0.5], diffusive=[[1, 2j, -1]], counting=[[0.5, 1, 2]])
    L = lindblad(m, diagonal_state([0.2, 0.5, 0.3]))
    assert np.max(np.abs(L)) == 0


def test_lindblad_commutator_only():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    H = A + A.conj().T
    rho = random_density(rng, 3)
    L = lindblad(GeneralModel(H, (), ()), rho)
    np.testing.assert_allclose(L, -1j * (H @ rho - rho @ H), atol=1e-14)


def test_lindblad_sigma_minus_decay():
    g = GeneralModel(np.zeros((2, 2)), (SIGMA_MINUS,), (C,))
    L = lindblad(g, pointer_state(2, 1))
    np.testing.assert_array_equal(L, np.diag([1.0, -1.0]))


def test_generators_diagonal_intensity():
    m = QndModel.from_arrays(counting=[[2, 1j, 0.5]])
    q = np.array([0.2, 0.5, 0.3])
    gen = generators(m, diagonal_state(q))
    assert gen.v[0] == pytest.approx(4 * 0.2 + 1 * 0.5 + 0.25 * 0.3, rel=1e-15)


def test_generators_identity_channel():
    rng = np.random.default_rng(2)
    rho = random_density(rng, 2)
    gen = generators(GeneralModel(np.zeros((2, 2)), (np.eye(2),), (C,)), rho)
    np.testing.assert_allclose(gen.J[0], rho, atol=1e-15)
    assert gen.v[0] == pytest.approx(1.0)
    np.testing.assert_allclose(gen.H[0], 0, atol=1e-15)


def test_generators_match_dense_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = 2
        Cs = tuple(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)) for _ in range(2))
        rho = random_density(rng, d)
        gen = generators(GeneralModel(np.zeros((d, d)), Cs, (D, C)), rho)
        for i, (J, v, Hm) in enumerate(dense_generators(np.zeros((d, d)), Cs, rho)):
            np.testing.assert_allclose(gen.J[i], J, atol=1e-13)
            assert gen.v[i] == pytest.approx(v, rel=1e-13)
            np.testing.assert_allclose(gen.H[i], Hm, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_step_pointer_state_unchanged(backend):
    m = QndModel.from_arrays(epsilon=[1, 0], diffusive=[[1, -1]], counting=[[2, 1]])
    rho = pointer_state(2, 1)
    out = step_sme(m, rho, 1e-3, NoiseIncrements([0.05], [0.9]), backend)
    np.testing.assert_allclose(out, rho, atol=1e-15)


@pytest.mark.parametrize("backend", BACKENDS)
def test_step_jump_factor(backend):
    m = QndModel.from_arrays(counting=[[2, 1]])
    q = np.array([0.3, 0.7])
    dt = 1e-3
    # u = 0 forces a jump; the compensator acts before the jump map
    out = step_sme(m, diagonal_state(q), dt, NoiseIncrements([], [0.0]), backend)
    theta = np.array([4.0, 1.0])
    vbar = theta @ q
    cont = q - (theta * q - vbar * q) * dt
    expected = theta * cont / (theta @ cont)
    np.testing.assert_allclose(np.diag(out).real, expected, rtol=1e-13)


def test_step_maximally_mixed_fixed_point():
    m = QndModel.from_arrays(diffusive=[[1, -1]])
    rho = np.eye(2) / 2
    np.testing.assert_array_equal(step_sme(m, rho, 1e-3, NoiseIncrements([0.0], [])), rho)


def test_step_guard():
    m = QndModel.from_arrays(counting=[[2, 1]])
    with pytest.raises(StepTooLarge):
        step_sme(m, np.eye(2) / 2, 0.05, NoiseIncrements([], [0.5]))


def test_grid_helpers():
    assert n_steps(10, 1e-3) == 10000
    with pytest.raises(GridMismatch):
        n_steps(1.0005, 1e-3)
    np.testing.assert_array_equal(stored_indices(10, 3), [0, 3, 6, 9, 10])
    np.testing.assert_array_equal(stored_indices(9, 3), [0, 3, 6, 9])


def test_check_density():
    with pytest.raises(ValueError):
        check_density(np.diag([0.6, 0.6]))
    with pytest.raises(ValueError):
        check_density(np.array([[0.5, 1], [0, 0.5]]))


MIXED = QndModel.from_arrays(epsilon=[0.3, -0.3], diffusive=[[1, -1]], counting=[[2, 1]])
MODEL3 = QndModel.from_arrays(diffusive=[[1, 0.2j, -1]], counting=[[0, 1, 1.5], [1, 1, 0.5]])


@pytest.mark.parametrize("model", [MIXED, MODEL3])
def test_pointer_start_stays_put(model):
    for a in range(model.dim):
        tr = simulate_trajectory(model, pointer_state(model.dim, a), 10, 1e-3, seed=5)
        target = np.eye(model.dim)[a]
        assert np.max(np.abs(tr.q - target)) <= 1e-12
        qd = simulate_q_diag(model, target, 10, 1e-3, seed=5)
        assert np.max(np.abs(qd.q - target)) <= 1e-12


def test_simulate_deterministic():
    a = simulate_trajectory(MIXED, np.eye(2) / 2, 2, 1e-3, seed=11, index=4, store_states=True)
    b = simulate_trajectory(MIXED, np.eye(2) / 2, 2, 1e-3, seed=11, index=4, store_states=True)
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.record.dy, b.record.dy)
    np.testing.assert_array_equal(a.record.jumps, b.record.jumps)
    c = simulate_trajectory(MIXED, np.eye(2) / 2, 2, 1e-3, seed=11, index=5)
    assert not np.array_equal(a.q, c.q)


@pytest.mark.parametrize("model", [MIXED, MODEL3])
def test_sme_diagonal_matches_population_integrator(model):
    q0 = np.full(model.dim, 1 / model.dim)
    for idx in range(5):
        full = simulate_trajectory(model, diagonal_state(q0), 10, 1e-3, seed=7, index=idx)
        pop = simulate_q_diag(model, q0, 10, 1e-3, seed=7, index=idx)
        assert np.max(np.abs(full.q - pop.q)) <= 1e-8
        np.testing.assert_array_equal(full.record.jumps, pop.record.jumps)


@pytest.mark.skipif(kernels.compiled is None, reason="compiled kernels not built")
def test_backends_agree():
    q0 = np.array([0.2, 0.3, 0.5])
    a = simulate_q_diag(MODEL3, q0, 5, 1e-3, seed=3, index=2, stride=7, backend="python")
    b = simulate_q_diag(MODEL3, q0, 5, 1e-3, seed=3, index=2, stride=7, backend="cython")
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.record.dy, b.record.dy)
    np.testing.assert_array_equal(a.record.jumps, b.record.jumps)
    g = embed(MODEL3)
    a = simulate_trajectory(g, diagonal_state(q0), 1, 1e-3, seed=3, backend="python")
    b = simulate_trajectory(g, diagonal_state(q0), 1, 1e-3, seed=3, backend="cython")
    np.testing.assert_allclose(a.q, b.q, atol=1e-13)


def test_stride_subsamples_same_path():
    full = simulate_q_diag(MIXED, [0.4, 0.6], 1, 1e-3, seed=2)
    sub = simulate_q_diag(MIXED, [0.4, 0.6], 1, 1e-3, seed=2, stride=30)
    np.testing.assert_array_equal(sub.q, full.q[stored_indices(1000, 30)])
    np.testing.assert_array_equal(sub.times, stored_indices(1000, 30) * 1e-3)


def test_extinction_is_sticky():
    m = QndModel.from_arrays(counting=[[0, math.sqrt(2)]])
    for idx in range(20):
        tr = simulate_q_diag(m, [0.5, 0.5], 5, 1e-3, seed=1, index=idx)
        k = tr.record.first_jump_step([0])
        if k is None:
            assert np.all(tr.q[:, 0] > 0)
        else:
            assert np.all(tr.q[k:, 0] == 0.0) and np.all(tr.q[:k, 0] > 0)
            assert np.all(tr.q[k:, 1] == 1.0)


def test_simplex_invariant():
    for idx in range(10):
        tr = simulate_q_diag(MODEL3, [0.2, 0.3, 0.5], 5, 1e-3, seed=9, index=idx)
        assert np.max(np.abs(tr.q.sum(axis=1) - 1)) <= 1e-8
        assert tr.q.min() >= -1e-10 and tr.q.max() <= 1 + 1e-10


def test_record_accessors():
    tr = simulate_q_diag(MIXED, [0.5, 0.5], 1, 1e-3, seed=4)
    rec = tr.record
    assert rec.n_steps == 1000 and rec.T == pytest.approx(1)
    y = rec.y()
    assert y[0, 0] == 0 and y.shape == (1001, 1)
    times = rec.jump_times()[0]
    assert np.all(np.diff(times) > 0) and (times.size == 0 or times[-1] <= 1 + 1e-12)
    assert rec.counts()[-1, 0] == times.size


def test_physical_noise_statistics():
    dW, u = physical_noise(1, 1, 200000, 1e-3, 0, 0)
    assert abs(dW.mean()) < 4 * math.sqrt(1e-3 / 2e5)
    assert dW.var() == pytest.approx(1e-3, rel=0.02)
    assert 0 <= u.min() and u.max() < 1


def test_counting_intensity_matches_mean():
    # on a pointer state the count rate is theta(alpha); count over a long window
    m = QndModel.from_arrays(counting=[[2, 1]])
    tr = simulate_q_diag(m, [1, 0], 200, 1e-3, seed=8)
    n = tr.record.counts()[-1, 0]
    # Bernoulli(4 dt) per step, 2e5 steps
    mean = 4 * 200
    assert abs(n - mean) <= 4 * math.sqrt(mean)


def test_martingale_small_ensemble():
    q0 = np.array([0.3, 0.7])
    finals = np.array([simulate_q_diag(MIXED, q0, 1, 1e-3, seed=12, index=i).q[-1] for i in range(400)])
    se = finals.std(axis=0, ddof=1) / math.sqrt(400)
    assert np.all(np.abs(finals.mean(axis=0) - q0) <= 4 * se)


def test_sigma_minus_drains_excited_population():
    g = GeneralModel(np.zeros((2, 2)), (SIGMA_MINUS,), (C,))
    q1 = [simulate_trajectory(g, np.diag([0.3, 0.7]), 2, 1e-3, seed=1, index=i).q[-1, 1] for i in range(200)]
    # E rho_11(t) = 0.7 e^{-t}
    assert np.mean(q1) == pytest.approx(0.7 * math.exp(-2), abs=0.05)
