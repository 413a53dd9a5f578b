import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qndtraj.model import (
    Channel,
    ChannelKind,
    DegenerateRate,
    DiagonalityError,
    GeneralModel,
    ModelError,
    PointerBasis,
    QndModel,
    check_nd_assumption,
    check_nondemolition,
    compare_diffusive_counting_rates,
    diagonalize,
    embed,
    rate_table,
)

D, C = ChannelKind.DIFFUSIVE, ChannelKind.COUNTING
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)

# 1 - 4 + ln 4, evaluated by hand: ln 4 = 1.3862943611198906
COUNTING_41 = 1.6137056388801094


def test_basis_validation():
    with pytest.raises(ModelError):
        PointerBasis(1)
    with pytest.raises(ModelError):
        PointerBasis(2, ("a", "a"))
    with pytest.raises(ModelError):
        PointerBasis(3, ("a", "b"))
    assert PointerBasis(3).labels == ("0", "1", "2")


def test_channel_derived_quantities():
    ch = Channel(D, [1 + 2j, -0.5])
    np.testing.assert_array_equal(ch.r, [2.0, -1.0])
    np.testing.assert_array_equal(ch.theta, [5.0, 0.25])


def test_channels_reordered_diffusive_first():
    m = QndModel.from_arrays(counting=[[2, 1]], diffusive=[[1, -1], [0.5, 0]])
    assert [ch.kind for ch in m.channels] == [D, D, C]
    assert m.r.shape == (2, 2) and m.theta.shape == (1, 2)
    g = GeneralModel(np.zeros((2, 2)), (SIGMA_MINUS, np.eye(2)), (C, D))
    assert g.kinds == (D, C)
    np.testing.assert_array_equal(g.C[1], SIGMA_MINUS)


def test_channel_length_mismatch():
    with pytest.raises(ModelError):
        QndModel(PointerBasis(2), [0, 0], (Channel(D, [1, 2, 3]),))


def test_non_hermitian_hamiltonian_rejected():
    with pytest.raises(ModelError):
        GeneralModel(np.array([[0, 1], [0, 0]]), (), ())


def test_diagonalize_reads_off_diagonal_input():
    g = GeneralModel(np.diag([1.0, -1.0]), (np.diag([2.0, 0.0]),), (C,))
    m = diagonalize(g, PointerBasis(2))
    np.testing.assert_array_equal(m.epsilon, [1, -1])
    np.testing.assert_array_equal(m.channels[0].c, [2, 0])
    np.testing.assert_array_equal(m.channels[0].r, [4, 0])
    np.testing.assert_array_equal(m.theta[0], [4, 0])


def test_diagonalize_rejects_raising_operator():
    g = GeneralModel(np.zeros((2, 2)), (SIGMA_MINUS,), (C,))
    with pytest.raises(DiagonalityError) as err:
        diagonalize(g)
    assert err.value.entries == [("C_0", 0, 1)]


def test_diagonalize_rejects_offdiagonal_hamiltonian():
    g = GeneralModel(np.array([[0, 0.5], [0.5, 0]]), (np.diag([1.0, -1.0]),), (D,))
    with pytest.raises(DiagonalityError) as err:
        diagonalize(g)
    assert ("H", 0, 1) in err.value.entries


def test_embed_roundtrip():
    m = QndModel.from_arrays(epsilon=[0.3, -0.1, 2], diffusive=[[1, 0, -1]], counting=[[1j, 2, 0.5]])
    back = diagonalize(embed(m))
    assert back.model_hash() == m.model_hash()


def test_nondemolition_diagonal_model():
    m = QndModel.from_arrays(diffusive=[[1, -1]], counting=[[2, 1]])
    rep = check_nondemolition(embed(m))
    assert rep.ok and rep.violations == [] and rep.population_leaks == []


def test_nondemolition_sigma_minus():
    g = GeneralModel(np.zeros((2, 2)), (SIGMA_MINUS,), (C,))
    rep = check_nondemolition(g)
    assert not rep.ok
    assert rep.violations == [("C_0", 0, 1)]
    # L(|1><1|)_00 = 1
    assert rep.population_leaks == [(1, 0, 1.0)]


def test_nondemolition_offdiagonal_hamiltonian():
    g = GeneralModel(np.array([[0, 0.5], [0.5, 0]]), (np.diag([1.0, -1.0]),), (D,))
    rep = check_nondemolition(g)
    assert not rep.ok and rep.violations == [("H", 0, 1)]
    # (|0> + i|1>)/sqrt(2): the commutator moves population, L_00 = 0.5
    from qndtraj.qdyn import lindblad

    psi = np.array([1, 1j]) / np.sqrt(2)
    L = lindblad(g, np.outer(psi, psi.conj()))
    assert L[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_nd_assumption_examples():
    assert check_nd_assumption(QndModel.from_arrays(diffusive=[[1, -1]])) == (True, [])
    assert check_nd_assumption(QndModel.from_arrays(counting=[[1, -1]])) == (False, [(0, 1)])
    m3 = QndModel.from_arrays(diffusive=[[1, 1, 0]], counting=[[1, 2, 1]])
    assert check_nd_assumption(m3) == (True, [])
    m3bad = QndModel.from_arrays(diffusive=[[1, 1, 0]], counting=[[1, 1, 2]])
    assert check_nd_assumption(m3bad) == (False, [(0, 1)])


def test_rate_table_diffusive_qubit():
    t = rate_table(QndModel.from_arrays(diffusive=[[1, -1]]))
    np.testing.assert_array_equal(t.Lambda, [[0, 8], [8, 0]])
    np.testing.assert_array_equal(t.lambda_hit, 0)


def test_rate_table_counting_qubit():
    t = rate_table(QndModel.from_arrays(counting=[[2, 1]]))
    assert t.Lambda[0, 1] == pytest.approx(COUNTING_41, rel=1e-14)
    # theta_g = 4, x = 1/4: 4 (1/4 - 1 + ln 4)
    assert t.Lambda[1, 0] == pytest.approx(4 * (0.25 - 1 + math.log(4)), rel=1e-14)
    assert t.min_rate == pytest.approx(COUNTING_41)


def test_rate_table_additive_mixed():
    t = rate_table(QndModel.from_arrays(diffusive=[[1, -1]], counting=[[2, 1]]))
    assert t.Lambda[0, 1] == pytest.approx(8 + COUNTING_41, rel=1e-14)


def test_rate_table_zero_intensity():
    m = QndModel.from_arrays(counting=[[0, math.sqrt(2)]])
    with pytest.raises(DegenerateRate):
        rate_table(m)
    t = rate_table(m, conditioning=[1])
    assert t.Lambda[0, 1] == math.inf
    assert t.lambda_hit[0, 1] == pytest.approx(2.0)
    assert t.lambda_hit[0, 0] == 0 and t.lambda_hit[1, 0] == 0
    assert math.isnan(rate_table(m, conditioning=()).Lambda[1, 0])


@st.composite
def qnd_models(draw):
    d = draw(st.integers(2, 4))
    real = st.floats(-3, 3, allow_nan=False)
    p = draw(st.integers(0, 2))
    m = draw(st.integers(0 if p else 1, 2))
    diff = [[complex(draw(real), draw(real)) for _ in range(d)] for _ in range(p)]
    # counting eigenvalues bounded away from zero
    cnt = [[draw(st.floats(0.1, 3)) * (1 if draw(st.booleans()) else -1) for _ in range(d)] for _ in range(m)]
    return QndModel.from_arrays(diffusive=diff, counting=cnt)


@settings(max_examples=200, deadline=None)
@given(qnd_models())
def test_rate_table_properties(model):
    t = rate_table(model)
    assert np.all(np.diag(t.Lambda) == 0)
    assert np.all(t.Lambda >= 0)
    assert np.all(t.lambda_hit == 0)


@settings(max_examples=100, deadline=None)
@given(qnd_models())
def test_diagonal_models_are_nondemolition(model):
    assert check_nondemolition(embed(model)).ok


def test_compare_rates_examples():
    assert compare_diffusive_counting_rates(1, 1) == (0.0, 0.0, True)
    rd, rc, ok = compare_diffusive_counting_rates(2, 1)
    assert rd == 1 and rc == pytest.approx(COUNTING_41, rel=1e-14) and ok
    rd, rc, ok = compare_diffusive_counting_rates(-1, 1)
    assert (rd, rc, ok) == (4, 0.0, False)
    with pytest.raises(ValueError):
        compare_diffusive_counting_rates(0, 1)


@settings(max_examples=500, deadline=None)
@given(st.floats(1e-3, 10), st.floats(1e-3, 10), st.booleans())
def test_compare_rates_same_sign(a, b, neg):
    s = -1 if neg else 1
    assert compare_diffusive_counting_rates(s * a, s * b)[2]


def test_model_hash_stable_and_sensitive():
    a = QndModel.from_arrays(diffusive=[[1, -1]])
    b = QndModel.from_arrays(diffusive=[[1, -1]])
    c = QndModel.from_arrays(diffusive=[[1, -1.0000001]])
    assert a.model_hash() == b.model_hash() != c.model_hash()


def test_max_intensity():
    m = QndModel.from_arrays(diffusive=[[10, 0]], counting=[[2, 1], [0.5j, 1]])
    assert m.max_intensity() == 4.0
    assert embed(m).max_intensity() == pytest.approx(4.0)
