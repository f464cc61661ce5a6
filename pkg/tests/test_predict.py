import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import TableModel, quadrature_oracle, random_table_model
from pemsurv.ped import CutPoints
from pemsurv.predict import (
    beyond_followup,
    cif_curves,
    predict_cif,
    predict_survival,
    survival_curve,
)


def test_constant_hazard_example():
    m = TableModel(CutPoints([0.0, 1.0, 2.0]), np.ones((2, 1)))
    assert survival_curve(m, np.zeros(0))(1.5)[0] == pytest.approx(np.exp(-1.5), abs=1e-15)


def test_zero_hazard():
    m = TableModel(CutPoints([0.0, 1.0, 2.0]), np.zeros((2, 2)))
    assert np.all(predict_survival(m, np.zeros((1, 0)), [0.5, 2.0, 9.0]) == 1.0)
    assert np.all(predict_cif(m, np.zeros((1, 0)), [0.5, 2.0, 9.0]) == 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_against_quadrature(seed):
    rng = np.random.default_rng(seed)
    m = random_table_model(rng)
    times = rng.uniform(0, m.cutpoints.max_time * 1.2, 5)
    S = predict_survival(m, np.zeros((1, 0)), times)[0]
    F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
    for i, t in enumerate(times):
        s_ref, f_ref = quadrature_oracle(m, t)
        assert S[i] == pytest.approx(s_ref, abs=1e-10)
        assert np.max(np.abs(F[:, i] - f_ref)) < 1e-8


@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 4))
def test_conservation(seed, K):
    rng = np.random.default_rng(seed)
    m = random_table_model(rng, K)
    times = rng.uniform(0, m.cutpoints.max_time * 1.5, 100)
    S = predict_survival(m, np.zeros((1, 0)), times)[0]
    F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
    assert np.max(np.abs(S + F.sum(axis=0) - 1.0)) < 1e-10


def test_conservation_with_zero_total_hazard_interval():
    m = TableModel(CutPoints([0.0, 1.0, 2.0, 3.0]), np.array([[0.5, 0.2], [0.0, 0.0], [1.0, 0.3]]))
    times = np.linspace(0, 4, 41)
    S = predict_survival(m, np.zeros((1, 0)), times)[0]
    F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
    assert np.max(np.abs(S + F.sum(axis=0) - 1.0)) < 1e-12
    # nothing happens in (1, 2]
    assert np.all(F[:, 10:21] == F[:, 10:11])


def test_symmetric_causes_split_incidence():
    m = TableModel(CutPoints([0.0, 1.0, 3.0]), np.array([[0.4, 0.4], [1.1, 1.1]]))
    times = np.linspace(0, 3, 13)
    S = predict_survival(m, np.zeros((1, 0)), times)[0]
    F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
    assert np.allclose(F[0], (1 - S) / 2, atol=1e-14)
    assert np.allclose(F[1], (1 - S) / 2, atol=1e-14)


def test_single_active_cause():
    m = TableModel(CutPoints([0.0, 1.0, 3.0]), np.array([[0.4, 0.0], [1.1, 0.0]]))
    times = np.linspace(0, 3, 13)
    S = predict_survival(m, np.zeros((1, 0)), times)[0]
    F = predict_cif(m, np.zeros((1, 0)), times)[:, 0, :]
    assert np.allclose(F[0], 1 - S, atol=1e-14)
    assert np.all(F[1] == 0)


@given(seed=st.integers(0, 2**32 - 1))
def test_monotone_curves(seed):
    rng = np.random.default_rng(seed)
    m = random_table_model(rng, K=3)
    times = np.sort(rng.uniform(0, m.cutpoints.max_time * 1.2, 60))
    curves = cif_curves(m, np.zeros(0))
    S, F = curves.survival(times), curves(times)
    assert S[0] <= 1 and np.all(np.diff(S) <= 0) and np.all(S > 0)
    assert np.all(np.diff(F, axis=1) >= -1e-15)
    assert np.all(curves(np.array([0.0])) == 0)


@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.05, 0.95))
def test_refinement_invariance(seed, frac):
    rng = np.random.default_rng(seed)
    m = random_table_model(rng, K=2)
    J = m.cutpoints.n_intervals
    j = int(rng.integers(0, J))
    kappa = m.cutpoints.kappa
    new = kappa[j] + frac * (kappa[j + 1] - kappa[j])
    fine = TableModel(CutPoints(np.sort(np.r_[kappa, new])), np.insert(m.table, j, m.table[j], axis=0))
    times = rng.uniform(0, kappa[-1] * 1.3, 50)
    x = np.zeros((1, 0))
    assert np.allclose(predict_survival(m, x, times), predict_survival(fine, x, times), rtol=0, atol=1e-13)
    assert np.allclose(predict_cif(m, x, times), predict_cif(fine, x, times), rtol=0, atol=1e-13)


def test_extrapolation_flag_and_last_hazard_carried():
    m = TableModel(CutPoints([0.0, 1.0, 2.0]), np.array([[0.5], [2.0]]))
    assert beyond_followup(m, [1.0, 2.0, 2.5]).tolist() == [False, False, True]
    c = survival_curve(m, np.zeros(0))
    assert c.beyond_followup([3.0]).tolist() == [True]
    assert c(3.0)[0] == pytest.approx(np.exp(-(0.5 + 2.0 + 2.0)))


def test_cause_specific_survival_curve():
    m = TableModel(CutPoints([0.0, 2.0]), np.array([[0.3, 0.7]]))
    assert survival_curve(m, np.zeros(0), cause=2)(1.0)[0] == pytest.approx(np.exp(-0.7))
    assert survival_curve(m, np.zeros(0))(1.0)[0] == pytest.approx(np.exp(-1.0))


def test_cif_needs_two_causes():
    m = TableModel(CutPoints([0.0, 2.0]), np.array([[0.3]]))
    with pytest.raises(ValueError, match="two causes"):
        cif_curves(m, np.zeros(0))


def test_predictions_do_not_depend_on_other_rows():
    rng = np.random.default_rng(0)
    m = random_table_model(rng, K=2, J=5)

    class PerSubject(TableModel):
        def interval_hazards(self, X):
            return self.table[None] * np.exp(np.asarray(X)[:, :1, None])

    ps = PerSubject(m.cutpoints, m.table)
    X = rng.normal(size=(3000, 1))
    times = np.linspace(0, 5, 7)
    F = predict_cif(ps, X, times)
    one = predict_cif(ps, X[1234:1235], times)
    assert np.array_equal(F[:, 1234:1235], one)
