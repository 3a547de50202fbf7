"""GLM fitting, prediction, cross-fitting and propensity estimation."""
import numpy as np
import pytest

from glmtp.errors import ArityMismatch, EmptyRiskSet, MalformedInput
from glmtp.learners import (DegenerateRule, FeatureMap, HistorySpec, LearnerSpec,
                            PropensitySet, crossfit_regress, expit, fit_glm,
                            fit_propensity_sequence, predict)
from glmtp.panel import FoldAssignment, assign_folds
from glmtp.sim import draw_panel_fig3

from conftest import random_binary_panel

GAUSS = LearnerSpec(family="gaussian")
BINOM = LearnerSpec(family="binomial")


def test_exact_linear_fit():
    x = np.linspace(-2, 3, 25)
    fit = fit_glm(x[:, None], 2 * x, spec=LearnerSpec(ridge=0.0))
    np.testing.assert_allclose(fit.coefficients, [0.0, 2.0], atol=1e-10)  # [TRIVIAL]
    np.testing.assert_allclose(predict(fit, x[:, None]) - 2 * x, 0.0, atol=1e-10)  # [TRIVIAL]


def test_binomial_balanced_intercept():
    y = np.array([0, 1] * 20, dtype=float)
    fit = fit_glm(np.zeros((40, 0)), y, spec=LearnerSpec(family="binomial", features="intercept"))
    assert abs(fit.coefficients[0]) < 1e-10  # [TRIVIAL] symmetry
    np.testing.assert_allclose(predict(fit, np.zeros((3, 0))), 0.5, atol=1e-10)
    assert fit.converged


def test_intercept_only_gaussian_predicts_mean():
    y = np.random.default_rng(0).normal(size=30)
    fit = fit_glm(np.zeros((30, 0)), y, spec=LearnerSpec(features="intercept"))
    np.testing.assert_allclose(predict(fit, np.zeros((5, 0))), y.mean(), atol=1e-12)  # [TRIVIAL]


def test_logit_monotone_and_in_open_interval():
    rng = np.random.default_rng(1)
    x = rng.normal(size=500)
    y = (rng.random(500) < expit(0.3 + 1.2 * x)).astype(float)
    fit = fit_glm(x[:, None], y, spec=BINOM)
    grid = np.linspace(-3, 3, 13)[:, None]
    p = predict(fit, grid)
    assert np.all(np.diff(p) > 0)  # [TRIVIAL] positive slope -> increasing
    assert np.all((p > 0) & (p < 1))  # [TRIVIAL]


def test_irls_deviance_nonincreasing():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 3))
    y = (rng.random(400) < expit(X @ [1.0, -2.0, 0.5])).astype(float)
    fit = fit_glm(X, y, spec=LearnerSpec(family="binomial", features="interactions"))
    tr = np.array(fit.deviance_trace)
    assert np.all(np.diff(tr) <= 1e-12 * np.abs(tr[:-1]) + 1e-12)  # [TRIVIAL] IRLS invariant


def test_weighted_fit_equals_replication():
    rng = np.random.default_rng(3)
    x = rng.normal(size=60)
    y = (rng.random(60) < expit(x)).astype(float)
    w = rng.integers(1, 4, size=60).astype(float)
    a = fit_glm(x[:, None], y, w, spec=BINOM)
    idx = np.repeat(np.arange(60), w.astype(int))
    b = fit_glm(x[idx, None], y[idx], spec=BINOM)
    np.testing.assert_allclose(a.coefficients, b.coefficients, atol=1e-7)  # [DERIVED]


def test_survival_propensity_refit_coefficients():
    rng = np.random.default_rng(4)
    n = 1_000_000
    L1 = 0.5 * rng.normal(size=n) + rng.normal(size=n)
    A = (rng.random(n) < expit(-1.5 + 0.3 * L1)).astype(float)
    fit = fit_glm(L1[:, None], A, spec=BINOM)
    np.testing.assert_allclose(fit.coefficients, [-1.5, 0.3], atol=0.02)  # [DERIVED] refit


def test_input_errors():
    fit = fit_glm(np.ones((5, 2)) * np.arange(5)[:, None], np.arange(5.0), spec=GAUSS)
    with pytest.raises(ArityMismatch):  # [TRIVIAL]
        predict(fit, np.ones((3, 3)))
    with pytest.raises(MalformedInput):  # [TRIVIAL] binomial response outside [0,1]
        fit_glm(np.ones((3, 1)), [0, 2, 1], spec=BINOM)
    with pytest.raises(MalformedInput):
        LearnerSpec(ridge=-1)


def test_feature_maps():
    X = np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 1.0]])
    assert FeatureMap((None, None, None), "interactions").transform(X).shape[1] == 1 + 3 + 3
    assert FeatureMap((None, None, None), "saturated").transform(X).shape[1] == 8  # [TRIVIAL]
    D = FeatureMap((None, (0.0, 1.0, 2.0)), "main").transform([[1.0, 2.0]])
    np.testing.assert_array_equal(D, [[1.0, 1.0, 0.0, 1.0]])  # [TRIVIAL] dummy coding


def test_crossfit_identical_folds_match_pooled():
    rng = np.random.default_rng(5)
    x = rng.normal(size=50)
    y = 1 + x + rng.normal(size=50)
    X = np.concatenate([x, x])[:, None]
    Y = np.concatenate([y, y])
    folds = FoldAssignment(2, np.repeat([0, 1], 50), 0)
    cf = crossfit_regress(X, Y, folds, GAUSS)
    pooled = fit_glm(X, Y, spec=GAUSS)
    for m in cf.models:
        np.testing.assert_allclose(m.coefficients, pooled.coefficients, atol=1e-10)  # [TRIVIAL]


def test_crossfit_membership_audit():
    rng = np.random.default_rng(6)
    n = 90
    subject = np.repeat(np.arange(n), 2)
    X = rng.normal(size=(2 * n, 2))
    y = rng.normal(size=2 * n)
    folds = assign_folds(n, 3, 1)
    cf = crossfit_regress(X, y, folds, GAUSS, subject=subject)
    for i in range(n):
        assert i not in cf.train_subjects[folds.membership[i]]  # [TRIVIAL] definition


def test_crossfit_oof_mse_close_to_in_fold():
    rng = np.random.default_rng(7)
    n = 10_000
    X = rng.normal(size=(n, 2))
    y = X @ [0.5, -1.0] + rng.normal(size=n)
    folds = assign_folds(n, 2, 3)
    cf = crossfit_regress(X, y, folds, GAUSS)
    oof = np.mean((y - cf.predict_oof(X, np.arange(n))) ** 2)
    ins = np.mean((y - predict(fit_glm(X, y, spec=GAUSS), X)) ** 2)
    assert abs(oof / ins - 1) < 0.05  # [DERIVED] correctly specified GLM


def test_propensity_absorbing_and_normalized():
    panel = draw_panel_fig3(3000, 8)
    props = fit_propensity_sequence(panel, assign_folds(panel.n, 2, 0), BINOM,
                                    [DegenerateRule()], HistorySpec(window=0))
    for t in range(2, 6):
        rows = (panel.A[:, t - 2] == 1) & panel.at_risk[:, t - 1]
        assert rows.any()
        np.testing.assert_array_equal(props.probs[t - 1][rows, 1], 1.0)  # [PAPER] absorbing
    for t in range(1, 6):
        np.testing.assert_allclose(props.probs[t - 1].sum(axis=1), 1.0, atol=1e-10)  # [TRIVIAL]
        r = props.ratio(t)
        obs = np.searchsorted(panel.supports[t - 1], panel.A[:, t - 1])
        np.testing.assert_array_equal(r[np.arange(panel.n), obs], 1.0)  # [TRIVIAL] s = A


def test_propensity_refit_at_large_n():
    panel = draw_panel_fig3(1_000_000, 9)
    props = fit_propensity_sequence(panel, None, BINOM, [DegenerateRule()],
                                    HistorySpec(window=0))
    fit = props.models[0][0][0]  # t=1, single fold, first continuation model: P(A_1 = 0)
    np.testing.assert_allclose(-fit.coefficients, [-1.5, 0.3], atol=0.02)  # [DERIVED]


def test_propensity_three_levels_and_empty_risk_set(small_panel):
    rng = np.random.default_rng(10)
    n = 600
    A = rng.integers(0, 3, size=(n, 2)).astype(float)
    from glmtp.panel import Panel
    p = Panel(L=[rng.normal(size=(n, 1))] * 2, A=A, Y=rng.random(n),
              supports=[(0, 1, 2)] * 2, y_bounds=(0, 1))
    props = fit_propensity_sequence(p, None, BINOM)
    np.testing.assert_allclose(props.probs[0].mean(axis=0), np.bincount(
        A[:, 0].astype(int)) / n, atol=0.02)  # [DERIVED] main-term fit reproduces margins
    dead = random_binary_panel(10, 2, 1)
    dead = type(dead)(L=dead.L, A=dead.A, Y=dead.Y, supports=dead.supports,
                      y_bounds=dead.y_bounds, at_risk=np.zeros((10, 2), bool))
    with pytest.raises(EmptyRiskSet):  # [TRIVIAL] nobody at risk
        fit_propensity_sequence(dead, None, BINOM)


def test_propensity_set_rejects_unnormalized():
    with pytest.raises(MalformedInput):  # [TRIVIAL]
        PropensitySet((np.array([[0.5, 0.6]]),), (np.zeros(1, bool),), ((0.0, 1.0),),
                      np.zeros((1, 1)))
