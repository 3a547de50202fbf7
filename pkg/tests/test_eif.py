"""Influence-function recursion, indicators, inference and the remainder oracle."""
import itertools

import numpy as np
import pytest

from glmtp.eif import (EstimateResult, NuisanceSet, contrast, eif_variance_ci, eval_phi1,
                       indicator_D, phi, phi_matrix)
from glmtp.errors import NumericalOverflow, SampleMismatch
from glmtp.layout import build_layout, policy_arrays
from glmtp.oracle import (ExactRegressions, _history_tuples, brute_phi, conditional_phi_mean,
                          exact_eta, perturbed_eta, random_discrete_dgp, remainder_term,
                          sample_panel)
from glmtp.panel import Panel, assign_folds
from glmtp.policy import (identity, make_delay_absorbing, make_imv_delay, random_table_policy,
                          static)

from conftest import random_binary_panel


def nuisance_from_eta(panel, policy, eta, full=False):
    """Evaluate explicit nuisance functions on the stage cells of ``panel``."""
    lay = build_layout(policy, panel.supports, full)
    arr = policy_arrays(panel, policy, lay)
    tau, n = panel.tau, panel.n
    first = [s[0] for s in panel.supports]
    ratio, m_obs, q = [], [], []
    for k in range(1, tau + 1):
        st = lay.stage(k)
        H = [tuple(r) for r in _history_tuples(panel, k, False).tolist()]
        A = panel.A[:, k - 1]
        g = np.array([[eta.g(k, s, H[i]) for s in st.support] for i in range(n)])
        gA = np.array([eta.g(k, A[i], H[i]) for i in range(n)])
        ratio.append(g / gA[:, None])
        mo = np.empty((n, st.K_out))
        for c, cell in enumerate(st.cells_out.tolist()):
            s = list(first[:k])
            for u, v in zip(st.lags_out, cell):
                s[u - 1] = v
            for i in range(n):
                s[k - 1] = A[i] if k not in st.lags_out else s[k - 1]
                mo[i, c] = eta.m(k, tuple(s), A[i], H[i])
        m_obs.append(mo)
        qq = np.empty((n, st.K_in))
        for c, cell in enumerate(st.cells_in.tolist()):
            s = list(first[: k - 1])
            for u, v in zip(st.lags_in, cell):
                s[u - 1] = v
            for i in range(n):
                qq[i, c] = eta.q(k, tuple(s), A[i], H[i])
        q.append(qq)
    q.append(panel.Y[:, None].astype(float))
    return NuisanceSet(lay, arr, tuple(ratio), tuple(m_obs), tuple(q))


def _paths(panel):
    cols = []
    for t in range(panel.tau):
        cols += [panel.L[t][:, 0], panel.A[:, t]]
    return [tuple(r) for r in np.column_stack(cols).tolist()]


def test_indicator_D():
    panel = random_binary_panel(20, 3, 1)
    for i in range(5):
        for k in (1, 2, 3):
            # natural path = observed path: A_u = a_u trivially
            assert indicator_D(0, k, panel.A[i], panel, i, identity()) == 1  # [TRIVIAL]
    d1 = make_delay_absorbing(1)
    i = int(np.flatnonzero(panel.A[:, 1] == 1)[0])
    assert indicator_D(1, 2, (0, 1), panel, i, d1) == 0  # [TRIVIAL] A_2=1 but d_2=s_1=0


def test_indicator_count_matches_enumeration():
    panel = random_binary_panel(200, 3, 2)
    d1 = make_delay_absorbing(1)
    for s in itertools.product((0, 1), repeat=3):
        count = sum(indicator_D(0, 3, s, panel, i, d1) for i in range(panel.n))
        brute = sum(tuple(panel.A[i]) == (0, s[0], s[1]) for i in range(panel.n))
        assert count == brute  # [DERIVED] delay-by-one paths by hand


def test_aipw_reduction_tau1():
    rng = np.random.default_rng(3)
    n = 200
    panel = Panel(L=[rng.normal(size=(n, 1))], A=(rng.random((n, 1)) < 0.4).astype(float),
                  Y=rng.random(n), supports=[(0, 1)], y_bounds=(0, 1))
    pol = static(1)
    lay = build_layout(pol, panel.supports)
    arr = policy_arrays(panel, pol, lay)
    g1 = rng.uniform(0.1, 0.9, n)
    m_obs = rng.random(n)        # m(A, H)
    m1 = rng.random(n)           # m(1, H)
    g = np.column_stack([1 - g1, g1])
    gA = np.where(panel.A[:, 0] == 1, g1, 1 - g1)
    nuis = NuisanceSet(lay, arr, (g / gA[:, None],), (m_obs[:, None],),
                       (m1[:, None], panel.Y[:, None]))
    aipw = (panel.A[:, 0] == 1) / g1 * (panel.Y - m_obs) + m1
    # with A=1, m(A,H)=m_obs is the regression at the observed treatment
    np.testing.assert_allclose(phi_matrix(nuis, 0)[:, 0], aipw, atol=1e-12)  # [DERIVED] AIPW


@pytest.mark.parametrize("policy_kind", ["delay1", "delay2", "imv", "table"])
def test_footprint_phi_equals_full_path_phi(policy_kind):
    """[DERIVED] generic recursion on footprint cells vs literal path sums."""
    rng = np.random.default_rng(4)
    A_card = 3 if policy_kind == "imv" else 2
    dgp = random_discrete_dgp(3, rng, A_card=A_card)
    pol = {"delay1": make_delay_absorbing(1), "delay2": make_delay_absorbing(2),
           "imv": make_imv_delay(),
           "table": random_table_policy(3, dgp.A_supports, rng, dgp.L_supports)}[policy_kind]
    panel = sample_panel(dgp, 60, rng)
    lay = build_layout(pol, panel.supports)
    lags = [lay.lags(k + 1) for k in range(1, 4)]
    eta = perturbed_eta(dgp, pol, 11, lags=lags)
    nuis = nuisance_from_eta(panel, pol, eta)
    got = phi_matrix(nuis, 0)[:, 0]
    paths = _paths(panel)
    want = [brute_phi(0, (), p, y, eta, dgp.A_supports) for p, y in zip(paths, panel.Y)]
    np.testing.assert_allclose(got, want, atol=1e-12)
    full = nuisance_from_eta(panel, pol, eta, full=True)
    np.testing.assert_allclose(phi_matrix(full, 0)[:, 0], got, atol=1e-12)
    # interior stage: phi_{t+1}(s_t) at a specific natural path
    for i in range(5):
        s = (1.0, 0.0)
        assert abs(phi(2, s, i, nuis) - brute_phi(2, s, paths[i], panel.Y[i], eta,
                                                  dgp.A_supports)) < 1e-12


def test_ratio_factor_at_observed_is_one():
    panel = random_binary_panel(30, 2, 5)
    g = np.random.default_rng(0).uniform(0.1, 0.9, (30, 2))
    g = g / g.sum(axis=1, keepdims=True)
    gA = g[np.arange(30), panel.A[:, 0].astype(int)]
    r = g / gA[:, None]
    np.testing.assert_array_equal(r[np.arange(30), panel.A[:, 0].astype(int)], 1.0)  # [TRIVIAL]


def test_phi_mean_zero_at_truth():
    rng = np.random.default_rng(6)
    dgp = random_discrete_dgp(3, rng)
    pol = make_delay_absorbing(1)
    theta = ExactRegressions(dgp, pol).theta()
    assert abs(conditional_phi_mean(dgp, exact_eta(dgp, pol), 0, ()) - theta) < 1e-12  # [DERIVED]
    # cell-wise: E[phi_{t+1} | A_t, H_t] = m_t at the truth
    eta = exact_eta(dgp, pol)
    for h in dgp.histories(2, False):
        for a in dgp.A_supports[1]:
            for s in itertools.product((0.0, 1.0), repeat=1):
                s2 = s + (a,)
                got = conditional_phi_mean(dgp, eta, 2, s2, a, h)
                assert abs(got - eta.m(2, s2, a, h)) < 1e-12  # [DERIVED]


def test_remainder_special_cases():
    rng = np.random.default_rng(7)
    dgp = random_discrete_dgp(2, rng)
    pol = make_delay_absorbing(1)
    eta = exact_eta(dgp, pol)
    assert remainder_term(eta, eta, dgp, 0, ()) == 0.0  # [TRIVIAL] eta' = eta
    g_only = perturbed_eta(dgp, pol, 3, m_scale=0.0, g_scale=1.0)
    assert abs(remainder_term(g_only, eta, dgp, 0, ())) < 1e-15  # [PAPER] m' = m
    m_only = perturbed_eta(dgp, pol, 3, m_scale=0.2, g_scale=0.0)
    assert abs(remainder_term(m_only, eta, dgp, 0, ())) < 1e-15  # [PAPER] g' = g
    both = perturbed_eta(dgp, pol, 3, m_scale=0.2, g_scale=1.0)
    assert abs(remainder_term(both, eta, dgp, 0, ())) > 1e-4  # [DERIVED] product of errors


def test_overflow_cap():
    panel = random_binary_panel(10, 2, 8)
    pol = identity()
    lay = build_layout(pol, panel.supports)
    arr = policy_arrays(panel, pol, lay)
    big = np.full((10, 2), 1e5)
    nuis = NuisanceSet(lay, arr, (big, big), (np.zeros((10, 1)),) * 2,
                       (np.zeros((10, 1)),) * 2 + (panel.Y[:, None],), cap=1e8)
    with pytest.raises(NumericalOverflow):  # [TRIVIAL] 1e10 exceeds the cap
        phi_matrix(nuis, 0)


def test_variance_ci_examples():
    se, lo, hi = eif_variance_ci(np.full(10, 0.3), 0.3)
    assert se == 0 and lo == hi == 0.3  # [TRIVIAL] constant values
    se, lo, hi = eif_variance_ci(np.array([0, 1, 0, 1.0]), 0.5)
    assert abs(se - np.sqrt(1 / 3) / 2) < 1e-15  # [DERIVED] unbiased variance 1/3
    assert abs(lo - (0.5 - 1.959963984540054 * np.sqrt(1 / 3) / 2)) < 1e-12  # [DERIVED]
    narrow = eif_variance_ci(np.array([0, 1, 0, 1.0]), 0.5, alpha=0.32)
    assert narrow.ci_hi - narrow.ci_lo < hi - lo  # [TRIVIAL]


def _result(phi_vals, folds, name="x"):
    th = float(np.mean(phi_vals))
    se, lo, hi = eif_variance_ci(phi_vals, th)
    return EstimateResult(name, th, se, (lo, hi), 0.05, 0.0, phi_vals, {}, folds, 0)


def test_contrast_properties():
    rng = np.random.default_rng(9)
    folds = assign_folds(50, 2, 0)
    a, b = _result(rng.random(50), folds, "a"), _result(rng.random(50), folds, "b")
    self_c = contrast(a, a)
    assert self_c.theta == 0 and self_c.se == 0  # [TRIVIAL]
    ab, ba = contrast(a, b), contrast(b, a)
    assert ab.theta == -ba.theta and ab.se == ba.se  # [TRIVIAL] antisymmetry
    assert 0 <= ab.p_value <= 1
    with pytest.raises(SampleMismatch):
        contrast(a, _result(rng.random(40), None))
    with pytest.raises(SampleMismatch):
        contrast(a, _result(rng.random(50), assign_folds(50, 2, 1)))


def test_eval_phi1_decomposition_sums():
    rng = np.random.default_rng(10)
    dgp = random_discrete_dgp(3, rng)
    pol = make_delay_absorbing(1)
    panel = sample_panel(dgp, 40, rng)
    lay = build_layout(pol, panel.supports)
    eta = perturbed_eta(dgp, pol, 2, lags=[lay.lags(k + 1) for k in range(1, 4)])
    ev = eval_phi1(nuisance_from_eta(panel, pol, eta))
    total = sum(ev.components.values())
    np.testing.assert_allclose(total, ev.values, atol=1e-10)  # [TRIVIAL]
