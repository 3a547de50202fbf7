"""Reference estimators for policies that read only the contemporaneous
natural value (no lagged natural treatments).

This path works on the observed panel directly: no augmented columns and a
single post-intervention density ratio per time,

    r_t = sum_s 1{A_t = d_t(s, H_t)} g_t(s | H_t) / g_t(A_t | H_t),

with ``phi_1 = q_1 + sum_k (prod_{u<=k} r_u)(q_{k+1} - m_k)``. It shares the
learners, folds and propensity fits with the augmented estimators and is
used to confirm that they reduce to it.
"""
from __future__ import annotations

import numpy as np

from .eif import EstimateResult, eif_variance_ci
from .errors import MalformedInput
from .gcomp import StageQuery, as_stage_learner, unit_transform
from .learners import HistorySpec, LearnerSpec, PropensitySet, expit, fit_propensity_sequence, logit
from .panel import FoldAssignment, Panel, assign_folds
from .policy import PolicySpec
from .tmle import BOUND_EPS, bound_outcome, inverse_bound_outcome, tilt_step


def _check(policy: PolicySpec, tau: int):
    if any(policy.footprint_at(t) for t in range(1, tau + 1)):
        raise MalformedInput("the reference path needs a policy without lagged natural values")


def _natural(panel: Panel, t: int, value) -> np.ndarray:
    nat = np.full((panel.n, t), np.nan)
    nat[:, t - 1] = value
    return nat


def assigned_values(panel: Panel, policy: PolicySpec) -> np.ndarray:
    """``d_t(A_t, H_t)`` for every subject and time; shape (n, tau)."""
    out = np.empty((panel.n, panel.tau))
    for t in range(1, panel.tau + 1):
        out[:, t - 1] = policy.evaluate(t, _natural(panel, t, panel.A[:, t - 1]),
                                        panel.A[:, : t - 1], list(panel.L[:t]),
                                        panel.supports[t - 1])
    return out


def density_ratios(panel: Panel, policy: PolicySpec, props: PropensitySet) -> np.ndarray:
    """``r_t`` for every subject and time; shape (n, tau)."""
    r = np.zeros((panel.n, panel.tau))
    for t in range(1, panel.tau + 1):
        ratio = props.ratio(t)
        for j, s in enumerate(panel.supports[t - 1]):
            d = policy.evaluate(t, _natural(panel, t, np.full(panel.n, s)), panel.A[:, : t - 1],
                                list(panel.L[:t]))
            r[:, t - 1] += (d == panel.A[:, t - 1]) * ratio[:, j]
    return r


def _query(panel, t, subjects, a):
    return StageQuery(panel, t, (), subjects, np.zeros((subjects.shape[0], 0)), a)


def _fit_predict(learner, panel, t, target, train, predict_rows, dvals, fill):
    """Fit on at-risk training rows; return ``(m(A_t), m(d_t))`` for ``predict_rows``."""
    fit_rows = np.flatnonzero(train & panel.at_risk[:, t - 1])
    model = learner.fit(_query(panel, t, fit_rows, panel.A[fit_rows, t - 1]), target[fit_rows])
    m = fill[predict_rows].copy()
    q = fill[predict_rows].copy()
    live = panel.at_risk[predict_rows, t - 1]
    rows = predict_rows[live]
    if rows.size:
        both = np.concatenate([rows, rows])
        a = np.concatenate([panel.A[rows, t - 1], dvals[rows, t - 1]])
        pred = np.asarray(model.predict(_query(panel, t, both, a)), dtype=float)
        m[live], q[live] = pred[: rows.size], pred[rows.size:]
    return m, q


def _phi(q1, m, q_next, cumr):
    """``q_1 + sum_k W_k (q_{k+1} - m_k)`` with ``W`` the cumulative ratios."""
    tau = m.shape[1]
    total = q1.copy()
    for k in range(tau):
        total = total + cumr[:, k] * (q_next[:, k] - m[:, k])
    return total


def _setup(panel, policy, outcome_spec, treatment_spec, J, seed, history, degenerate_rules,
           propensity, folds):
    if policy.tau is not None and policy.tau != panel.tau:
        raise MalformedInput("policy horizon does not match the panel")
    _check(policy, panel.tau)
    history = history or HistorySpec()
    learner = as_stage_learner(outcome_spec, history)
    if folds is None and J > 1:
        folds = assign_folds(panel.n, J, seed)
    if propensity is None:
        propensity = fit_propensity_sequence(panel, folds, treatment_spec or LearnerSpec(
            family="binomial"), degenerate_rules, history)
    return learner, folds, propensity


def lmtp_tmle(panel: Panel, policy: PolicySpec, outcome_spec=None,
              treatment_spec: LearnerSpec | None = None, J: int = 2, seed: int = 0,
              alpha: float = 0.05, history: HistorySpec | None = None, degenerate_rules=(),
              propensity: PropensitySet | None = None, folds: FoldAssignment | None = None,
              eps: float = BOUND_EPS, max_passes: int = 10) -> EstimateResult:
    """TMLE on the observed panel for a contemporaneous policy."""
    learner, folds, props = _setup(panel, policy, outcome_spec, treatment_spec, J, seed,
                                   history, degenerate_rules, propensity, folds)
    n, tau = panel.n, panel.tau
    dvals = assigned_values(panel, policy)
    cumr = np.cumprod(density_ratios(panel, policy, props), axis=1)
    y_star = bound_outcome(panel.Y, panel.y_bounds, eps)
    J_eff = 1 if folds is None else folds.J
    m = np.empty((n, tau))
    q = np.empty((n, tau))
    everyone = np.arange(n)
    for j in range(J_eff):
        train = np.ones(n, bool) if folds is None else folds.training_mask(j)
        mine = everyone if folds is None else folds.validation(j)
        target = y_star
        for t in range(tau, 0, -1):
            mt, qt = _fit_predict(learner, panel, t, target, train, everyone, dvals, y_star)
            m[mine, t - 1], q[mine, t - 1] = mt[mine], qt[mine]
            target = qt
    m = logit(np.clip(m, eps, 1 - eps))
    q = logit(np.clip(q, eps, 1 - eps))
    lo, hi = logit(eps), logit(1 - eps)
    scale = (panel.y_bounds[1] - panel.y_bounds[0]) / (1 - 2 * eps)
    resid = np.inf
    for _ in range(max_passes):
        for t in range(tau, 0, -1):
            live = panel.at_risk[:, t - 1]
            target = y_star if t == tau else expit(q[:, t])
            res = tilt_step(target[live], m[live, t - 1], cumr[live, t - 1],
                            bounds=(eps, 1 - eps))
            m[live, t - 1] = np.clip(m[live, t - 1] + res.epsilon_hat, lo, hi)
            q[live, t - 1] = np.clip(q[live, t - 1] + res.epsilon_hat, lo, hi)
        q_next = np.column_stack([expit(q[:, 1:]), y_star])
        phi = _phi(expit(q[:, 0]), expit(m), q_next, cumr)
        theta_star = float(np.mean(expit(q[:, 0])))
        resid = abs(float(np.mean(phi)) - theta_star) * scale
        if resid <= max(1e-8, 1e-6 * float(np.std(phi, ddof=1)) * scale):
            break
    theta = float(inverse_bound_outcome(theta_star, panel.y_bounds, eps))
    phi_orig = inverse_bound_outcome(phi, panel.y_bounds, eps)
    se, lo, hi = eif_variance_ci(phi_orig, theta, alpha)
    return EstimateResult("lmtp_tmle", theta, se, (lo, hi), alpha, resid, phi_orig, {}, folds,
                          seed)


def lmtp_sdr(panel: Panel, policy: PolicySpec, outcome_spec=None,
             treatment_spec: LearnerSpec | None = None, J: int = 2, seed: int = 0,
             alpha: float = 0.05, history: HistorySpec | None = None, degenerate_rules=(),
             propensity: PropensitySet | None = None, folds: FoldAssignment | None = None,
             pseudo_learner=None) -> EstimateResult:
    """Sequentially doubly robust estimate on the observed panel."""
    learner, folds, props = _setup(panel, policy, outcome_spec, treatment_spec, J, seed,
                                   history, degenerate_rules, propensity, folds)
    pseudo_learner = (learner.pseudo_outcome_learner() if pseudo_learner is None
                      else as_stage_learner(pseudo_learner, history or HistorySpec()))
    n, tau = panel.n, panel.tau
    dvals = assigned_values(panel, policy)
    r = density_ratios(panel, policy, props)
    to_unit, from_unit = unit_transform(panel)
    m = np.empty((n, tau))
    q = np.empty((n, tau + 1))
    q[:, tau] = panel.Y
    J_eff = 1 if folds is None else folds.J
    for t in range(tau, 0, -1):
        if t == tau:
            lrn, target = learner, panel.Y.astype(float)
        else:
            cum = np.cumprod(r[:, t:], axis=1)
            target = _phi(q[:, t], m[:, t:], q[:, t + 1:], cum)
            lrn = pseudo_learner
        unit = getattr(lrn, "unit_scale", False)
        fit_target = to_unit(target) if unit else target
        fill = to_unit(panel.Y) if unit else panel.Y.astype(float)
        for j in range(J_eff):
            train = np.ones(n, bool) if folds is None else folds.training_mask(j)
            mine = np.arange(n) if folds is None else folds.validation(j)
            mt, qt = _fit_predict(lrn, panel, t, fit_target, train, mine, dvals, fill)
            if unit:
                mt, qt = from_unit(mt), from_unit(qt)
            m[mine, t - 1], q[mine, t - 1] = mt, qt
    phi = _phi(q[:, 0], m, q[:, 1:], np.cumprod(r, axis=1))
    theta = float(np.mean(phi))
    se, lo, hi = eif_variance_ci(phi, theta, alpha)
    return EstimateResult("lmtp_sdr", theta, se, (lo, hi), alpha, 0.0, phi, {}, folds, seed)
