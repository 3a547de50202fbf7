"""Targeted minimum loss-based estimation.

The outcome is mapped to ``[eps, 1 - eps]``; cross-fitted initial
regressions are then tilted backward, stage by stage, with weighted
intercept-only logistic fluctuations whose weights are the cumulative
indicator-ratio products ``omega_t``. One backward pass solves the EIF
estimating equation; further passes are run only if it is not met.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .eif import EstimateResult, eif_variance_ci, eval_phi1, make_nuisance, state_weights
from .errors import AllZeroWeights, BoundsViolation, EIFNotSolved, MalformedInput
from .gcomp import as_stage_learner, crossfit_chain
from .layout import build_layout, policy_arrays
from .learners import (
    DegenerateRule,
    HistorySpec,
    LearnerSpec,
    PropensitySet,
    expit,
    fit_propensity_sequence,
    logit,
)
from .panel import FoldAssignment, Panel, assign_folds
from .policy import PolicySpec

BOUND_EPS = 1e-3


def bound_outcome(y, bounds, eps: float = BOUND_EPS) -> np.ndarray:
    """Map ``[a, b]`` affinely onto ``[eps, 1 - eps]``."""
    a, b = (float(v) for v in bounds)
    if not a < b:
        raise BoundsViolation("bounds require a < b")
    if not 0 < eps < 0.5:
        raise BoundsViolation("eps must lie in (0, 0.5)")
    y = np.asarray(y, dtype=float)
    if np.any(y < a) or np.any(y > b):
        raise BoundsViolation(f"values outside [{a:g}, {b:g}]")
    return (y - a) / (b - a) * (1 - 2 * eps) + eps


def inverse_bound_outcome(u, bounds, eps: float = BOUND_EPS) -> np.ndarray:
    a, b = (float(v) for v in bounds)
    return a + (np.asarray(u, dtype=float) - eps) / (1 - 2 * eps) * (b - a)


@dataclass(frozen=True)
class TiltResult:
    epsilon_hat: float
    score_residual: float
    iterations: int
    zero_weight: bool = False


def _score(eps, y, off, w, bounds=None):
    p = expit(off + eps)
    dp = p * (1 - p)
    if bounds is not None:
        held = (p < bounds[0]) | (p > bounds[1])
        p = np.clip(p, bounds[0], bounds[1])
        dp = np.where(held, 0.0, dp)
    return float(np.sum(w * (y - p))), float(np.sum(w * dp))


def tilt_step(pseudo_outcome, offset, weights, tol: float = 1e-10, max_iter: int = 200,
              on_zero: str = "flag", bounds=None) -> TiltResult:
    """Weighted intercept-only logistic regression with offset.

    Solves ``sum w (y - expit(offset + eps)) = 0`` by safeguarded Newton.
    With ``bounds = (lo, hi)`` the fitted values are held inside
    ``[lo, hi]`` and the score of that range-constrained submodel is solved
    instead; it is continuous and nonincreasing in ``eps``, so bisection
    takes over wherever Newton steps leave the bracket.
    """
    y = np.asarray(pseudo_outcome, dtype=float)
    off = np.asarray(offset, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise MalformedInput("tilting weights must be nonnegative")
    keep = w > 0
    if not keep.any():
        if on_zero == "raise":
            raise AllZeroWeights("tilting cell has zero total weight")
        return TiltResult(0.0, 0.0, 0, True)
    y, off, w = y[keep], off[keep], w[keep]
    scale = max(1.0, float(np.sum(w)))
    lo, hi = -np.inf, np.inf
    eps = 0.0
    s, h = _score(eps, y, off, w, bounds)
    it = 0
    for it in range(1, max_iter + 1):
        if abs(s) <= tol * scale:
            break
        if s > 0:
            lo = eps
        else:
            hi = eps
        step = s / h if h > 0 else np.sign(s)
        cand = eps + step
        if not (lo < cand < hi):
            if np.isfinite(lo) and np.isfinite(hi):
                cand = 0.5 * (lo + hi)
            else:
                cand = eps + np.clip(step, -5.0, 5.0) if np.isfinite(step) else eps + np.sign(s)
        if cand == eps:
            break
        eps = cand
        s, h = _score(eps, y, off, w, bounds)
    return TiltResult(float(eps), float(s), it, False)


@dataclass(frozen=True, eq=False)
class TmleState:
    """Tilted quantities on the logit scale (bounded outcome)."""

    m_logit: list
    q_logit: list
    epsilons: list = field(default_factory=list)


def _tmle_pass(panel, layout, arrays, weights, m_logit, q_logit, y_star, pooled, eps):
    """One backward pass; modifies the lists in place.

    Updated predictions are kept inside ``[eps, 1 - eps]`` on the bounded
    scale, so the mapped estimate never leaves the outcome range; each
    fluctuation solves the score of that constrained submodel. Returns
    the fitted epsilons, the number of zero-weight cells and the number of
    predictions held at a bound.
    """
    tau = panel.tau
    lo, hi = logit(eps), logit(1 - eps)
    pbounds = (eps, 1 - eps)
    out = {}
    zero = clipped = 0
    for t in range(tau, 0, -1):
        st = layout.stage(t)
        live = panel.at_risk[:, t - 1]
        target = y_star[:, None] if t == tau else expit(q_logit[t])
        w = weights[t - 1]
        if pooled:
            res = tilt_step(target[live].reshape(-1), m_logit[t - 1][live].reshape(-1),
                            w[live].reshape(-1), bounds=pbounds)
            e_hat = np.full(st.K_out, res.epsilon_hat)
            zero += int(res.zero_weight)
        else:
            e_hat = np.zeros(st.K_out)
            for c in range(st.K_out):
                res = tilt_step(target[live, c], m_logit[t - 1][live, c], w[live, c],
                                bounds=pbounds)
                e_hat[c] = res.epsilon_hat
                zero += int(res.zero_weight)
        m_new = m_logit[t - 1][live] + e_hat[None, :]
        q_new = q_logit[t - 1][live] + e_hat[arrays.dcell[t - 1][live]]
        clipped += int(np.sum((m_new < lo) | (m_new > hi)) + np.sum((q_new < lo) | (q_new > hi)))
        m_logit[t - 1][live] = np.clip(m_new, lo, hi)
        q_logit[t - 1][live] = np.clip(q_new, lo, hi)
        out[t] = e_hat
    return out, zero, clipped


def tmle_estimate(panel: Panel, policy: PolicySpec, outcome_spec=None,
                  treatment_spec: LearnerSpec | None = None, J: int = 2, seed: int = 0,
                  alpha: float = 0.05, history: HistorySpec | None = None,
                  degenerate_rules=(), propensity: PropensitySet | None = None,
                  folds: FoldAssignment | None = None, eps: float = BOUND_EPS,
                  pooled_epsilon: bool = False, full_augmentation: bool = False,
                  max_passes: int = 10, strict: bool = False) -> EstimateResult:
    """Cross-fitted TMLE of the policy value.

    Parameters
    ----------
    outcome_spec : LearnerSpec or stage learner
        Initial outcome regressions, fitted on the bounded outcome.
    treatment_spec : LearnerSpec
        Propensity model (ignored when ``propensity`` is supplied).
    J, seed : cross-fitting folds (``J=1`` disables sample splitting).
    pooled_epsilon : one fluctuation per stage instead of one per cell.
    strict : raise :class:`EIFNotSolved` instead of flagging.
    """
    if policy.tau is not None and policy.tau != panel.tau:
        raise MalformedInput("policy horizon does not match the panel")
    history = history or HistorySpec()
    learner = as_stage_learner(outcome_spec, history)
    if folds is None and J > 1:
        folds = assign_folds(panel.n, J, seed)
    layout = build_layout(policy, panel.supports, full_augmentation)
    arrays = policy_arrays(panel, policy, layout)
    if propensity is None:
        propensity = fit_propensity_sequence(panel, folds, treatment_spec or LearnerSpec(
            family="binomial"), degenerate_rules, history)
    y_star = bound_outcome(panel.Y, panel.y_bounds, eps)
    chain, _ = crossfit_chain(panel, layout, arrays, learner, y_star, folds)
    clip = lambda v: np.clip(v, eps, 1 - eps)
    m_logit = [logit(clip(m)) for m in chain.m_obs]
    q_logit = [logit(clip(q)) for q in chain.q[:-1]]
    nuis0 = make_nuisance(arrays, propensity, [expit(m) for m in m_logit],
                          [expit(q) for q in q_logit] + [y_star[:, None]])
    weights = state_weights(nuis0)
    history_res = []
    eps_log = []
    zero_cells = clipped = 0
    scale = (panel.y_bounds[1] - panel.y_bounds[0]) / (1 - 2 * eps)
    solved = False
    for _ in range(max_passes):
        eps_hat, zero, clip_n = _tmle_pass(panel, layout, arrays, weights, m_logit, q_logit,
                                           y_star, pooled_epsilon, eps)
        zero_cells += zero
        clipped += clip_n
        eps_log.append({int(t): [float(e) for e in v] for t, v in eps_hat.items()})
        nuis = nuis0.replace(m_obs=tuple(expit(m) for m in m_logit),
                             q=tuple(expit(q) for q in q_logit) + (y_star[:, None],))
        ev = eval_phi1(nuis, theta_ref=float(np.mean(nuis.q[0][:, 0])))
        resid = abs(ev.residual) * scale
        history_res.append(resid)
        sd = float(np.std(ev.values, ddof=1)) * scale
        if resid <= max(1e-8, 1e-6 * sd):
            solved = True
            break
    theta_star = float(np.mean(nuis.q[0][:, 0]))
    theta = float(inverse_bound_outcome(theta_star, panel.y_bounds, eps))
    phi_orig = inverse_bound_outcome(ev.values, panel.y_bounds, eps)
    se, lo, hi = eif_variance_ci(phi_orig, theta, alpha)
    monotone = all(b <= a + 1e-12 for a, b in zip(history_res, history_res[1:]))
    diag = {"weight_max": ev.weight_max, "passes": len(history_res),
            "eif_solved": solved, "residual_trace": history_res, "monotone": monotone,
            "epsilon": eps_log[-1], "zero_weight_cells": zero_cells,
            "clipped_predictions": clipped,
            "in_range": bool(panel.y_bounds[0] <= theta <= panel.y_bounds[1])}
    if not solved and strict:
        raise EIFNotSolved(f"EIF residual {history_res[-1]:.3g} above tolerance")
    return EstimateResult("tmle", theta, se, (lo, hi), alpha, history_res[-1], phi_orig,
                          diag, folds, seed)
