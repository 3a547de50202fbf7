"""Sequentially doubly robust estimator.

Backward over stages, the pseudo-outcome ``phi_{t+1}(c, Z_i)`` is computed
with subject ``i``'s own out-of-fold nuisances for stages after ``t``, and
regressed on ``(c, A_t, H_t)`` within each training set. The estimate is the
mean of ``phi_1``; it is not a substitution estimator and may leave the
outcome range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eif import EstimateResult, NuisanceSet, eif_variance_ci, eval_phi1, phi_matrix
from .errors import MalformedInput
from .gcomp import as_stage_learner, stage_fit, stage_predict, unit_transform
from .layout import build_layout, policy_arrays
from .learners import HistorySpec, LearnerSpec, PropensitySet, fit_propensity_sequence
from .panel import FoldAssignment, Panel, assign_folds
from .policy import PolicySpec


@dataclass(eq=False)
class SdrState:
    """Backward-pass state: fitted models and per-subject nuisances so far."""

    nuisance: NuisanceSet
    models: dict
    pseudo: dict

    def pseudo_outcome(self, t: int, cell: int, subject: int) -> float:
        """``Y_check_{t+1}`` for subject ``i`` at cell ``c`` of ``F_{t+1}``."""
        return float(self.pseudo[t][subject, cell])


def pseudo_outcome(t: int, nuis: NuisanceSet) -> np.ndarray:
    """All pseudo-outcomes ``phi_{t+1}(c, Z_i)``; shape (n, cells of ``F_{t+1}``)."""
    return phi_matrix(nuis, t)


def sdr_estimate(panel: Panel, policy: PolicySpec, outcome_spec=None,
                 treatment_spec: LearnerSpec | None = None, J: int = 2, seed: int = 0,
                 alpha: float = 0.05, history: HistorySpec | None = None,
                 degenerate_rules=(), propensity: PropensitySet | None = None,
                 folds: FoldAssignment | None = None, pseudo_learner=None,
                 full_augmentation: bool = False, clamp: bool = False,
                 return_state: bool = False):
    """Cross-fitted SDR estimate.

    The final stage regresses ``Y`` with ``outcome_spec``; earlier stages
    regress the unbounded pseudo-outcomes with ``pseudo_learner`` (by
    default the outcome learner switched to the gaussian family).
    """
    if policy.tau is not None and policy.tau != panel.tau:
        raise MalformedInput("policy horizon does not match the panel")
    history = history or HistorySpec()
    learner = as_stage_learner(outcome_spec, history)
    if pseudo_learner is None:
        pseudo_learner = learner.pseudo_outcome_learner()
    else:
        pseudo_learner = as_stage_learner(pseudo_learner, history)
    if folds is None and J > 1:
        folds = assign_folds(panel.n, J, seed)
    layout = build_layout(policy, panel.supports, full_augmentation)
    arrays = policy_arrays(panel, policy, layout)
    if propensity is None:
        propensity = fit_propensity_sequence(panel, folds, treatment_spec or LearnerSpec(
            family="binomial"), degenerate_rules, history)
    n, tau = panel.n, panel.tau
    ratio = tuple(propensity.ratio(t) for t in range(1, tau + 1))
    m_obs = [None] * tau
    q = [None] * tau + [panel.Y[:, None].copy()]
    nuis = NuisanceSet(layout, arrays, ratio, tuple(m_obs), tuple(q))
    to_unit, from_unit = unit_transform(panel)
    J_eff = 1 if folds is None else folds.J
    models, pseudo = {}, {}
    for t in range(tau, 0, -1):
        st = layout.stage(t)
        if t == tau:
            stage_learner = learner
            target = panel.Y[:, None]
            unit = getattr(learner, "unit_scale", False)
        else:
            stage_learner = pseudo_learner
            target = pseudo_outcome(t, nuis)
            unit = getattr(pseudo_learner, "unit_scale", False)
        pseudo[t] = target
        fit_target = to_unit(target) if unit else target
        fill = to_unit(panel.Y) if unit else panel.Y
        mo = np.empty((n, st.K_out))
        qq = np.empty((n, st.K_in))
        stage_models = []
        for j in range(J_eff):
            train = np.ones(n, bool) if folds is None else folds.training_mask(j)
            model = stage_fit(stage_learner, panel, layout, t, fit_target, train)
            stage_models.append(model)
            subj = np.arange(n) if folds is None else folds.validation(j)
            a, b = stage_predict(model, panel, layout, arrays, t, subj, fill)
            mo[subj], qq[subj] = a, b
        if unit:
            mo, qq = from_unit(mo), from_unit(qq)
        models[t] = tuple(stage_models)
        m_obs[t - 1], q[t - 1] = mo, qq
        nuis = nuis.replace(m_obs=tuple(m_obs), q=tuple(q))
    ev = eval_phi1(nuis, theta_ref=None)
    theta = float(np.mean(ev.values))
    lo_b, hi_b = panel.y_bounds
    in_range = bool(lo_b <= theta <= hi_b)
    reported = float(np.clip(theta, lo_b, hi_b)) if clamp else theta
    se, lo, hi = eif_variance_ci(ev.values, reported, alpha)
    diag = {"weight_max": ev.weight_max, "out_of_range": not in_range,
            "clamped": bool(clamp and not in_range)}
    res = EstimateResult("sdr", reported, se, (lo, hi), alpha,
                         float(np.mean(ev.values) - reported), ev.values, diag, folds, seed)
    if return_state:
        return res, SdrState(nuis, models, pseudo)
    return res
