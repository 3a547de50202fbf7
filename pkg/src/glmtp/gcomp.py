"""Plug-in sequential-regression estimator over augmented (pooled) frames.

Stage ``t`` regresses ``q_{t+1}(c, A_{t+1}, H_{t+1})`` on ``(c, A_t, H_t)``
pooled over the cells ``c`` of ``F_{t+1}``; ``q_t`` is then predicted on the
cells of ``F_t`` by substituting the natural value ``s_t = A_t`` and the
assigned treatment ``d_t``. Subjects no longer at risk carry their observed
outcome.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .errors import EmptyRiskSet, GLMTPError, MalformedInput
from .layout import Layout, PolicyArrays, build_layout, policy_arrays
from .learners import FittedRegression, HistorySpec, LearnerSpec, fit_glm, predict
from .panel import AugmentedFrame, FoldAssignment, Panel, build_augmented
from .policy import PolicySpec


@dataclass(frozen=True, eq=False)
class StageQuery:
    """Rows at which a stage-``t`` regression is fitted or evaluated."""

    panel: Panel
    t: int
    lags: tuple
    subject: np.ndarray
    s: np.ndarray
    a: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.subject.shape[0]

    def subset(self, rows) -> "StageQuery":
        return StageQuery(self.panel, self.t, self.lags, self.subject[rows], self.s[rows],
                          self.a[rows])


class StageModel(Protocol):
    def predict(self, query: StageQuery) -> np.ndarray: ...


class StageLearner(Protocol):
    """Contract for outcome-regression learners used by every estimator."""

    unit_scale: bool

    def fit(self, query: StageQuery, y: np.ndarray) -> StageModel: ...

    def pseudo_outcome_learner(self) -> "StageLearner": ...


@dataclass(frozen=True, eq=False)
class GLMStageModel:
    fit_result: FittedRegression
    learner: "GLMStageLearner"

    def predict(self, query: StageQuery) -> np.ndarray:
        return predict(self.fit_result, self.learner.design(query))


@dataclass(frozen=True)
class GLMStageLearner:
    """GLM over (one-hot s-columns, one-hot ``A_t``, history features)."""

    spec: LearnerSpec = field(default_factory=LearnerSpec)
    history: HistorySpec = field(default_factory=HistorySpec)

    @property
    def unit_scale(self) -> bool:
        return self.spec.family == "binomial"

    def kinds(self, query: StageQuery):
        panel = query.panel
        _, hk, hn = self.history.columns(panel, query.t, query.subject[:0])
        kinds = [panel.supports[u - 1] for u in query.lags] + [panel.supports[query.t - 1]]
        names = [f"s{u}" for u in query.lags] + [f"A{query.t}"]
        return kinds + hk, names + hn

    def design(self, query: StageQuery) -> np.ndarray:
        hcols, _, _ = self.history.columns(query.panel, query.t, query.subject)
        cols = [query.s[:, j] for j in range(len(query.lags))] + [query.a] + hcols
        return np.column_stack(cols)

    def fit(self, query: StageQuery, y) -> GLMStageModel:
        kinds, names = self.kinds(query)
        res = fit_glm(self.design(query), y, None, None, self.spec, kinds, names)
        return GLMStageModel(res, self)

    def pseudo_outcome_learner(self) -> "GLMStageLearner":
        return GLMStageLearner(replace(self.spec, family="gaussian", link="identity"),
                               self.history)


def as_stage_learner(learner, history: HistorySpec | None = None):
    if isinstance(learner, LearnerSpec):
        return GLMStageLearner(learner, history or HistorySpec())
    if learner is None:
        return GLMStageLearner(LearnerSpec(), history or HistorySpec())
    return learner


# ---------------------------------------------------------------------------
# Stage mechanics shared by all estimators
# ---------------------------------------------------------------------------

def regression_query(panel: Panel, layout: Layout, t: int, subjects) -> StageQuery:
    """Rows ``(i, c)`` for ``i`` in ``subjects`` and ``c`` in cells of ``F_{t+1}``."""
    st = layout.stage(t)
    subjects = np.asarray(subjects)
    K = st.K_out
    subj = np.repeat(subjects, K)
    s = np.tile(st.cells_out, (subjects.shape[0], 1))
    return StageQuery(panel, t, st.lags_out, subj, s, panel.A[subj, t - 1])


def policy_query(panel: Panel, layout: Layout, arrays: PolicyArrays, t: int,
                 subjects) -> StageQuery:
    """Rows evaluating ``m_t`` at the assigned treatment for every cell of ``F_t``."""
    st = layout.stage(t)
    subjects = np.asarray(subjects)
    subj = np.repeat(subjects, st.K_in)
    cells = arrays.dcell[t - 1][subjects].reshape(-1)
    a = arrays.dval[t - 1][subjects].reshape(-1)
    return StageQuery(panel, t, st.lags_out, subj, st.cells_out[cells], a)


def stage_predict(model: StageModel, panel: Panel, layout: Layout, arrays: PolicyArrays,
                  t: int, subjects, y_fill) -> tuple:
    """Return ``(m_obs, q)`` for ``subjects``: shapes (r, K_out) and (r, K_in).

    Subjects not at risk at ``t`` get ``y_fill`` everywhere.
    """
    st = layout.stage(t)
    subjects = np.asarray(subjects)
    r = subjects.shape[0]
    m_obs = np.repeat(y_fill[subjects][:, None], st.K_out, axis=1)
    q = np.repeat(y_fill[subjects][:, None], st.K_in, axis=1)
    live = panel.at_risk[subjects, t - 1]
    if live.any():
        ls = subjects[live]
        rq = regression_query(panel, layout, t, ls)
        pq = policy_query(panel, layout, arrays, t, ls)
        both = StageQuery(panel, t, st.lags_out, np.concatenate([rq.subject, pq.subject]),
                          np.concatenate([rq.s, pq.s]), np.concatenate([rq.a, pq.a]))
        pred = np.asarray(model.predict(both), dtype=float)
        m_obs[live] = pred[: rq.n_rows].reshape(-1, st.K_out)
        q[live] = pred[rq.n_rows:].reshape(-1, st.K_in)
    return m_obs, q


def stage_fit(learner, panel: Panel, layout: Layout, t: int, target: np.ndarray,
              train_mask: np.ndarray):
    """Fit ``m_t`` on at-risk training subjects; ``target`` has shape (n, K_out)."""
    subjects = np.flatnonzero(train_mask & panel.at_risk[:, t - 1])
    if subjects.size == 0:
        raise EmptyRiskSet(f"no at-risk subjects to fit the stage-{t} regression")
    query = regression_query(panel, layout, t, subjects)
    y = target[subjects].reshape(-1)
    try:
        return learner.fit(query, y)
    except GLMTPError as exc:
        raise type(exc)(f"stage {t}: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ChainFit:
    """One backward pass of the plug-in recursion with a single training set.

    ``m_obs[t-1]`` has shape (n, K_out_t); ``q[t-1]`` shape (n, K_in_t) for
    ``t = 1..tau`` and ``q[tau]`` is the outcome column.
    """

    models: tuple
    m_obs: tuple
    q: tuple


def fit_chain(panel: Panel, layout: Layout, arrays: PolicyArrays, learner, y_work,
              train_mask=None) -> ChainFit:
    n, tau = panel.n, panel.tau
    train_mask = np.ones(n, dtype=bool) if train_mask is None else train_mask
    q_next = np.asarray(y_work, dtype=float).reshape(n, 1)
    m_all, q_all, models = [None] * tau, [None] * (tau + 1), [None] * tau
    q_all[tau] = q_next
    everyone = np.arange(n)
    for t in range(tau, 0, -1):
        model = stage_fit(learner, panel, layout, t, q_next, train_mask)
        m_obs, q = stage_predict(model, panel, layout, arrays, t, everyone, y_work)
        models[t - 1], m_all[t - 1], q_all[t - 1] = model, m_obs, q
        q_next = q
    return ChainFit(tuple(models), tuple(m_all), tuple(q_all))


def crossfit_chain(panel, layout, arrays, learner, y_work, folds: FoldAssignment | None):
    """Cross-fitted chain: subject ``i`` reads the chain trained without fold ``j(i)``."""
    if folds is None or folds.J == 1:
        chain = fit_chain(panel, layout, arrays, learner, y_work)
        return chain, (chain,)
    chains = [fit_chain(panel, layout, arrays, learner, y_work, folds.training_mask(j))
              for j in range(folds.J)]
    pick = folds.membership
    rows = np.arange(panel.n)

    def merge(arrs):
        stack = np.stack(arrs)
        return stack[pick, rows]

    m_obs = tuple(merge([c.m_obs[k] for c in chains]) for k in range(panel.tau))
    q = tuple(merge([c.q[k] for c in chains]) for k in range(panel.tau + 1))
    return ChainFit(tuple(c.models for c in chains), m_obs, q), tuple(chains)


def unit_transform(panel: Panel):
    lo, hi = panel.y_bounds
    return (lambda y: (np.asarray(y) - lo) / (hi - lo)), (lambda u: lo + (hi - lo) * np.asarray(u))


# ---------------------------------------------------------------------------
# Plug-in estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SequentialFit:
    """Plug-in fit: per-stage regressions, predictions and ``theta_plugin``."""

    panel: Panel
    policy: PolicySpec
    layout: Layout
    arrays: PolicyArrays
    chain: ChainFit
    theta_plugin: float
    folds: FoldAssignment | None = None

    @property
    def q1(self) -> np.ndarray:
        return self.chain.q[0][:, 0]

    @property
    def frame_rows(self) -> dict:
        """Row counts ``{t: (regression frame, prediction frame)}``."""
        n = self.panel.n
        return {st.t: (n * st.K_out, n * st.K_in) for st in self.layout.stages}

    def regression_frame(self, t: int) -> AugmentedFrame:
        """Stage-``t`` pooled regression data with columns ``q_{t+1}`` and ``m_t``."""
        st = self.layout.stage(t)
        frame = build_augmented(self.panel, t + 1, st.lags_out)
        frame = frame.with_column(f"q{t + 1}", self.chain.q[t].reshape(-1))
        return frame.with_column(f"m{t}", self.chain.m_obs[t - 1].reshape(-1))

    def prediction_frame(self, t: int) -> AugmentedFrame:
        st = self.layout.stage(t)
        frame = build_augmented(self.panel, t, st.lags_in)
        return frame.with_column(f"q{t}", self.chain.q[t - 1].reshape(-1))


def plugin_estimate(panel: Panel, policy: PolicySpec, outcome_spec=None,
                    folds: FoldAssignment | None = None, history: HistorySpec | None = None,
                    full_augmentation: bool = False) -> SequentialFit:
    """Plug-in estimate ``mean(q_1)`` of the policy value.

    ``outcome_spec`` is a :class:`LearnerSpec` or any stage learner. Binomial
    learners are fitted on the outcome rescaled to [0, 1].
    """
    if policy.tau is not None and policy.tau != panel.tau:
        raise MalformedInput("policy horizon does not match the panel")
    learner = as_stage_learner(outcome_spec, history)
    layout = build_layout(policy, panel.supports, full_augmentation)
    arrays = policy_arrays(panel, policy, layout)
    to_unit, from_unit = unit_transform(panel)
    unit = getattr(learner, "unit_scale", False)
    y_work = to_unit(panel.Y) if unit else panel.Y
    chain, _ = crossfit_chain(panel, layout, arrays, learner, y_work, folds)
    if unit:
        chain = ChainFit(chain.models, tuple(from_unit(m) for m in chain.m_obs),
                         tuple(from_unit(q) for q in chain.q))
    theta = float(np.mean(chain.q[0][:, 0]))
    return SequentialFit(panel, policy, layout, arrays, chain, theta, folds)
