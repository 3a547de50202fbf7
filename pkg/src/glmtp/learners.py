"""GLM learners fitted by iteratively reweighted least squares, cross-fitting
helpers and discrete propensity estimation.

Design matrices are produced by a :class:`FeatureMap` from raw input
columns. Each raw column is either numeric or categorical with declared
levels; categorical columns are dummy coded against their first level.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ArityMismatch,
    EmptyRiskSet,
    MalformedInput,
    SingularDesign,
)
from .panel import FoldAssignment, Panel

P_FLOOR = 1e-6
_ETA_CLIP = 30.0

_FEATURE_ALIASES = {
    "intercept": "intercept",
    "main": "main",
    "main-terms": "main",
    "interactions": "interactions",
    "all-two-way-interactions": "interactions",
    "two-way": "interactions",
    "saturated": "saturated",
}


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of a GLM learner.

    Parameters
    ----------
    family : {"gaussian", "binomial"}
    link : {"identity", "logit"}
        Canonical link of the family unless stated.
    features : {"intercept", "main", "interactions", "saturated"}
        ``interactions`` adds every two-way product of columns from
        different raw inputs; ``saturated`` adds products of all orders.
    ridge : float
        Penalty ``ridge * sum(w) * ||beta||^2 / 2`` on non-intercept terms.
    max_iter, tol : IRLS stopping rule (relative change of penalized deviance).
    """

    family: str = "gaussian"
    link: str | None = None
    features: str = "main"
    ridge: float = 1e-8
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.family not in ("gaussian", "binomial"):
            raise MalformedInput(f"unknown family {self.family!r}")
        link = self.link or ("identity" if self.family == "gaussian" else "logit")
        if (self.family, link) not in (("gaussian", "identity"), ("binomial", "logit")):
            raise MalformedInput(f"unsupported family/link {self.family}/{link}")
        object.__setattr__(self, "link", link)
        if self.features not in _FEATURE_ALIASES:
            raise MalformedInput(f"unknown feature set {self.features!r}")
        object.__setattr__(self, "features", _FEATURE_ALIASES[self.features])
        if not self.tol > 0 or self.max_iter < 1 or self.ridge < 0:
            raise MalformedInput("require tol > 0, max_iter >= 1, ridge >= 0")

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "LearnerSpec":
        cfg = dict(cfg or {})
        allowed = {"family", "link", "features", "ridge", "max_iter", "tol"}
        unknown = set(cfg) - allowed
        if unknown:
            raise MalformedInput(f"unknown learner options {sorted(unknown)}")
        return cls(**cfg)

    def to_config(self) -> dict:
        return {"family": self.family, "link": self.link, "features": self.features,
                "ridge": self.ridge, "max_iter": self.max_iter, "tol": self.tol}


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Deterministic map from raw input columns to a design matrix.

    ``kinds[j]`` is ``None`` for a numeric column or the tuple of levels of
    a categorical column.
    """

    kinds: tuple
    features: str = "main"
    names: tuple = None

    def __post_init__(self):
        kinds = tuple(None if k is None else tuple(float(v) for v in k) for k in self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"x{j}" for j in range(len(kinds))))
        object.__setattr__(self, "features", _FEATURE_ALIASES[self.features])

    @property
    def arity(self) -> int:
        return len(self.kinds)

    def _groups(self, X: np.ndarray) -> list:
        groups = []
        for j, kind in enumerate(self.kinds):
            col = X[:, j]
            if kind is None:
                groups.append([col])
            else:
                groups.append([(col == lev).astype(float) for lev in kind[1:]])
        return [g for g in groups if g]

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if self.arity == 1 else X.reshape(1, -1)
        if X.shape[1] != self.arity:
            raise ArityMismatch(f"expected {self.arity} input columns, got {X.shape[1]}")
        cols = [np.ones(X.shape[0])]
        if self.features == "intercept":
            return np.column_stack(cols)
        groups = self._groups(X)
        for g in groups:
            cols.extend(g)
        if self.features == "interactions":
            for ga, gb in itertools.combinations(groups, 2):
                for a in ga:
                    for b in gb:
                        cols.append(a * b)
        elif self.features == "saturated":
            for order in range(2, len(groups) + 1):
                for combo in itertools.combinations(groups, order):
                    for parts in itertools.product(*combo):
                        prod = parts[0].copy()
                        for p in parts[1:]:
                            prod = prod * p
                        cols.append(prod)
        return np.column_stack(cols)


# ---------------------------------------------------------------------------
# IRLS
# ---------------------------------------------------------------------------

def expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _deviance(family, y, mu, w) -> float:
    if family == "gaussian":
        return float(np.sum(w * (y - mu) ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
        t2 = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
    return float(2.0 * np.sum(w * (t1 + t2)))


def _mean(family, eta):
    if family == "gaussian":
        return eta
    return expit(np.clip(eta, -_ETA_CLIP, _ETA_CLIP))


@dataclass(frozen=True, eq=False)
class FittedRegression:
    coefficients: np.ndarray
    feature_map: FeatureMap
    family: str
    link: str
    converged: bool
    deviance: float
    iterations: int = 0
    deviance_trace: tuple = ()

    def predict(self, X, offset=None) -> np.ndarray:
        return predict(self, X, offset)

    def linear_predictor(self, X, offset=None) -> np.ndarray:
        eta = self.feature_map.transform(X) @ self.coefficients
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float)
        return eta


def predict(model: FittedRegression, X, offset=None) -> np.ndarray:
    """Predictions on the response scale (binomial outputs in (0, 1))."""
    return _mean(model.family, model.linear_predictor(X, offset))


def _solve(XtWX, rhs):
    try:
        L = np.linalg.cholesky(XtWX)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.solve(XtWX, rhs)
        except np.linalg.LinAlgError:
            raise SingularDesign("IRLS normal equations are singular") from None
    z = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, z)


def fit_design(D: np.ndarray, y, w, offset, spec: LearnerSpec, feature_map: FeatureMap
               ) -> FittedRegression:
    """IRLS on an explicit design matrix ``D`` (first column the intercept)."""
    y = np.asarray(y, dtype=float).reshape(-1)
    n, p = D.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).reshape(-1)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    if y.shape[0] != n or w.shape[0] != n or off.shape[0] != n:
        raise ArityMismatch("design, response, weights and offset must have equal rows")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise MalformedInput("weights must be finite and nonnegative")
    if not np.all(np.isfinite(y)):
        raise MalformedInput("responses must be finite")
    if spec.family == "binomial" and (np.any(y < 0) or np.any(y > 1)):
        raise MalformedInput("binomial responses must lie in [0, 1]")
    keep = w > 0
    if not keep.any():
        raise SingularDesign("all weights are zero")
    D, y, w, off = D[keep], y[keep], w[keep], off[keep]
    lam = spec.ridge * float(np.sum(w))
    pen = np.full(p, lam)
    pen[0] = 0.0

    def pdev(beta):
        mu = _mean(spec.family, D @ beta + off)
        return _deviance(spec.family, y, mu, w) + float(np.sum(pen * beta ** 2))

    if spec.family == "gaussian":
        XtW = D.T * w
        A = XtW @ D + np.diag(pen)
        beta = _solve(A, XtW @ (y - off))
        dev = pdev(beta)
        return FittedRegression(beta, feature_map, spec.family, spec.link, True,
                                dev, 1, (dev,))

    # binomial / logit
    beta = np.zeros(p)
    ybar = float(np.clip(np.sum(w * y) / np.sum(w), 1e-4, 1 - 1e-4))
    if offset is None:
        beta[0] = math.log(ybar / (1 - ybar))
    dev_old = pdev(beta)
    trace = [dev_old]
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        eta = D @ beta + off
        mu = _mean("binomial", eta)
        var = np.maximum(mu * (1 - mu), 1e-12)
        z = eta - off + (y - mu) / var
        XtW = D.T * (w * var)
        A = XtW @ D + np.diag(pen)
        beta_new = _solve(A, XtW @ z)
        dev_new = pdev(beta_new)
        halvings = 0
        while (not np.isfinite(dev_new) or dev_new > dev_old + 1e-12 * abs(dev_old)) \
                and halvings < 30:
            beta_new = 0.5 * (beta_new + beta)
            dev_new = pdev(beta_new)
            halvings += 1
        if dev_new > dev_old:
            beta_new, dev_new = beta, dev_old
        trace.append(dev_new)
        rel = abs(dev_new - dev_old) / (abs(dev_new) + 0.1)
        beta, dev_old = beta_new, dev_new
        if rel < spec.tol:
            converged = True
            break
    return FittedRegression(beta, feature_map, spec.family, spec.link, converged,
                            dev_old, it, tuple(trace))


def fit_glm(X, y, w=None, offset=None, spec: LearnerSpec | None = None,
            kinds: Sequence | None = None, names: Sequence[str] | None = None
            ) -> FittedRegression:
    """Fit a weighted, ridge-stabilized GLM by IRLS.

    Parameters
    ----------
    X : array of shape (n, k)
        Raw inputs, expanded by a :class:`FeatureMap` built from ``kinds``
        (all numeric by default) and ``spec.features``.
    y, w, offset : arrays of length n
    spec : LearnerSpec
    """
    spec = spec or LearnerSpec()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    kinds = tuple(kinds) if kinds is not None else (None,) * X.shape[1]
    fmap = FeatureMap(kinds, spec.features, tuple(names) if names else None)
    D = fmap.transform(X)
    return fit_design(D, y, w, offset, spec, fmap)


# ---------------------------------------------------------------------------
# Cross-fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CrossFit:
    """Per-fold models; ``models[j]`` was trained on subjects outside fold ``j``."""

    models: tuple
    folds: FoldAssignment
    train_subjects: tuple

    def predict_oof(self, X, subject) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        subject = np.asarray(subject)
        out = np.empty(X.shape[0])
        fold = self.folds.membership[subject]
        for j, model in enumerate(self.models):
            rows = fold == j
            if rows.any():
                out[rows] = predict(model, X[rows])
        return out


def crossfit_regress(X, y, folds: FoldAssignment, spec: LearnerSpec, subject=None,
                     w=None, kinds=None) -> CrossFit:
    """Fit one model per fold on the training subjects of that fold.

    ``subject[r]`` gives the subject of row ``r`` (defaults to the row
    index), so every row of a subject shares that subject's fold.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    subject = np.arange(X.shape[0]) if subject is None else np.asarray(subject)
    w = np.ones(X.shape[0]) if w is None else np.asarray(w, dtype=float)
    models, train = [], []
    for j in range(folds.J):
        rows = folds.training_mask(j)[subject]
        models.append(fit_glm(X[rows], y[rows], w[rows], None, spec, kinds))
        train.append(frozenset(np.unique(subject[rows]).tolist()))
    return CrossFit(tuple(models), folds, tuple(train))


# ---------------------------------------------------------------------------
# History features
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HistorySpec:
    """Which parts of ``H_t`` enter regressions at time ``t``.

    ``window=None`` uses the full history; ``window=w`` keeps covariates
    ``L_{t-w..t}`` and treatments ``A_{t-w..t-1}``. Treatments enter as
    categorical inputs.
    """

    window: int | None = None

    def columns(self, panel: Panel, t: int, subject) -> tuple:
        lo = 1 if self.window is None else max(1, t - self.window)
        cols, kinds, names = [], [], []
        for u in range(lo, t + 1):
            block = panel.L[u - 1]
            for j in range(block.shape[1]):
                cols.append(block[subject, j])
                kinds.append(None)
                names.append(f"L{u}_{panel.L_names[u - 1][j]}")
            if u < t:
                cols.append(panel.A[subject, u - 1])
                kinds.append(panel.supports[u - 1])
                names.append(f"A{u}")
        return cols, kinds, names


# ---------------------------------------------------------------------------
# Propensities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DegenerateRule:
    """A known deterministic treatment mechanism.

    ``kind="absorbing_exposure"``: if ``A_{t-1} == value`` then ``A_t == value``
    with probability one.
    """

    kind: str = "absorbing_exposure"
    value: float = 1.0

    def mask(self, panel: Panel, t: int) -> np.ndarray:
        if self.kind != "absorbing_exposure":
            raise MalformedInput(f"unknown degenerate rule {self.kind!r}")
        if t == 1:
            return np.zeros(panel.n, dtype=bool)
        return panel.A[:, t - 2] == self.value


@dataclass(frozen=True, eq=False)
class PropensitySet:
    """Estimated ``g_t(a | H_t)`` for every subject, time and support value.

    ``probs[t-1]`` has shape ``(n, |A_t|)``; row ``i`` comes from the model of
    fold ``j(i)``. ``degenerate[t-1]`` flags rows whose mechanism is known
    (absorbing exposure or no longer at risk); their masses are exactly 0/1.
    """

    probs: tuple
    degenerate: tuple
    supports: tuple
    A: np.ndarray
    floor: float = P_FLOOR
    models: tuple = ()
    folds: FoldAssignment | None = None

    def __post_init__(self):
        for t, p in enumerate(self.probs, start=1):
            if not np.allclose(p.sum(axis=1), 1.0, atol=1e-10, rtol=0):
                raise MalformedInput(f"propensities at t={t} do not sum to one")

    @property
    def tau(self) -> int:
        return len(self.probs)

    def prob_observed(self, t: int) -> np.ndarray:
        idx = np.searchsorted(self.supports[t - 1], self.A[:, t - 1])
        return self.probs[t - 1][np.arange(self.A.shape[0]), idx]

    def ratio(self, t: int) -> np.ndarray:
        """``g_t(s|H_t) / g_t(A_t|H_t)`` for all ``s``; shape ``(n, |A_t|)``.

        The floor applies to the denominator except on degenerate rows.
        """
        den = self.prob_observed(t)
        den = np.where(self.degenerate[t - 1], den, np.maximum(den, self.floor))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.probs[t - 1] / den[:, None]
        return np.where(np.isfinite(r), r, 0.0)


def _point_mass(n, support, values) -> np.ndarray:
    P = np.zeros((n, len(support)))
    idx = np.searchsorted(support, values)
    P[np.arange(n), idx] = 1.0
    return P


def _continuation_fit(X, kinds, a, support, spec, w=None):
    """Continuation-ratio binomial models; returns a list of fits (or scalars)."""
    fits = []
    remaining = np.ones(len(a), dtype=bool)
    for lev in support[:-1]:
        rows = remaining
        if not rows.any():
            fits.append(1.0)
            continue
        y = (a[rows] == lev).astype(float)
        fits.append(fit_glm(X[rows], y, None if w is None else w[rows], None, spec, kinds))
        remaining = remaining & (a != lev)
    return fits


def _continuation_predict(fits, X, n_levels) -> np.ndarray:
    n = X.shape[0]
    P = np.zeros((n, n_levels))
    left = np.ones(n)
    for k, fit in enumerate(fits):
        p = np.full(n, fit) if isinstance(fit, float) else predict(fit, X)
        P[:, k] = left * p
        left = left * (1 - p)
    P[:, -1] = left
    return P


def fit_propensity_sequence(panel: Panel, folds: FoldAssignment | None, spec: LearnerSpec,
                            degenerate_rules: Sequence[DegenerateRule] = (),
                            history: HistorySpec | None = None,
                            floor: float = P_FLOOR) -> PropensitySet:
    """Fit ``g_1..g_tau`` on at-risk, non-degenerate rows (cross-fitted when
    ``folds`` is given)."""
    history = history or HistorySpec()
    spec = replace(spec, family="binomial", link="logit")
    n = panel.n
    probs, degen, models = [], [], []
    for t in range(1, panel.tau + 1):
        support = panel.supports[t - 1]
        a = panel.A[:, t - 1]
        dmask = ~panel.at_risk[:, t - 1]
        known = _point_mass(n, support, a)
        rule_mask = np.zeros(n, dtype=bool)
        for rule in degenerate_rules:
            m = rule.mask(panel, t) & ~dmask
            rule_mask |= m
            known[m] = _point_mass(int(m.sum()), support, np.full(m.sum(), rule.value))
        dmask = dmask | rule_mask
        P = known.copy()
        fit_rows = ~dmask
        if len(support) > 1 and fit_rows.any():
            cols, kinds, _ = history.columns(panel, t, np.arange(n))
            X = np.column_stack(cols) if cols else np.zeros((n, 0))
            J = 1 if folds is None else folds.J
            stage_models = []
            for j in range(J):
                train = fit_rows & (np.ones(n, bool) if folds is None else folds.training_mask(j))
                if not train.any():
                    raise EmptyRiskSet(f"no rows to fit the treatment model at t={t}, fold {j}")
                fits = _continuation_fit(X[train], kinds, a[train], support, spec)
                stage_models.append(fits)
                target = fit_rows & (np.ones(n, bool) if folds is None
                                     else folds.membership == j)
                if target.any():
                    P[target] = _continuation_predict(fits, X[target], len(support))
            models.append(tuple(stage_models))
        elif len(support) > 1:
            raise EmptyRiskSet(f"no at-risk, non-degenerate rows at t={t}")
        else:
            models.append(())
        probs.append(P)
        degen.append(dmask)
    return PropensitySet(tuple(probs), tuple(degen), panel.supports, panel.A, floor,
                         tuple(models), folds)


def marginal_spec() -> LearnerSpec:
    """Intercept-only binomial learner (a deliberately crude propensity)."""
    return LearnerSpec(family="binomial", features="intercept")
