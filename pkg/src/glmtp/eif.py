"""Efficient influence function machinery.

``phi_{t+1}(s_t, Z)`` is evaluated by a forward recursion over the cells of
the stage lag sets. Starting from the identity over cells of ``F_{t+1}``, the
weight state is pushed through stage ``k`` by

    w_k[c'] = sum over (c, s) with proj(c, s) = c' of
              w_{k-1}[c] * 1{A_k = d_k(c, s, H_k)} * g_k(s|H_k) / g_k(A_k|H_k)

and each stage contributes ``sum_c' w_k[c'] (q_{k+1}[c'] - m_k[c'])``. Lags
that no later quantity reads are summed out as soon as they leave the lag
set, which makes the result equal to the full path sum.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist
from typing import NamedTuple

import numpy as np

from .errors import NumericalOverflow, SampleMismatch
from .layout import Layout, PolicyArrays
from .learners import PropensitySet
from .panel import Panel
from .policy import PolicySpec

RATIO_CAP = 1e8


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Per-subject nuisance values (each subject served by its own fold).

    ``ratio[k-1]``  ``g_k(s|H_k)/g_k(A_k|H_k)``, shape (n, |A_k|);
    ``m_obs[k-1]``  ``m_k(c, A_k, H_k)`` on cells of ``F_{k+1}``;
    ``q[k-1]``      ``q_k(c, A_k, H_k)`` on cells of ``F_k``; ``q[tau]`` is ``Y``.
    """

    layout: Layout
    arrays: PolicyArrays
    ratio: tuple
    m_obs: tuple
    q: tuple
    cap: float = RATIO_CAP

    @property
    def n(self) -> int:
        return self.q[-1].shape[0]

    @property
    def tau(self) -> int:
        return self.layout.tau

    def replace(self, **kw) -> "NuisanceSet":
        d = dict(layout=self.layout, arrays=self.arrays, ratio=self.ratio,
                 m_obs=self.m_obs, q=self.q, cap=self.cap)
        d.update(kw)
        return NuisanceSet(**d)


def make_nuisance(arrays: PolicyArrays, props: PropensitySet, m_obs, q,
                  cap: float = RATIO_CAP) -> NuisanceSet:
    ratio = tuple(props.ratio(t) for t in range(1, arrays.layout.tau + 1))
    return NuisanceSet(arrays.layout, arrays, ratio, tuple(m_obs), tuple(q), cap)


def _transition(nuis: NuisanceSet, k: int):
    st = nuis.layout.stage(k)
    kern = nuis.arrays.match[k - 1] * nuis.ratio[k - 1][:, None, :]   # (n, K_in, S)
    return np.einsum("ncs,csb->ncb", kern, st.proj_tensor())            # (n, K_in, K_out)


def _check(state, k, cap):
    peak = float(np.max(np.abs(state))) if state.size else 0.0
    if not np.isfinite(peak) or peak > cap:
        raise NumericalOverflow(f"cumulative density ratio {peak:.3g} exceeds cap {cap:g} "
                                f"at stage {k}")
    return peak


def phi_matrix(nuis: NuisanceSet, t: int, components: bool = False):
    """``phi_{t+1}(c, Z_i)`` for every subject and cell ``c`` of ``F_{t+1}``.

    Returns an array of shape (n, K) where ``K`` is the number of cells of
    ``F_{t+1}`` (``K = 1`` for ``t = 0``). For ``t = tau`` this is ``Y``.
    With ``components=True`` also returns the per-stage terms.
    """
    tau = nuis.tau
    if not 0 <= t <= tau:
        raise ValueError(f"t must be in 0..{tau}")
    base = nuis.q[t]
    n, K0 = base.shape
    total = base.copy()
    parts = {"q": base.copy()}
    state = np.broadcast_to(np.eye(K0), (n, K0, K0))
    for k in range(t + 1, tau + 1):
        state = np.einsum("nac,ncb->nab", state, _transition(nuis, k))
        _check(state, k, nuis.cap)
        resid = nuis.q[k] - nuis.m_obs[k - 1]
        term = np.einsum("nab,nb->na", state, resid)
        total = total + term
        parts[k] = term
    return (total, parts) if components else total


def state_weights(nuis: NuisanceSet) -> list:
    """``omega_k(c) = D_{0,k} prod_{u<=k} g_u(s_u)/g_u(A_u)`` on cells of ``F_{k+1}``."""
    n = nuis.n
    state = np.ones((n, 1))
    out = []
    for k in range(1, nuis.tau + 1):
        state = np.einsum("nc,ncb->nb", state, _transition(nuis, k))
        _check(state, k, nuis.cap)
        out.append(state)
    return out


@dataclass(frozen=True, eq=False)
class PhiEval:
    """Values of ``phi_1`` per subject with their decomposition."""

    values: np.ndarray
    components: dict
    theta_ref: float
    weight_max: float = 0.0

    @property
    def centered(self) -> np.ndarray:
        return self.values - self.theta_ref

    @property
    def residual(self) -> float:
        return float(np.mean(self.values) - self.theta_ref)


def eval_phi1(nuis: NuisanceSet, theta_ref: float | None = None) -> PhiEval:
    total, parts = phi_matrix(nuis, 0, components=True)
    vals = total[:, 0]
    comps = {k: v[:, 0] for k, v in parts.items()}
    wmax = max((float(np.max(np.abs(w))) for w in state_weights(nuis)), default=0.0)
    ref = float(np.mean(vals)) if theta_ref is None else float(theta_ref)
    return PhiEval(vals, comps, ref, wmax)


def phi(t: int, s_path, subject: int, nuis: NuisanceSet) -> float:
    """Scalar accessor: ``phi_{t+1}(s_t, Z_i)`` for an explicit natural path.

    ``s_path`` lists ``s_1..s_t``; only lags in ``F_{t+1}`` are read.
    """
    if t == 0:
        return float(phi_matrix(nuis, 0)[subject, 0])
    st = nuis.layout.stage(t)
    key = tuple(float(s_path[u - 1]) for u in st.lags_out)
    idx = [tuple(r) for r in st.cells_out.tolist()].index(key)
    return float(phi_matrix(nuis, t)[subject, idx])


def indicator_D(t: int, k: int, s_path, panel: Panel, subject: int,
                policy: PolicySpec) -> int:
    """``D_{t,k}(s_k)``: 1 iff ``A_u = d_u(s_u, H_u)`` for ``u = t+1..k``."""
    if not 0 <= t < k <= panel.tau:
        raise ValueError("require 0 <= t < k <= tau")
    for u in range(t + 1, k + 1):
        nat = np.asarray(s_path[:u], dtype=float).reshape(1, -1)
        ad = panel.A[subject: subject + 1, : u - 1]
        covs = [b[subject: subject + 1] for b in panel.L[:u]]
        if policy.evaluate(u, nat, ad, covs)[0] != panel.A[subject, u - 1]:
            return 0
    return 1


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

class Interval(NamedTuple):
    se: float
    ci_lo: float
    ci_hi: float


def eif_variance_ci(phi_values, theta_hat: float, alpha: float = 0.05) -> Interval:
    """Wald interval from the unbiased sample variance of the EIF values."""
    vals = phi_values.values if isinstance(phi_values, PhiEval) else np.asarray(phi_values)
    vals = np.asarray(vals, dtype=float)
    n = vals.shape[0]
    if n < 2:
        raise ValueError("need at least two EIF values")
    sd = 0.0 if np.ptp(vals) == 0 else float(np.std(vals, ddof=1))
    se = float(sd / np.sqrt(n))
    z = NormalDist().inv_cdf(1 - alpha / 2)
    return Interval(se, theta_hat - z * se, theta_hat + z * se)


@dataclass(frozen=True, eq=False)
class EstimateResult:
    estimator: str
    theta: float
    se: float
    ci: tuple
    alpha: float
    eif_residual: float
    phi: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    folds: object = None
    seed: int | None = None
    p_value: float | None = None

    @property
    def n(self) -> int:
        return self.phi.shape[0]

    def to_dict(self) -> dict:
        out = {"estimator": self.estimator, "theta": self.theta, "se": self.se,
               "ci": [self.ci[0], self.ci[1]], "alpha": self.alpha,
               "eif_residual": self.eif_residual,
               "weight_max": self.diagnostics.get("weight_max"),
               "folds": None if self.folds is None else int(self.folds.J),
               "seed": self.seed}
        if self.p_value is not None:
            out["p_value"] = self.p_value
        extra = {k: v for k, v in self.diagnostics.items() if k != "weight_max"}
        if extra:
            out["diagnostics"] = extra
        return out


def contrast(result_a: EstimateResult, result_b: EstimateResult,
             alpha: float | None = None) -> EstimateResult:
    """``theta_a - theta_b`` with variance from per-subject EIF differences."""
    if result_a.n != result_b.n:
        raise SampleMismatch("results were computed on different samples")
    fa, fb = result_a.folds, result_b.folds
    if (fa is None) != (fb is None) or (
            fa is not None and not np.array_equal(fa.membership, fb.membership)):
        raise SampleMismatch("results were computed with different folds")
    alpha = result_a.alpha if alpha is None else alpha
    est = result_a.theta - result_b.theta
    diff = result_a.phi - result_b.phi
    se, lo, hi = eif_variance_ci(diff, est, alpha)
    if se > 0:
        p = 2 * (1 - NormalDist().cdf(abs(est) / se))
    else:
        p = 1.0 if est == 0 else 0.0
    return EstimateResult(f"contrast({result_a.estimator},{result_b.estimator})", est, se,
                          (lo, hi), alpha, float(np.mean(diff) - est), diff,
                          {"degenerate_variance": se == 0}, fa, result_a.seed, p)
