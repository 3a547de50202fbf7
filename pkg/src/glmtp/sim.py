"""Survival simulation with time-varying confounding and a Monte Carlo harness.

Data-generating mechanism (five time points, absorbing exposure and outcome)::

    L_0 ~ N(0, 1)                       (latent)
    L_t = 0.5 L_{t-1} + e_t,  e_t ~ N(0, 1)         while Y_{t-1} = 0
    A_t = 1                             if A_{t-1} = 1
        ~ Bernoulli(expit(-1.5 + 0.3 L_t))          otherwise
    Y_t = 1                             if Y_{t-1} = 1
        ~ Bernoulli(expit(-2 + 0.4 L_t - 0.8 A_t))  otherwise

After the event, covariates and treatment are carried forward and the subject
is flagged as no longer at risk. The analysis outcome is ``Y_5``.
"""
from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, GLMTPError
from .learners import DegenerateRule, HistorySpec, LearnerSpec, expit, fit_propensity_sequence
from .oracle import NPSEMSpec, mc_truth_npsem
from .panel import Panel, assign_folds
from .policy import PolicySpec, make_delay_absorbing


@dataclass(frozen=True)
class Fig3Params:
    tau: int = 5
    rho: float = 0.5
    a_coef: tuple = (-1.5, 0.3)
    y_coef: tuple = (-2.0, 0.4, -0.8)


HIGH_SURVIVAL = Fig3Params(y_coef=(-6.0, 0.4, -0.8))


def _simulate(U: dict, params: Fig3Params, policy: PolicySpec | None = None):
    """Shared forward recursion; ``policy=None`` gives the observed data."""
    M = U["L0"].shape[0]
    tau = params.tau
    L = np.zeros((M, tau))
    A = np.zeros((M, tau))
    nat = np.zeros((M, tau))
    Yt = np.zeros((M, tau))
    risk = np.ones((M, tau), dtype=bool)
    prev_l = U["L0"]
    prev_a = np.zeros(M)
    prev_y = np.zeros(M)
    for t in range(1, tau + 1):
        live = prev_y == 0
        risk[:, t - 1] = live
        lt = np.where(live, params.rho * prev_l + U["e"][:, t - 1], prev_l)
        p_a = expit(params.a_coef[0] + params.a_coef[1] * lt)
        draw = (U["ua"][:, t - 1] < p_a).astype(float)
        at_nat = np.where(live, np.where(prev_a == 1, 1.0, draw), prev_a)
        nat[:, t - 1] = at_nat
        if policy is None:
            at = at_nat
        else:
            at = policy.evaluate(t, nat[:, :t], A[:, : t - 1], [L[:, u:u + 1] for u in range(t - 1)]
                                 + [lt[:, None]], (0.0, 1.0))
        b0, bl, ba = params.y_coef
        p_y = expit(b0 + bl * lt + ba * at)
        yt = np.where(live, (U["uy"][:, t - 1] < p_y).astype(float), 1.0)
        L[:, t - 1], A[:, t - 1], Yt[:, t - 1] = lt, at, yt
        prev_l, prev_a, prev_y = lt, at, yt
    return L, A, nat, Yt, risk


def _exogenous(rng: np.random.Generator, M: int, tau: int) -> dict:
    return {"L0": rng.standard_normal(M), "e": rng.standard_normal((M, tau)),
            "ua": rng.random((M, tau)), "uy": rng.random((M, tau))}


def draw_panel_fig3(n: int, seed, params: Fig3Params = Fig3Params(),
                    return_latent: bool = False):
    """Simulate ``n`` subjects; ``seed`` is an int or a Generator."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = _exogenous(rng, n, params.tau)
    L, A, _, Yt, risk = _simulate(U, params)
    panel = Panel(L=[L[:, t:t + 1] for t in range(params.tau)], A=A, Y=Yt[:, -1],
                  supports=[(0.0, 1.0)] * params.tau, y_bounds=(0.0, 1.0), at_risk=risk,
                  L_names=[("x",)] * params.tau)
    if return_latent:
        return panel, {"L0": U["L0"], "Y_path": Yt}
    return panel


def fig3_npsem(params: Fig3Params = Fig3Params()) -> NPSEMSpec:
    """The same mechanism as structural equations for counterfactual draws."""
    tau = params.tau

    def sample_U(rng, M):
        return _exogenous(rng, M, tau)

    def f_L(t, U, ad, L, aux):
        if t == 1:
            aux["y"] = np.zeros(U["L0"].shape[0])
            aux["l"] = U["L0"]
        live = aux["y"] == 0
        lt = np.where(live, params.rho * aux["l"] + U["e"][:, t - 1], aux["l"])
        aux["l"], aux["live"] = lt, live
        return lt[:, None]

    def f_A(t, U, ad, L, aux):
        prev = ad[:, t - 2] if t > 1 else np.zeros(U["L0"].shape[0])
        p_a = expit(params.a_coef[0] + params.a_coef[1] * aux["l"])
        draw = (U["ua"][:, t - 1] < p_a).astype(float)
        at = np.where(aux["live"], np.where(prev == 1, 1.0, draw), prev)
        return at

    # Y_t depends on the assigned A_t, which the rule sets after f_A returns;
    # it is resolved at the start of the next step (or in f_Y).
    def _resolve(t, U, ad, aux):
        b0, bl, ba = params.y_coef
        p_y = expit(b0 + bl * aux["l"] + ba * ad[:, t - 1])
        aux["y"] = np.where(aux["live"], (U["uy"][:, t - 1] < p_y).astype(float), 1.0)

    def f_L_wrapped(t, U, ad, L, aux):
        if t > 1:
            _resolve(t - 1, U, ad, aux)
        return f_L(t, U, ad, L, aux)

    def f_Y(U, ad, L, aux):
        _resolve(tau, U, ad, aux)
        return aux["y"]

    return NPSEMSpec(tau, sample_U, f_L_wrapped, f_A, f_Y, ((0.0, 1.0),) * tau, "fig3")


def fig3_truth(policy: PolicySpec | None = None, M: int = 1_000_000, seed: int = 20240601,
               params: Fig3Params = Fig3Params()) -> tuple:
    """``(theta*, mc_se)`` for ``policy`` (default: delay by one)."""
    policy = policy or make_delay_absorbing(1)
    return mc_truth_npsem(fig3_npsem(params), policy, M, seed)


# ---------------------------------------------------------------------------
# Estimation settings used in the study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudySettings:
    outcome: LearnerSpec = field(default_factory=lambda: LearnerSpec(family="binomial",
                                                                     features="interactions"))
    treatment: LearnerSpec = field(default_factory=lambda: LearnerSpec(family="binomial",
                                                                       features="main"))
    history: HistorySpec = field(default_factory=lambda: HistorySpec(window=0))
    J: int = 2
    alpha: float = 0.05
    degenerate: tuple = (DegenerateRule("absorbing_exposure", 1.0),)


def estimate_replication(panel: Panel, policy: PolicySpec, estimators, settings: StudySettings,
                         fold_seed: int) -> dict:
    """Run every estimator on one panel with shared folds and propensities."""
    from .sdr import sdr_estimate
    from .tmle import tmle_estimate

    folds = assign_folds(panel.n, settings.J, fold_seed)
    props = fit_propensity_sequence(panel, folds, settings.treatment, settings.degenerate,
                                    settings.history)
    out = {}
    for name in estimators:
        fn = {"tmle": tmle_estimate, "sdr": sdr_estimate}[name]
        try:
            res = fn(panel, policy, settings.outcome, settings.treatment, folds=folds,
                     seed=fold_seed, alpha=settings.alpha, history=settings.history,
                     propensity=props)
            out[name] = {"theta": res.theta, "ci": (res.ci[0], res.ci[1]), "se": res.se,
                         "eif_residual": res.eif_residual,
                         "eif_solved": res.diagnostics.get("eif_solved"),
                         "error": None}
        except GLMTPError as exc:
            out[name] = {"theta": math.nan, "ci": (math.nan, math.nan), "se": math.nan,
                         "eif_residual": math.nan, "eif_solved": None,
                         "error": f"{type(exc).__name__}: {exc}"}
    return out


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

def summarize_metrics(estimates, cis, theta_star: float) -> dict:
    """Absolute bias, MSE and CI coverage of a set of estimates."""
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if est.size == 0:
        raise EmptyInput("no estimates to summarize")
    cis = np.asarray(cis, dtype=float).reshape(-1, 2)
    err = est - theta_star
    cover = (cis[:, 0] <= theta_star) & (theta_star <= cis[:, 1])
    return {"abs_bias": abs(math.fsum(err.tolist()) / est.size),
            "mse": math.fsum((err * err).tolist()) / est.size,
            "coverage": float(np.mean(cover))}


@dataclass(frozen=True)
class MCReport:
    """Table of per-(n, estimator) metrics and the raw replication records."""

    rows: tuple
    theta_star: float
    theta_mc_se: float | None
    reps: int
    seed: int
    records: tuple = ()

    def row(self, n: int, estimator: str) -> dict:
        for r in self.rows:
            if r["n"] == n and r["estimator"] == estimator:
                return r
        raise KeyError((n, estimator))

    def to_dict(self, include_records: bool = False) -> dict:
        out = {"theta_star": self.theta_star, "theta_mc_se": self.theta_mc_se,
               "reps": self.reps, "seed": self.seed, "rows": [dict(r) for r in self.rows]}
        if include_records:
            out["records"] = [dict(r) for r in self.records]
        return out

    def to_json(self, include_records: bool = False) -> str:
        return json.dumps(self.to_dict(include_records), indent=2, sort_keys=True,
                          allow_nan=True) + "\n"

    COLUMNS = ("n", "estimator", "abs_bias", "mse", "n_mse", "coverage", "reps", "failures")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            buf.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                               for c in self.COLUMNS) + "\n")
        return buf.getvalue()

    def pretty(self) -> str:
        lines = [f"theta* = {self.theta_star:.6f}"
                 + ("" if self.theta_mc_se is None else f" (MC se {self.theta_mc_se:.2g})"),
                 f"{'n':>7} {'estimator':>9} {'|bias|':>8} {'MSE':>8} {'nMSE':>8} "
                 f"{'cover':>6} {'fail':>5}"]
        for r in self.rows:
            lines.append(f"{r['n']:>7} {r['estimator']:>9} {r['abs_bias']:>8.4f} "
                         f"{r['mse']:>8.5f} {r['n_mse']:>8.3f} {r['coverage']:>6.3f} "
                         f"{r['failures']:>5}")
        return "\n".join(lines)


def replication_seeds(seed: int, size_index: int, rep: int) -> tuple:
    """Independent (panel, fold) seeds for one replication."""
    ss = np.random.SeedSequence(seed, spawn_key=(size_index, rep))
    panel_seed, fold_seed = ss.generate_state(2, dtype=np.uint32)
    return int(panel_seed), int(fold_seed)


def _one_rep(args):
    n, si, rep, seed, estimators, policy_cfg, params, settings = args
    from .policy import policy_from_config

    policy = policy_from_config(policy_cfg) if isinstance(policy_cfg, dict) else policy_cfg
    panel_seed, fold_seed = replication_seeds(seed, si, rep)
    panel = draw_panel_fig3(n, panel_seed, params)
    res = estimate_replication(panel, policy, estimators, settings, fold_seed)
    return [{"n": n, "rep": rep, "estimator": name, **vals, "ci": list(vals["ci"])}
            for name, vals in res.items()]


def run_monte_carlo(sizes, reps: int, estimators=("tmle", "sdr"), policy=None, seed: int = 0,
                    theta_star: float | None = None, theta_mc_se: float | None = None,
                    params: Fig3Params = Fig3Params(), settings: StudySettings | None = None,
                    threads: int = 1, truth_M: int = 1_000_000, truth_seed: int | None = None,
                    progress=None) -> MCReport:
    """Simulation study on the survival mechanism.

    ``policy`` is a :class:`PolicySpec` or a policy config mapping (the
    latter is required for ``threads > 1``). Failed replications are kept
    in the records with their error and excluded from the metrics.
    """
    policy = policy if policy is not None else {"kind": "delay", "kappa": 1}
    settings = settings or StudySettings()
    if theta_star is None:
        from .policy import policy_from_config

        pol = policy_from_config(policy) if isinstance(policy, dict) else policy
        theta_star, theta_mc_se = fig3_truth(pol, truth_M,
                                             seed if truth_seed is None else truth_seed, params)
    tasks = [(int(n), si, rep, seed, tuple(estimators), policy, params, settings)
             for si, n in enumerate(sizes) for rep in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_rep, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    else:
        results = []
        for k, task in enumerate(tasks):
            results.append(_one_rep(task))
            if progress is not None:
                progress(k + 1, len(tasks))
    records = tuple(r for batch in results for r in batch)
    rows = []
    for n in sizes:
        for name in estimators:
            recs = [r for r in records if r["n"] == n and r["estimator"] == name]
            ok = [r for r in recs if r["error"] is None]
            row = {"n": int(n), "estimator": name, "reps": len(recs),
                   "failures": len(recs) - len(ok)}
            if ok:
                met = summarize_metrics([r["theta"] for r in ok], [r["ci"] for r in ok],
                                        theta_star)
                row.update(met)
                row["n_mse"] = n * met["mse"]
            else:
                row.update({"abs_bias": math.nan, "mse": math.nan, "coverage": math.nan,
                            "n_mse": math.nan})
            rows.append(row)
    return MCReport(tuple(rows), float(theta_star),
                    None if theta_mc_se is None else float(theta_mc_se), reps, seed, records)


def normal_expit_mean(a: float, b: float, var: float, nodes: int = 80) -> float:
    """``E[expit(a + b X)]`` for ``X ~ N(0, var)`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * expit(a + b * math.sqrt(var) * x)) / math.sqrt(2 * math.pi))
