"""Ground truth for finite discrete data-generating processes and NPSEMs.

Two independent exact computations of the policy value are provided:

* :func:`exact_theta_discrete` enumerates every covariate/natural-treatment
  path and weights the outcome mean at the intervened history by the
  product of conditional masses given the intervened past.
* :func:`sequential_theta_discrete` runs the backward sequential-regression
  recursion with the exact conditional tables over full natural histories.

The same exact tables back the oracle learners used to inject true
nuisances into the estimators, and brute-force evaluations of ``phi`` and of
the second-order remainder used as test oracles.
"""
from __future__ import annotations

import itertools
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import IntractableSupport, MalformedInput
from .gcomp import StageQuery
from .learners import PropensitySet
from .panel import Panel
from .policy import PolicySpec

ENUM_CAP = 10_000_000


# ---------------------------------------------------------------------------
# Discrete DGP
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DiscreteDGP:
    """Finite-support longitudinal law with one scalar covariate per time.

    Histories are tuples ``(l_1, a_1, ..., l_t)`` (before ``A_t``) or
    ``(l_1, a_1, ..., l_t, a_t)``.

    Attributes
    ----------
    L_supports, A_supports : per-time value tuples
    pL : ``pL[t-1][(l_1, a_1, ..., a_{t-1})]`` -> masses over ``L_supports[t-1]``
    gA : ``gA[t-1][(l_1, a_1, ..., l_t)]`` -> masses over ``A_supports[t-1]``
    EY : ``EY[(l_1, a_1, ..., l_tau, a_tau)]`` -> outcome mean in ``y_bounds``
    """

    L_supports: tuple
    A_supports: tuple
    pL: tuple
    gA: tuple
    EY: dict
    y_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name, tables in (("pL", self.pL), ("gA", self.gA)):
            for t, tab in enumerate(tables, start=1):
                for key, p in tab.items():
                    p = np.asarray(p, dtype=float)
                    if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-12:
                        raise MalformedInput(f"{name}[{t}] at {key} is not a distribution")

    @property
    def tau(self) -> int:
        return len(self.A_supports)

    def histories(self, t: int, with_a: bool):
        """All ``(l_1, a_1, ..., l_t[, a_t])`` tuples."""
        pools = []
        for u in range(1, t + 1):
            pools.append(self.L_supports[u - 1])
            if u < t or with_a:
                pools.append(self.A_supports[u - 1])
        return itertools.product(*pools)

    def enumeration_size(self) -> int:
        return int(np.prod([len(l) * len(a) for l, a in zip(self.L_supports, self.A_supports)]))

    def mean_outcome(self) -> float:
        """``E[Y]`` directly from the tables (no intervention)."""
        terms = []

        def rec(t, hist, prob):
            if t > self.tau:
                terms.append(prob * self.EY[hist])
                return
            for l, pl in zip(self.L_supports[t - 1], self.pL[t - 1][hist]):
                h = hist + (l,)
                for a, pa in zip(self.A_supports[t - 1], self.gA[t - 1][h]):
                    rec(t + 1, h + (a,), prob * pl * pa)

        rec(1, (), 1.0)
        return math.fsum(terms)

    def path_probabilities(self) -> dict:
        """Mass of every full observed path ``(l_1, a_1, ..., l_tau, a_tau)``."""
        out = {}
        for h in self.histories(self.tau, True):
            p = 1.0
            for t in range(1, self.tau + 1):
                pre = h[: 2 * (t - 1)]
                l, a = h[2 * (t - 1)], h[2 * (t - 1) + 1]
                p *= self.pL[t - 1][pre][self.L_supports[t - 1].index(l)]
                p *= self.gA[t - 1][pre + (l,)][self.A_supports[t - 1].index(a)]
            out[h] = p
        return out


def _draw_probs(rng, k, min_prob, grid=None):
    if grid is not None:
        if k != 2:
            raise MalformedInput("dyadic tables are only provided for binary supports")
        p = float(rng.choice(grid))
        return np.array([p, 1 - p])
    p = rng.dirichlet(np.ones(k))
    p = min_prob + (1 - k * min_prob) * p
    return p / p.sum()


def random_discrete_dgp(tau: int, rng: np.random.Generator, L_card: int = 2, A_card: int = 2,
                        min_prob: float = 0.05, confounding: float = 0.0,
                        dyadic: bool = False) -> DiscreteDGP:
    """Random strictly positive tables.

    ``confounding > 0`` makes treatment and outcome depend strongly on the
    current covariate (used to separate correct from incorrect nuisances).
    ``dyadic=True`` draws binary masses from {1/4, 1/2, 3/4} so that exact
    replicated panels exist (see :func:`replicated_panel`).
    """
    Ls = tuple(tuple(float(v) for v in range(L_card)) for _ in range(tau))
    As = tuple(tuple(float(v) for v in range(A_card)) for _ in range(tau))
    grid = (0.25, 0.5, 0.75) if dyadic else None
    pL, gA = [], []
    for t in range(1, tau + 1):
        tabL, tabA = {}, {}
        for h in itertools.product(*[v for u in range(t - 1) for v in (Ls[u], As[u])]):
            tabL[h] = _draw_probs(rng, L_card, min_prob, grid)
        dgp_partial = [v for u in range(t - 1) for v in (Ls[u], As[u])] + [Ls[t - 1]]
        for h in itertools.product(*dgp_partial):
            if confounding and A_card == 2 and not dyadic:
                z = confounding * (2 * h[-1] / max(L_card - 1, 1) - 1) + rng.normal(0, 0.3)
                p1 = float(np.clip(1 / (1 + math.exp(-z)), 0.05, 0.95))
                tabA[h] = np.array([1 - p1, p1])
            else:
                tabA[h] = _draw_probs(rng, A_card, min_prob, grid)
        pL.append(tabL)
        gA.append(tabA)
    EY = {}
    full = [v for u in range(tau) for v in (Ls[u], As[u])]
    for h in itertools.product(*full):
        if confounding:
            ls = sum(h[0::2]) / max(tau * (L_card - 1), 1)
            as_ = sum(h[1::2]) / max(tau * (A_card - 1), 1)
            z = confounding * (2 * ls - 1) - 0.8 * confounding * as_ + rng.normal(0, 0.2)
            EY[h] = float(np.clip(1 / (1 + math.exp(-z)), 0.02, 0.98))
        else:
            EY[h] = float(rng.uniform(0.05, 0.95))
    return DiscreteDGP(Ls, As, tuple(pL), tuple(gA), EY)


# ---------------------------------------------------------------------------
# Policy evaluation on scalar histories
# ---------------------------------------------------------------------------

def _rule(policy: PolicySpec, t: int, natural, hist) -> float:
    """``d_t`` at natural values ``natural`` (length t) and history ``(l_1, a_1, ..., l_t)``."""
    nat = np.asarray(natural, dtype=float).reshape(1, -1)
    ad = np.asarray(hist[1::2], dtype=float).reshape(1, -1)
    covs = [np.array([[v]], dtype=float) for v in hist[0::2]]
    return float(policy.evaluate(t, nat, ad, covs)[0])


def exact_theta_discrete(dgp: DiscreteDGP, policy: PolicySpec, cap: int = ENUM_CAP,
                         return_audit: bool = False):
    """Policy value by enumeration of all natural paths.

    With ``return_audit=True`` also returns the list of intervened histories
    reached with positive mass at which the assigned treatment has zero
    probability (positivity failures).
    """
    if dgp.enumeration_size() > cap:
        raise IntractableSupport(f"{dgp.enumeration_size()} paths exceed the cap {cap}")
    tau = dgp.tau
    terms: list = []
    audit: list = []

    def rec(t, natural, hist_d, prob):
        if t > tau:
            terms.append(prob * dgp.EY[hist_d])
            return
        for l, pl in zip(dgp.L_supports[t - 1], dgp.pL[t - 1][hist_d]):
            if pl == 0:
                continue
            h = hist_d + (l,)
            g = dgp.gA[t - 1][h]
            for a, pa in zip(dgp.A_supports[t - 1], g):
                if pa == 0:
                    continue
                nat = natural + (a,)
                ad = _rule(policy, t, nat, h)
                if g[dgp.A_supports[t - 1].index(ad)] == 0:
                    audit.append((t, h, ad))
                rec(t + 1, nat, h + (ad,), prob * pl * pa)

    rec(1, (), (), 1.0)
    theta = math.fsum(terms)
    return (theta, audit) if return_audit else theta


class ExactRegressions:
    """Exact ``m_t(s_t, a_t, h_t)`` and ``q_t`` over full natural histories."""

    def __init__(self, dgp: DiscreteDGP, policy: PolicySpec):
        self.dgp, self.policy = dgp, policy
        self.m = lru_cache(maxsize=None)(self._m)
        self.q = lru_cache(maxsize=None)(self._q)

    def _m(self, t, s, a, h):
        dgp = self.dgp
        ha = h + (a,)
        if t == dgp.tau:
            return dgp.EY[ha]
        terms = []
        for l, pl in zip(dgp.L_supports[t], dgp.pL[t][ha]):
            hl = ha + (l,)
            for a2, pa in zip(dgp.A_supports[t], dgp.gA[t][hl]):
                terms.append(pl * pa * self.q(t + 1, s, a2, hl))
        return math.fsum(terms)

    def _q(self, t, s_prev, a, h):
        s = s_prev + (a,)
        return self.m(t, s, _rule(self.policy, t, s, h), h)

    def theta(self) -> float:
        dgp = self.dgp
        terms = []
        for l, pl in zip(dgp.L_supports[0], dgp.pL[0][()]):
            for a, pa in zip(dgp.A_supports[0], dgp.gA[0][(l,)]):
                terms.append(pl * pa * self.q(1, (), a, (l,)))
        return math.fsum(terms)

    def g(self, t, a, h) -> float:
        return float(self.dgp.gA[t - 1][h][self.dgp.A_supports[t - 1].index(a)])


def sequential_theta_discrete(dgp: DiscreteDGP, policy: PolicySpec) -> float:
    """Policy value from the backward sequential-regression recursion."""
    return ExactRegressions(dgp, policy).theta()


# ---------------------------------------------------------------------------
# Panels drawn from a discrete DGP
# ---------------------------------------------------------------------------

def _history_tuples(panel: Panel, t: int, with_a: bool, rows=None):
    rows = np.arange(panel.n) if rows is None else rows
    cols = []
    for u in range(1, t + 1):
        cols.append(panel.L[u - 1][rows, 0])
        if u < t or with_a:
            cols.append(panel.A[rows, u - 1])
    return np.column_stack(cols) if cols else np.zeros((len(rows), 0))


def sample_panel(dgp: DiscreteDGP, n: int, rng: np.random.Generator,
                 bernoulli: bool = True) -> Panel:
    """Forward sampling; ``Y`` is Bernoulli(EY) (or equal to ``EY`` if not)."""
    tau = dgp.tau
    cols = np.zeros((n, 0))
    L, A = [], np.zeros((n, tau))
    for t in range(1, tau + 1):
        keys, inv = np.unique(cols, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        lt = np.empty(n)
        for k, key in enumerate(keys):
            rows = np.flatnonzero(inv == k)
            p = dgp.pL[t - 1][tuple(float(v) for v in key)]
            lt[rows] = rng.choice(dgp.L_supports[t - 1], size=rows.size, p=p)
        cols = np.column_stack([cols, lt])
        keys, inv = np.unique(cols, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        at = np.empty(n)
        for k, key in enumerate(keys):
            rows = np.flatnonzero(inv == k)
            p = dgp.gA[t - 1][tuple(float(v) for v in key)]
            at[rows] = rng.choice(dgp.A_supports[t - 1], size=rows.size, p=p)
        cols = np.column_stack([cols, at])
        L.append(lt[:, None])
        A[:, t - 1] = at
    ey = np.array([dgp.EY[tuple(r)] for r in cols.tolist()])
    Y = (rng.random(n) < ey).astype(float) if bernoulli else ey
    return Panel(L=L, A=A, Y=Y, supports=dgp.A_supports, y_bounds=dgp.y_bounds,
                 L_names=[("x",)] * tau)


def replicated_panel(dgp: DiscreteDGP, denominator: int | None = None) -> Panel:
    """A panel whose empirical law equals the DGP exactly.

    Every path is replicated ``p * N`` times (``N`` the common denominator
    of the path masses, inferred when not given) and ``Y`` is set to the
    exact conditional mean.
    """
    probs = dgp.path_probabilities()
    if denominator is None:
        denominator = 1
        while denominator <= 2 ** 24:
            if all(abs(p * denominator - round(p * denominator)) < 1e-9 for p in probs.values()):
                break
            denominator *= 2
        else:
            raise MalformedInput("path masses are not dyadic")
    rows = []
    for h, p in probs.items():
        rows.extend([h] * int(round(p * denominator)))
    H = np.array(rows, dtype=float)
    tau = dgp.tau
    Y = np.array([dgp.EY[tuple(r)] for r in rows])
    return Panel(L=[H[:, 2 * t: 2 * t + 1] for t in range(tau)], A=H[:, 1::2], Y=Y,
                 supports=dgp.A_supports, y_bounds=dgp.y_bounds, L_names=[("x",)] * tau)


# ---------------------------------------------------------------------------
# Oracle nuisances
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class OracleStageLearner:
    """Stage learner returning exact ``m_t``; it ignores the data it is fitted on.

    ``affine=(c0, c1)`` reports ``c0 + c1 * m`` (for example the bounded scale
    used by TMLE).
    """

    dgp: DiscreteDGP
    policy: PolicySpec
    affine: tuple | None = None
    unit_scale: bool = False

    def __post_init__(self):
        self.exact = ExactRegressions(self.dgp, self.policy)

    @classmethod
    def bounded(cls, dgp, policy, eps: float = 1e-3):
        a, b = dgp.y_bounds
        c1 = (1 - 2 * eps) / (b - a)
        return cls(dgp, policy, (eps - a * c1, c1))

    def fit(self, query: StageQuery, y):
        return self

    def pseudo_outcome_learner(self):
        return self

    def predict(self, query: StageQuery) -> np.ndarray:
        t = query.t
        hist = _history_tuples(query.panel, t, False, query.subject)
        first = [self.dgp.A_supports[u - 1][0] for u in range(1, t + 1)]
        keys = np.column_stack([hist, query.s, query.a]) if query.s.size else \
            np.column_stack([hist, query.a])
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        out = np.empty(uniq.shape[0])
        nh = hist.shape[1]
        for r, key in enumerate(uniq.tolist()):
            h = tuple(key[:nh])
            s = list(first)
            for j, u in enumerate(query.lags):
                s[u - 1] = key[nh + j]
            out[r] = self.exact.m(t, tuple(s), key[-1], h)
        vals = out[inv.reshape(-1)]
        if self.affine is not None:
            vals = self.affine[0] + self.affine[1] * vals
        return vals


def oracle_propensity(dgp: DiscreteDGP, panel: Panel) -> PropensitySet:
    probs, degen = [], []
    for t in range(1, dgp.tau + 1):
        hist = _history_tuples(panel, t, False)
        P = np.array([dgp.gA[t - 1][tuple(r)] for r in hist.tolist()])
        probs.append(P)
        degen.append(np.zeros(panel.n, dtype=bool))
    return PropensitySet(tuple(probs), tuple(degen), panel.supports, panel.A)


# ---------------------------------------------------------------------------
# Brute-force EIF and remainder (test oracles)
# ---------------------------------------------------------------------------

def _stable_noise(seed: int, key) -> float:
    """Deterministic N(0,1)-like draw keyed on ``key``."""
    h = zlib.crc32(repr((int(seed), key)).encode())
    return float(np.random.default_rng(h).normal())


class EtaFunctions:
    """Nuisance functions over explicit histories.

    ``m(t, s, a, h)`` with ``s`` the full natural tuple ``s_1..s_t``,
    ``g(t, a, h)`` with ``h = (l_1, a_1, ..., l_t)``.
    """

    def __init__(self, m: Callable, g: Callable, policy: PolicySpec, tau: int):
        self._m, self._g, self.policy, self.tau = m, g, policy, tau

    def m(self, t, s, a, h):
        return self._m(t, tuple(s), a, tuple(h))

    def g(self, t, a, h):
        return self._g(t, a, tuple(h))

    def q(self, t, s_prev, a, h):
        """``q_t(s_{t-1}, a_t, h_t)``; ``q_{tau+1}`` is handled by the caller."""
        s = tuple(s_prev) + (a,)
        return self.m(t, s, _rule(self.policy, t, s, h), h)


def exact_eta(dgp: DiscreteDGP, policy: PolicySpec) -> EtaFunctions:
    ex = ExactRegressions(dgp, policy)
    return EtaFunctions(ex.m, ex.g, policy, dgp.tau)


def perturbed_eta(dgp: DiscreteDGP, policy: PolicySpec, seed: int, m_scale: float = 0.1,
                  g_scale: float = 0.5, lags: Sequence[tuple] | None = None) -> EtaFunctions:
    """Exact nuisances with deterministic perturbations.

    ``lags[t-1]`` restricts the natural lags the perturbation of ``m_t`` may
    depend on (by default all of ``s_1..s_t``).
    """
    ex = ExactRegressions(dgp, policy)

    def m(t, s, a, h):
        keep = tuple(s) if lags is None else tuple(s[u - 1] for u in lags[t - 1])
        key = ("m", t, tuple(map(float, keep)), float(a), tuple(map(float, h)))
        return ex.m(t, s, a, h) + m_scale * _stable_noise(seed, key)

    @lru_cache(maxsize=None)
    def gvec(t, h):
        base = np.asarray(dgp.gA[t - 1][h], dtype=float)
        hk = tuple(map(float, h))
        noise = np.array([_stable_noise(seed, ("g", t, float(v), hk))
                          for v in dgp.A_supports[t - 1]])
        w = base * np.exp(g_scale * noise)
        return w / w.sum()

    def g(t, a, h):
        return float(gvec(t, h)[dgp.A_supports[t - 1].index(a)])

    return EtaFunctions(m, g, policy, dgp.tau)


def brute_phi(t: int, s_path, path, y: float, eta: EtaFunctions,
              A_supports: Sequence[Sequence[float]]) -> float:
    """``phi_{t+1}(s_t, Z)`` by literal enumeration of ``s_{t+1..k}``.

    ``path`` is the observed ``(l_1, a_1, ..., l_tau, a_tau)`` and ``y`` the
    outcome value.
    """
    tau = eta.tau
    s_path = tuple(s_path)

    def H(k):
        return tuple(path[: 2 * k - 1])

    def A(k):
        return path[2 * k - 1]

    def q_next(k, s):
        if k == tau:
            return y
        return eta.q(k + 1, s, A(k + 1), H(k + 1))

    terms = [q_next(t, s_path) if t < tau else y]
    for k in range(t + 1, tau + 1):
        for tail in itertools.product(*A_supports[t:k]):
            s = s_path + tuple(tail)
            ok = True
            w = 1.0
            for u in range(t + 1, k + 1):
                if _rule(eta.policy, u, s[:u], H(u)) != A(u):
                    ok = False
                    break
                w *= eta.g(u, s[u - 1], H(u)) / eta.g(u, A(u), H(u))
            if ok:
                terms.append(w * (q_next(k, s) - eta.m(k, s, A(k), H(k))))
    return math.fsum(terms)


def _continuations(dgp: DiscreteDGP, t: int, h_with_a: tuple, until: int | None = None):
    """Yield ``(full_path, prob)`` extending ``(l_1, a_1, ..., l_t, a_t)``."""
    until = dgp.tau if until is None else until

    def rec(u, hist, prob):
        if u > until:
            yield hist, prob
            return
        for l, pl in zip(dgp.L_supports[u - 1], dgp.pL[u - 1][hist]):
            hl = hist + (l,)
            for a, pa in zip(dgp.A_supports[u - 1], dgp.gA[u - 1][hl]):
                yield from rec(u + 1, hl + (a,), prob * pl * pa)

    yield from rec(t + 1, h_with_a, 1.0)


def conditional_phi_mean(dgp: DiscreteDGP, eta: EtaFunctions, t: int, s_path, a_t=None,
                         h_t=None, cap: int = ENUM_CAP) -> float:
    """``E[phi_{t+1}(s_t, Z; eta) | A_t = a_t, H_t = h_t]`` by enumeration."""
    if dgp.enumeration_size() > cap:
        raise IntractableSupport("enumeration exceeds the cap")
    start = () if t == 0 else tuple(h_t) + (a_t,)
    terms = []
    for path, prob in _continuations(dgp, t, start):
        terms.append(prob * brute_phi(t, s_path, path, dgp.EY[path], eta, dgp.A_supports))
    return math.fsum(terms)


def remainder_term(eta_prime: EtaFunctions, eta_true: EtaFunctions, dgp: DiscreteDGP,
                   t: int, s_path, cell=None, cap: int = ENUM_CAP) -> float:
    """Second-order remainder ``Rem_t(s_t, a_t, h_t; eta')`` by enumeration.

    ``cell = (a_t, h_t)`` with ``h_t = (l_1, a_1, ..., l_t)``; ignored for
    ``t = 0``.
    """
    if dgp.enumeration_size() > cap:
        raise IntractableSupport("enumeration exceeds the cap")
    tau = dgp.tau
    if t == tau:
        return 0.0
    start = () if t == 0 else tuple(cell[1]) + (cell[0],)
    s_path = tuple(s_path)
    terms = []
    for path, prob in _continuations(dgp, t, start):
        def H(k):
            return tuple(path[: 2 * k - 1])

        def A(k):
            return path[2 * k - 1]

        for k in range(t + 1, tau + 1):
            for tail in itertools.product(*dgp.A_supports[t:k]):
                s = s_path + tuple(tail)
                ok = all(_rule(eta_true.policy, u, s[:u], H(u)) == A(u)
                         for u in range(t + 1, k + 1))
                if not ok:
                    continue
                c = 1.0
                for r in range(t + 1, k):
                    c *= eta_prime.g(r, s[r - 1], H(r)) / eta_prime.g(r, A(r), H(r))
                rp = eta_prime.g(k, s[k - 1], H(k)) / eta_prime.g(k, A(k), H(k))
                rt = eta_true.g(k, s[k - 1], H(k)) / eta_true.g(k, A(k), H(k))
                dm = eta_prime.m(k, s, A(k), H(k)) - eta_true.m(k, s, A(k), H(k))
                terms.append(prob * c * (rp - rt) * dm)
    return math.fsum(terms)


def expansion_residual(dgp: DiscreteDGP, eta_prime: EtaFunctions, eta_true: EtaFunctions,
                       t: int, s_path, cell=None, m_prime_0: float = 0.0,
                       printed_form: bool = False) -> float:
    """Residual of the first-order expansion of ``m'_t - m_t`` at one cell.

    The balanced identity is
    ``m'_t - m_t + E[phibar_{t+1}(eta') | A_t, H_t] + Rem_t = 0`` where
    ``phibar_{t+1}(eta') = phi_{t+1}(eta') - m'_t``. With
    ``printed_form=True`` the residual of ``m'_t - m_t - E[phibar] - Rem_t``
    is returned instead.
    """
    s_path = tuple(s_path)
    if t == 0:
        m_true = ExactRegressions(dgp, eta_true.policy).theta()
        m_prime = m_prime_0
        a_t = h_t = None
    else:
        a_t, h_t = cell
        m_true = eta_true.m(t, s_path, a_t, h_t)
        m_prime = eta_prime.m(t, s_path, a_t, h_t)
    e_phi = conditional_phi_mean(dgp, eta_prime, t, s_path, a_t, h_t) - m_prime
    rem = remainder_term(eta_prime, eta_true, dgp, t, s_path, cell)
    if printed_form:
        return m_prime - m_true - e_phi - rem
    return m_prime - m_true + e_phi + rem


# ---------------------------------------------------------------------------
# NPSEM Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NPSEMSpec:
    """Structural equations driven by exogenous draws.

    ``sample_U(rng, M)`` returns a dict of arrays; the structural functions
    receive ``(t, U, ad, L, aux)`` where ``ad`` holds the assigned treatments
    so far (shape ``(M, t-1)``), ``L`` the covariate blocks so far and
    ``aux`` a per-batch scratch dict for internal states (e.g. absorbing
    outcomes). ``f_A`` returns the natural treatment value.
    """

    tau: int
    sample_U: Callable
    f_L: Callable
    f_A: Callable
    f_Y: Callable
    supports: tuple = ()
    label: str = "npsem"


def simulate_counterfactual(npsem: NPSEMSpec, policy: PolicySpec, seed=None, U=None,
                            M: int = 1) -> tuple:
    """Draw (natural path, intervened path, outcome) for ``M`` units.

    Pass ``U`` to reuse exogenous draws; otherwise they are drawn from
    ``seed``.
    """
    if U is None:
        U = npsem.sample_U(np.random.default_rng(seed), M)
    M = len(next(iter(U.values())))
    tau = npsem.tau
    nat = np.zeros((M, tau))
    ad = np.zeros((M, tau))
    L: list = []
    aux: dict = {}
    for t in range(1, tau + 1):
        L.append(np.asarray(npsem.f_L(t, U, ad[:, : t - 1], L, aux), dtype=float).reshape(M, -1))
        nat[:, t - 1] = npsem.f_A(t, U, ad[:, : t - 1], L, aux)
        support = npsem.supports[t - 1] if npsem.supports else None
        ad[:, t - 1] = policy.evaluate(t, nat[:, :t], ad[:, : t - 1], L, support)
    Y = np.asarray(npsem.f_Y(U, ad, L, aux), dtype=float)
    return nat, ad, Y


def chunk_seed(seed: int, index: int) -> np.random.Generator:
    """Independent stream for chunk ``index`` of master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def mc_truth_npsem(npsem: NPSEMSpec, policy: PolicySpec, M: int, seed: int,
                   chunk: int = 200_000) -> tuple:
    """Monte Carlo mean of the counterfactual outcome and its standard error."""
    if M < 1:
        raise MalformedInput("M must be >= 1")
    sums, sqs = [], []
    for c, start in enumerate(range(0, M, chunk)):
        m = min(chunk, M - start)
        rng = chunk_seed(seed, c)
        U = npsem.sample_U(rng, m)
        _, _, Y = simulate_counterfactual(npsem, policy, U=U)
        sums.append(math.fsum(Y.tolist()))
        sqs.append(math.fsum((Y * Y).tolist()))
    mean = math.fsum(sums) / M
    var = max(math.fsum(sqs) / M - mean * mean, 0.0) * M / max(M - 1, 1)
    return mean, math.sqrt(var / M)


def npsem_from_dgp(dgp: DiscreteDGP) -> NPSEMSpec:
    """The NPSEM that generates ``dgp`` by inverse-CDF sampling."""
    tau = dgp.tau

    def sample_U(rng, M):
        return {"L": rng.random((M, tau)), "A": rng.random((M, tau)), "Y": rng.random(M)}

    def hist(ad, L, t, with_l):
        cols = []
        for u in range(1, t + 1):
            if u <= len(L) and (u < t or with_l):
                cols.append(L[u - 1][:, 0])
            if u < t:
                cols.append(ad[:, u - 1])
        return np.column_stack(cols) if cols else np.zeros((ad.shape[0], 0))

    def draw(tables, keys, support, u):
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        out = np.empty(keys.shape[0])
        for k, key in enumerate(uniq.tolist()):
            rows = inv == k
            cdf = np.cumsum(tables[tuple(key)])
            idx = np.minimum(np.searchsorted(cdf, u[rows], side="right"), len(support) - 1)
            out[rows] = np.asarray(support)[idx]
        return out

    def f_L(t, U, ad, L, aux):
        return draw(dgp.pL[t - 1], hist(ad, L, t, False), dgp.L_supports[t - 1], U["L"][:, t - 1])

    def f_A(t, U, ad, L, aux):
        return draw(dgp.gA[t - 1], hist(ad, L, t, True), dgp.A_supports[t - 1], U["A"][:, t - 1])

    def f_Y(U, ad, L, aux):
        cols = [v for u in range(tau) for v in (L[u][:, 0], ad[:, u])]
        keys = np.column_stack(cols)
        ey = np.array([dgp.EY[tuple(r)] for r in keys.tolist()])
        return (U["Y"] < ey).astype(float)

    return NPSEMSpec(tau, sample_U, f_L, f_A, f_Y, dgp.A_supports, "discrete")


def imv_npsem() -> NPSEMSpec:
    """Finite-noise oxygen-support NPSEM with levels {0, 1, 2} and three times.

    ``A_1 = U_1``, ``A_2 = U_2``; at time 3 the natural level is ``U_3`` if
    the assigned level at time 2 was invasive (2) and ``V_3`` otherwise.
    """
    levels = (0.0, 1.0, 2.0)

    def sample_U(rng, M):
        return {k: rng.choice(levels, size=M) for k in ("U1", "U2", "U3", "V3")}

    def f_L(t, U, ad, L, aux):
        return np.zeros((len(U["U1"]), 0))

    def f_A(t, U, ad, L, aux):
        if t == 1:
            return U["U1"]
        if t == 2:
            return U["U2"]
        return np.where(ad[:, 1] == 2, U["U3"], U["V3"])

    def f_Y(U, ad, L, aux):
        return (ad == 2).any(axis=1).astype(float)

    return NPSEMSpec(3, sample_U, f_L, f_A, f_Y, (levels,) * 3, "imv")


def enumerate_exogenous(values: dict) -> dict:
    """All combinations of finite exogenous values as aligned arrays."""
    keys = list(values)
    combos = list(itertools.product(*[values[k] for k in keys]))
    return {k: np.array([c[j] for c in combos], dtype=float) for j, k in enumerate(keys)}


# ---------------------------------------------------------------------------
# JSON round trip
# ---------------------------------------------------------------------------

def dgp_to_dict(dgp: DiscreteDGP) -> dict:
    """Plain-data form: tables are lists of ``{"history": [...], "p": [...]}``."""
    def table(tab):
        return [{"history": list(k), "p": [float(v) for v in p]} for k, p in sorted(tab.items())]

    return {"L_supports": [list(s) for s in dgp.L_supports],
            "A_supports": [list(s) for s in dgp.A_supports],
            "pL": [table(t) for t in dgp.pL], "gA": [table(t) for t in dgp.gA],
            "EY": [{"history": list(k), "mean": float(v)} for k, v in sorted(dgp.EY.items())],
            "y_bounds": list(dgp.y_bounds)}


def dgp_from_dict(d: dict) -> DiscreteDGP:
    try:
        def table(entries):
            return {tuple(float(v) for v in e["history"]): np.asarray(e["p"], dtype=float)
                    for e in entries}

        dgp = DiscreteDGP(
            tuple(tuple(float(v) for v in s) for s in d["L_supports"]),
            tuple(tuple(float(v) for v in s) for s in d["A_supports"]),
            tuple(table(t) for t in d["pL"]), tuple(table(t) for t in d["gA"]),
            {tuple(float(v) for v in e["history"]): float(e["mean"]) for e in d["EY"]},
            tuple(d.get("y_bounds", (0.0, 1.0))))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"malformed DGP tables: {exc}") from None
    for h in dgp.histories(dgp.tau, True):
        if h not in dgp.EY:
            raise MalformedInput(f"outcome table lacks history {h}")
    for t in range(1, dgp.tau + 1):
        for h in dgp.histories(t - 1, True) if t > 1 else [()]:
            if h not in dgp.pL[t - 1]:
                raise MalformedInput(f"covariate table {t} lacks history {h}")
        for h in dgp.histories(t, False):
            if h not in dgp.gA[t - 1]:
                raise MalformedInput(f"treatment table {t} lacks history {h}")
    return dgp
