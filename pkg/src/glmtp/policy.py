"""Deterministic modified treatment policies over natural treatment histories.

A rule is evaluated in vectorized form::

    rule(t, natural, intervened, covariates) -> array of shape (m,)

where ``natural`` has shape ``(m, t)`` and holds the natural values
``s_1..s_t`` (column ``t-1`` is the contemporaneous natural value),
``intervened`` has shape ``(m, t-1)`` and holds the treatments actually
assigned so far, and ``covariates`` is a list of ``t`` arrays of shape
``(m, p_u)``. Natural-history entries the caller does not know are NaN; a
rule must only read the lags declared in its footprint.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import MalformedInput, SupportViolation

Rule = Callable[[int, np.ndarray, np.ndarray, list], np.ndarray]


@dataclass(frozen=True)
class PolicySpec:
    """A deterministic G-LMTP.

    Parameters
    ----------
    rule : callable
        Vectorized rule, see the module docstring.
    footprint : callable ``t -> frozenset``
        Natural-history lags (``u < t``) that ``rule`` reads at time ``t``.
    tau : int or None
        Horizon; ``None`` for rule families defined at every horizon.
    label : str
    """

    rule: Rule
    footprint: Callable[[int], frozenset]
    tau: int | None = None
    label: str = "policy"
    params: Mapping = field(default_factory=dict)

    def footprint_at(self, t: int) -> frozenset:
        fp = frozenset(int(u) for u in self.footprint(t))
        if any(not 1 <= u < t for u in fp):
            raise MalformedInput(f"policy {self.label!r} declares lags {sorted(fp)} at t={t}")
        return fp

    @property
    def contemporaneous(self) -> bool:
        horizon = self.tau or 8
        return all(not self.footprint_at(t) for t in range(1, horizon + 1))

    def evaluate(self, t, natural, intervened, covariates, support=None) -> np.ndarray:
        """Vectorized evaluation with an optional support check."""
        out = np.asarray(self.rule(t, natural, intervened, covariates), dtype=float).reshape(-1)
        if out.shape[0] != np.shape(natural)[0]:
            raise MalformedInput(f"policy {self.label!r} returned {out.shape[0]} values "
                                 f"for {np.shape(natural)[0]} rows")
        if np.isnan(out).any():
            raise MalformedInput(f"policy {self.label!r} read a natural lag outside its "
                                 f"declared footprint at t={t}")
        if support is not None:
            bad = ~np.isin(out, np.asarray(support, dtype=float))
            if bad.any():
                raise SupportViolation(f"policy {self.label!r} assigned {out[bad][0]:g} at "
                                       f"t={t}, outside support {tuple(support)}")
        return out


def footprint_of(policy: PolicySpec, t: int) -> frozenset:
    """Lags of the natural history that ``policy`` reads at time ``t``."""
    return policy.footprint_at(t)


def apply_rule(policy: PolicySpec, t: int, natural: Sequence[float],
               intervened: Sequence[float], covariates: Sequence = (),
               support: Sequence[float] | None = None) -> float:
    """Evaluate ``d_t`` on one explicit history.

    ``natural`` has length ``t``, ``intervened`` length ``t-1`` and
    ``covariates`` up to ``t`` entries (scalars or vectors).
    """
    natural = np.asarray(natural, dtype=float).reshape(1, -1)
    intervened = np.asarray(intervened, dtype=float).reshape(1, -1)
    if natural.shape[1] != t or intervened.shape[1] != t - 1:
        raise MalformedInput(f"apply_rule at t={t} needs {t} natural and {t - 1} "
                             "intervened values")
    covs = [np.asarray(c, dtype=float).reshape(1, -1) for c in covariates]
    return float(policy.evaluate(t, natural, intervened, covs, support)[0])


# ---------------------------------------------------------------------------
# Built-in rule families
# ---------------------------------------------------------------------------

def _none(t):
    return frozenset()


def identity() -> PolicySpec:
    """``d_t = a_t``: the observed (natural) regime."""
    return PolicySpec(lambda t, s, ad, l: s[:, t - 1], _none, label="identity")


def static(value: float) -> PolicySpec:
    value = float(value)
    return PolicySpec(lambda t, s, ad, l: np.full(s.shape[0], value), _none,
                      label=f"static({value:g})", params={"value": value})


def make_delay_absorbing(kappa: int) -> PolicySpec:
    """Delay an absorbing binary treatment by ``kappa`` time points.

    ``d_t = 0`` for ``t <= kappa`` and ``d_t = s_{t-kappa}`` afterwards, so the
    rule reads exactly one lagged natural value.
    """
    if kappa < 1:
        raise MalformedInput("kappa must be >= 1")

    def rule(t, s, ad, l):
        if t <= kappa:
            return np.zeros(s.shape[0])
        return s[:, t - kappa - 1]

    def fp(t):
        return frozenset({t - kappa}) if t > kappa else frozenset()

    return PolicySpec(rule, fp, label=f"delay({kappa})", params={"kappa": kappa})


def make_delay_first_initiation() -> PolicySpec:
    """Suppress the first natural initiation of a binary treatment.

    ``d_t = 0`` if ``a_t = 1`` and every earlier natural value is 0, else
    ``a_t``. On monotone natural paths this coincides with the one-step
    shift rule; it reads the whole natural history.
    """

    def rule(t, s, ad, l):
        cur = s[:, t - 1]
        prior_zero = np.all(s[:, : t - 1] == 0, axis=1) if t > 1 else np.ones(s.shape[0], bool)
        return np.where((cur == 1) & prior_zero, 0.0, cur)

    return PolicySpec(rule, lambda t: frozenset(range(1, t)), label="delay_first_initiation")


def make_dose_cap(delta: float) -> PolicySpec:
    """Cap natural dose escalation at ``delta`` relative to the previous natural dose."""
    if not delta > 0:
        raise MalformedInput("delta must be positive")
    delta = float(delta)

    def rule(t, s, ad, l):
        cur = s[:, t - 1]
        if t == 1:
            return cur
        prev = s[:, t - 2]
        return np.where(cur - prev > delta, prev + delta, cur)

    return PolicySpec(rule, lambda t: frozenset({t - 1}) if t > 1 else frozenset(),
                      label=f"dose_cap({delta:g})", params={"delta": delta})


def make_dose_cap_contemporaneous(delta: float) -> PolicySpec:
    """Dose cap that compares against the previously *assigned* dose."""
    delta = float(delta)

    def rule(t, s, ad, l):
        cur = s[:, t - 1]
        if t == 1:
            return cur
        prev = ad[:, t - 2]
        return np.where(cur - prev > delta, prev + delta, cur)

    return PolicySpec(rule, _none, label=f"dose_cap_lmtp({delta:g})", params={"delta": delta})


def make_imv_delay() -> PolicySpec:
    """Replace invasive support (2) by non-invasive support (1) until the
    natural history already contains a 2."""

    def rule(t, s, ad, l):
        cur = s[:, t - 1]
        none_before = np.all(s[:, : t - 1] <= 1, axis=1) if t > 1 else np.ones(s.shape[0], bool)
        return np.where((cur == 2) & none_before, 1.0, cur)

    return PolicySpec(rule, lambda t: frozenset(range(1, t)), label="imv_delay")


def make_imv_delay_contemporaneous() -> PolicySpec:
    """Same substitution, but conditioning on the intervened history."""

    def rule(t, s, ad, l):
        cur = s[:, t - 1]
        none_before = np.all(ad[:, : t - 1] <= 1, axis=1) if t > 1 else np.ones(s.shape[0], bool)
        return np.where((cur == 2) & none_before, 1.0, cur)

    return PolicySpec(rule, _none, label="imv_delay_lmtp")


# ---------------------------------------------------------------------------
# Random lookup-table policies (used by property tests and the oracle check)
# ---------------------------------------------------------------------------

def random_table_policy(tau: int, supports: Sequence[Sequence[float]], rng: np.random.Generator,
                        covariate_support: Sequence[Sequence[float]] | None = None,
                        p_lag: float = 0.5, use_intervened: bool = True) -> PolicySpec:
    """A random deterministic rule over finite supports.

    At each ``t`` a random subset of lags forms the footprint; the rule is a
    random lookup table keyed by (footprint natural values, ``s_t``, the last
    assigned treatment, the current scalar covariate).
    """
    supports = [tuple(float(v) for v in s) for s in supports]
    footprints = []
    tables = []
    for t in range(1, tau + 1):
        fp = tuple(u for u in range(1, t) if rng.random() < p_lag)
        footprints.append(frozenset(fp))
        key_sup = [supports[u - 1] for u in fp] + [supports[t - 1]]
        if use_intervened and t > 1:
            key_sup.append(supports[t - 2])
        if covariate_support is not None:
            key_sup.append(tuple(float(v) for v in covariate_support[t - 1]))
        table = {}
        for key in itertools.product(*key_sup):
            table[key] = float(rng.choice(supports[t - 1]))
        tables.append((fp, table))

    def rule(t, s, ad, l):
        fp, table = tables[t - 1]
        cols = [s[:, u - 1] for u in fp] + [s[:, t - 1]]
        if use_intervened and t > 1:
            cols.append(ad[:, t - 2])
        if covariate_support is not None:
            cols.append(l[t - 1][:, 0])
        keys = np.column_stack(cols) if cols else np.zeros((s.shape[0], 0))
        if np.isnan(keys).any():
            return np.full(s.shape[0], np.nan)
        return np.array([table[tuple(k)] for k in keys.tolist()])

    return PolicySpec(rule, lambda t: footprints[t - 1], tau=tau, label="random_table")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_BUILDERS = {
    "identity": lambda cfg: identity(),
    "static": lambda cfg: static(cfg["value"]),
    "delay": lambda cfg: make_delay_absorbing(int(cfg.get("kappa", 1))),
    "delay_first_initiation": lambda cfg: make_delay_first_initiation(),
    "dose_cap": lambda cfg: make_dose_cap(cfg["delta"]),
    "dose_cap_lmtp": lambda cfg: make_dose_cap_contemporaneous(cfg["delta"]),
    "imv_delay": lambda cfg: make_imv_delay(),
    "imv_delay_lmtp": lambda cfg: make_imv_delay_contemporaneous(),
}


def policy_from_config(cfg: Mapping) -> PolicySpec:
    kind = cfg.get("kind")
    if kind not in _BUILDERS:
        raise MalformedInput(f"unknown policy kind {kind!r}")
    try:
        return _BUILDERS[kind](cfg)
    except KeyError as exc:
        raise MalformedInput(f"policy {kind!r} requires parameter {exc}") from None


def intervened_path(policy: PolicySpec, natural: Sequence[float],
                    covariates: Sequence = ()) -> list:
    """Assigned treatments along a fixed natural path (no feedback)."""
    natural = list(natural)
    out: list = []
    for t in range(1, len(natural) + 1):
        covs = list(covariates[:t]) if covariates else []
        out.append(apply_rule(policy, t, natural[:t], out, covs))
    return out
