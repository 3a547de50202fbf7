"""Stage geometry of the augmented recursion.

For a policy with per-time footprints, the stage-``t`` prediction ``q_t``
depends on the natural history only through the lag set

    F_t = {u <= t-1 : u is read by some rule d_k with k >= t},

with ``F_{tau+1}`` empty. The regression ``m_t`` lives on the cells of
``F_{t+1}`` (which may contain lag ``t`` itself). Full augmentation uses
``F_t = {1..t-1}`` instead.

Everything here is pure bookkeeping: cell enumerations, the projection of
``(cell of F_t, s_t)`` onto a cell of ``F_{t+1}``, and per-subject arrays
obtained by evaluating the policy on every cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedInput
from .panel import Panel, enumerate_cells
from .policy import PolicySpec


@dataclass(frozen=True, eq=False)
class StageLayout:
    t: int
    lags_in: tuple     # F_t, carried by q_t
    lags_out: tuple    # F_{t+1}, carried by m_t
    cells_in: np.ndarray
    cells_out: np.ndarray
    proj: np.ndarray   # (K_in, |A_t|) -> index into cells_out
    support: tuple

    @property
    def K_in(self) -> int:
        return self.cells_in.shape[0]

    @property
    def K_out(self) -> int:
        return self.cells_out.shape[0]

    def proj_tensor(self) -> np.ndarray:
        """One-hot version of ``proj`` with shape (K_in, |A_t|, K_out)."""
        P = np.zeros((self.K_in, len(self.support), self.K_out))
        ci, si = np.indices(self.proj.shape)
        P[ci, si, self.proj] = 1.0
        return P


@dataclass(frozen=True, eq=False)
class Layout:
    tau: int
    supports: tuple
    lag_sets: tuple    # F_1 .. F_{tau+1}
    stages: tuple      # StageLayout for t = 1..tau
    full: bool

    def stage(self, t: int) -> StageLayout:
        return self.stages[t - 1]

    def lags(self, t: int) -> tuple:
        """``F_t`` for ``t = 1..tau+1``."""
        return self.lag_sets[t - 1]

    def frame_rows(self, n: int, t: int) -> int:
        """Rows of the stage-``t`` regression frame (cells of ``F_{t+1}``)."""
        return n * self.stage(t).K_out


def lag_sets(policy: PolicySpec, tau: int, full: bool = False) -> tuple:
    if full:
        return tuple(tuple(range(1, t)) for t in range(1, tau + 1)) + ((),)
    sets = [()] * (tau + 2)
    running: set = set()
    for t in range(tau, 0, -1):
        running |= set(policy.footprint_at(t))
        sets[t] = tuple(sorted(u for u in running if u <= t - 1))
    return tuple(sets[1: tau + 2])


def build_layout(policy: PolicySpec, supports, full: bool = False) -> Layout:
    supports = tuple(tuple(float(v) for v in s) for s in supports)
    tau = len(supports)
    if policy.tau is not None and policy.tau != tau:
        raise MalformedInput(f"policy horizon {policy.tau} does not match tau={tau}")
    F = lag_sets(policy, tau, full)
    stages = []
    for t in range(1, tau + 1):
        lin, lout = F[t - 1], F[t]
        cin = enumerate_cells(supports, lin)
        cout = enumerate_cells(supports, lout)
        index = {tuple(row): k for k, row in enumerate(cout.tolist())}
        sup = supports[t - 1]
        proj = np.empty((cin.shape[0], len(sup)), dtype=int)
        for c, row in enumerate(cin.tolist()):
            vals = dict(zip(lin, row))
            for j, s in enumerate(sup):
                vals[t] = s
                proj[c, j] = index[tuple(vals[u] for u in lout)]
        stages.append(StageLayout(t, lin, lout, cin, cout, proj, sup))
    return Layout(tau, supports, F, tuple(stages), full)


@dataclass(frozen=True, eq=False)
class PolicyArrays:
    """Policy evaluated on every (subject, cell) of every stage.

    ``dval[t][i, c]``  rule value with ``s_t = A_t`` and lags from cell ``c`` of ``F_t``;
    ``dcell[t][i, c]`` the ``F_{t+1}`` cell index of ``(c, s_t = A_t)``;
    ``match[t][i, c, j]`` whether ``A_t == d_t`` when ``s_t`` is the ``j``-th support value.
    """

    layout: Layout
    dval: tuple
    dcell: tuple
    match: tuple


def natural_matrix(n: int, t: int, lags: tuple, cell_row, current) -> np.ndarray:
    s = np.full((n, t), np.nan)
    for u, v in zip(lags, cell_row):
        s[:, u - 1] = v
    s[:, t - 1] = current
    return s


def policy_arrays(panel: Panel, policy: PolicySpec, layout: Layout) -> PolicyArrays:
    n = panel.n
    dval, dcell, match = [], [], []
    for st in layout.stages:
        t = st.t
        A_t = panel.A[:, t - 1]
        a_idx = np.searchsorted(st.support, A_t)
        intervened = panel.A[:, : t - 1]
        covs = list(panel.L[:t])
        dv = np.empty((n, st.K_in))
        mt = np.empty((n, st.K_in, len(st.support)), dtype=bool)
        for c, row in enumerate(st.cells_in.tolist()):
            nat = natural_matrix(n, t, st.lags_in, row, A_t)
            dv[:, c] = policy.evaluate(t, nat, intervened, covs, st.support)
            for j, s in enumerate(st.support):
                nat[:, t - 1] = s
                mt[:, c, j] = policy.evaluate(t, nat, intervened, covs, st.support) == A_t
        dval.append(dv)
        dcell.append(st.proj[np.arange(st.K_in)[None, :], a_idx[:, None]])
        match.append(mt)
    return PolicyArrays(layout, tuple(dval), tuple(dcell), tuple(match))
