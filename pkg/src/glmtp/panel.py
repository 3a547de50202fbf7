"""Longitudinal panels, augmented (row-expanded) frames and fold assignment.

A :class:`Panel` holds one row per subject in wide format:
``L_1, A_1, L_2, A_2, ..., L_tau, A_tau, Y``. Absorbing states are encoded
with carried-forward values and an ``at_risk`` flag per time. A subject that
is not at risk at time ``t`` has an outcome that is already determined, so
every regression from ``t`` onwards returns its observed ``Y``.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BoundsViolation,
    EmptySupport,
    InvalidFoldCount,
    MalformedInput,
    NonUniqueAfterCollapse,
    SupportViolation,
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Validated wide-format longitudinal data.

    Parameters
    ----------
    L : sequence of arrays
        ``L[t-1]`` has shape ``(n, p_t)``; ``p_t`` may be zero.
    A : array of shape (n, tau)
        Treatment values, each inside ``supports[t-1]``.
    Y : array of shape (n,)
        Outcome inside ``y_bounds``.
    supports : sequence of sequences
        Finite treatment supports, one per time.
    y_bounds : (float, float)
    at_risk : bool array of shape (n, tau), optional
        Defaults to all True. Must be nonincreasing in ``t``.
    L_names : names of the covariate columns per time.
    ids : subject identifiers.
    """

    L: tuple
    A: np.ndarray
    Y: np.ndarray
    supports: tuple
    y_bounds: tuple
    at_risk: np.ndarray = None
    L_names: tuple = None
    ids: tuple = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            raise MalformedInput("A must be a 2-d array (n, tau)")
        n, tau = A.shape
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if len(self.L) != tau:
            raise MalformedInput(f"expected {tau} covariate blocks, got {len(self.L)}")
        L = []
        for t, block in enumerate(self.L, start=1):
            block = np.asarray(block, dtype=float)
            if block.ndim == 1:
                block = block.reshape(n, -1) if block.size else np.zeros((n, 0))
            if block.shape[0] != n:
                raise MalformedInput(f"L_{t} has {block.shape[0]} rows, expected {n}")
            L.append(_frozen(block))
        if Y.shape[0] != n:
            raise MalformedInput(f"Y has {Y.shape[0]} rows, expected {n}")
        if len(self.supports) != tau:
            raise MalformedInput("one support per time point is required")
        supports = []
        for t, sup in enumerate(self.supports, start=1):
            sup = tuple(sorted({float(v) for v in sup}))
            if not sup:
                raise EmptySupport(f"support of A_{t} is empty")
            supports.append(sup)
            bad = ~np.isin(A[:, t - 1], sup)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise SupportViolation(
                    f"A_{t}={A[i, t - 1]:g} for row {i} is outside support {sup}")
        lo, hi = (float(v) for v in self.y_bounds)
        if not lo < hi:
            raise BoundsViolation("outcome bounds require y_min < y_max")
        if not np.all(np.isfinite(Y)) or np.any((Y < lo) | (Y > hi)):
            raise BoundsViolation(f"Y outside [{lo:g}, {hi:g}]")
        for t, block in enumerate(L, start=1):
            if not np.all(np.isfinite(block)):
                raise MalformedInput(f"L_{t} has missing or non-finite entries")
        if self.at_risk is None:
            risk = np.ones((n, tau), dtype=bool)
        else:
            risk = np.asarray(self.at_risk, dtype=bool)
            if risk.shape != (n, tau):
                raise MalformedInput("at_risk must have shape (n, tau)")
            if np.any(risk[:, 1:] & ~risk[:, :-1]):
                raise MalformedInput("at_risk flags must be nonincreasing over time")
        names = self.L_names
        if names is None:
            names = tuple(tuple(f"x{j + 1}" for j in range(b.shape[1])) for b in L)
        else:
            names = tuple(tuple(str(c) for c in nm) for nm in names)
            if [len(nm) for nm in names] != [b.shape[1] for b in L]:
                raise MalformedInput("L_names do not match covariate widths")
        ids = self.ids
        ids = tuple(str(i + 1) for i in range(n)) if ids is None else tuple(str(i) for i in ids)
        if len(ids) != n:
            raise MalformedInput("ids length does not match n")
        set_ = object.__setattr__
        set_(self, "A", _frozen(A))
        set_(self, "Y", _frozen(Y))
        set_(self, "L", tuple(L))
        set_(self, "supports", tuple(supports))
        set_(self, "y_bounds", (lo, hi))
        set_(self, "at_risk", _frozen(risk))
        set_(self, "L_names", names)
        set_(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def tau(self) -> int:
        return self.A.shape[1]

    def subset(self, idx) -> "Panel":
        idx = np.asarray(idx)
        return Panel(L=[b[idx] for b in self.L], A=self.A[idx], Y=self.Y[idx],
                     supports=self.supports, y_bounds=self.y_bounds,
                     at_risk=self.at_risk[idx], L_names=self.L_names,
                     ids=[self.ids[i] for i in np.arange(self.n)[idx]])

    def equals(self, other: "Panel") -> bool:
        return (self.supports == other.supports and self.y_bounds == other.y_bounds
                and self.L_names == other.L_names and self.ids == other.ids
                and np.array_equal(self.A, other.A) and np.array_equal(self.Y, other.Y)
                and np.array_equal(self.at_risk, other.at_risk)
                and all(np.array_equal(a, b) for a, b in zip(self.L, other.L)))


# ---------------------------------------------------------------------------
# CSV ingestion and canonical serialization
# ---------------------------------------------------------------------------

_L_COL = re.compile(r"^L(\d+)_(.+)$")
_A_COL = re.compile(r"^A(\d+)$")
_R_COL = re.compile(r"^R(\d+)$")


def canonical_schema(header: Sequence[str], tau: int) -> dict:
    """Infer the column roles of a canonical ``id, L1_*, A1, ..., Y`` header."""
    L = [[] for _ in range(tau)]
    A = [None] * tau
    R = [None] * tau
    for col in header:
        for pat, store in ((_L_COL, L), (_A_COL, A), (_R_COL, R)):
            m = pat.match(col)
            if m:
                t = int(m.group(1))
                if not 1 <= t <= tau:
                    raise MalformedInput(f"column {col!r} refers to time {t} > tau={tau}")
                if store is L:
                    L[t - 1].append(col)
                else:
                    store[t - 1] = col
                break
    if any(a is None for a in A):
        raise MalformedInput("header lacks one A<t> column per time point")
    schema = {"id": "id", "L": L, "A": A, "Y": "Y"}
    if any(r is not None for r in R):
        if any(r is None for r in R):
            raise MalformedInput("R<t> at-risk columns must be given for every time point")
        schema["at_risk"] = R
    return schema


def _parse_float(text: str, col: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MalformedInput(f"row {row}, column {col!r}: cannot parse {text!r}") from None
    if not math.isfinite(value):
        raise MalformedInput(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def load_panel(source, schema: Mapping | None, supports: Sequence[Sequence[float]],
               outcome_bounds: Sequence[float]) -> Panel:
    """Read a wide CSV panel and validate it.

    ``source`` is a path or a text stream. ``schema`` maps roles to column
    names: ``{"id": str, "L": [[...], ...], "A": [...], "Y": str,
    "at_risk": [...]}`` (``at_risk`` optional). With ``schema=None`` the
    canonical column naming is assumed.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            text = fh.read()
    else:
        text = source.read()
    try:
        rows = list(csv.reader(io.StringIO(text)))
    except csv.Error as exc:
        raise MalformedInput(f"CSV parse failure: {exc}") from None
    rows = [r for r in rows if r]
    if not rows:
        raise MalformedInput("empty CSV input")
    header, body = rows[0], rows[1:]
    tau = len(supports)
    if schema is None:
        schema = canonical_schema(header, tau)
    pos = {c: j for j, c in enumerate(header)}
    if len(pos) != len(header):
        raise MalformedInput("duplicate column names in header")

    def col(name):
        if name not in pos:
            raise MalformedInput(f"column {name!r} not found in header")
        return pos[name]

    try:
        id_col = col(schema["id"])
        a_cols = [col(c) for c in schema["A"]]
        y_col = col(schema["Y"])
        l_cols = [[col(c) for c in block] for block in schema.get("L", [[]] * tau)]
    except KeyError as exc:
        raise MalformedInput(f"schema lacks role {exc}") from None
    r_cols = [col(c) for c in schema["at_risk"]] if schema.get("at_risk") else None
    if len(a_cols) != tau or len(l_cols) != tau:
        raise MalformedInput(f"schema must list {tau} treatment and covariate blocks")
    n = len(body)
    A = np.empty((n, tau))
    Y = np.empty(n)
    L = [np.empty((n, len(b))) for b in l_cols]
    R = np.empty((n, tau), dtype=bool) if r_cols else None
    ids = []
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise MalformedInput(f"row {i} has {len(r)} fields, expected {len(header)}")
        ids.append(r[id_col])
        for t in range(tau):
            A[i - 1, t] = _parse_float(r[a_cols[t]], header[a_cols[t]], i)
            for j, c in enumerate(l_cols[t]):
                L[t][i - 1, j] = _parse_float(r[c], header[c], i)
            if R is not None:
                R[i - 1, t] = _parse_float(r[r_cols[t]], header[r_cols[t]], i) != 0
        Y[i - 1] = _parse_float(r[y_col], header[y_col], i)
    names = [[_short_name(header[c], t + 1) for c in block] for t, block in enumerate(l_cols)]
    return Panel(L=L, A=A, Y=Y, supports=supports, y_bounds=tuple(outcome_bounds),
                 at_risk=R, L_names=names, ids=ids)


def _short_name(column: str, t: int) -> str:
    m = _L_COL.match(column)
    return m.group(2) if m and int(m.group(1)) == t else column


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def panel_to_csv(panel: Panel, with_risk: bool | None = None) -> str:
    """Canonical CSV text of ``panel`` (``R<t>`` columns only when needed)."""
    if with_risk is None:
        with_risk = not bool(np.all(panel.at_risk))
    header = ["id"]
    for t in range(1, panel.tau + 1):
        header += [f"L{t}_{nm}" for nm in panel.L_names[t - 1]]
        header.append(f"A{t}")
        if with_risk:
            header.append(f"R{t}")
    header.append("Y")
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for i in range(panel.n):
        row = [panel.ids[i]]
        for t in range(panel.tau):
            row += [format_number(v) for v in panel.L[t][i]]
            row.append(format_number(panel.A[i, t]))
            if with_risk:
                row.append("1" if panel.at_risk[i, t] else "0")
        row.append(format_number(panel.Y[i]))
        w.writerow(row)
    return out.getvalue()


def write_panel_csv(panel: Panel, path) -> None:
    Path(path).write_text(panel_to_csv(panel))


# ---------------------------------------------------------------------------
# Augmented frames
# ---------------------------------------------------------------------------

def enumerate_cells(supports: Sequence[Sequence[float]], lags: Sequence[int]) -> np.ndarray:
    """All value tuples over ``lags`` in lexicographic support order.

    Returns an array of shape ``(prod |A_lag|, len(lags))``; one empty row
    when ``lags`` is empty.
    """
    pools = []
    for lag in lags:
        sup = supports[lag - 1]
        if len(sup) == 0:
            raise EmptySupport(f"support of A_{lag} is empty")
        pools.append(sup)
    cells = list(itertools.product(*pools))
    return np.array(cells, dtype=float).reshape(len(cells), len(lags))


@dataclass(frozen=True, eq=False)
class AugmentedFrame:
    """Rows ``(i, s)`` for every subject ``i`` and footprint value tuple ``s``.

    ``subject`` and ``s_values`` are row-aligned; rows are ordered
    subject-major and then by footprint tuple.
    """

    base: Panel
    stage: int
    lags: tuple
    subject: np.ndarray
    s_values: np.ndarray
    q_columns: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return self.subject.shape[0]

    @property
    def s_columns(self) -> dict:
        return {f"s_{lag}": self.s_values[:, j] for j, lag in enumerate(self.lags)}

    def row_keys(self) -> list:
        return [(int(i),) + tuple(float(v) for v in s)
                for i, s in zip(self.subject, self.s_values)]

    def with_column(self, name: str, values) -> "AugmentedFrame":
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape[0] != self.n_rows:
            raise ValueError(f"column {name!r} has {values.shape[0]} rows, expected {self.n_rows}")
        cols = dict(self.q_columns)
        cols[name] = _frozen(values)
        return AugmentedFrame(self.base, self.stage, self.lags, self.subject,
                              self.s_values, cols)


def build_augmented(panel: Panel, stage: int, footprint: Iterable[int],
                    supports: Sequence[Sequence[float]] | None = None) -> AugmentedFrame:
    lags = tuple(sorted(set(int(u) for u in footprint)))
    if any(not 1 <= u < stage for u in lags):
        raise ValueError(f"footprint lags {lags} must lie in 1..{stage - 1}")
    supports = panel.supports if supports is None else supports
    cells = enumerate_cells(supports, lags)
    k = cells.shape[0]
    subject = np.repeat(np.arange(panel.n), k)
    s_values = np.tile(cells, (panel.n, 1))
    return AugmentedFrame(panel, stage, lags, _frozen(subject), _frozen(s_values))


def collapse_frame(frame: AugmentedFrame, new_footprint: Iterable[int],
                   stage: int | None = None, atol: float = 1e-10) -> AugmentedFrame:
    """Keep one row per unique ``(i, new footprint tuple)``.

    Attached q-columns must already be constant over the dropped
    coordinates; otherwise :class:`NonUniqueAfterCollapse` is raised.
    """
    new = tuple(sorted(set(int(u) for u in new_footprint)))
    missing = set(new) - set(frame.lags)
    if missing:
        raise ValueError(f"lags {sorted(missing)} are not carried by the frame")
    keep_cols = [frame.lags.index(u) for u in new]
    s_new = frame.s_values[:, keep_cols]
    keys = np.column_stack([frame.subject, s_new]) if keep_cols else frame.subject[:, None]
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    for name, col in frame.q_columns.items():
        ref = col[first][inverse]
        if not np.allclose(col, ref, rtol=0.0, atol=atol):
            raise NonUniqueAfterCollapse(
                f"column {name!r} differs across rows that collapse to the same key")
    order = np.sort(first)
    cols = {name: _frozen(col[order]) for name, col in frame.q_columns.items()}
    return AugmentedFrame(frame.base, frame.stage if stage is None else stage, new,
                          _frozen(frame.subject[order]), _frozen(s_new[order]), cols)


# ---------------------------------------------------------------------------
# Cross-fitting folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FoldAssignment:
    J: int
    membership: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return self.membership.shape[0]

    def validation(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.membership == j)

    def training(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.membership != j)

    def training_mask(self, j: int) -> np.ndarray:
        if self.J == 1:
            return np.ones(self.n, dtype=bool)
        return self.membership != j


def assign_folds(n: int, J: int, seed: int) -> FoldAssignment:
    """Uniform random partition of ``range(n)`` into ``J`` near-equal folds."""
    if not 2 <= J <= n:
        raise InvalidFoldCount(f"need 2 <= J <= n, got J={J}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    membership = np.empty(n, dtype=int)
    membership[perm] = np.arange(n) % J
    return FoldAssignment(J, _frozen(membership), seed)


def no_folds(n: int) -> FoldAssignment:
    """Single 'fold' whose models are trained and evaluated on everyone."""
    return FoldAssignment(1, _frozen(np.zeros(n, dtype=int)), 0)
