"""Panel ingestion, augmented frames, collapsing and folds.

Every expected value is tagged:
[TRIVIAL] follows from the definition, [DERIVED] from an independent
computation, [PAPER] from the paper's own worked material.
"""
import io

import numpy as np
import pytest

from glmtp.errors import (BoundsViolation, EmptySupport, InvalidFoldCount, MalformedInput,
                          NonUniqueAfterCollapse, SupportViolation)
from glmtp.panel import (Panel, assign_folds, build_augmented, collapse_frame, load_panel,
                         panel_to_csv)
from glmtp.policy import make_delay_absorbing
from glmtp.layout import build_layout
from glmtp.sim import draw_panel_fig3

CSV = "id,L1_x,A1,L2_x,A2,Y\na,0.5,0,1.5,1,0\nb,-1,1,2,1,1\n"
SUP2 = [(0, 1), (0, 1)]


def test_load_valid_csv():
    p = load_panel(io.StringIO(CSV), None, SUP2, (0, 1))
    assert (p.n, p.tau) == (2, 2)  # [TRIVIAL] round trip of valid input
    assert p.ids == ("a", "b")
    assert p.L_names == (("x",), ("x",))
    np.testing.assert_array_equal(p.A, [[0, 1], [1, 1]])


def test_support_violation():
    bad = CSV.replace("b,-1,1,", "b,-1,2,")
    with pytest.raises(SupportViolation):  # [TRIVIAL] A_1=2 outside {0,1}
        load_panel(io.StringIO(bad), None, SUP2, (0, 1))


def test_bounds_violation():
    bad = CSV.replace(",1,1\n", ",1,1.5\n")
    with pytest.raises(BoundsViolation):  # [TRIVIAL] Y outside [0,1]
        load_panel(io.StringIO(bad), None, SUP2, (0, 1))


def test_malformed_inputs():
    with pytest.raises(MalformedInput):  # [TRIVIAL] non-numeric cell
        load_panel(io.StringIO(CSV.replace("0.5", "abc")), None, SUP2, (0, 1))
    with pytest.raises(MalformedInput):  # [TRIVIAL] missing A column
        load_panel(io.StringIO("id,A1,Y\na,0,1\n"), None, SUP2, (0, 1))
    with pytest.raises(MalformedInput):  # [TRIVIAL] missing value
        load_panel(io.StringIO(CSV.replace("0.5", "")), None, SUP2, (0, 1))


def test_explicit_schema():
    text = "pid,cov1,trt1,cov2,trt2,out\n1,0,0,0,1,0.25\n"
    schema = {"id": "pid", "L": [["cov1"], ["cov2"]], "A": ["trt1", "trt2"], "Y": "out"}
    p = load_panel(io.StringIO(text), schema, SUP2, (0, 1))
    assert p.Y[0] == 0.25  # [TRIVIAL]


def test_survival_panel_csv_round_trip(tmp_path):
    panel = draw_panel_fig3(300, 11)
    text = panel_to_csv(panel)
    path = tmp_path / "p.csv"
    path.write_text(text)
    back = load_panel(path, None, panel.supports, panel.y_bounds)
    assert back.equals(panel)  # [DERIVED] write/read against the simulator output
    assert panel_to_csv(back) == text  # [TRIVIAL] canonical form is byte-stable


def test_at_risk_must_be_monotone():
    with pytest.raises(MalformedInput):  # [TRIVIAL] flags cannot switch back on
        Panel(L=[np.zeros((1, 0))] * 2, A=[[0, 0]], Y=[0], supports=SUP2, y_bounds=(0, 1),
              at_risk=[[False, True]])


def test_augmented_rows_two_lags(small_panel):
    p = small_panel.subset(np.arange(2))
    fr = build_augmented(p, 3, {1, 2})
    assert fr.n_rows == 8  # [PAPER] 4 combinations per subject for (s_1, s_2)
    assert sorted(set(map(tuple, fr.s_values[:4].tolist()))) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert len(set(fr.row_keys())) == 8  # [TRIVIAL] unique keys
    np.testing.assert_array_equal(fr.subject, [0, 0, 0, 0, 1, 1, 1, 1])  # [TRIVIAL] order


def test_augmented_empty_footprint(small_panel):
    fr = build_augmented(small_panel, 2, ())
    assert fr.n_rows == small_panel.n and fr.s_columns == {}  # [TRIVIAL]


def test_augmented_empty_support(small_panel):
    with pytest.raises(EmptySupport):  # [TRIVIAL]
        build_augmented(small_panel, 3, {1}, supports=[(), (0, 1), (0, 1)])


def test_delay_one_frames_have_two_rows_per_subject(small_panel):
    lay = build_layout(make_delay_absorbing(1), small_panel.supports)
    for t in (2, 3):
        fr = build_augmented(small_panel, t, lay.lags(t))
        assert fr.n_rows == 2 * small_panel.n  # [DERIVED] footprint {t-1} x row-count formula


def test_collapse_halves_and_to_subjects(small_panel):
    n = small_panel.n
    fr = build_augmented(small_panel, 3, {1, 2})
    fr = fr.with_column("q", np.repeat(np.arange(n * 2, dtype=float), 2))
    c1 = collapse_frame(fr, {1})
    assert c1.n_rows == 2 * n  # [PAPER] n*4 -> n*2 when dropping s_2
    c0 = collapse_frame(collapse_frame(fr.with_column("q", np.repeat(np.arange(n), 4.0)),
                                       {1}), ())
    assert c0.n_rows == n  # [PAPER] final collapse keeps one row per subject
    same = collapse_frame(fr, {1, 2})
    assert same.row_keys() == fr.row_keys()  # [TRIVIAL] no-op collapse


def test_collapse_detects_conflicts(small_panel):
    fr = build_augmented(small_panel, 3, {1, 2})
    fr = fr.with_column("q", np.arange(fr.n_rows, dtype=float))
    with pytest.raises(NonUniqueAfterCollapse):  # [TRIVIAL] q differs across dropped s_2
        collapse_frame(fr, {1})


def test_fold_sizes_and_determinism():
    f = assign_folds(4, 2, 0)
    assert sorted(np.bincount(f.membership).tolist()) == [2, 2]  # [TRIVIAL]
    f = assign_folds(10, 3, 5)
    assert sorted(np.bincount(f.membership).tolist()) == [3, 3, 4]  # [TRIVIAL]
    np.testing.assert_array_equal(assign_folds(10, 3, 5).membership, f.membership)  # [TRIVIAL]
    allv = np.sort(np.concatenate([f.validation(j) for j in range(3)]))
    np.testing.assert_array_equal(allv, np.arange(10))  # [TRIVIAL] partition


def test_fold_count_errors():
    for J in (1, 11):
        with pytest.raises(InvalidFoldCount):  # [TRIVIAL] need 2 <= J <= n
            assign_folds(10, J, 0)
