"""Policy rules, footprints and the natural- versus intervened-history divergence."""
import itertools

import numpy as np
import pytest

from glmtp.errors import MalformedInput, SupportViolation
from glmtp.policy import (PolicySpec, apply_rule, footprint_of, identity, intervened_path,
                          make_delay_absorbing, make_delay_first_initiation, make_dose_cap,
                          make_dose_cap_contemporaneous, make_imv_delay,
                          make_imv_delay_contemporaneous, policy_from_config,
                          random_table_policy, static)


def test_imv_rule_on_natural_history():
    pol = make_imv_delay()
    assert intervened_path(pol, [1, 2, 0])[:2] == [1, 1]  # [PAPER] t=2 natural 2 replaced by 1
    # [DERIVED] by the displayed rule: at t=3 the natural history already
    # contains a 2 (at t=2), so a natural 2 is kept. The accompanying prose
    # says 1, but its own list of reachable paths includes (1, 1, 2).
    assert intervened_path(pol, [1, 2, 2]) == [1, 1, 2]
    assert intervened_path(pol, [1, 2, 1]) == [1, 1, 1]  # [PAPER] path (1,1,1)
    assert intervened_path(pol, [1, 2, 0]) == [1, 1, 0]  # [PAPER] path (1,1,0)
    # [PAPER] the contemporaneous variant cannot see the overridden 2
    assert intervened_path(make_imv_delay_contemporaneous(), [1, 2, 2]) == [1, 1, 1]


def test_identity_returns_natural():
    for path in itertools.product([0, 1, 2], repeat=3):
        assert intervened_path(identity(), path) == list(map(float, path))  # [TRIVIAL]


def test_dose_cap_examples():
    pol = make_dose_cap(10)
    assert intervened_path(pol, [10, 40, 45]) == [10, 20, 45]  # [PAPER] 20 then 45
    assert intervened_path(make_dose_cap_contemporaneous(10), [10, 40, 45]) == [10, 20, 30]  # [PAPER]
    assert intervened_path(pol, [10, 20, 30]) == [10, 20, 30]  # [TRIVIAL] increase exactly delta
    assert intervened_path(pol, [50, 30, 10]) == [50, 30, 10]  # [TRIVIAL] decreasing doses


def test_delay_examples():
    d1 = make_delay_absorbing(1)
    assert intervened_path(d1, [0, 1, 1]) == [0, 0, 1]  # [DERIVED] direct rule evaluation
    assert intervened_path(d1, [0, 0, 0]) == [0, 0, 0]  # [TRIVIAL]
    d2 = make_delay_absorbing(2)
    for a1 in (0, 1):
        assert intervened_path(d2, [a1, 1, 1]) == [0, 0, a1]  # [PAPER] d_3 = a_1


def test_first_initiation_matches_shift_on_monotone_paths():
    shift, first = make_delay_absorbing(1), make_delay_first_initiation()
    for k in range(5):
        path = [0] * k + [1] * (4 - k)
        assert intervened_path(shift, path) == intervened_path(first, path)  # [DERIVED]


def test_footprints():
    d1 = make_delay_absorbing(1)
    assert footprint_of(d1, 1) == frozenset()  # [TRIVIAL]
    for t in range(2, 6):
        assert footprint_of(d1, t) == {t - 1}  # [PAPER] one natural value carried
    assert footprint_of(make_delay_absorbing(2), 3) == {1}  # [PAPER] s_1 suffices
    assert all(footprint_of(identity(), t) == frozenset() for t in range(1, 6))  # [TRIVIAL]


BUILTINS = [identity(), static(1), make_delay_absorbing(1), make_delay_absorbing(2),
            make_delay_first_initiation(), make_dose_cap(1), make_dose_cap_contemporaneous(1),
            make_imv_delay(), make_imv_delay_contemporaneous()]


@pytest.mark.parametrize("pol", BUILTINS, ids=lambda p: p.label)
def test_footprint_soundness(pol):
    """[DERIVED] exhaustive perturbation of non-footprint lags never changes d_t."""
    sup = (0.0, 1.0, 2.0)
    for t in range(1, 4):
        fp = footprint_of(pol, t)
        for nat in itertools.product(sup, repeat=t):
            for ad in itertools.product(sup, repeat=t - 1):
                ref = apply_rule(pol, t, nat, ad)
                for u in set(range(1, t)) - fp:
                    for v in sup:
                        alt = list(nat)
                        alt[u - 1] = v
                        assert apply_rule(pol, t, alt, ad) == ref


def test_random_table_policy_footprint_soundness():
    rng = np.random.default_rng(3)
    sup = [(0.0, 1.0)] * 3
    for _ in range(10):
        pol = random_table_policy(3, sup, rng)
        for t in range(1, 4):
            fp = footprint_of(pol, t)
            for nat in itertools.product((0.0, 1.0), repeat=t):
                for ad in itertools.product((0.0, 1.0), repeat=t - 1):
                    ref = apply_rule(pol, t, nat, ad)
                    assert ref in (0.0, 1.0)  # [TRIVIAL] output in support
                    for u in set(range(1, t)) - fp:
                        alt = list(nat)
                        alt[u - 1] = 1 - alt[u - 1]
                        assert apply_rule(pol, t, alt, ad) == ref  # [DERIVED]


def test_support_violation_and_undeclared_lag():
    with pytest.raises(SupportViolation):  # [TRIVIAL] static 2 outside {0,1}
        apply_rule(static(2), 1, [0], [], support=(0, 1))
    sneaky = PolicySpec(lambda t, s, ad, l: s[:, 0], lambda t: frozenset(), label="sneaky")
    nat = np.array([[np.nan, 1.0]])
    with pytest.raises(MalformedInput):  # [TRIVIAL] reads lag 1 without declaring it
        sneaky.evaluate(2, nat, np.zeros((1, 1)), [])


def test_policy_from_config():
    assert policy_from_config({"kind": "delay", "kappa": 2}).params == {"kappa": 2}  # [TRIVIAL]
    assert intervened_path(policy_from_config({"kind": "dose_cap", "delta": 10}),
                           [10, 40]) == [10, 20]  # [PAPER]
    with pytest.raises(MalformedInput):
        policy_from_config({"kind": "nope"})
    with pytest.raises(MalformedInput):
        policy_from_config({"kind": "static"})
