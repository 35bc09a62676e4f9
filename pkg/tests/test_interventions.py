import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertmle.interventions import (
    InterventionError,
    McConfig,
    additive_shift,
    bernoulli,
    builtin_shift_truncate,
    constant,
    from_callable,
    from_config,
    sample_gstar,
    shift_truncate_rule,
    table,
)


def _frame(n=50, seed=0):
    r = np.random.default_rng(seed)
    return pd.DataFrame({"W1": r.integers(0, 2, n).astype(float), "W3": r.normal(size=n),
                         "W4": r.normal(size=n), "A": r.normal(size=n)})


def test_constant_broadcasts_to_every_row_and_draw():
    out = sample_gstar(constant(1), _frame(7), ["A"], McConfig(3))
    assert out.shape == (3, 7, 1) and np.all(out == 1)


def test_constant_vector_for_two_exposures():
    out = sample_gstar(constant([1, 0]), _frame(4), ["A", "W1"], McConfig(1))
    np.testing.assert_array_equal(out[0], [[1, 0]] * 4)


def test_table_row_count_is_checked():
    with pytest.raises(InterventionError):
        sample_gstar(table([1.0, 2.0]), _frame(5), ["A"], McConfig(1))
    out = sample_gstar(table(np.arange(5.0)), _frame(5), ["A"], McConfig(2))
    np.testing.assert_array_equal(out[1, :, 0], np.arange(5.0))


def test_shift_truncate_matches_casewise_rule():
    df = _frame(200)
    spec = builtin_shift_truncate(2.0, 10.0, "0.86*W1 + 0.93*W3*W4 + 0.41*W4")
    got = sample_gstar(spec, df, ["A"], McConfig(2, seed=5))
    for s in range(2):
        rng = McConfig(2, seed=5).rng(s)
        mus = [0.86 * r.W1 + 0.93 * r.W3 * r.W4 + 0.41 * r.W4 for r in df.itertuples()]
        u = rng.normal(np.array(mus) + 2.0, 1.0)
        for i, mu in enumerate(mus):
            keep_shift = math.exp(0.5 * 2.0 * (u[i] - mu - 1.0)) <= 10.0
            assert got[s, i, 0] == pytest.approx(u[i] if keep_shift else u[i] - 2.0, abs=1e-12)


def test_shift_truncate_rule_casewise():
    a = np.array([-3.0, 0.0, 3.0])
    out = shift_truncate_rule(a, 0.0, shift=2.0, trunc_bound=10.0, ratio_coef=0.5, offset_factor=0.5)
    # exp((a + 2 - 1)) > 10 only for the largest value
    np.testing.assert_array_equal(out, [-1.0, 2.0, 3.0])


def test_community_level_sampler_draws_once_per_community():
    df = _frame(9)
    groups = np.array([4, 4, 4, 1, 1, 7, 7, 7, 7])
    out = sample_gstar(builtin_shift_truncate(1.0, 5.0, {"W3": 1.0}, community_level=True), df, ["A"],
                       McConfig(1, seed=2), groups=groups)[0, :, 0]
    for g in np.unique(groups):
        assert len(np.unique(out[groups == g])) == 1
    b = sample_gstar(bernoulli(0.5, community_level=True), df, ["A"], McConfig(1), groups=groups)[0, :, 0]
    for g in np.unique(groups):
        assert len(np.unique(b[groups == g])) == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), sims=st.integers(1, 5))
def test_sampling_is_deterministic_and_streams_differ(seed, sims):
    df = _frame(30)
    spec = bernoulli(0.5)
    a = sample_gstar(spec, df, ["A"], McConfig(sims, seed))
    b = sample_gstar(spec, df, ["A"], McConfig(sims, seed))
    np.testing.assert_array_equal(a, b)
    other = sample_gstar(spec, df, ["A"], McConfig(sims, seed), stream=1)
    assert not np.array_equal(a, other)


def test_additional_simulations_do_not_change_earlier_draws():
    df = _frame(30)
    spec = builtin_shift_truncate(1.0, 4.0, {"W4": 0.5})
    few = sample_gstar(spec, df, ["A"], McConfig(2, seed=3))
    many = sample_gstar(spec, df, ["A"], McConfig(5, seed=3))
    np.testing.assert_array_equal(few, many[:2])


def test_additive_shift_is_clipped():
    df = pd.DataFrame({"A": [0.0, 1.0, 2.0]})
    out = sample_gstar(additive_shift("A", 1.5, upper=3.0), df, ["A"], McConfig(1))[0, :, 0]
    np.testing.assert_array_equal(out, [1.5, 2.5, 3.0])
    assert not additive_shift("A", 1.0).stochastic


def test_user_callable_and_bad_output():
    df = _frame(6)
    spec = from_callable(lambda frame, rng: frame["W3"].to_numpy() + rng.normal(size=len(frame)))
    assert sample_gstar(spec, df, ["A"], McConfig(2)).shape == (2, 6, 1)
    with pytest.raises(InterventionError):
        sample_gstar(from_callable(lambda f, rng: np.full(len(f), np.nan)), df, ["A"], McConfig(1))


def test_config_forms():
    assert from_config(1).value == (1.0,)
    assert from_config([1, 0]).value == (1.0, 0.0)
    assert from_config({"table": [[1], [2]]}).table.shape == (2, 1)
    spec = from_config({"sampler": "shift_truncate", "shift": 2, "trunc_bound": 10, "mean_coefs": "0.5*W3 - 0.2*W4"})
    assert spec.params["mean_terms"] == {"W3": 0.5, "W4": -0.2}
    with pytest.raises(InterventionError):
        from_config({"sampler": "nope"})
    with pytest.raises(InterventionError):
        bernoulli(1.5)
