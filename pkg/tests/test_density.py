import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertmle.density import (
    BinLayout,
    BinningConfig,
    BinningWarning,
    ConditionalDensityEstimator,
    DensityModelError,
    FittedDensity,
    choose_bins,
    classify_variable,
    eval_density,
    fit_density,
)


def _type7_quantile(sorted_x, p):
    h = (len(sorted_x) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(sorted_x) - 1)
    return sorted_x[lo] + (h - lo) * (sorted_x[hi] - sorted_x[lo])


def test_classification_by_distinct_values():
    assert classify_variable([0, 1, 1, 0]) == "binary"
    assert classify_variable([0, 1, 2, 3]) == "categorical"
    assert classify_variable(np.arange(11.0)) == "continuous"
    assert classify_variable(np.arange(11.0), maxncats=20) == "categorical"


@settings(max_examples=40, deadline=None)
@given(n=st.integers(20, 400), k=st.integers(2, 12), seed=st.integers(0, 10_000))
def test_equal_mass_cutoffs_are_order_statistic_quantiles(n, k, seed):
    x = np.random.default_rng(seed).normal(size=n)
    layout = choose_bins(x, BinningConfig("equal_mass", nbins=k, max_n_per_bin=10**9))
    xs = sorted(x.tolist())
    expect = [_type7_quantile(xs, i / k) for i in range(k + 1)]
    np.testing.assert_allclose(layout.cutoffs, expect, rtol=0, atol=1e-12)


def test_equal_mass_bin_count_grows_with_sample_size():
    x = np.random.default_rng(1).normal(size=1000)
    assert choose_bins(x, BinningConfig("equal_mass", max_n_per_bin=100)).n_interior == 10
    assert choose_bins(x, BinningConfig("equal_mass", max_n_per_bin=500)).n_interior == 5


def test_equal_len_cutoffs_are_evenly_spaced():
    x = np.array([0.0, 1.0, 2.5, 10.0])
    layout = choose_bins(x, BinningConfig("equal_len", nbins=4))
    np.testing.assert_allclose(layout.cutoffs, [0, 2.5, 5, 7.5, 10])


def test_dhist_cutoffs_cover_range_and_increase():
    x = np.random.default_rng(3).lognormal(size=500)
    layout = choose_bins(x, BinningConfig("dhist", nbins=8))
    c = layout.cutoffs
    assert c[0] == pytest.approx(x.min()) and c[-1] == pytest.approx(x.max())
    assert np.all(np.diff(c) > 0)
    assert layout.n_interior == 8


def test_tied_cutoffs_collapse_with_warning():
    x = np.array([0.0] * 50 + [1.0, 2.0, 3.0])
    with pytest.warns(BinningWarning):
        layout = choose_bins(x, BinningConfig("equal_mass", nbins=4, max_n_per_bin=10**6))
    assert np.all(np.diff(layout.cutoffs) > 0)


def test_bin_index_puts_edges_in_edge_bins_and_max_inside():
    layout = BinLayout(np.array([0.0, 1.0, 2.0]))
    np.testing.assert_array_equal(layout.bin_index([-5, 0.0, 0.5, 1.0, 2.0, 7.0]), [0, 1, 1, 2, 2, 3])
    assert layout.n_bins == 4


def test_binary_exposure_mass_equals_empirical_frequencies():
    r = np.random.default_rng(7)
    n = 600
    w1 = r.integers(0, 2, n).astype(float)
    w2 = r.integers(0, 2, n).astype(float)
    a = (r.random(n) < 0.2 + 0.3 * w1 + 0.2 * w2).astype(float)
    df = pd.DataFrame({"W1": w1, "W2": w2, "A": a})
    fd = fit_density(df, ["A"], ["W1", "W2"], gform="A ~ W1 * W2")
    got = fd.mass(df, np.ones(n))
    for u in (0.0, 1.0):
        for v in (0.0, 1.0):
            cell = (w1 == u) & (w2 == v)
            assert np.allclose(got[cell], a[cell].mean(), atol=1e-8)


def test_categorical_exposure_mass_equals_weighted_frequencies():
    r = np.random.default_rng(11)
    n = 900
    w = r.integers(0, 2, n).astype(float)
    a = r.choice([2.0, 5.0, 7.0], size=n, p=[0.5, 0.3, 0.2])
    wt = r.uniform(0.5, 2, n)
    df = pd.DataFrame({"W": w, "A": a})
    fd = fit_density(df, ["A"], ["W"], weights=wt)
    for lvl in (2.0, 5.0, 7.0):
        got = fd.mass(df, np.full(n, lvl))
        for u in (0.0, 1.0):
            cell = w == u
            expect = np.sum(wt[cell] * (a[cell] == lvl)) / np.sum(wt[cell])
            assert np.allclose(got[cell], expect, atol=1e-8)


def test_intercept_only_continuous_density_matches_histogram():
    r = np.random.default_rng(5)
    a = r.normal(size=1000)
    df = pd.DataFrame({"A": a, "W": r.normal(size=1000)})
    fd = fit_density(df, ["A"], [], BinningConfig("equal_len", nbins=6))
    layout = fd.variables[0].layout
    idx = layout.bin_index(a)
    counts = np.bincount(idx, minlength=layout.n_bins) / len(a)
    np.testing.assert_allclose(fd.mass(df, a), counts[idx], atol=1e-8)
    np.testing.assert_allclose(eval_density(fd, df, a), np.maximum(counts[idx] / layout.widths[idx], fd.lbound),
                               atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), method=st.sampled_from(["equal_mass", "equal_len", "dhist"]),
       nbins=st.integers(2, 9), pooled=st.booleans())
def test_continuous_bin_masses_partition_unity(seed, method, nbins, pooled):
    r = np.random.default_rng(seed)
    n = 300
    w = r.normal(size=n)
    a = 0.5 * w + r.normal(size=n)
    df = pd.DataFrame({"W": w, "A": a})
    fd = fit_density(df, ["A"], ["W"], BinningConfig(method, nbins=nbins, max_n_per_bin=10**6, pool_contin_var=pooled))
    vm = fd.variables[0]
    probe = pd.DataFrame({"W": np.linspace(-4, 4, 25)})
    masses = vm.masses(probe)
    assert np.all(masses >= 0)
    np.testing.assert_allclose(masses.sum(axis=1), 1.0, atol=1e-8)
    # one representative point per bin, edge bins included, through the public mass()
    c = vm.layout.cutoffs
    reps = np.concatenate([[c[0] - 1.0], (c[:-1] + c[1:]) / 2, [c[-1] + 1.0]])
    total = sum(fd.mass(probe, np.full(len(probe), x)) for x in reps)
    np.testing.assert_allclose(total, 1.0, atol=1e-8)


def test_sequential_factorization_adds_earlier_exposures():
    r = np.random.default_rng(2)
    n = 400
    df = pd.DataFrame({"W": r.normal(size=n)})
    df["A1"] = (r.random(n) < 0.5).astype(float)
    df["A2"] = (r.random(n) < 0.2 + 0.6 * df["A1"]).astype(float)
    fd = fit_density(df, ["A1", "A2"], ["W"])
    assert "A1" in fd.variables[1].formula.terms
    joint = fd.mass(df, df[["A1", "A2"]].to_numpy())
    parts = fd.variables[0].mass_at(df, df["A1"].to_numpy()) * fd.variables[1].mass_at(df, df["A2"].to_numpy())
    np.testing.assert_allclose(joint, parts)


def test_serialization_round_trip_preserves_predictions(tmp_path):
    r = np.random.default_rng(9)
    df = pd.DataFrame({"W": r.normal(size=300), "A": r.normal(size=300)})
    fd = fit_density(df, ["A"], ["W"], BinningConfig("equal_mass", nbins=5))
    path = tmp_path / "g.json"
    fd.save(path)
    assert json.loads(path.read_text())["format"] == "hiertmle.FittedDensity"
    back = FittedDensity.load(path)
    np.testing.assert_array_equal(back.mass(df, df["A"].to_numpy()), fd.mass(df, df["A"].to_numpy()))


def test_reuse_rejects_mismatched_predictors():
    df = pd.DataFrame({"W": [0.0, 1.0, 0.0, 1.0], "A": [0.0, 1.0, 1.0, 0.0]})
    fd = fit_density(df, ["A"], ["W"])
    with pytest.raises(DensityModelError):
        fd.check_compatible(["V"], ["A"])
    with pytest.raises(DensityModelError):
        fd.check_compatible(["W"], ["B"])


def test_template_reuses_cutoffs():
    r = np.random.default_rng(4)
    df = pd.DataFrame({"W": r.normal(size=200), "A": r.normal(size=200)})
    g0 = fit_density(df, ["A"], ["W"])
    gs = fit_density(df, ["A"], ["W"], a_values=df["A"].to_numpy() + 1.0, template=g0)
    np.testing.assert_array_equal(gs.variables[0].layout.cutoffs, g0.variables[0].layout.cutoffs)


def test_unseen_level_has_zero_mass_then_lbound():
    df = pd.DataFrame({"W": [0.0, 1.0, 0.0, 1.0, 1.0], "A": [0.0, 1.0, 2.0, 0.0, 1.0]})
    fd = fit_density(df, ["A"], ["W"])
    assert np.all(fd.mass(df, np.full(5, 3.0)) == 0)
    assert np.all(eval_density(fd, df, np.full(5, 3.0)) == fd.lbound)


def test_sklearn_style_wrapper():
    r = np.random.default_rng(8)
    X = pd.DataFrame({"W": r.normal(size=300)})
    A = pd.Series(0.7 * X["W"] + r.normal(size=300), name="A")
    est = ConditionalDensityEstimator(nbins=6, max_n_per_bin=1000).fit(X, A)
    dens = est.predict_density(X, A)
    assert dens.shape == (300,) and np.all(dens > 0)
    np.testing.assert_allclose(est.score_samples(X, A), np.log(dens))
