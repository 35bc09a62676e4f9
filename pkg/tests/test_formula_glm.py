import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit

from hiertmle.formula import FormulaError, as_formula, parse_formula
from hiertmle.glm import GLM, GlmSpec, fit, predict


def test_star_expands_to_main_effects_and_interaction():
    f = parse_formula("A ~ W1 + W3 * W4")
    assert f.outcome == "A"
    assert list(f.terms) == ["W1", "W3", "W4", "W3:W4"]
    assert f.intercept


def test_design_matrix_columns():
    df = pd.DataFrame({"a": [1.0, 2.0], "b": [3.0, 5.0]})
    X = parse_formula("y ~ a * b").design_matrix(df)
    np.testing.assert_array_equal(X, [[1, 1, 3, 3], [1, 2, 5, 10]])


@pytest.mark.parametrize("bad", ["~ ~ a", "y ~ a +", "y ~ a + + b", "y ~ 3x", "y ~ a * "])
def test_malformed_formulas_rejected(bad):
    with pytest.raises(FormulaError):
        parse_formula(bad)


def test_missing_column_is_reported():
    with pytest.raises(FormulaError, match="zz"):
        parse_formula("y ~ zz").design_matrix(pd.DataFrame({"a": [1.0]}))


def test_default_formula_uses_all_predictors():
    f = as_formula(None, "Y", ["W1", "W2"])
    assert list(f.terms) == ["W1", "W2"] and f.outcome == "Y"


def _direct_mle(X, y, w):
    def nll(b):
        eta = X @ b
        return -np.sum(w * (y * eta - np.logaddexp(0, eta)))

    def grad(b):
        return -X.T @ (w * (y - expit(X @ b)))

    return minimize(nll, np.zeros(X.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-10}).x


def test_logistic_fit_matches_direct_likelihood_maximization(rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
    y = (rng.random(n) < expit(X @ [0.2, -0.7, 1.1])).astype(float)
    w = rng.uniform(0.5, 2.0, n)
    m = GLM(fit_intercept=False).fit(X, y, sample_weight=w)
    np.testing.assert_allclose(m.coef_, _direct_mle(X, y, w), atol=1e-5)


def test_fractional_outcome_quasi_binomial(rng):
    n = 300
    x = rng.normal(size=n)
    y = expit(0.5 * x + rng.normal(0, 0.3, n))
    m = GLM().fit(x[:, None], y)
    assert np.max(np.abs(m.score_vector(x[:, None], y))) < 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10), shift=st.floats(-5, 5))
def test_glm_score_replication_and_reparametrization(seed, scale, shift):
    r = np.random.default_rng(seed)
    n = 120
    x = r.normal(size=n)
    y = (r.random(n) < expit(0.3 + 0.8 * x)).astype(float)
    base = GLM().fit(x[:, None], y)
    # score equations hold at the solution
    assert np.max(np.abs(base.score_vector(x[:, None], y))) < 1e-7
    # duplicating every row is the same as weight 2
    dup = GLM().fit(np.concatenate([x, x])[:, None], np.concatenate([y, y]))
    wtd = GLM().fit(x[:, None], y, sample_weight=np.full(n, 2.0))
    np.testing.assert_allclose(dup.coef_, wtd.coef_, atol=1e-7)
    # affine change of the covariate leaves the fitted probabilities unchanged
    moved = GLM().fit((scale * x + shift)[:, None], y)
    np.testing.assert_allclose(moved.predict((scale * x + shift)[:, None]), base.predict(x[:, None]), atol=1e-7)


def test_offset_enters_linear_predictor(rng):
    n = 300
    x = rng.normal(size=n)
    off = rng.normal(size=n)
    y = (rng.random(n) < expit(off + 0.5 * x)).astype(float)
    m = GLM(fit_intercept=False).fit(x[:, None], y, offset=off)
    X = x[:, None]
    b = minimize(lambda b: -np.sum(y * (off + X @ b) - np.logaddexp(0, off + X @ b)), [0.0]).x
    np.testing.assert_allclose(m.coef_, b, atol=1e-4)


def test_aliased_column_is_dropped_not_fatal(rng):
    n = 100
    x = rng.normal(size=n)
    y = (rng.random(n) < 0.5).astype(float)
    with pytest.warns(UserWarning, match="aliased"):
        m = GLM().fit(np.column_stack([x, 2 * x]), y)
    assert m.aliased_.sum() == 1


def test_formula_level_fit_and_predict_round_trip(rng):
    df = pd.DataFrame({"x": rng.normal(size=200)})
    df["y"] = (rng.random(200) < expit(df["x"])).astype(float)
    f = fit(GlmSpec("binomial", "y ~ x"), df)
    p = predict(f, df)
    assert p.shape == (200,) and np.all((p > 0) & (p < 1))
    again = type(f).from_dict(f.to_dict())
    np.testing.assert_array_equal(predict(again, df), p)
