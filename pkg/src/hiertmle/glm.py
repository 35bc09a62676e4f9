"""Weighted generalized linear models with offsets.

Two families are supported: Gaussian with identity link (weighted least
squares) and binomial with logit link (IRLS). Binomial outcomes may be
fractional in ``[0, 1]``; the quasi-binomial score is the same as the
Bernoulli one.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .formula import Formula, as_formula


FAMILIES = ("gaussian", "binomial")

MAX_ITER = 50
TOL = 1e-8
MAX_HALVINGS = 5
COEF_CAP = 40.0
ALIAS_TOL = 1e-7


class GLMConvergenceWarning(UserWarning):
    pass


def _binomial_deviance(y, mu, w):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(y > 0, y * np.log(y / mu), 0.0)
        t2 = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
    return 2.0 * float(np.sum(w * (t1 + t2)))


def _aliased_columns(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Flag columns linearly dependent on columns to their left.

    Uses an unpivoted QR of the weighted design, so the left-most member of a
    dependent set is kept (deterministic pivoting order).
    """
    p = X.shape[1]
    if p == 0:
        return np.zeros(0, dtype=bool)
    Xw = X * np.sqrt(w)[:, None]
    keep = np.zeros(p, dtype=bool)
    basis = np.empty((X.shape[0], 0))
    for k in range(p):
        col = Xw[:, k]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            continue
        resid = col - basis @ (basis.T @ col) if basis.shape[1] else col
        rnorm = np.linalg.norm(resid)
        if rnorm > ALIAS_TOL * norm:
            basis = np.column_stack([basis, resid / rnorm])
            keep[k] = True
    return ~keep


def _irls(X, y, w, offset, start=None):
    """Fit a weighted logistic regression by IRLS with step-halving.

    Returns ``(beta, converged, n_iter, capped)``.
    """
    n, p = X.shape
    beta = np.zeros(p) if start is None else start.copy()
    eta = X @ beta + offset
    mu = expit(eta)
    dev = _binomial_deviance(y, mu, w)
    converged = False
    capped = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        var = mu * (1.0 - mu)
        var = np.maximum(var, 1e-12)
        z = (eta - offset) + (y - mu) / var
        sw = np.sqrt(w * var)
        new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        if np.any(np.abs(new) > COEF_CAP):
            capped = True
            new = np.clip(new, -COEF_CAP, COEF_CAP)
        step = new - beta
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step
            eta_c = X @ cand + offset
            mu_c = expit(eta_c)
            dev_c = _binomial_deviance(y, mu_c, w)
            if np.isfinite(dev_c) and dev_c <= dev * (1 + 1e-12) + 1e-12:
                break
            step = step / 2.0
        delta = np.max(np.abs(cand - beta) / np.maximum(np.abs(cand), 1e-3), initial=0.0)
        beta, eta, mu, dev = cand, eta_c, mu_c, dev_c
        if delta <= TOL:
            converged = True
            break
    return beta, converged, it, capped


@dataclass
class GlmFit:
    """Plain-data record of a fitted GLM (serializable)."""

    terms: list[str]
    coefficients: np.ndarray
    family: str
    intercept: bool = True
    converged: bool = True
    iterations: int = 0
    dispersion: float | None = None
    aliased: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    separation: bool = False

    def to_dict(self) -> dict:
        return {
            "terms": list(self.terms),
            "intercept": self.intercept,
            "family": self.family,
            "coefficients": [float(c) for c in self.coefficients],
            "aliased": [bool(a) for a in self.aliased],
            "converged": self.converged,
            "iterations": self.iterations,
            "dispersion": self.dispersion,
            "separation": self.separation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GlmFit":
        return cls(
            terms=list(d["terms"]),
            coefficients=np.asarray(d["coefficients"], dtype=float),
            family=d["family"],
            intercept=bool(d.get("intercept", True)),
            converged=bool(d.get("converged", True)),
            iterations=int(d.get("iterations", 0)),
            dispersion=d.get("dispersion"),
            aliased=np.asarray(d.get("aliased", [False] * len(d["coefficients"])), dtype=bool),
            separation=bool(d.get("separation", False)),
        )

    @property
    def formula(self) -> Formula:
        return Formula(None, tuple(self.terms), self.intercept)

    @property
    def named_coefficients(self) -> dict[str, float]:
        return dict(zip(self.formula.column_names, map(float, self.coefficients)))


class GLM(BaseEstimator):
    """Weighted GLM estimator with offset support.

    Parameters
    ----------
    family : {"binomial", "gaussian"}, default="binomial"
        Binomial uses the logit link and accepts fractional outcomes in
        ``[0, 1]``; gaussian uses the identity link.
    fit_intercept : bool, default=True
        Prepend a column of ones to ``X``.

    Attributes
    ----------
    coef_ : ndarray of shape (n_columns,)
        Coefficients, intercept first when ``fit_intercept``. Aliased columns
        carry a coefficient of exactly zero.
    aliased_ : ndarray of bool
    converged_ : bool
    n_iter_ : int
    separation_ : bool
        True when a coefficient hit the +/-40 cap on the logit scale.
    dispersion_ : float or None
    """

    def __init__(self, family: str = "binomial", fit_intercept: bool = True):
        self.family = family
        self.fit_intercept = fit_intercept

    def _design(self, X):
        X = check_array(X, ensure_min_features=0, ensure_2d=True, dtype=float)
        if self.fit_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X

    def fit(self, X, y, sample_weight=None, offset=None):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        Xd = self._design(X)
        y = np.asarray(y, dtype=float).ravel()
        n, p = Xd.shape
        if y.shape[0] != n:
            raise ValueError("X and y have inconsistent numbers of rows")
        w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float).ravel()
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("sample weights must be nonnegative with at least one positive entry")
        off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).ravel()
        if self.family == "binomial" and (np.any(y < 0) or np.any(y > 1)):
            raise ValueError("binomial outcomes must lie in [0, 1]")

        aliased = _aliased_columns(Xd, w)
        if aliased.any():
            warnings.warn(f"dropping {int(aliased.sum())} aliased design column(s)", GLMConvergenceWarning)
        keep = ~aliased
        Xk = Xd[:, keep]
        coef = np.zeros(p)
        self.separation_ = False
        self.dispersion_ = None
        if self.family == "gaussian":
            sw = np.sqrt(w)
            beta, *_ = np.linalg.lstsq(Xk * sw[:, None], (y - off) * sw, rcond=None)
            resid = y - off - Xk @ beta
            dof = max(float(np.sum(w > 0)) - Xk.shape[1], 1.0)
            self.dispersion_ = float(np.sum(w * resid**2) / dof)
            self.converged_ = True
            self.n_iter_ = 1
        else:
            beta, conv, it, capped = _irls(Xk, y, w, off)
            self.converged_ = conv
            self.n_iter_ = it
            self.separation_ = capped
            if not conv:
                warnings.warn(f"IRLS did not converge in {MAX_ITER} iterations", GLMConvergenceWarning)
        coef[keep] = beta
        self.coef_ = coef
        self.aliased_ = aliased
        self.n_features_in_ = Xd.shape[1] - int(self.fit_intercept)
        return self

    def decision_function(self, X, offset=None):
        """Linear predictor ``X @ coef_ + offset``."""
        check_is_fitted(self, "coef_")
        Xd = self._design(X)
        eta = Xd @ self.coef_
        if offset is not None:
            eta = eta + np.asarray(offset, dtype=float).ravel()
        return eta

    def predict(self, X, offset=None):
        """Mean response on the inverse-link scale."""
        eta = self.decision_function(X, offset)
        return expit(eta) if self.family == "binomial" else eta

    def score_vector(self, X, y, sample_weight=None, offset=None):
        """Weighted score ``sum_i w_i (y_i - mu_i) x_i`` at the fitted coefficients."""
        Xd = self._design(X)
        mu = self.predict(X, offset)
        w = np.ones(len(mu)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        return Xd.T @ (w * (np.asarray(y, dtype=float) - mu))


@dataclass
class GlmSpec:
    """Formula-level description of a regression to fit on a column store."""

    family: str
    formula: Formula | str
    offset: np.ndarray | None = None
    weights: np.ndarray | None = None


def fit(spec: GlmSpec, data: pd.DataFrame | dict) -> GlmFit:
    """Fit ``spec`` on ``data`` and return a serializable :class:`GlmFit`."""
    formula = as_formula(spec.formula, None, [])
    if formula.outcome is None:
        raise ValueError("GLM formula needs an outcome on the left-hand side")
    X = formula.design_matrix(data)
    y = np.asarray(data[formula.outcome], dtype=float)
    model = GLM(spec.family, fit_intercept=False).fit(X, y, spec.weights, spec.offset)
    return GlmFit(
        terms=list(formula.terms),
        coefficients=model.coef_,
        family=spec.family,
        intercept=formula.intercept,
        converged=model.converged_,
        iterations=model.n_iter_,
        dispersion=model.dispersion_,
        aliased=model.aliased_,
        separation=model.separation_,
    )


def predict(fit: GlmFit, data: pd.DataFrame | dict, type: str = "response", offset=None) -> np.ndarray:
    """Predict from a :class:`GlmFit` on the link or response scale."""
    eta = fit.formula.design_matrix(data) @ fit.coefficients
    if offset is not None:
        eta = eta + np.asarray(offset, dtype=float)
    if type == "link":
        return eta
    if type != "response":
        raise ValueError("type must be 'link' or 'response'")
    return expit(eta) if fit.family == "binomial" else eta
