"""Targeted substitution, IPTW and G-computation estimators with influence-curve variances.

The engine works on a :class:`TargetingProblem`: a table of analysis rows
(communities or individuals) with a bounded outcome, row weights, the
analysis unit each row belongs to, and a callable that returns initial
outcome-regression predictions at any exposure matrix. The hierarchy module
builds these problems for each analysis strategy.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import norm

from .density import BinningConfig, FittedDensity, fit_density, DEFAULT_LBOUND
from .glm import GLM, GlmFit
from .interventions import G0_STREAM, GSTAR_STREAM, InterventionSpec, McConfig, sample_gstar

logger = logging.getLogger(__name__)

TARGET_METHODS = ("tmle_intercept", "tmle_covariate")
ESTIMATORS = ("tmle", "iptw", "gcomp")


class TargetingWarning(UserWarning):
    pass


class NumericFailure(RuntimeError):
    """Estimation produced non-finite values."""


@dataclass(frozen=True)
class OutcomeScale:
    """Linear map of the outcome range ``[lower, upper]`` onto ``[0, 1]``.

    Initial predictions are kept inside ``(1 - alpha, alpha)``.
    """

    lower: float
    upper: float
    alpha: float = 0.995

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ValueError("outcome bounds need lower < upper")
        if not 0.5 < self.alpha < 1:
            raise ValueError("alpha must lie in (0.5, 1)")

    @classmethod
    def from_outcome(cls, y, qbounds=None, alpha: float = 0.995) -> "OutcomeScale":
        """Bounds from ``qbounds`` or from the data.

        A 0/1 outcome keeps the natural bounds ``(0, 1)``; otherwise the
        observed range is widened by 10% of its length at each end.
        """
        if qbounds is not None:
            lo, hi = map(float, qbounds)
            return cls(lo, hi, alpha)
        y = np.asarray(y, dtype=float)
        if np.all((y == 0) | (y == 1)):
            return cls(0.0, 1.0, alpha)
        lo, hi = float(np.min(y)), float(np.max(y))
        pad = 0.1 * (hi - lo)
        if pad == 0:
            pad = max(abs(lo), 1.0) * 0.1
        return cls(lo - pad, hi + pad, alpha)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def qbounds_effective(self) -> tuple[float, float]:
        return (1.0 - self.alpha, self.alpha)

    def to_unit(self, y) -> np.ndarray:
        y = np.clip(np.asarray(y, dtype=float), self.lower, self.upper)
        return (y - self.lower) / self.width

    def from_unit(self, p):
        return self.lower + self.width * p

    def clamp(self, q) -> np.ndarray:
        return np.clip(q, 1.0 - self.alpha, self.alpha)


@dataclass
class TargetingProblem:
    """Everything the engine needs about one analysis.

    Attributes
    ----------
    frame : DataFrame
        Analysis rows holding exposures and predictors.
    anodes : list of str
    ystar : ndarray
        Outcome on the unit scale.
    weights : ndarray
        Row weights used in targeting, substitution and IPTW averages.
    unit : ndarray of int
        Analysis unit of each row; the influence curve is summed per unit.
    det : ndarray of bool
        Rows whose outcome is known deterministically.
    scale : OutcomeScale
    qbar : callable
        ``qbar(A) -> predictions`` on the unit scale (clamped), for an
        ``(n_rows, n_exposures)`` exposure matrix.
    g_predictors : list of str
        Default predictors for the exposure model.
    groups : ndarray or None
        Community label per row, passed to community-level samplers.
    q_fit : GlmFit or None
    """

    frame: pd.DataFrame
    anodes: list[str]
    ystar: np.ndarray
    weights: np.ndarray
    unit: np.ndarray
    det: np.ndarray
    scale: OutcomeScale
    qbar: Callable[[np.ndarray], np.ndarray]
    g_predictors: list[str]
    groups: np.ndarray | None = None
    q_fit: GlmFit | None = None
    unit_keys: list | None = None

    @property
    def observed_a(self) -> np.ndarray:
        return self.frame[self.anodes].to_numpy(dtype=float)

    @property
    def n_units(self) -> int:
        return int(self.unit.max()) + 1 if len(self.unit) else 0


@dataclass(frozen=True)
class TmleSettings:
    method: str = "tmle_intercept"
    lbound: float = DEFAULT_LBOUND
    ci_alpha: float = 0.05
    mc: McConfig = field(default_factory=McConfig)
    binning: BinningConfig = field(default_factory=BinningConfig)
    hform_g0: object = None
    hform_gstar: object = None
    savetime: bool = True
    g0_model: FittedDensity | None = None
    gstar_model: FittedDensity | None = None
    f_g0: InterventionSpec | None = None

    def __post_init__(self):
        if self.method not in TARGET_METHODS:
            raise ValueError(f"targeting method must be one of {TARGET_METHODS}")
        if not 0 < self.lbound < 1:
            raise ValueError("lbound must lie in (0, 1)")
        if not 0 < self.ci_alpha < 1:
            raise ValueError("ci_alpha must lie in (0, 1)")


# ---------------------------------------------------------------------------
# building blocks


def fit_initial_Q(frame, formula, ystar, weights, scale: OutcomeScale) -> tuple[GlmFit, Callable]:
    """Logistic regression of the unit-scale outcome; returns the fit and a predictor.

    The predictor takes a column store and returns clamped predictions.
    """
    X = formula.design_matrix(frame)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = GLM("binomial", fit_intercept=False).fit(X, ystar, sample_weight=weights)
    fit = GlmFit(
        terms=list(formula.terms),
        coefficients=model.coef_,
        family="binomial",
        intercept=formula.intercept,
        converged=model.converged_,
        iterations=model.n_iter_,
        aliased=model.aliased_,
        separation=model.separation_,
    )

    def predict(data) -> np.ndarray:
        return scale.clamp(expit(fit.formula.design_matrix(data) @ fit.coefficients))

    return fit, predict


def compute_h(g0: FittedDensity | None, gstar: FittedDensity | None, rows, a_values, lbound: float):
    """Clever covariate ``g*(a) / max(g(a), lbound)`` on bin/level probabilities.

    Both models share bin cutoffs, so the bin widths cancel. Returns
    ``(h, truncated_mask)``.
    """
    if g0 is None:
        n = len(np.asarray(a_values))
        return np.ones(n), np.zeros(n, dtype=bool)
    p0 = g0.mass(rows, a_values)
    ps = p0 if gstar is g0 else gstar.mass(rows, a_values)
    trunc = p0 < lbound
    if gstar is g0:
        h = np.where(trunc, p0 / lbound, 1.0)
    else:
        h = ps / np.maximum(p0, lbound)
    return h, trunc


def _solve_epsilon(x, y, w, offset) -> tuple[float, bool]:
    """One-parameter logistic fluctuation ``logit(q) = offset + eps * x``."""
    keep = w > 0
    if not np.any(keep) or not np.any(x[keep] != 0):
        return 0.0, True
    x, y, w, offset = x[keep], y[keep], w[keep], offset[keep]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = GLM("binomial", fit_intercept=False).fit(x[:, None], y, sample_weight=w, offset=offset)
    eps = float(model.coef_[0])
    if not model.converged_ or model.separation_ or not np.isfinite(eps):
        return 0.0, False
    # Newton polish so the score equation holds to rounding error
    for _ in range(8):
        mu = expit(offset + eps * x)
        score = float(np.sum(w * x * (y - mu)))
        info = float(np.sum(w * x * x * mu * (1 - mu)))
        if info <= 0:
            break
        step = score / info
        eps += step
        if abs(step) <= 1e-15 * max(1.0, abs(eps)):
            break
    return eps, True


@dataclass
class Fluctuation:
    epsilon: float
    method: str
    converged: bool

    def apply(self, q, h) -> np.ndarray:
        if self.epsilon == 0.0:
            return np.asarray(q, dtype=float)
        shift = self.epsilon * (h if self.method == "tmle_covariate" else 1.0)
        return expit(logit(q) + shift)


def target(qbar, h, ystar, weights, method: str = "tmle_intercept", det=None) -> tuple[np.ndarray, Fluctuation]:
    """Fluctuate initial predictions toward the outcome along the clever covariate.

    ``tmle_covariate`` regresses the outcome on ``h`` with offset
    ``logit(qbar)``; ``tmle_intercept`` fits an intercept with weights
    ``weights * h``. Rows flagged in ``det`` are left out of the fit.
    """
    if method not in TARGET_METHODS:
        raise ValueError(f"unknown targeting method {method!r}")
    qbar = np.asarray(qbar, dtype=float)
    h = np.asarray(h, dtype=float)
    w = np.asarray(weights, dtype=float).copy()
    if det is not None:
        w[np.asarray(det, dtype=bool)] = 0.0
    off = logit(qbar)
    if method == "tmle_covariate":
        eps, ok = _solve_epsilon(h, ystar, w, off)
    else:
        eps, ok = _solve_epsilon(np.ones_like(h), ystar, w * h, off)
    if not ok:
        warnings.warn("fluctuation regression failed to converge; using epsilon = 0", TargetingWarning)
    fl = Fluctuation(eps, method, ok)
    return fl.apply(qbar, h), fl


@dataclass
class EstimatorResult:
    estimate: float
    var: float
    ci: tuple[float, float]
    ic: np.ndarray = field(repr=False)

    def to_dict(self, with_ic: bool = True) -> dict:
        d = {"estimate": self.estimate, "var": self.var, "ci": list(self.ci)}
        if with_ic:
            d["ic"] = [float(v) for v in self.ic]
        return d


def _result(estimate: float, ic: np.ndarray, ci_alpha: float) -> EstimatorResult:
    var = float(np.var(ic) / len(ic)) if len(ic) else float("nan")
    z = float(norm.ppf(1 - ci_alpha / 2))
    half = z * np.sqrt(var)
    return EstimatorResult(float(estimate), var, (float(estimate - half), float(estimate + half)), ic)


def _unit_ic(row_terms, weights, unit, n_units, det) -> np.ndarray:
    """Per-unit influence curve: weighted row sums divided by the mean unit weight."""
    keep = ~det
    unit_w = np.bincount(unit[keep], weights=weights[keep], minlength=n_units)
    sums = np.bincount(unit[keep], weights=(weights * row_terms)[keep], minlength=n_units)
    live = unit_w > 0
    return sums[live] / np.mean(unit_w[live])


def eic_variance(resid_term, sub_term, psi, weights, unit, det=None, n_units=None, ci_alpha=0.05):
    """Influence curve ``h * (Y - Q*) + E_{g*}[Q*] - psi`` aggregated per unit.

    ``resid_term`` is ``h * (Y - Q*)`` per row and ``sub_term`` the
    Monte-Carlo average of the targeted predictions per row.
    """
    unit = np.asarray(unit, dtype=int)
    det = np.zeros(len(unit), dtype=bool) if det is None else np.asarray(det, dtype=bool)
    n_units = int(unit.max()) + 1 if n_units is None else n_units
    ic = _unit_ic(np.asarray(resid_term) + np.asarray(sub_term) - psi, np.asarray(weights, float), unit, n_units, det)
    return _result(psi, ic, ci_alpha)


def _weighted_mean(x, w) -> float:
    return float(np.sum(w * x) / np.sum(w))


def substitution_estimate(q_star_draws: np.ndarray, weights) -> tuple[float, np.ndarray]:
    """Average targeted predictions over draws then over rows.

    ``q_star_draws`` has shape ``(n_sims, n_rows)``. Returns the unit-scale
    estimate and the per-row draw average.
    """
    per_row = np.mean(q_star_draws, axis=0)
    return _weighted_mean(per_row, weights), per_row


def iptw_estimate(h, ystar, weights) -> float:
    """Weighted mean of ``h * Y`` (unit scale)."""
    return float(np.sum(weights * h * ystar) / np.sum(weights))


# ---------------------------------------------------------------------------
# one intervention end to end


@dataclass
class InterventionResult:
    estimates: dict[str, EstimatorResult]
    epsilon: float
    diagnostics: dict
    g0_model: FittedDensity | None = field(default=None, repr=False)
    gstar_model: FittedDensity | None = field(default=None, repr=False)
    intervention: dict | None = None

    def to_dict(self, with_ic: bool = True) -> dict:
        return {
            "intervention": self.intervention,
            "estimates": {k: self.estimates[k].estimate for k in ESTIMATORS},
            "vars": {k: self.estimates[k].var for k in ESTIMATORS},
            "CIs": {k: list(self.estimates[k].ci) for k in ESTIMATORS},
            "epsilon": self.epsilon,
            "diagnostics": self.diagnostics,
            **({"ic": {k: [float(v) for v in self.estimates[k].ic] for k in ESTIMATORS}} if with_ic else {}),
        }


def savetime_shortcut(gstar: InterventionSpec | None, method: str, savetime: bool) -> bool:
    """True when the exposure models can be skipped (no intervention, intercept targeting)."""
    return gstar is None and method == "tmle_intercept" and bool(savetime)


def fit_g0(problem: TargetingProblem, settings: TmleSettings) -> FittedDensity:
    if settings.g0_model is not None:
        settings.g0_model.check_compatible(problem.g_predictors, problem.anodes)
        return settings.g0_model
    frame, a, w = problem.frame, problem.observed_a, problem.weights
    if settings.f_g0 is not None:
        extra = sample_gstar(settings.f_g0, frame, problem.anodes, settings.mc, problem.groups, stream=G0_STREAM)
        S = extra.shape[0]
        frame = pd.concat([frame] * (S + 1), ignore_index=True)
        a = np.concatenate([a] + list(extra))
        w = np.tile(w, S + 1)
    return fit_density(frame, problem.anodes, problem.g_predictors, settings.binning, settings.hform_g0,
                       weights=w, a_values=a, lbound=settings.lbound)


def _fit_gstar(problem, settings, g0, draws) -> FittedDensity:
    if settings.gstar_model is not None:
        settings.gstar_model.check_compatible(problem.g_predictors, problem.anodes)
        return settings.gstar_model
    S = draws.shape[0]
    frame = pd.concat([problem.frame] * S, ignore_index=True) if S > 1 else problem.frame
    gform = settings.hform_gstar if settings.hform_gstar is not None else settings.hform_g0
    return fit_density(frame, problem.anodes, problem.g_predictors, settings.binning, gform,
                       weights=np.tile(problem.weights, S), a_values=draws.reshape(-1, draws.shape[2]),
                       template=g0, lbound=settings.lbound)


def estimate_intervention(
    problem: TargetingProblem,
    gstar: InterventionSpec | None,
    settings: TmleSettings,
    g0: FittedDensity | None = None,
) -> InterventionResult:
    """Run TMLE, IPTW and G-computation for one intervention.

    ``gstar=None`` means "leave the exposure as observed". ``g0`` may be
    passed so two interventions share one exposure-model fit.
    """
    n = len(problem.frame)
    a_obs = problem.observed_a
    mc = settings.mc
    shortcut = savetime_shortcut(gstar, settings.method, settings.savetime)

    if gstar is None:
        draws = np.broadcast_to(a_obs, (mc.n_mc_sims, n, a_obs.shape[1])).copy()
    else:
        draws = sample_gstar(gstar, problem.frame, problem.anodes, mc, problem.groups, stream=GSTAR_STREAM)

    if shortcut:
        g0m = gsm = None
    else:
        g0m = g0 if g0 is not None else fit_g0(problem, settings)
        gsm = g0m if gstar is None and settings.gstar_model is None else _fit_gstar(problem, settings, g0m, draws)

    h, trunc = compute_h(g0m, gsm, problem.frame, a_obs, settings.lbound)
    det = problem.det
    ystar = problem.ystar
    w = problem.weights

    q_obs = problem.qbar(a_obs)
    q_obs = np.where(det, ystar, q_obs)
    q_star, fl = target(q_obs, h, ystar, w, settings.method, det)
    q_star = np.where(det, ystar, q_star)

    q_draws = np.empty((draws.shape[0], n))
    qs_draws = np.empty_like(q_draws)
    for s in range(draws.shape[0]):
        qd = problem.qbar(draws[s])
        if settings.method == "tmle_covariate" and fl.epsilon != 0.0:
            hd, _ = compute_h(g0m, gsm, problem.frame, draws[s], settings.lbound)
        else:
            hd = np.ones(n)
        q_draws[s] = np.where(det, ystar, qd)
        qs_draws[s] = np.where(det, ystar, fl.apply(qd, hd))

    scale = problem.scale
    nu = problem.n_units
    psi_t, sub_t = substitution_estimate(qs_draws, w)
    psi_g, sub_g = substitution_estimate(q_draws, w)
    psi_i = iptw_estimate(h, ystar, w)

    ic_t = _unit_ic(h * (ystar - q_star) + sub_t - psi_t, w, problem.unit, nu, det)
    ic_g = _unit_ic(h * (ystar - q_obs) + sub_g - psi_g, w, problem.unit, nu, det)
    ic_i = _unit_ic(h * ystar - psi_i, w, problem.unit, nu, det)

    ests = {
        "tmle": _result(scale.from_unit(psi_t), scale.width * ic_t, settings.ci_alpha),
        "iptw": _result(scale.from_unit(psi_i), scale.width * ic_i, settings.ci_alpha),
        "gcomp": _result(scale.from_unit(psi_g), scale.width * ic_g, settings.ci_alpha),
    }
    logger.info("epsilon %.6g, h in [%.4g, %.4g]", fl.epsilon, float(np.min(h)), float(np.max(h)))
    for k, r in ests.items():
        if not (np.isfinite(r.estimate) and np.isfinite(r.var)):
            raise NumericFailure(f"{k} estimate is not finite")

    live = ~det
    diag = {
        "h_min": float(np.min(h[live])) if live.any() else float("nan"),
        "h_max": float(np.max(h[live])) if live.any() else float("nan"),
        "h_mean": float(np.mean(h[live])) if live.any() else float("nan"),
        "truncated_fraction": float(np.mean(trunc)),
        "n_units": int(len(ic_t)),
        "n_rows": int(n),
        "n_mc_sims": int(mc.n_mc_sims),
        "targeting_method": settings.method,
        "fluctuation_converged": bool(fl.converged),
        "savetime_shortcut": bool(shortcut),
        "bins_used": None if g0m is None else g0m.n_models(),
        "q_converged": None if problem.q_fit is None else bool(problem.q_fit.converged),
    }
    return InterventionResult(
        estimates=ests,
        epsilon=float(fl.epsilon),
        diagnostics=diag,
        g0_model=g0m,
        gstar_model=gsm,
        intervention=None if gstar is None else gstar.describe(),
    )


def contrast(r1: InterventionResult, r2: InterventionResult, ci_alpha: float = 0.05) -> dict[str, EstimatorResult]:
    """Difference of two intervention results, estimator by estimator."""
    out = {}
    for k in ESTIMATORS:
        a, b = r1.estimates[k], r2.estimates[k]
        if a.ic.shape != b.ic.shape:
            raise ValueError("cannot contrast results computed on different analysis units")
        out[k] = _result(a.estimate - b.estimate, a.ic - b.ic, ci_alpha)
    return out


@dataclass
class EstimationReport:
    """Results for one or two interventions, plus their contrast when both are given."""

    gstar1: InterventionResult
    gstar2: InterventionResult | None = None
    ate: dict[str, EstimatorResult] | None = None
    strategy: str = "no_community"
    unit_keys: list | None = None
    per_community: list[dict] | None = None
    q_model: GlmFit | None = field(default=None, repr=False)

    def to_dict(self, with_ic: bool = True) -> dict:
        d = {"strategy": self.strategy, "EY_gstar1": self.gstar1.to_dict(with_ic)}
        if self.gstar2 is not None:
            d["EY_gstar2"] = self.gstar2.to_dict(with_ic)
        if self.ate is not None:
            d["ATE"] = {
                "estimates": {k: self.ate[k].estimate for k in ESTIMATORS},
                "vars": {k: self.ate[k].var for k in ESTIMATORS},
                "CIs": {k: list(self.ate[k].ci) for k in ESTIMATORS},
            }
            if with_ic:
                d["ATE"]["ic"] = {k: [float(v) for v in self.ate[k].ic] for k in ESTIMATORS}
        if self.q_model is not None:
            d["Q_model"] = self.q_model.to_dict()
        if self.per_community is not None:
            d["per_community"] = self.per_community
        if with_ic and self.unit_keys is not None:
            d["units"] = [k if isinstance(k, str) else int(k) for k in self.unit_keys]
        return d

    def to_json(self, with_ic: bool = True) -> str:
        return json.dumps(self.to_dict(with_ic), indent=2, default=_json_default)

    def summary(self) -> str:
        lines = [f"strategy: {self.strategy}"]
        blocks = [("EY_gstar1", self.gstar1.estimates)]
        if self.gstar2 is not None:
            blocks.append(("EY_gstar2", self.gstar2.estimates))
        if self.ate is not None:
            blocks.append(("ATE", self.ate))
        for name, ests in blocks:
            lines.append(name)
            lines.append(f"  {'':6s} {'estimate':>12s} {'var':>12s} {'ci_low':>12s} {'ci_high':>12s}")
            for k in ESTIMATORS:
                r = ests[k]
                lines.append(f"  {k:6s} {r.estimate:12.6f} {r.var:12.6g} {r.ci[0]:12.6f} {r.ci[1]:12.6f}")
        return "\n".join(lines)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
