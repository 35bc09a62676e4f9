"""Analysis strategies for hierarchical data and the ``TMLECommunity`` estimator."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import (
    DataError,
    HierDataset,
    NodeRoles,
    WeightScheme,
    aggregate_to_community,
    build_weights,
    from_frame,
)
from .density import BinningConfig, FittedDensity
from .formula import Formula, as_formula
from .interventions import InterventionSpec, McConfig, from_config
from .tmle import (
    ESTIMATORS,
    EstimationReport,
    EstimatorResult,
    InterventionResult,
    OutcomeScale,
    TargetingProblem,
    TmleSettings,
    contrast,
    estimate_intervention,
    fit_g0,
    fit_initial_Q,
    savetime_shortcut,
)

logger = logging.getLogger(__name__)

STEPS = ("no_community", "community_level", "individual_level", "per_community")


class StrategyError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    step: str = "no_community"
    pooled_q: bool = False

    def __post_init__(self):
        if self.step not in STEPS:
            raise StrategyError(f"community step must be one of {STEPS}, got {self.step!r}")
        if self.pooled_q and self.step != "community_level":
            raise StrategyError("pooled_q only applies to the community_level step")

    def resolve(self, ds: HierDataset) -> "StrategyConfig":
        if ds.roles.community_id is None and self.step != "no_community":
            warnings.warn(f"no community id bound; running {self.step!r} as 'no_community'", UserWarning)
            return StrategyConfig("no_community")
        return self


def _qformula(qform, roles: NodeRoles) -> Formula:
    f = as_formula(qform, roles.ynode, list(roles.anodes) + list(roles.wenodes))
    return f


def _det_mask(frame: pd.DataFrame, roles: NodeRoles) -> np.ndarray:
    if roles.ynode_det is None:
        return np.zeros(len(frame), dtype=bool)
    return frame[roles.ynode_det].to_numpy(dtype=float) == 1.0


def _with_exposures(frame: pd.DataFrame, anodes, a: np.ndarray) -> dict:
    cols = {c: frame[c].to_numpy() for c in frame.columns}
    for j, name in enumerate(anodes):
        cols[name] = a[:, j]
    return cols


def _row_problem(frame, roles, ystar, weights, unit, groups, scale, qform, keys) -> TargetingProblem:
    """Problem whose outcome regression is fitted on the analysis rows themselves."""
    formula = _qformula(qform, roles)
    det = _det_mask(frame, roles)
    fit, predict = fit_initial_Q(frame, formula, ystar, weights, scale)
    anodes = list(roles.anodes)

    def qbar(a):
        return predict(_with_exposures(frame, anodes, a))

    return TargetingProblem(
        frame=frame, anodes=anodes, ystar=ystar, weights=weights, unit=unit, det=det, scale=scale,
        qbar=qbar, g_predictors=list(roles.wenodes), groups=groups, q_fit=fit, unit_keys=keys,
    )


def build_problem(ds: HierDataset, w: WeightScheme, strategy: StrategyConfig, scale: OutcomeScale, qform=None):
    """Assemble the targeting problem for ``strategy`` (all but per_community)."""
    roles = ds.roles
    if roles.ynode is None:
        raise DataError("an outcome column (ynode) is required for estimation")
    y = ds.column(roles.ynode)
    if strategy.step == "no_community":
        n = ds.n_obs
        return _row_problem(ds.frame, roles, scale.to_unit(y), w.obs_weights, np.arange(n), None, scale, qform,
                            list(range(n)))
    cidx = ds.community_index
    if strategy.step == "individual_level":
        v = w.community_weights[cidx] * w.alpha
        return _row_problem(ds.frame, roles, scale.to_unit(y), v, cidx, cidx, scale, qform, ds.keys)

    agg = aggregate_to_community(ds, w)
    frame = agg.frame
    J = agg.n_communities
    ystar_c = scale.to_unit(frame[roles.ynode].to_numpy())
    if not strategy.pooled_q:
        return _row_problem(frame, roles, ystar_c, agg.weights, np.arange(J), None, scale, qform, agg.keys)

    # pooled individual-level outcome regression averaged within community
    formula = _qformula(qform, roles)
    v_ind = w.community_weights[cidx] * w.alpha
    fit, predict = fit_initial_Q(ds.frame, formula, scale.to_unit(y), v_ind, scale)
    anodes = list(roles.anodes)
    ind = ds.frame

    def qbar(a):
        q = predict(_with_exposures(ind, anodes, a[cidx]))
        return scale.clamp(np.bincount(cidx, weights=w.alpha * q, minlength=J))

    return TargetingProblem(
        frame=frame, anodes=anodes, ystar=ystar_c, weights=agg.weights, unit=np.arange(J),
        det=_det_mask(frame, roles), scale=scale, qbar=qbar, g_predictors=list(roles.wenodes),
        groups=None, q_fit=fit, unit_keys=agg.keys,
    )


def _run_problem(problem, gstar1, gstar2, settings) -> tuple[InterventionResult, InterventionResult | None]:
    need_g = not savetime_shortcut(gstar1, settings.method, settings.savetime) or gstar2 is not None
    g0 = fit_g0(problem, settings) if need_g else None
    r1 = estimate_intervention(problem, gstar1, settings, g0=g0)
    r2 = None
    if gstar2 is not None:
        r2 = estimate_intervention(problem, gstar2, settings, g0=g0)
    return r1, r2


def _summary_result(results: list[EstimatorResult], cw: np.ndarray, ci_alpha: float) -> EstimatorResult:
    wn = cw / cw.sum()
    est = float(np.sum(wn * [r.estimate for r in results]))
    var = float(np.sum(wn**2 * [r.var for r in results]))
    half = float(norm.ppf(1 - ci_alpha / 2)) * np.sqrt(var)
    return EstimatorResult(est, var, (est - half, est + half), np.zeros(0))


def _run_per_community(ds, w, scale, qform, gstar1, gstar2, settings) -> EstimationReport:
    roles = ds.roles
    sub_roles = NodeRoles(roles.anodes, roles.wenodes, roles.ynode, None, roles.ynode_det)
    r1s, r2s, ates, rows = [], [], [], []
    for c in ds.communities:
        frame = ds.frame.iloc[c.members].reset_index(drop=True)
        if all(frame[a].nunique() == 1 for a in roles.anodes):
            raise StrategyError(f"exposure is constant within community {c.key!r}; per_community needs variation")
        sub = from_frame(frame, sub_roles)
        y = sub.column(roles.ynode)
        problem = _row_problem(sub.frame, sub_roles, scale.to_unit(y), w.obs_weights[c.members],
                               np.arange(c.size), None, scale, qform, list(range(c.size)))
        r1, r2 = _run_problem(problem, gstar1, gstar2, settings)
        r1s.append(r1)
        entry = {"community": c.key if isinstance(c.key, str) else int(c.key),
                 "EY_gstar1": {k: r1.estimates[k].estimate for k in ESTIMATORS}}
        if r2 is not None:
            r2s.append(r2)
            ate = contrast(r1, r2, settings.ci_alpha)
            ates.append(ate)
            entry["EY_gstar2"] = {k: r2.estimates[k].estimate for k in ESTIMATORS}
            entry["ATE"] = {k: ate[k].estimate for k in ESTIMATORS}
        rows.append(entry)

    cw = w.community_weights

    def combine(results: list[InterventionResult]) -> InterventionResult:
        ests = {k: _summary_result([r.estimates[k] for r in results], cw, settings.ci_alpha) for k in ESTIMATORS}
        diag = {"n_units": len(results), "n_communities": len(results), "targeting_method": settings.method}
        return InterventionResult(ests, float("nan"), diag, intervention=results[0].intervention)

    g1 = combine(r1s)
    g2 = combine(r2s) if r2s else None
    ate = None
    if ates:
        ate = {k: _summary_result([a[k] for a in ates], cw, settings.ci_alpha) for k in ESTIMATORS}
    return EstimationReport(g1, g2, ate, strategy="per_community", unit_keys=ds.keys, per_community=rows)


def run(
    ds: HierDataset,
    strategy: StrategyConfig | str = "no_community",
    gstar1: InterventionSpec | None = None,
    gstar2: InterventionSpec | None = None,
    settings: TmleSettings | None = None,
    weights: WeightScheme | None = None,
    qform=None,
    qbounds=None,
    alpha: float = 0.995,
) -> EstimationReport:
    """Estimate the mean outcome under ``gstar1`` (and ``gstar2`` plus their contrast)."""
    if isinstance(strategy, str):
        strategy = StrategyConfig(strategy)
    strategy = strategy.resolve(ds)
    settings = settings or TmleSettings()
    w = weights or build_weights(ds)
    if ds.roles.ynode is None:
        raise DataError("an outcome column (ynode) is required for estimation")
    scale = OutcomeScale.from_outcome(ds.column(ds.roles.ynode), qbounds, alpha)

    if strategy.step == "per_community":
        return _run_per_community(ds, w, scale, qform, gstar1, gstar2, settings)

    logger.info("strategy %s, outcome bounds [%.6g, %.6g]", strategy.step, scale.lower, scale.upper)
    problem = build_problem(ds, w, strategy, scale, qform)
    r1, r2 = _run_problem(problem, gstar1, gstar2, settings)
    ate = contrast(r1, r2, settings.ci_alpha) if r2 is not None else None
    return EstimationReport(r1, r2, ate, strategy=strategy.step, unit_keys=problem.unit_keys, q_model=problem.q_fit)


class TMLECommunity(BaseEstimator):
    """Estimator interface to :func:`run`.

    ``fit`` takes a DataFrame holding every bound column and stores the
    :class:`EstimationReport` in ``results_``. Interventions may be numbers,
    lists, :class:`InterventionSpec` objects or config dicts such as
    ``{"sampler": "bernoulli", "p": 0.5}``.

    Examples
    --------
    >>> est = TMLECommunity(ynode="Y", anodes="A", wenodes=["W1", "W2"], f_gstar1=1, f_gstar2=0)
    >>> est.fit(frame).estimates_["ATE"]["tmle"]  # doctest: +SKIP
    """

    def __init__(
        self,
        ynode=None,
        anodes=None,
        wenodes=None,
        community_id=None,
        ynode_det=None,
        community_step="no_community",
        pooled_q=False,
        obs_wts="equal_within_pop",
        community_wts="size_community",
        f_gstar1=None,
        f_gstar2=None,
        f_g0=None,
        qform=None,
        hform_g0=None,
        hform_gstar=None,
        qbounds=None,
        alpha=0.995,
        lbound=0.005,
        targeting="tmle_intercept",
        n_mc_sims=1,
        ci_alpha=0.05,
        seed=0,
        bin_method="equal_mass",
        nbins=None,
        maxncats=10,
        max_n_per_bin=500,
        pool_contin_var=False,
        savetime=True,
        g0_model=None,
        gstar_model=None,
    ):
        self.ynode = ynode
        self.anodes = anodes
        self.wenodes = wenodes
        self.community_id = community_id
        self.ynode_det = ynode_det
        self.community_step = community_step
        self.pooled_q = pooled_q
        self.obs_wts = obs_wts
        self.community_wts = community_wts
        self.f_gstar1 = f_gstar1
        self.f_gstar2 = f_gstar2
        self.f_g0 = f_g0
        self.qform = qform
        self.hform_g0 = hform_g0
        self.hform_gstar = hform_gstar
        self.qbounds = qbounds
        self.alpha = alpha
        self.lbound = lbound
        self.targeting = targeting
        self.n_mc_sims = n_mc_sims
        self.ci_alpha = ci_alpha
        self.seed = seed
        self.bin_method = bin_method
        self.nbins = nbins
        self.maxncats = maxncats
        self.max_n_per_bin = max_n_per_bin
        self.pool_contin_var = pool_contin_var
        self.savetime = savetime
        self.g0_model = g0_model
        self.gstar_model = gstar_model

    @staticmethod
    def _spec(value) -> InterventionSpec | None:
        if value is None or isinstance(value, InterventionSpec):
            return value
        return from_config(value)

    @staticmethod
    def _policy(value):
        if isinstance(value, str):
            return value, None
        return "user", value

    def _settings(self) -> TmleSettings:
        load = lambda m: FittedDensity.load(m) if isinstance(m, str) else m  # noqa: E731
        return TmleSettings(
            method=self.targeting,
            lbound=self.lbound,
            ci_alpha=self.ci_alpha,
            mc=McConfig(self.n_mc_sims, self.seed),
            binning=BinningConfig(self.bin_method, self.nbins, self.maxncats, self.max_n_per_bin, self.pool_contin_var),
            hform_g0=self.hform_g0,
            hform_gstar=self.hform_gstar,
            savetime=self.savetime,
            g0_model=load(self.g0_model),
            gstar_model=load(self.gstar_model),
            f_g0=self._spec(self.f_g0),
        )

    def fit(self, X, y=None):
        frame = pd.DataFrame(X)
        ynode = self.ynode
        if y is not None:
            ynode = ynode or "Y"
            frame = frame.assign(**{ynode: np.asarray(y, dtype=float)})
        if ynode is None and isinstance(self.qform, str) and "~" in self.qform:
            ynode = self.qform.split("~", 1)[0].strip() or None
        roles = NodeRoles(self.anodes, self.wenodes, ynode, self.community_id, self.ynode_det)
        ds = from_frame(frame, roles)
        obs_policy, user_obs = self._policy(self.obs_wts)
        comm_policy, user_comm = self._policy(self.community_wts)
        w = build_weights(ds, obs_policy, comm_policy, user_obs, user_comm)
        strategy = StrategyConfig(self.community_step, bool(self.pooled_q))
        self.results_ = run(
            ds, strategy, self._spec(self.f_gstar1), self._spec(self.f_gstar2), self._settings(), w,
            self.qform, self.qbounds, self.alpha,
        )
        self.n_features_in_ = frame.shape[1]
        return self

    @property
    def estimates_(self) -> dict:
        check_is_fitted(self, "results_")
        d = self.results_.to_dict(with_ic=False)
        out = {"EY_gstar1": d["EY_gstar1"]["estimates"]}
        if "EY_gstar2" in d:
            out["EY_gstar2"] = d["EY_gstar2"]["estimates"]
        if "ATE" in d:
            out["ATE"] = d["ATE"]["estimates"]
        return out
