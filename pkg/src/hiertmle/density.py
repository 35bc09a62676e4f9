"""Conditional exposure densities g(A | W, E).

Binary and categorical exposures are modelled directly with logistic
(hazard) regressions. Continuous exposures are discretized into bins and the
bin-membership indicators are regressed one after another on the predictors
among the rows not already placed in an earlier bin, so that

    P(bin m | x) = lambda_m(x) * prod_{l < m} (1 - lambda_l(x)).

Two open-ended edge bins ``(-inf, min)`` and ``(max, +inf)`` are always
added, so every real value falls in some bin.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .formula import Formula, as_formula
from .glm import GLM, GlmFit

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BIN_METHODS = ("equal_mass", "equal_len", "dhist")
DEFAULT_NBINS = 5
DEFAULT_LBOUND = 0.005


class BinningWarning(UserWarning):
    pass


class DensityModelError(ValueError):
    pass


@dataclass(frozen=True)
class BinningConfig:
    method: str = "equal_mass"
    nbins: int | None = None
    maxncats: int = 10
    max_n_per_bin: int = 500
    pool_contin_var: bool = False

    def __post_init__(self):
        if self.method not in BIN_METHODS:
            raise ValueError(f"bin method must be one of {BIN_METHODS}, got {self.method!r}")
        if self.nbins is not None and self.nbins < 1:
            raise ValueError("nbins must be >= 1")
        if self.max_n_per_bin < 1:
            raise ValueError("max_n_per_bin must be >= 1")

    @property
    def resolved_nbins(self) -> int:
        return DEFAULT_NBINS if self.nbins is None else int(self.nbins)


def classify_variable(values, maxncats: int = 10) -> str:
    """Return ``"binary"``, ``"categorical"`` or ``"continuous"``."""
    n_distinct = len(np.unique(np.asarray(values, dtype=float)))
    if n_distinct <= 2:
        return "binary"
    if n_distinct <= maxncats:
        return "categorical"
    return "continuous"


@dataclass(frozen=True)
class BinLayout:
    """Finite cutoffs ``c_0 < ... < c_k``; bins are ``(-inf, c_0)``,
    ``[c_0, c_1)``, ..., ``[c_{k-1}, c_k]``, ``(c_k, +inf)``."""

    cutoffs: np.ndarray

    @property
    def n_interior(self) -> int:
        return len(self.cutoffs) - 1

    @property
    def n_bins(self) -> int:
        return self.n_interior + 2

    @property
    def full_cutoffs(self) -> np.ndarray:
        return np.concatenate([[-np.inf], self.cutoffs, [np.inf]])

    @property
    def widths(self) -> np.ndarray:
        inner = np.diff(self.cutoffs)
        return np.concatenate([[inner[0]], inner, [inner[-1]]])

    def bin_index(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        idx = np.searchsorted(self.cutoffs, a, side="right")
        # the top cutoff closes the last interior bin
        idx[a == self.cutoffs[-1]] = self.n_interior
        return idx


def _dhist_cutoffs(x: np.ndarray, k: int) -> np.ndarray:
    """Diagonally cut histogram breaks (Denby & Mallows), slope ``5 * IQR``.

    Lines of equal spacing are laid over the curve ``x + a * F_n(x)`` and
    mapped back to the data axis.
    """
    x = np.sort(x)
    n = len(x)
    q75, q25 = np.quantile(x, [0.75, 0.25])
    a = 5.0 * (q75 - q25)
    if a == 0:
        a = (x[-1] - x[0]) / 1e8
    lo, hi = x[0], x[-1]
    h = (hi + a - lo) / k
    ybr = lo + h * np.arange(k + 1)
    yupper = x + a * np.arange(1, n + 1) / n
    ylower = yupper - a / n
    out = np.empty(k + 1)
    for j, y in enumerate(ybr):
        full = np.searchsorted(yupper, y, side="right")
        count = float(full)
        if full < n and ylower[full] < y:
            count += (y - ylower[full]) * n / a
        out[j] = y - a * count / n
    out[0], out[-1] = lo, hi
    return out


def choose_bins(values, cfg: BinningConfig, n_obs: int | None = None) -> BinLayout:
    """Pick bin cutoffs for a continuous variable according to ``cfg``."""
    x = np.asarray(values, dtype=float)
    n = len(x) if n_obs is None else int(n_obs)
    k = cfg.resolved_nbins
    if cfg.method == "equal_mass":
        k = max(k, int(round(n / cfg.max_n_per_bin)))
    n_distinct = len(np.unique(x))
    if k > n_distinct:
        warnings.warn(f"reducing bin count from {k} to the {n_distinct} distinct values", BinningWarning)
        k = n_distinct
    k = max(k, 1)
    if cfg.method == "equal_mass":
        cut = np.quantile(x, np.arange(k + 1) / k, method="linear")
    elif cfg.method == "equal_len":
        cut = np.linspace(x.min(), x.max(), k + 1)
    else:
        cut = _dhist_cutoffs(x, k)
    uniq = np.unique(cut)
    if len(uniq) < len(cut):
        warnings.warn(f"tied cutoffs collapsed: {len(cut) - 1} -> {len(uniq) - 1} bins", BinningWarning)
    if len(uniq) < 2:
        # single value: give it a unit-width bin
        uniq = np.array([uniq[0] - 0.5, uniq[0] + 0.5])
    return BinLayout(uniq)


# ---------------------------------------------------------------------------
# hazard chains


@dataclass
class Hazard:
    """One conditional probability model: either a constant or a fitted logit."""

    const: float | None = None
    fit: GlmFit | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.fit is None:
            return np.full(X.shape[0], float(self.const))
        return expit(X @ self.fit.coefficients)

    def to_dict(self) -> dict:
        return {"const": self.const} if self.fit is None else {"glm": self.fit.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Hazard":
        if "glm" in d:
            return cls(fit=GlmFit.from_dict(d["glm"]))
        return cls(const=float(d["const"]))


def _fit_indicator(X, y, w, terms, intercept) -> Hazard:
    if len(y) == 0 or not np.any(w > 0):
        return Hazard(const=0.0)
    yy = y[w > 0]
    if np.all(yy == 0):
        return Hazard(const=0.0)
    if np.all(yy == 1):
        return Hazard(const=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = GLM("binomial", fit_intercept=False).fit(X, y, sample_weight=w)
    return Hazard(
        fit=GlmFit(
            terms=list(terms),
            coefficients=model.coef_,
            family="binomial",
            intercept=intercept,
            converged=model.converged_,
            iterations=model.n_iter_,
            aliased=model.aliased_,
            separation=model.separation_,
        )
    )


def _chain_masses(lam: np.ndarray) -> np.ndarray:
    """Turn an (n, K) hazard matrix into per-category probabilities."""
    surv = np.cumprod(np.column_stack([np.ones(lam.shape[0]), 1.0 - lam[:, :-1]]), axis=1)
    return lam * surv


@dataclass
class VariableModel:
    """Fitted conditional model for one exposure variable."""

    name: str
    kind: str
    formula: Formula
    levels: np.ndarray | None = None
    layout: BinLayout | None = None
    hazards: list[Hazard] = field(default_factory=list)
    pooled: Hazard | None = None
    pooled_bins: list[int] = field(default_factory=list)

    @property
    def n_categories(self) -> int:
        if self.kind == "continuous":
            return self.layout.n_bins
        return len(self.levels)

    @property
    def n_models(self) -> int:
        """Number of bin (or level) models, edge bins included."""
        return self.n_categories

    def category_index(self, a) -> np.ndarray:
        """Category of each value; ``-1`` for a level never seen in training."""
        a = np.asarray(a, dtype=float)
        if self.kind == "continuous":
            return self.layout.bin_index(a)
        idx = np.searchsorted(self.levels, a)
        idx = np.clip(idx, 0, len(self.levels) - 1)
        return np.where(self.levels[idx] == a, idx, -1)

    def hazard_matrix(self, data) -> np.ndarray:
        X = self.formula.design_matrix(data)
        K = self.n_categories
        lam = np.empty((X.shape[0], K))
        if self.kind == "binary":
            if K == 1:
                lam[:, 0] = 1.0
            else:
                p1 = self.hazards[0].predict(X)
                lam[:, 0] = 1.0 - p1
                lam[:, 1] = 1.0
            return lam
        if self.pooled is not None:
            for m, h in enumerate(self.hazards):
                if m in self.pooled_bins:
                    lam[:, m] = self.pooled.predict(np.column_stack([X, np.full(X.shape[0], float(m))]))
                else:
                    lam[:, m] = h.predict(X)
            return lam
        for m, h in enumerate(self.hazards):
            lam[:, m] = h.predict(X)
        return lam

    def masses(self, data) -> np.ndarray:
        """(n, K) matrix of category probabilities; rows sum to one."""
        return _chain_masses(self.hazard_matrix(data))

    def mass_at(self, data, a) -> np.ndarray:
        P = self.masses(data)
        idx = self.category_index(a)
        out = np.zeros(len(idx))
        ok = idx >= 0
        out[ok] = P[np.flatnonzero(ok), idx[ok]]
        return out

    def width_at(self, a) -> np.ndarray:
        if self.kind != "continuous":
            return np.ones(len(np.atleast_1d(a)))
        return self.layout.widths[self.layout.bin_index(a)]

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "kind": self.kind,
            "terms": list(self.formula.terms),
            "intercept": self.formula.intercept,
            "hazards": [h.to_dict() for h in self.hazards],
        }
        if self.levels is not None:
            d["levels"] = [float(v) for v in self.levels]
        if self.layout is not None:
            d["cutoffs"] = [float(v) for v in self.layout.cutoffs]
        if self.pooled is not None:
            d["pooled"] = self.pooled.to_dict()
            d["pooled_bins"] = list(self.pooled_bins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VariableModel":
        return cls(
            name=d["name"],
            kind=d["kind"],
            formula=Formula(None, tuple(d["terms"]), bool(d["intercept"])),
            levels=None if "levels" not in d else np.asarray(d["levels"], dtype=float),
            layout=None if "cutoffs" not in d else BinLayout(np.asarray(d["cutoffs"], dtype=float)),
            hazards=[Hazard.from_dict(h) for h in d["hazards"]],
            pooled=None if "pooled" not in d else Hazard.from_dict(d["pooled"]),
            pooled_bins=list(d.get("pooled_bins", [])),
        )


def _fit_variable(name, kind, formula, data, a, w, cfg, levels=None, layout=None) -> VariableModel:
    X = formula.design_matrix(data)
    terms, intercept = formula.terms, formula.intercept
    vm = VariableModel(name, kind, formula, levels=levels, layout=layout)
    idx = vm.category_index(a)
    if np.any(idx < 0):
        warnings.warn(
            f"{int(np.sum(idx < 0))} value(s) of {name!r} outside the fitted levels are ignored", BinningWarning
        )
        w = np.where(idx < 0, 0.0, w)
    K = vm.n_categories

    if kind == "binary":
        if K > 1:
            vm.hazards = [_fit_indicator(X, (idx == 1).astype(float), w, terms, intercept)]
        return vm

    hazards: list[Hazard | None] = [None] * K
    pooled_bins = []
    for m in range(K - 1):
        risk = idx >= m
        y = (idx[risk] == m).astype(float)
        wr = w[risk]
        pos = wr > 0
        if not np.any(pos) or np.all(y[pos] == 0):
            hazards[m] = Hazard(const=0.0)
        elif np.all(y[pos] == 1):
            hazards[m] = Hazard(const=1.0)
        elif cfg.pool_contin_var and kind == "continuous":
            pooled_bins.append(m)
        else:
            hazards[m] = _fit_indicator(X[risk], y, wr, terms, intercept)
    hazards[K - 1] = Hazard(const=1.0)

    if pooled_bins:
        rows, bins, ys = [], [], []
        for m in pooled_bins:
            r = np.flatnonzero(idx >= m)
            rows.append(r)
            bins.append(np.full(len(r), float(m)))
            ys.append((idx[r] == m).astype(float))
        r = np.concatenate(rows)
        Xl = np.column_stack([X[r], np.concatenate(bins)])
        vm.pooled = _fit_indicator(Xl, np.concatenate(ys), w[r], list(terms) + ["bin"], intercept)
        vm.pooled_bins = pooled_bins
        for m in pooled_bins:
            hazards[m] = Hazard(const=float("nan"))
    vm.hazards = hazards
    return vm


@dataclass
class FittedDensity:
    """Joint conditional density of the exposures, factorized in declaration order."""

    anodes: list[str]
    variables: list[VariableModel]
    config: BinningConfig = field(default_factory=BinningConfig)
    lbound: float = DEFAULT_LBOUND

    @property
    def kinds(self) -> dict[str, str]:
        return {v.name: v.kind for v in self.variables}

    @property
    def predictors(self) -> list[str]:
        cols: list[str] = []
        for v in self.variables:
            for c in v.formula.variables:
                if c not in cols and c not in self.anodes:
                    cols.append(c)
        return cols

    def _frame_with(self, data, a_values) -> pd.DataFrame | dict:
        a = _as_matrix(a_values, len(self.anodes))
        if isinstance(data, pd.DataFrame):
            cols = {c: data[c].to_numpy() for c in self.predictors if c in data}
        else:
            cols = {c: np.asarray(data[c]) for c in self.predictors if c in data}
        for j, name in enumerate(self.anodes):
            cols[name] = a[:, j]
        return cols

    def mass(self, data, a_values) -> np.ndarray:
        """Untruncated joint probability of the category each ``a`` falls in."""
        cols = self._frame_with(data, a_values)
        a = _as_matrix(a_values, len(self.anodes))
        out = np.ones(a.shape[0])
        for j, vm in enumerate(self.variables):
            out *= vm.mass_at(cols, a[:, j])
        return out

    def width(self, a_values) -> np.ndarray:
        a = _as_matrix(a_values, len(self.anodes))
        out = np.ones(a.shape[0])
        for j, vm in enumerate(self.variables):
            out *= vm.width_at(a[:, j])
        return out

    def n_models(self) -> dict[str, int]:
        return {v.name: v.n_models for v in self.variables}

    def to_dict(self) -> dict:
        return {
            "format": "hiertmle.FittedDensity",
            "version": FORMAT_VERSION,
            "anodes": list(self.anodes),
            "lbound": self.lbound,
            "config": asdict(self.config),
            "variables": [v.to_dict() for v in self.variables],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedDensity":
        if d.get("format") != "hiertmle.FittedDensity":
            raise DensityModelError("not a serialized FittedDensity document")
        if int(d.get("version", -1)) != FORMAT_VERSION:
            raise DensityModelError(f"unsupported FittedDensity version {d.get('version')!r}")
        return cls(
            anodes=list(d["anodes"]),
            variables=[VariableModel.from_dict(v) for v in d["variables"]],
            config=BinningConfig(**d["config"]),
            lbound=float(d["lbound"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "FittedDensity":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def check_compatible(self, columns, anodes) -> None:
        """Raise unless the exposures match and every predictor is among ``columns``."""
        if list(anodes) != list(self.anodes):
            raise DensityModelError(f"density was fitted for exposures {self.anodes}, not {list(anodes)}")
        missing = [c for c in self.predictors if c not in columns]
        if missing:
            raise DensityModelError(f"density predictors not among the declared covariates: {missing}")


def _as_matrix(a_values, p: int) -> np.ndarray:
    a = np.asarray(a_values, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[1] != p:
        raise ValueError(f"expected {p} exposure column(s), got {a.shape[1]}")
    return a


def _resolve_formulas(anodes, predictors, gform) -> list[Formula]:
    if gform is None:
        base = [Formula(None, tuple(predictors), True)] * len(anodes)
    elif isinstance(gform, (list, tuple)):
        if len(gform) != len(anodes):
            raise ValueError("one formula per exposure is required")
        base = [as_formula(g, None, list(predictors)) for g in gform]
    else:
        f = as_formula(gform, None, list(predictors))
        base = [f] * len(anodes)
    out = []
    for j, f in enumerate(base):
        # later factors condition on earlier exposures
        out.append(Formula(anodes[j], f.terms, f.intercept).with_terms(list(anodes[:j])))
    return out


def fit_density(
    data: pd.DataFrame,
    anodes,
    predictors=(),
    cfg: BinningConfig | None = None,
    gform=None,
    weights=None,
    a_values=None,
    template: FittedDensity | None = None,
    lbound: float = DEFAULT_LBOUND,
) -> FittedDensity:
    """Fit the conditional density of ``anodes`` given ``predictors``.

    Parameters
    ----------
    data : DataFrame
        Predictor columns (and the exposures unless ``a_values`` is given).
    anodes : list of str
    predictors : list of str
        Main-term predictors used when ``gform`` is None.
    cfg : BinningConfig
    gform : str, Formula or list, optional
        Regression formula(s) such as ``"A ~ W1 + W3 * W4"``.
    weights : array-like, optional
        Observation weights for every regression.
    a_values : array-like, optional
        Exposure values to model instead of the columns in ``data``
        (for instance exposures sampled under an intervention).
    template : FittedDensity, optional
        Reuse the variable kinds, levels and bin cutoffs of an earlier fit;
        formulas are re-derived from ``gform``/``predictors``.
    """
    anodes = [anodes] if isinstance(anodes, str) else list(anodes)
    cfg = cfg or (template.config if template is not None else BinningConfig())
    n = len(data)
    a = _as_matrix(data[anodes].to_numpy(dtype=float) if a_values is None else a_values, len(anodes))
    if a.shape[0] != n:
        raise ValueError("a_values must have one row per data row")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    formulas = _resolve_formulas(anodes, predictors, gform)

    cols = {c: data[c].to_numpy(dtype=float) for c in data.columns if c not in anodes}
    for j, name in enumerate(anodes):
        cols[name] = a[:, j]

    variables = []
    for j, name in enumerate(anodes):
        if template is not None:
            tv = template.variables[j]
            kind, levels, layout = tv.kind, tv.levels, tv.layout
        else:
            kind = classify_variable(a[:, j], cfg.maxncats)
            levels = np.unique(a[:, j]) if kind != "continuous" else None
            layout = choose_bins(a[:, j], cfg) if kind == "continuous" else None
        variables.append(_fit_variable(name, kind, formulas[j], cols, a[:, j], w, cfg, levels, layout))
        logger.info("exposure %s: %s, %d fitted models", name, kind, variables[-1].n_models)
    return FittedDensity(anodes, variables, cfg, lbound)


def eval_density(fd: FittedDensity, rows, a_values=None, per_width: bool = True) -> np.ndarray:
    """Evaluate the fitted density at ``a_values`` (default: the observed exposures).

    Continuous factors return bin probability divided by bin width; discrete
    factors return the probability of the level. The result is truncated
    below at ``fd.lbound``.
    """
    if a_values is None:
        a_values = np.column_stack([np.asarray(rows[c], dtype=float) for c in fd.anodes])
    val = fd.mass(rows, a_values)
    if per_width:
        val = val / fd.width(a_values)
    return np.maximum(val, fd.lbound)


def marginalize_individual_g(
    frame: pd.DataFrame, anodes, predictors, cfg: BinningConfig | None = None, gform=None, weights=None,
    lbound: float = DEFAULT_LBOUND,
) -> FittedDensity:
    """Individual-level exposure model g_I(a | e, w_i).

    Fitted as one pooled regression of the community exposure on ``(E, W_i)``
    over all individual rows, the empirical analogue of averaging over the
    other members' covariates.
    """
    return fit_density(frame, anodes, predictors, cfg, gform, weights, lbound=lbound)


class ConditionalDensityEstimator(BaseEstimator):
    """Estimator wrapper around :func:`fit_density`.

    ``X`` is a DataFrame of predictors and ``A`` the exposure column(s).
    """

    def __init__(self, gform=None, bin_method="equal_mass", nbins=None, maxncats=10, max_n_per_bin=500,
                 pool_contin_var=False, lbound=DEFAULT_LBOUND):
        self.gform = gform
        self.bin_method = bin_method
        self.nbins = nbins
        self.maxncats = maxncats
        self.max_n_per_bin = max_n_per_bin
        self.pool_contin_var = pool_contin_var
        self.lbound = lbound

    def _config(self):
        return BinningConfig(self.bin_method, self.nbins, self.maxncats, self.max_n_per_bin, self.pool_contin_var)

    def fit(self, X: pd.DataFrame, A, sample_weight=None):
        X = pd.DataFrame(X).reset_index(drop=True)
        A = pd.DataFrame(A).reset_index(drop=True)
        if isinstance(A.columns, pd.RangeIndex):
            A.columns = [f"A{j}" for j in range(A.shape[1])]
        self.anodes_ = list(A.columns)
        frame = pd.concat([X, A], axis=1)
        preds = [c for c in X.columns]
        self.density_ = fit_density(frame, self.anodes_, preds, self._config(), self.gform, sample_weight,
                                    lbound=self.lbound)
        self.feature_names_in_ = np.asarray(preds, dtype=object)
        return self

    def predict_density(self, X, A):
        check_is_fitted(self, "density_")
        return eval_density(self.density_, pd.DataFrame(X).reset_index(drop=True), np.asarray(A, dtype=float))

    def score_samples(self, X, A):
        return np.log(self.predict_density(X, A))
