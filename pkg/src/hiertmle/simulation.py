"""Data-generating processes, truth calibration and replicated estimator studies."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .data import HierDataset, NodeRoles, build_weights, from_frame
from .density import BinningConfig
from .hierarchy import StrategyConfig, run
from .interventions import (
    InterventionSpec,
    McConfig,
    builtin_shift_truncate,
    constant,
    shift_truncate_rule,
)
from .tmle import TmleSettings

logger = logging.getLogger(__name__)

STUDIES = ("sim1_stoch", "sim2_static", "sim3_n1", "example_ate", "example_shift")
_DATA_STREAM = 2
_MC_STREAM = 3

# outcome coefficients on (1, A, E1, E2, W1c, W2c, W3c, W1, W2, W3)
SIM1_BETAS = {
    True: np.array([-1.7, 1.7, 0.5, -1.2, 0.0, 0.0, 0.0, 1.1, 1.3, -0.4]),
    False: np.array([-1.7, 1.2, -0.2, 1.1, 5.8, -3.1, -1.0, 0.4, 0.2, -0.4]),
}
SIM1_A_MEAN = {"E1": 0.8, "E2": 0.21, "W1": 3.0, "W2": -0.7, "W3": 0.3}
SIM1_A_INTERCEPT = -1.2
SIM3_A_MEAN = {"E1": 0.86, "E2": 0.41, "E3": -0.34, "E4": 0.93}
SHIFT_EXAMPLE_A_MEAN = {"W1": 0.86, "W3:W4": 0.93, "W4": 0.41}
# binary-exposure example: exposure logit and outcome slopes on W1..W4
ATE_EXAMPLE_G = np.array([-0.2, 0.6, 0.6, -0.5, 0.4])
ATE_EXAMPLE_Q = np.array([1.0, 0.4, 0.6, -0.6, 0.4])
ATE_EXAMPLE_EFFECT = 2.8

_DEFAULT_J = {"sim1_stoch": 1000, "sim2_static": 100, "sim3_n1": 1000, "example_ate": 1000, "example_shift": 5000}


@dataclass(frozen=True)
class DgpSpec:
    """One data-generating process.

    ``J`` is the number of communities (rows, for single-observation
    studies); ``n_mean`` the mean community size.
    """

    study: str
    J: int | None = None
    n_mean: float = 50.0
    n_sd: float = 10.0
    working_model: bool = True
    shift: float | None = None
    trunc_bound: float | None = None
    seed: int = 1

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"study must be one of {STUDIES}, got {self.study!r}")
        if self.J is None:
            object.__setattr__(self, "J", _DEFAULT_J[self.study])
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.shift is None:
            object.__setattr__(self, "shift", {"sim1_stoch": 1.0}.get(self.study, 2.0))
        if self.trunc_bound is None:
            object.__setattr__(self, "trunc_bound", {"sim1_stoch": 5.0}.get(self.study, 10.0))

    @property
    def hierarchical(self) -> bool:
        return self.study in ("sim1_stoch", "sim2_static")

    @property
    def target(self) -> str:
        """Which report block holds the parameter: ``EY_gstar1`` or ``ATE``."""
        return "ATE" if self.study in ("sim2_static", "example_ate") else "EY_gstar1"

    def roles(self) -> NodeRoles:
        if self.study == "sim1_stoch":
            return NodeRoles("A", ("E1", "E2", "W1", "W2", "W3"), "Y", "id")
        if self.study == "sim2_static":
            return NodeRoles("A", ("W1", "W2"), "Y", "id")
        if self.study == "sim3_n1":
            return NodeRoles("A", ("E1", "E2", "E3", "E4"), "Y")
        return NodeRoles("A", ("W1", "W2", "W3", "W4"), "Y")

    def interventions(self) -> tuple[InterventionSpec, InterventionSpec | None]:
        if self.study == "sim1_stoch":
            g = builtin_shift_truncate(self.shift, self.trunc_bound, SIM1_A_MEAN, SIM1_A_INTERCEPT,
                                       ratio_coef=1.5, offset_factor=0.25, community_level=True)
            return g, None
        if self.study in ("sim2_static", "example_ate"):
            return constant(1.0), constant(0.0)
        mean = SIM3_A_MEAN if self.study == "sim3_n1" else SHIFT_EXAMPLE_A_MEAN
        return builtin_shift_truncate(self.shift, self.trunc_bound, mean, ratio_coef=0.5, offset_factor=0.5), None


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


def _community_sizes(rng, J, mean, sd) -> np.ndarray:
    n = np.rint(rng.normal(mean, sd, J)).astype(int)
    return np.maximum(n, 1)


def _sim1(rng, dgp: DgpSpec, counterfactual: bool) -> pd.DataFrame:
    J = dgp.J
    sizes = _community_sizes(rng, J, dgp.n_mean, dgp.n_sd)
    cid = np.repeat(np.arange(1, J + 1), sizes)
    idx = cid - 1
    n = len(cid)
    E1 = rng.uniform(0, 1, J)
    E2 = rng.choice([0.2, 0.4, 0.6, 0.8], J)
    W1 = (rng.random(n) < expit(-0.4 + 1.2 * E1[idx] - 1.3 * E2[idx])).astype(float)
    z = rng.standard_normal((n, 2))
    W2 = 1 - 0.8 * E1[idx] - 0.4 * E2[idx] + z[:, 0]
    W3 = 0.5 + 0.2 * E1[idx] + 0.6 * z[:, 0] + 0.8 * z[:, 1]
    means = [np.bincount(idx, weights=w) / sizes for w in (W1, W2, W3)]
    mu = SIM1_A_INTERCEPT + 0.8 * E1 + 0.21 * E2 + 3 * means[0] - 0.7 * means[1] + 0.3 * means[2]
    A = rng.normal(mu, 1.0)
    b = SIM1_BETAS[dgp.working_model]

    def lin(a):
        return (b[0] + b[1] * a[idx] + b[2] * E1[idx] + b[3] * E2[idx] + b[4] * means[0][idx]
                + b[5] * means[1][idx] + b[6] * means[2][idx] + b[7] * W1 + b[8] * W2 + b[9] * W3)

    Y = (rng.random(n) < expit(lin(A))).astype(float)
    frame = pd.DataFrame({"id": cid, "E1": E1[idx], "E2": E2[idx], "W1": W1, "W2": W2, "W3": W3, "A": A[idx], "Y": Y})
    if counterfactual:
        a_star = shift_truncate_rule(A, mu, dgp.shift, dgp.trunc_bound, 1.5, 0.25)
        p_star = expit(lin(a_star))
        frame["Y_gstar_mean"] = p_star
        frame["Y_gstar"] = (rng.random(n) < p_star).astype(float)
    return frame


def _sim2(rng, dgp: DgpSpec, counterfactual: bool) -> pd.DataFrame:
    J = dgp.J
    sizes = _community_sizes(rng, J, dgp.n_mean, dgp.n_sd)
    cid = np.repeat(np.arange(1, J + 1), sizes)
    idx = cid - 1
    n = len(cid)
    W1 = (rng.random(n) < 0.6).astype(float)
    W2 = rng.standard_normal(n)
    W1c_j = np.bincount(idx, weights=W1) / sizes
    W2c_j = np.bincount(idx, weights=W2) / sizes
    A = (rng.random(J) < expit(W1c_j + 0.56 * W2c_j)).astype(float)
    W1c, W2c = W1c_j[idx], W2c_j[idx]

    def lin(a):
        if dgp.working_model:
            return 0.15 + 0.3 * a + 0.1 * W1c + 2 * W1 + 0.9 * W2
        return 0.15 + 0.3 * a + 3 * W1c - 0.9 * W2c - 0.3 * W1 + W2

    Y = (rng.random(n) < expit(lin(A[idx]))).astype(float)
    frame = pd.DataFrame({"id": cid, "W1": W1, "W2": W2, "A": A[idx], "Y": Y})
    if counterfactual:
        frame["Y1_mean"] = expit(lin(1.0))
        frame["Y0_mean"] = expit(lin(0.0))
    return frame


def _single_level_covariates(rng, n, names):
    return {
        names[0]: (rng.random(n) < 0.5).astype(float),
        names[1]: (rng.random(n) < 0.3).astype(float),
        names[2]: rng.normal(0.0, 0.25, n),
        names[3]: rng.uniform(0, 1, n),
    }


def _shift_outcome_mean(a, c, names):
    return 3.63 + 0.11 * a - 0.52 * c[names[0]] - 0.36 * c[names[1]] + 0.12 * c[names[2]] - 0.13 * c[names[3]]


def _sim3(rng, dgp: DgpSpec, counterfactual: bool) -> pd.DataFrame:
    n = dgp.J
    names = ("E1", "E2", "E3", "E4")
    c = _single_level_covariates(rng, n, names)
    mu = 0.86 * c["E1"] + 0.41 * c["E2"] - 0.34 * c["E3"] + 0.93 * c["E4"]
    return _shift_frame(rng, dgp, c, names, mu, counterfactual)


def _example_shift(rng, dgp: DgpSpec, counterfactual: bool) -> pd.DataFrame:
    n = dgp.J
    names = ("W1", "W2", "W3", "W4")
    c = _single_level_covariates(rng, n, names)
    mu = 0.86 * c["W1"] + 0.93 * c["W3"] * c["W4"] + 0.41 * c["W4"]
    return _shift_frame(rng, dgp, c, names, mu, counterfactual)


def _shift_frame(rng, dgp, c, names, mu, counterfactual):
    n = len(mu)
    A = rng.normal(mu, 1.0)
    Y = rng.normal(_shift_outcome_mean(A, c, names), 1.0)
    frame = pd.DataFrame({**c, "A": A, "Y": Y})
    if counterfactual:
        a_star = shift_truncate_rule(A, mu, dgp.shift, dgp.trunc_bound, 0.5, 0.5)
        m = _shift_outcome_mean(a_star, c, names)
        frame["Y_gstar_mean"] = m
        frame["Y_gstar"] = rng.normal(m, 1.0, n)
    return frame


def _example_ate(rng, dgp: DgpSpec, counterfactual: bool) -> pd.DataFrame:
    n = dgp.J
    W = rng.standard_normal((n, 4))
    W[:, 0] = (rng.random(n) < 0.5).astype(float)
    pa = expit(ATE_EXAMPLE_G[0] + W @ ATE_EXAMPLE_G[1:])
    A = (rng.random(n) < pa).astype(float)
    q0 = ATE_EXAMPLE_Q[0] + W @ ATE_EXAMPLE_Q[1:]
    Y = q0 + ATE_EXAMPLE_EFFECT * A + rng.standard_normal(n)
    frame = pd.DataFrame({"W1": W[:, 0], "W2": W[:, 1], "W3": W[:, 2], "W4": W[:, 3], "A": A, "Y": Y})
    if counterfactual:
        frame["Y1_mean"] = q0 + ATE_EXAMPLE_EFFECT
        frame["Y0_mean"] = q0
    return frame


_GENERATORS = {
    "sim1_stoch": _sim1,
    "sim2_static": _sim2,
    "sim3_n1": _sim3,
    "example_ate": _example_ate,
    "example_shift": _example_shift,
}


def generate_frame(dgp: DgpSpec, rep_index: int = 0, counterfactual: bool = False) -> pd.DataFrame:
    return _GENERATORS[dgp.study](_rng(dgp.seed, _DATA_STREAM, rep_index), dgp, counterfactual)


def generate(dgp: DgpSpec, rep_index: int = 0, counterfactual: bool = False) -> HierDataset:
    """Draw one dataset. Counterfactual columns are added only when asked for."""
    return from_frame(generate_frame(dgp, rep_index, counterfactual), dgp.roles())


def calibrate_truth(dgp: DgpSpec, n_large: int = 200_000, seed_offset: int = 10**6) -> tuple[float, float]:
    """Monte-Carlo value of the target parameter and its standard error.

    Uses conditional means of the counterfactual outcome rather than draws.
    Community-level studies weight each community by its size, matching the
    default community weights with equal weights inside communities.
    """
    if dgp.hierarchical:
        J = max(1, int(round(n_large / dgp.n_mean)))
    else:
        J = int(n_large)
    big = replace(dgp, J=J)
    frame = generate_frame(big, seed_offset, counterfactual=True)
    if "Y_gstar_mean" in frame:
        val = frame["Y_gstar_mean"].to_numpy()
    else:
        val = (frame["Y1_mean"] - frame["Y0_mean"]).to_numpy()
    if dgp.hierarchical:
        idx = frame["id"].to_numpy() - 1
        sizes = np.bincount(idx).astype(float)
        sums = np.bincount(idx, weights=val)
        truth = float(sums.sum() / sizes.sum())
        resid = sums - truth * sizes
        se = float(np.std(resid, ddof=1) / (np.mean(sizes) * np.sqrt(len(sizes))))
    else:
        truth = float(np.mean(val))
        se = float(np.std(val, ddof=1) / np.sqrt(len(val)))
    return truth, se


# ---------------------------------------------------------------------------
# estimator battery


@dataclass(frozen=True)
class Analysis:
    """One call of the estimation pipeline; yields TMLE, IPTW and GCOMP."""

    name: str
    step: str = "no_community"
    pooled_q: bool = False
    qform: str | None = None
    hform_g0: str | None = None
    hform_gstar: str | None = None


@dataclass(frozen=True)
class EstimatorSpec:
    label: str
    analysis: str
    estimator: str


@dataclass(frozen=True)
class Battery:
    analyses: tuple[Analysis, ...]
    estimators: tuple[EstimatorSpec, ...]
    obs_policy: str = "equal_within_pop"
    bin_method: str = "equal_mass"
    nbins: int | None = 5
    max_n_per_bin: int | None = None  # None: one bin per row count, i.e. nbins bins
    n_mc_sims: int = 1
    lbound: float = 0.005
    targeting: str = "tmle_intercept"

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.estimators]


def _hier_battery() -> Battery:
    analyses = (
        Analysis("I", "community_level"),
        Analysis("Ib", "community_level", pooled_q=True),
        Analysis("II", "individual_level"),
    )
    est = (
        EstimatorSpec("TMLE-Ia", "I", "tmle"),
        EstimatorSpec("TMLE-Ib", "Ib", "tmle"),
        EstimatorSpec("TMLE-II", "II", "tmle"),
        EstimatorSpec("IPTW-I", "I", "iptw"),
        EstimatorSpec("IPTW-II", "II", "iptw"),
        EstimatorSpec("Gcomp-I", "I", "gcomp"),
        EstimatorSpec("Gcomp-II", "II", "gcomp"),
    )
    return Battery(analyses, est, obs_policy="equal_within_community")


def default_battery(study: str) -> Battery:
    if study in ("sim1_stoch", "sim2_static"):
        return _hier_battery()
    if study == "sim3_n1":
        q_ok, q_bad = "Y ~ A + E1 + E2 + E3 + E4", "Y ~ A + E3"
        g_ok, g_bad = "A ~ E1 + E2 + E3 + E4", "A ~ E3"
        analyses = (
            Analysis("CC", qform=q_ok, hform_g0=g_ok, hform_gstar=g_ok),
            Analysis("CM", qform=q_ok, hform_g0=g_bad, hform_gstar=g_bad),
            Analysis("MC", qform=q_bad, hform_g0=g_ok, hform_gstar=g_ok),
        )
        est = tuple(
            EstimatorSpec(f"{lab}-{a.name}", a.name, key)
            for a in analyses
            for lab, key in (("TMLE", "tmle"), ("IPTW", "iptw"), ("MLE", "gcomp"))
        )
        return Battery(analyses, est, max_n_per_bin=500)
    if study == "example_ate":
        analyses = (
            Analysis("Qc", qform="Y ~ W1 + W2 + W3 + W4 + A"),
            Analysis("Qm", qform="Y ~ W1 + A"),
        )
        est = tuple(EstimatorSpec(f"{k.upper()}-{a.name}", a.name, k) for a in analyses for k in ("tmle", "iptw", "gcomp"))
        return Battery(analyses, est)
    g = "A ~ W1 + W3 * W4"
    analyses = (Analysis("gc", qform="Y ~ W1 + W2 + W3 + W4 + A", hform_g0=g, hform_gstar=g),)
    est = tuple(EstimatorSpec(f"{k.upper()}-gc", "gc", k) for k in ("tmle", "iptw", "gcomp"))
    return Battery(analyses, est)


def _one_rep(dgp: DgpSpec, battery: Battery, rep: int) -> dict:
    """Estimates for every battery entry on one replicate; failures are recorded."""
    t0 = time.perf_counter()
    ds = generate(dgp, rep)
    w = build_weights(ds, battery.obs_policy, "size_community")
    mc_seed = int(np.random.SeedSequence([dgp.seed, _MC_STREAM, rep]).generate_state(1)[0])
    g1, g2 = dgp.interventions()
    out: dict = {"rep": rep, "error": None, "results": {}}
    try:
        for a in battery.analyses:
            binning = BinningConfig(battery.bin_method, battery.nbins, 10,
                                    battery.max_n_per_bin or ds.n_obs, False)
            settings = TmleSettings(
                method=battery.targeting, lbound=battery.lbound,
                mc=McConfig(battery.n_mc_sims, mc_seed), binning=binning,
                hform_g0=a.hform_g0, hform_gstar=a.hform_gstar,
            )
            rep_report = run(ds, StrategyConfig(a.step, a.pooled_q), g1, g2, settings, w, a.qform)
            block = rep_report.ate if dgp.target == "ATE" else rep_report.gstar1.estimates
            out["results"][a.name] = {k: (r.estimate, r.var, r.ci[0], r.ci[1]) for k, r in block.items()}
    except Exception as exc:  # recorded and excluded from metrics
        out["error"] = f"{type(exc).__name__}: {exc}"
    out["seconds"] = time.perf_counter() - t0
    return out


@dataclass
class MetricsRow:
    label: str
    mean_estimate: float
    bias: float
    abs_bias: float
    mean_se: float
    rmse: float
    sd: float
    coverage: float
    n: int


@dataclass
class MetricsTable:
    study: str
    truth: float
    R: int
    rows: list[MetricsRow]
    reps: pd.DataFrame = field(repr=False)
    n_failed: int = 0
    display_scale: float = 1.0
    seconds: float = 0.0

    def row(self, label: str) -> MetricsRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "truth": self.truth,
            "R": self.R,
            "n_failed": self.n_failed,
            "display_scale": self.display_scale,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        s = self.display_scale
        head = f"{'estimator':<10s} {'psi_hat':>9s} {'bias':>8s} {'sigma':>8s} {'rMSE':>8s} {'cover':>7s} {'n':>4s}"
        lines = [
            f"study: {self.study}   truth: {self.truth * s:.4f}   R: {self.R}   failed: {self.n_failed}",
            "(bias, sigma and rMSE multiplied by %g; coverage in percent)" % s,
            head,
            "-" * len(head),
        ]
        for r in self.rows:
            lines.append(
                f"{r.label:<10s} {r.mean_estimate * s:9.4f} {r.abs_bias * s:8.3f} {r.mean_se * s:8.3f} "
                f"{r.rmse * s:8.3f} {100 * r.coverage:7.1f} {r.n:4d}"
            )
        return "\n".join(lines)


def summarize(reps: pd.DataFrame, truth: float, labels: list[str]) -> list[MetricsRow]:
    rows = []
    for lab in labels:
        sub = reps[reps["estimator"] == lab]
        est = sub["estimate"].to_numpy()
        if len(est) == 0:
            rows.append(MetricsRow(lab, *([float("nan")] * 7), 0))
            continue
        bias = float(np.mean(est) - truth)
        rows.append(
            MetricsRow(
                label=lab,
                mean_estimate=float(np.mean(est)),
                bias=bias,
                abs_bias=abs(bias),
                mean_se=float(np.mean(np.sqrt(sub["var"].to_numpy()))),
                rmse=float(np.sqrt(np.mean((est - truth) ** 2))),
                sd=float(np.std(est)),
                coverage=float(np.mean((sub["ci_low"] <= truth) & (truth <= sub["ci_high"]))),
                n=len(est),
            )
        )
    return rows


def run_study(
    dgp: DgpSpec,
    R: int,
    battery: Battery | None = None,
    threads: int = 1,
    truth: float | None = None,
    truth_n: int = 1_000_000,
) -> MetricsTable:
    """Replicate ``dgp`` ``R`` times and summarize every estimator in ``battery``."""
    if R < 1:
        raise ValueError("R must be >= 1")
    battery = battery or default_battery(dgp.study)
    if not battery.estimators:
        raise ValueError("the estimator battery is empty")
    t0 = time.perf_counter()
    if truth is None:
        truth, _ = calibrate_truth(dgp, truth_n)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(_one_rep, [dgp] * R, [battery] * R, range(R)))
    else:
        outs = [_one_rep(dgp, battery, r) for r in range(R)]
    records = []
    failed = 0
    for o in outs:
        if o["error"] is not None:
            failed += 1
            logger.warning("replicate %d failed: %s", o["rep"], o["error"])
            continue
        for e in battery.estimators:
            est, var, lo, hi = o["results"][e.analysis][e.estimator]
            records.append({"rep": o["rep"], "estimator": e.label, "estimate": est, "var": var,
                            "ci_low": lo, "ci_high": hi})
    reps = pd.DataFrame.from_records(records, columns=["rep", "estimator", "estimate", "var", "ci_low", "ci_high"])
    scale = 100.0 if dgp.study in ("sim1_stoch", "sim2_static") else 1.0
    return MetricsTable(dgp.study, truth, R, summarize(reps, truth, battery.labels), reps, failed, scale,
                        time.perf_counter() - t0)
