"""Command-line entry point: ``estimate``, ``density-fit`` and ``simulate``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DataError, NodeRoles, aggregate_to_community, build_weights, load_csv
from .density import BinningConfig, DensityModelError, fit_density
from .formula import FormulaError
from .hierarchy import StrategyConfig, StrategyError, TMLECommunity
from .interventions import InterventionError
from .simulation import DgpSpec, default_battery, run_study
from .tmle import NumericFailure

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Settings for ``estimate``; field names follow the library arguments."""

    data: str | None = None
    ynode: str | None = None
    anodes: list[str] | str | None = None
    wenodes: list[str] | str | None = None
    community_id: str | None = None
    ynode_det: str | None = None
    community_step: str = "no_community"
    pooled_q: bool = False
    obs_wts: str | list = "equal_within_pop"
    community_wts: str | list = "size_community"
    f_gstar1: object = None
    f_gstar2: object = None
    f_g0: object = None
    qform: str | None = None
    hform_g0: str | None = None
    hform_gstar: str | None = None
    qbounds: list[float] | None = None
    alpha: float = 0.995
    fluctuation: str = "logistic"
    lbound: float = 0.005
    targeting: str = "tmle_intercept"
    n_mc_sims: int = 1
    ci_alpha: float = 0.05
    seed: int = 0
    bin_method: str = "equal_mass"
    nbins: int | None = None
    maxncats: int = 10
    max_n_per_bin: int = 500
    pool_contin_var: bool = False
    savetime: bool = True
    g0_model: str | None = None
    gstar_model: str | None = None
    verbose: bool = False


@dataclass
class DensityConfig:
    data: str | None = None
    anodes: list[str] | str | None = None
    wenodes: list[str] | str | None = None
    community_id: str | None = None
    community_step: str = "no_community"
    obs_wts: str | list = "equal_within_pop"
    community_wts: str | list = "size_community"
    hform: str | None = None
    bin_method: str = "equal_mass"
    nbins: int | None = None
    maxncats: int = 10
    max_n_per_bin: int = 500
    pool_contin_var: bool = False
    lbound: float = 0.005
    seed: int = 0
    verbose: bool = False


@dataclass
class StudyConfig:
    study: str = "sim2_static"
    J: int | None = None
    n_mean: float = 50.0
    n_sd: float = 10.0
    working_model: bool = True
    shift: float | None = None
    trunc_bound: float | None = None
    R: int = 10
    truth: float | None = None
    truth_n: int = 1_000_000
    seed: int = 1
    bin_method: str | None = None
    nbins: int | None = None
    max_n_per_bin: int | None = None
    n_mc_sims: int | None = None
    lbound: float | None = None
    targeting: str | None = None
    verbose: bool = False


def _load(path: str | None, cls, overrides: dict):
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base = p.resolve().parent
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = cls(**raw)
    data = getattr(cfg, "data", None)
    if data is not None and not Path(data).is_absolute():
        cfg.data = str((base / data).resolve())
    for attr in ("g0_model", "gstar_model"):
        val = getattr(cfg, attr, None)
        if val is not None and not Path(val).is_absolute():
            setattr(cfg, attr, str((base / val).resolve()))
    return cfg


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, [], "")]
    if missing:
        raise ConfigError(f"missing required config key(s): {', '.join(missing)}")


def _as_list(v):
    return [v] if isinstance(v, str) else list(v)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    _require(cfg, "data", "anodes", "wenodes")
    if cfg.fluctuation != "logistic":
        raise ConfigError("only the logistic fluctuation is supported")
    roles = NodeRoles(_as_list(cfg.anodes), _as_list(cfg.wenodes), cfg.ynode, cfg.community_id, cfg.ynode_det)
    ds = load_csv(cfg.data, roles)
    params = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name not in ("data", "fluctuation", "verbose")}
    params["anodes"], params["wenodes"] = roles.anodes, roles.wenodes
    est = TMLECommunity(**params)
    try:
        est.fit(ds.frame)
    except StrategyError as exc:
        raise ConfigError(str(exc)) from None
    report = est.results_
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", dataclasses.asdict(cfg))
    (out / "report.json").write_text(report.to_json() + "\n")
    for name, model in (("g0_model.json", report.gstar1.g0_model), ("gstar1_model.json", report.gstar1.gstar_model)):
        if model is not None:
            model.save(out / name)
    print(report.summary())
    return EXIT_OK


def cmd_density_fit(cfg: DensityConfig, out: Path) -> int:
    _require(cfg, "data", "anodes", "wenodes")
    roles = NodeRoles(_as_list(cfg.anodes), _as_list(cfg.wenodes), None, cfg.community_id)
    ds = load_csv(cfg.data, roles)
    binning = BinningConfig(cfg.bin_method, cfg.nbins, cfg.maxncats, cfg.max_n_per_bin, cfg.pool_contin_var)
    step = StrategyConfig(cfg.community_step).resolve(ds).step
    obs_policy, user_obs = (cfg.obs_wts, None) if isinstance(cfg.obs_wts, str) else ("user", cfg.obs_wts)
    com_policy, user_com = (cfg.community_wts, None) if isinstance(cfg.community_wts, str) else ("user", cfg.community_wts)
    w = build_weights(ds, obs_policy, com_policy, user_obs, user_com)
    if step == "community_level":
        agg = aggregate_to_community(ds, w)
        frame, weights = agg.frame, agg.weights
    elif step == "individual_level":
        frame, weights = ds.frame, w.community_weights[ds.community_index] * w.alpha
    else:
        frame, weights = ds.frame, w.obs_weights
    fd = fit_density(frame, list(roles.anodes), list(roles.wenodes), binning, cfg.hform, weights=weights,
                     lbound=cfg.lbound)
    out.mkdir(parents=True, exist_ok=True)
    fd.save(out / "density.json")
    _write_json(out / "config.resolved.json", dataclasses.asdict(cfg))
    for name, k in fd.n_models().items():
        print(f"{name}: {fd.kinds[name]}, {k} fitted models")
    return EXIT_OK


def cmd_simulate(cfg: StudyConfig, out: Path, threads: int) -> int:
    dgp = DgpSpec(cfg.study, cfg.J, cfg.n_mean, cfg.n_sd, cfg.working_model, cfg.shift, cfg.trunc_bound, cfg.seed)
    battery = default_battery(cfg.study)
    overrides = {k: getattr(cfg, k) for k in ("bin_method", "nbins", "max_n_per_bin", "n_mc_sims", "lbound", "targeting")}
    battery = dataclasses.replace(battery, **{k: v for k, v in overrides.items() if v is not None})
    table = run_study(dgp, cfg.R, battery, threads=threads, truth=cfg.truth, truth_n=cfg.truth_n)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.asdict(cfg)
    resolved.update({"J": dgp.J, "shift": dgp.shift, "trunc_bound": dgp.trunc_bound, "truth": table.truth})
    resolved.update({k: getattr(battery, k) for k in overrides})
    _write_json(out / "config.resolved.json", resolved)
    (out / "metrics.txt").write_text(table.to_text() + "\n")
    (out / "metrics.json").write_text(table.to_json() + "\n")
    table.reps.to_csv(out / "reps.csv", index=False, float_format="%.17g")
    print(table.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiertmle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("estimate", "estimate intervention means / effects from a CSV file"),
        ("density-fit", "fit and save a conditional exposure density"),
        ("simulate", "run a replicated simulation study"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--data", help="CSV data path (overrides the config)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for simulations")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.command == "simulate":
            if args.data:
                raise ConfigError("simulate does not read a data file")
            cfg = _load(args.config, StudyConfig, {"seed": args.seed})
            return cmd_simulate(cfg, out, args.threads)
        if args.command == "density-fit":
            cfg = _load(args.config, DensityConfig, {"seed": args.seed, "data": args.data})
            return cmd_density_fit(cfg, out)
        cfg = _load(args.config, RunConfig, {"seed": args.seed, "data": args.data})
        return cmd_estimate(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, FormulaError, DensityModelError, InterventionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
