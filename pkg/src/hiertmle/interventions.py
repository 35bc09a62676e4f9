"""Intervention rules g* and Monte-Carlo sampling of counterfactual exposures."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd

KINDS = ("constant", "table", "sampler")

# stream ids keep the exposure draws for g* and for a user g0 sampler apart
GSTAR_STREAM = 0
G0_STREAM = 1


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class McConfig:
    n_mc_sims: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_mc_sims < 1:
            raise ValueError("n_mc_sims must be >= 1")

    def rng(self, sim: int, stream: int = GSTAR_STREAM) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), stream, sim]))


@dataclass(frozen=True)
class InterventionSpec:
    """A rule producing counterfactual exposures.

    Use the constructors :func:`constant`, :func:`table`, :func:`builtin_shift_truncate`,
    :func:`bernoulli`, :func:`additive_shift` or :func:`from_callable` rather than
    building instances by hand.
    """

    kind: str
    value: tuple[float, ...] | None = None
    table: np.ndarray | None = field(default=None, repr=False, compare=False)
    name: str | None = None
    params: dict = field(default_factory=dict)
    func: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterventionError(f"unknown intervention kind {self.kind!r}")

    @property
    def stochastic(self) -> bool:
        if self.kind != "sampler":
            return False
        return self.name not in ("additive_shift",)

    def describe(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": list(self.value)}
        if self.kind == "table":
            return {"kind": "table", "shape": list(self.table.shape)}
        if self.func is not None and self.name is None:
            return {"kind": "sampler", "name": getattr(self.func, "__name__", "callable")}
        return {"kind": "sampler", "name": self.name, **self.params}


def constant(value) -> InterventionSpec:
    vals = np.atleast_1d(np.asarray(value, dtype=float))
    return InterventionSpec("constant", value=tuple(float(v) for v in vals))


def table(values) -> InterventionSpec:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InterventionError("intervention table must be one- or two-dimensional")
    return InterventionSpec("table", table=arr)


def from_callable(func: Callable) -> InterventionSpec:
    """Wrap ``func(frame, rng) -> exposures`` as a stochastic sampler."""
    return InterventionSpec("sampler", func=func)


def _mean_terms(frame, terms: dict[str, float], intercept: float) -> np.ndarray:
    mu = np.full(len(frame), float(intercept))
    for term, coef in terms.items():
        prod = np.ones(len(frame))
        for name in term.replace("*", ":").split(":"):
            name = name.strip()
            if name not in frame:
                raise InterventionError(f"sampler mean term references missing column {name!r}")
            prod = prod * np.asarray(frame[name], dtype=float)
        mu = mu + coef * prod
    return mu


def _group_means(x: np.ndarray, groups: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-group means and the index of each row's group (``None`` = rows are groups)."""
    if groups is None:
        return x, None
    _, inv = np.unique(groups, return_inverse=True)
    # order groups by first appearance so draws do not depend on key sorting
    first = np.full(inv.max() + 1, len(inv))
    np.minimum.at(first, inv, np.arange(len(inv)))
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    g = rank[inv]
    sums = np.bincount(g, weights=x)
    counts = np.bincount(g)
    return sums / counts, g


def _shift_truncate_draw(frame, rng, groups, p) -> np.ndarray:
    mu = _mean_terms(frame, p["mean_terms"], p.get("intercept", 0.0))
    if p.get("community_level"):
        mu, g = _group_means(mu, groups)
    else:
        g = None
    s = p["shift"]
    u = rng.normal(mu + s, p.get("sd", 1.0))
    ratio = np.exp(p.get("ratio_coef", 0.5) * s * (u - mu - s * p.get("offset_factor", 0.5)))
    out = np.where(ratio > p["trunc_bound"], u - s, u)
    return out if g is None else out[g]


def _bernoulli_draw(frame, rng, groups, p) -> np.ndarray:
    n = len(frame)
    if p.get("community_level") and groups is not None:
        _, g = _group_means(np.zeros(n), groups)
        return (rng.random(g.max() + 1) < p["p"]).astype(float)[g]
    return (rng.random(n) < p["p"]).astype(float)


def _additive_draw(frame, rng, groups, p) -> np.ndarray:
    a = np.asarray(frame[p["anode"]], dtype=float)
    out = a + p["shift"]
    if p.get("upper") is not None:
        out = np.minimum(out, p["upper"])
    if p.get("lower") is not None:
        out = np.maximum(out, p["lower"])
    return out


_BUILTINS: dict[str, Callable] = {
    "shift_truncate": _shift_truncate_draw,
    "bernoulli": _bernoulli_draw,
    "additive_shift": _additive_draw,
}


def builtin_shift_truncate(
    shift: float,
    trunc_bound: float,
    mean_coefs: dict[str, float] | str,
    intercept: float = 0.0,
    sd: float = 1.0,
    ratio_coef: float = 0.5,
    offset_factor: float = 0.5,
    community_level: bool = False,
) -> InterventionSpec:
    """Truncated shift of a normal exposure mechanism.

    A fresh value ``u ~ N(mu + shift, sd)`` is drawn, where ``mu`` is the
    linear mean given by ``intercept`` and ``mean_coefs`` (terms may be
    products such as ``"W3*W4"``). If
    ``exp(ratio_coef * shift * (u - mu - offset_factor * shift))`` exceeds
    ``trunc_bound`` the shift is undone and ``u - shift`` is returned.

    With ``community_level`` the mean is averaged within each community and
    one value is drawn per community.
    """
    if not trunc_bound > 0:
        raise InterventionError("trunc_bound must be positive")
    if isinstance(mean_coefs, str):
        mean_coefs = _parse_linear(mean_coefs)
    params = {
        "shift": float(shift),
        "trunc_bound": float(trunc_bound),
        "mean_terms": {str(k): float(v) for k, v in mean_coefs.items()},
        "intercept": float(intercept),
        "sd": float(sd),
        "ratio_coef": float(ratio_coef),
        "offset_factor": float(offset_factor),
        "community_level": bool(community_level),
    }
    return InterventionSpec("sampler", name="shift_truncate", params=params)


def _parse_linear(text: str) -> dict[str, float]:
    """Parse ``"0.86*W1 + 0.93*W3*W4"`` into ``{"W1": 0.86, "W3:W4": 0.93}``."""
    out: dict[str, float] = {}
    for chunk in text.replace("-", "+-").split("+"):
        chunk = chunk.strip()
        if not chunk:
            continue
        coef = 1.0
        if chunk.startswith("-"):
            coef, chunk = -1.0, chunk[1:].strip()
        names = []
        for part in (p.strip() for p in chunk.split("*")):
            try:
                coef *= float(part)
            except ValueError:
                names.append(part)
        if not names:
            raise InterventionError(f"constant term {chunk!r}: pass it as the intercept")
        out[":".join(names)] = out.get(":".join(names), 0.0) + coef
    return out


def bernoulli(p: float, community_level: bool = False) -> InterventionSpec:
    if not 0 <= p <= 1:
        raise InterventionError("bernoulli probability must lie in [0, 1]")
    return InterventionSpec("sampler", name="bernoulli", params={"p": float(p), "community_level": bool(community_level)})


def additive_shift(anode: str, shift: float, lower: float | None = None, upper: float | None = None) -> InterventionSpec:
    """Dynamic rule ``A* = A + shift``, optionally clipped to ``[lower, upper]``."""
    return InterventionSpec(
        "sampler",
        name="additive_shift",
        params={"anode": anode, "shift": float(shift), "lower": lower, "upper": upper},
    )


def from_config(cfg) -> InterventionSpec | None:
    """Build a spec from a config value: number, list, ``{"table": ...}`` or ``{"sampler": name, ...}``."""
    if cfg is None:
        return None
    if isinstance(cfg, (int, float)):
        return constant(cfg)
    if isinstance(cfg, list):
        return constant(cfg) if not any(isinstance(v, list) for v in cfg) else table(cfg)
    if isinstance(cfg, dict):
        cfg = dict(cfg)
        if "constant" in cfg:
            return constant(cfg["constant"])
        if "table" in cfg:
            return table(cfg["table"])
        name = cfg.pop("sampler", None)
        if name == "shift_truncate":
            return builtin_shift_truncate(**cfg)
        if name == "bernoulli":
            return bernoulli(**cfg)
        if name == "additive_shift":
            return additive_shift(**cfg)
        raise InterventionError(f"unknown sampler {name!r}; expected one of {sorted(_BUILTINS)}")
    raise InterventionError(f"cannot interpret intervention {cfg!r}")


def _as_exposures(values, n: int, p: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None] if p == 1 or arr.shape[0] != p else arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != p:
        raise InterventionError(f"{what} must have {p} column(s), got shape {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, n, axis=0)
    if arr.shape[0] != n:
        raise InterventionError(f"{what} must have 1 or {n} rows, got {arr.shape[0]}")
    return arr


def sample_gstar(
    spec: InterventionSpec,
    frame: pd.DataFrame,
    anodes,
    mc: McConfig,
    groups: np.ndarray | None = None,
    stream: int = GSTAR_STREAM,
) -> np.ndarray:
    """Draw counterfactual exposures.

    Returns an array of shape ``(n_mc_sims, n_rows, n_exposures)``. Constant
    and table rules give the same matrix for every simulation; samplers use
    an independent substream per simulation. ``groups`` (one label per row)
    lets community-level samplers draw once per community.
    """
    anodes = [anodes] if isinstance(anodes, str) else list(anodes)
    n, p = len(frame), len(anodes)
    S = mc.n_mc_sims
    if spec.kind == "constant":
        if len(spec.value) not in (1, p):
            raise InterventionError(f"constant intervention needs 1 or {p} values")
        row = np.broadcast_to(np.asarray(spec.value), (p,))
        return np.broadcast_to(row, (S, n, p)).copy()
    if spec.kind == "table":
        return np.broadcast_to(_as_exposures(spec.table, n, p, "intervention table"), (S, n, p)).copy()
    draw = spec.func if spec.func is not None else _BUILTINS[spec.name]
    out = np.empty((S, n, p))
    for s in range(S):
        rng = mc.rng(s, stream)
        if spec.func is not None:
            vals = spec.func(frame, rng)
        else:
            vals = draw(frame, rng, groups, spec.params)
        out[s] = _as_exposures(vals, n, p, "sampled exposures")
        if not np.all(np.isfinite(out[s])):
            raise InterventionError("sampler produced non-finite exposures")
    return out


def shift_truncate_rule(a, mu, shift: float, trunc_bound: float, ratio_coef: float, offset_factor: float) -> np.ndarray:
    """Apply the truncation rule to shifted values ``a + shift`` (used by data generators)."""
    a = np.asarray(a, dtype=float)
    shifted = a + shift
    ratio = np.exp(ratio_coef * shift * (shifted - mu - offset_factor * shift))
    return np.where(ratio > trunc_bound, a, shifted)


__all__ = [
    "InterventionSpec",
    "McConfig",
    "InterventionError",
    "constant",
    "table",
    "from_callable",
    "builtin_shift_truncate",
    "bernoulli",
    "additive_shift",
    "from_config",
    "sample_gstar",
    "shift_truncate_rule",
]
