"""Hierarchical observation data: role binding, weights, aggregation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Invalid or inconsistent input data."""


class RoleBindingError(DataError):
    pass


@dataclass(frozen=True)
class NodeRoles:
    """Column-role bindings for an observation table.

    Only ``anodes`` and ``wenodes`` are mandatory.
    """

    anodes: tuple[str, ...]
    wenodes: tuple[str, ...]
    ynode: str | None = None
    community_id: str | None = None
    ynode_det: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "anodes", tuple([self.anodes] if isinstance(self.anodes, str) else self.anodes))
        object.__setattr__(self, "wenodes", tuple([self.wenodes] if isinstance(self.wenodes, str) else self.wenodes))
        if not self.anodes or not self.wenodes:
            raise RoleBindingError("anodes and wenodes must both be non-empty")
        if set(self.anodes) & set(self.wenodes):
            raise RoleBindingError("anodes and wenodes must be disjoint")
        if self.ynode is not None and (self.ynode in self.anodes or self.ynode in self.wenodes):
            raise RoleBindingError("ynode must not also be an exposure or covariate")

    @property
    def numeric_columns(self) -> list[str]:
        cols = list(self.anodes) + list(self.wenodes)
        if self.ynode is not None:
            cols.append(self.ynode)
        if self.ynode_det is not None:
            cols.append(self.ynode_det)
        return cols

    def to_dict(self) -> dict:
        return {
            "ynode": self.ynode,
            "anodes": list(self.anodes),
            "wenodes": list(self.wenodes),
            "community_id": self.community_id,
            "ynode_det": self.ynode_det,
        }


@dataclass(frozen=True)
class Community:
    key: object
    members: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class HierDataset:
    """Validated observations with role bindings and a community partition.

    Without a community id every row is its own community of size one.
    """

    frame: pd.DataFrame
    roles: NodeRoles
    communities: tuple[Community, ...] = field(repr=False)

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def n_communities(self) -> int:
        return len(self.communities)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.communities], dtype=int)

    @property
    def community_index(self) -> np.ndarray:
        """Row -> position of its community in :attr:`communities`."""
        idx = np.empty(self.n_obs, dtype=int)
        for j, c in enumerate(self.communities):
            idx[c.members] = j
        return idx

    @property
    def keys(self) -> list:
        return [c.key for c in self.communities]

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def subset(self, rows: np.ndarray) -> "HierDataset":
        return from_frame(self.frame.iloc[rows].reset_index(drop=True), self.roles)


def _community_partition(frame: pd.DataFrame, community_id: str | None) -> tuple[Community, ...]:
    n = len(frame)
    if community_id is None:
        return tuple(Community(i, np.array([i])) for i in range(n))
    keys = frame[community_id].tolist()
    order: dict = {}
    for i, k in enumerate(keys):
        order.setdefault(k, []).append(i)
    return tuple(Community(k, np.asarray(v, dtype=int)) for k, v in order.items())


def from_frame(frame: pd.DataFrame, roles: NodeRoles) -> HierDataset:
    """Validate ``frame`` against ``roles`` and build a :class:`HierDataset`."""
    missing = [c for c in roles.numeric_columns + ([roles.community_id] if roles.community_id else []) if c not in frame]
    if missing:
        raise RoleBindingError(f"columns not found in data: {missing}")
    frame = frame.reset_index(drop=True).copy()
    for col in roles.numeric_columns:
        s = frame[col]
        if not pd.api.types.is_numeric_dtype(s) or pd.api.types.is_bool_dtype(s):
            if pd.api.types.is_bool_dtype(s):
                frame[col] = s.astype(float)
                continue
            conv = pd.to_numeric(s, errors="coerce")
            bad = conv.isna() & s.notna()
            if bad.any():
                row = int(np.flatnonzero(bad.to_numpy())[0])
                raise DataError(f"non-numeric value {s.iloc[row]!r} in column {col!r} at row {row}")
            frame[col] = conv
        frame[col] = frame[col].astype(float)
    for col in ([roles.ynode] if roles.ynode else []) + list(roles.anodes):
        if frame[col].isna().any():
            row = int(np.flatnonzero(frame[col].isna().to_numpy())[0])
            raise DataError(f"missing value in column {col!r} at row {row}")
    if roles.ynode_det is not None:
        vals = set(np.unique(frame[roles.ynode_det].to_numpy()))
        if not vals <= {0.0, 1.0}:
            raise DataError(f"ynode_det column {roles.ynode_det!r} must contain only 0/1")
    return HierDataset(frame, roles, _community_partition(frame, roles.community_id))


def _community_key_column(values: Sequence[str]) -> list:
    """Keep community keys as integers when every entry is integral."""
    out = []
    for v in values:
        try:
            f = float(v)
        except ValueError:
            return list(values)
        if not f.is_integer():
            return list(values)
        out.append(int(f))
    return out


def load_csv(path: str | Path, roles: NodeRoles) -> HierDataset:
    """Read a header-row CSV and bind ``roles``.

    Bound numeric columns are parsed as floats; the community id column is
    kept as a key (integral values become ints, anything else stays text).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    needed = roles.numeric_columns + ([roles.community_id] if roles.community_id else [])
    missing = [c for c in needed if c not in header]
    if missing:
        raise RoleBindingError(f"columns not found in {path.name}: {missing}")
    cols: dict[str, list] = {h: [] for h in header}
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {r} has {len(row)} fields, expected {len(header)}")
        for h, v in zip(header, row):
            cols[h].append(v.strip())
    frame = {}
    numeric = set(roles.numeric_columns)
    for h in header:
        if h == roles.community_id:
            frame[h] = _community_key_column(cols[h])
        elif h in numeric:
            out = np.empty(len(cols[h]))
            for r, v in enumerate(cols[h]):
                if v == "" or v.upper() in ("NA", "NAN"):
                    out[r] = np.nan
                    continue
                try:
                    out[r] = float(v)
                except ValueError:
                    raise DataError(f"non-numeric value {v!r} in column {h!r} at row {r}") from None
            frame[h] = out
        else:
            try:
                frame[h] = np.array([float(v) for v in cols[h]])
            except ValueError:
                frame[h] = cols[h]
    return from_frame(pd.DataFrame(frame), roles)


def write_csv(ds: HierDataset, path: str | Path) -> None:
    """Write the dataset with full float precision (``repr`` round-trips)."""
    frame = ds.frame
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(frame.columns))
        for row in frame.itertuples(index=False):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


OBS_POLICIES = ("equal_within_pop", "equal_within_community", "user")
COMMUNITY_POLICIES = ("size_community", "equal_community", "user")


@dataclass(frozen=True)
class WeightScheme:
    """Observation-level and community-level weights.

    ``alpha`` holds observation weights renormalized to sum to one inside
    each community; ``obs_weights`` keeps them as resolved from the policy.
    """

    obs_weights: np.ndarray
    community_weights: np.ndarray
    alpha: np.ndarray
    obs_policy: str
    community_policy: str


def build_weights(
    ds: HierDataset,
    obs_policy: str = "equal_within_pop",
    community_policy: str = "size_community",
    user_obs: Sequence[float] | None = None,
    user_comm: Sequence[float] | None = None,
) -> WeightScheme:
    """Resolve weight policies into concrete vectors.

    ``size_community`` gives community ``j`` the weight ``N_j / sd(N)`` (plain
    ``N_j`` when there is one community or all sizes agree).
    """
    sizes = ds.sizes.astype(float)
    cidx = ds.community_index
    if user_obs is not None:
        obs_policy = "user"
    if user_comm is not None:
        community_policy = "user"

    if obs_policy == "equal_within_pop":
        obs = np.ones(ds.n_obs)
    elif obs_policy == "equal_within_community":
        obs = 1.0 / sizes[cidx]
    elif obs_policy == "user":
        if user_obs is None:
            raise DataError("obs_policy='user' requires user_obs")
        obs = np.asarray(user_obs, dtype=float)
        if obs.shape != (ds.n_obs,):
            raise DataError(f"user observation weights must have length {ds.n_obs}")
    else:
        raise DataError(f"unknown observation weight policy {obs_policy!r}")

    if community_policy == "size_community":
        sd = float(np.std(sizes, ddof=1)) if len(sizes) > 1 else 0.0
        comm = sizes / sd if sd > 0 else sizes.copy()
    elif community_policy == "equal_community":
        comm = np.ones(len(sizes))
    elif community_policy == "user":
        if user_comm is None:
            raise DataError("community_policy='user' requires user_comm")
        comm = np.asarray(user_comm, dtype=float)
        if comm.shape != (len(sizes),):
            raise DataError(f"user community weights must have length {len(sizes)}")
    else:
        raise DataError(f"unknown community weight policy {community_policy!r}")

    if np.any(obs < 0) or np.any(comm < 0):
        raise DataError("weights must be nonnegative")
    totals = np.bincount(cidx, weights=obs, minlength=len(sizes))
    if np.any(totals <= 0):
        bad = ds.keys[int(np.flatnonzero(totals <= 0)[0])]
        raise DataError(f"community {bad!r} has no positive observation weight")
    alpha = obs / totals[cidx]
    return WeightScheme(obs, comm, alpha, obs_policy, community_policy)


@dataclass(frozen=True)
class CommunityAggregate:
    """One row per community: E copied, W replaced by alpha-weighted means,
    A copied, Y replaced by the alpha-weighted community outcome."""

    frame: pd.DataFrame
    keys: list
    weights: np.ndarray

    @property
    def n_communities(self) -> int:
        return len(self.frame)


def aggregate_to_community(ds: HierDataset, w: WeightScheme) -> CommunityAggregate:
    """Collapse individual rows to community rows using ``w.alpha``.

    Raises
    ------
    DataError
        If an exposure varies within a community.
    """
    roles = ds.roles
    cidx = ds.community_index
    J = ds.n_communities
    out: dict[str, np.ndarray] = {}
    for a in roles.anodes:
        vals = ds.column(a)
        first = vals[[c.members[0] for c in ds.communities]]
        if np.any(vals != first[cidx]):
            j = int(np.flatnonzero(np.bincount(cidx, weights=(vals != first[cidx]).astype(float), minlength=J))[0])
            raise DataError(f"exposure {a!r} varies within community {ds.keys[j]!r}")
        out[a] = first
    cols = list(roles.wenodes)
    if roles.ynode is not None:
        cols.append(roles.ynode)
    for col in cols:
        out[col] = np.bincount(cidx, weights=w.alpha * ds.column(col), minlength=J)
    if roles.ynode_det is not None:
        # a community is deterministic only if every member is
        det = ds.column(roles.ynode_det)
        out[roles.ynode_det] = (np.bincount(cidx, weights=det, minlength=J) == ds.sizes).astype(float)
    frame = pd.DataFrame(out)
    return CommunityAggregate(frame, ds.keys, w.community_weights.copy())
