"""Weighted sample paths and finite scenario trees standing in for the
filtered probability space, plus small empirical-law helpers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, IngestionError, ParameterError

WEIGHT_TOL = 1e-12
BUDGET_TOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmpiricalDist:
    values: np.ndarray
    weights: np.ndarray

    def __init__(self, values, weights=None):
        values = _frozen(np.ravel(values))
        if weights is None:
            weights = np.full(values.size, 1.0 / max(values.size, 1))
        weights = _frozen(np.ravel(weights))
        if weights.shape != values.shape:
            raise ParameterError("values and weights differ in length")
        if np.isnan(values).any():
            raise ParameterError("NaN in distribution values")
        if values.size and abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ParameterError(f"weights sum to {weights.sum()!r}, not 1")
        if (weights < 0).any():
            raise ParameterError("negative weight")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.values.size

    def mean(self) -> float:
        return float(np.dot(self.values, self.weights))

    def atoms(self):
        """Sorted distinct support points with positive mass and their masses."""
        keep = self.weights > 0
        xs, inv = np.unique(self.values[keep], return_inverse=True)
        ps = np.bincount(inv, weights=self.weights[keep], minlength=xs.size)
        return xs, ps


def essinf(dist: EmpiricalDist) -> float:
    """Smallest support point carrying positive weight."""
    pos = dist.values[dist.weights > 0]
    if pos.size == 0:
        raise DomainError("essential infimum of an empty distribution")
    return float(pos.min())


def empirical_survival(dist: EmpiricalDist, x) -> np.ndarray | float:
    """P(X > x); vectorised over ``x``."""
    xs, ps = dist.atoms() if len(dist) else (np.empty(0), np.empty(0))
    # tail[j] = mass strictly above xs[j-1]
    tail = np.concatenate([np.cumsum(ps[::-1])[::-1], [0.0]])
    idx = np.searchsorted(xs, x, side="right")
    out = np.clip(tail[idx], 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def quantile(dist: EmpiricalDist, level: float) -> float:
    """Left-continuous inverse inf{x : F(x) >= level}."""
    if not 0.0 <= level <= 1.0:
        raise ParameterError(f"quantile level {level} outside [0, 1]")
    xs, ps = dist.atoms()
    if xs.size == 0:
        raise DomainError("quantile of an empty distribution")
    cdf = np.cumsum(ps)
    j = int(np.searchsorted(cdf, level - WEIGHT_TOL, side="left"))
    return float(xs[min(j, xs.size - 1)])


@dataclass(frozen=True)
class SamplePathSet:
    """N weighted paths over periods 1..T.

    ``paths[p, t-1]`` is the aggregate S_t on path p. ``node_ids``, when
    present, is an N x (T+1) integer array naming the information node each
    path sits in at periods 0..T; it is what tree-mode evaluation conditions on.
    """

    paths: np.ndarray
    weights: np.ndarray | None = None
    agent_endowments: np.ndarray | None = None
    observables: np.ndarray | None = None
    node_ids: np.ndarray | None = None

    def __post_init__(self):
        paths = _frozen(self.paths)
        if paths.ndim != 2 or paths.shape[0] < 1 or paths.shape[1] < 1:
            raise ParameterError("paths must be a non-empty N x T matrix")
        n_paths, horizon = paths.shape
        if self.weights is None:
            weights = _frozen(np.full(n_paths, 1.0 / n_paths))
        else:
            weights = _frozen(self.weights)
        if weights.shape != (n_paths,):
            raise ParameterError("weights must have one entry per path")
        if (weights < 0).any() or abs(math.fsum(weights) - 1.0) > WEIGHT_TOL:
            raise ParameterError("weights must be nonnegative and sum to 1")
        if not np.isfinite(paths).all():
            raise ParameterError("non-finite aggregate value")
        object.__setattr__(self, "paths", paths)
        object.__setattr__(self, "weights", weights)

        if self.agent_endowments is not None:
            x = _frozen(self.agent_endowments)
            if x.ndim != 3 or x.shape[:2] != (n_paths, horizon):
                raise ParameterError("agent_endowments must be N x T x n")
            if not np.isfinite(x).all():
                raise ParameterError("non-finite endowment value")
            gap = np.abs(x.sum(axis=2) - paths)
            if gap.max() > BUDGET_TOL:
                p, t = np.unravel_index(int(gap.argmax()), gap.shape)
                raise ParameterError(
                    f"endowments do not sum to S on path {p}, period {t + 1}"
                )
            object.__setattr__(self, "agent_endowments", x)

        obs = paths if self.observables is None else _frozen(self.observables)
        if obs.shape != paths.shape or not np.isfinite(obs).all():
            raise ParameterError("observables must be a finite N x T matrix")
        object.__setattr__(self, "observables", obs)

        if self.node_ids is not None:
            nodes = _frozen(self.node_ids, dtype=np.int64)
            if nodes.shape != (n_paths, horizon + 1):
                raise ParameterError("node_ids must be N x (T+1)")
            object.__setattr__(self, "node_ids", nodes)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def horizon(self) -> int:
        return self.paths.shape[1]

    @property
    def n_agents(self) -> int | None:
        if self.agent_endowments is None:
            return None
        return self.agent_endowments.shape[2]

    @property
    def equal_weights(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def aggregate(self, t: int) -> np.ndarray:
        """S_t across paths, t in 1..T."""
        return self.paths[:, t - 1]

    def law(self, values) -> EmpiricalDist:
        return EmpiricalDist(values, self.weights)

    def mass(self, mask) -> float:
        """Probability of a set of paths; exact count ratio for uniform weights."""
        mask = np.asarray(mask, dtype=bool)
        if self.equal_weights:
            return int(mask.sum()) / self.n_paths
        return math.fsum(self.weights[mask])

    def groups(self, t: int) -> list[np.ndarray]:
        """Index sets of paths sharing the same information node at period t."""
        if self.node_ids is None:
            raise ParameterError("path set has no node structure")
        _, inv = np.unique(self.node_ids[:, t], return_inverse=True)
        return [np.flatnonzero(inv == g) for g in range(inv.max() + 1)]


def generate_exponential_chain(n_paths: int, mean0: float, seed: int) -> SamplePathSet:
    """Two-period chain S_1 ~ Exp(mean0), S_2 | S_1 ~ Exp(mean S_1).

    Each period draws from its own child of ``SeedSequence(seed)``, so path p
    always receives the p-th standard exponential of each period's stream.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ParameterError("n_paths must be a positive integer")
    if not mean0 > 0 or not math.isfinite(mean0):
        raise ParameterError("mean0 must be positive")
    s1_stream, s2_stream = (
        np.random.Generator(np.random.PCG64(child))
        for child in np.random.SeedSequence(seed).spawn(2)
    )
    s1 = mean0 * s1_stream.standard_exponential(int(n_paths))
    s2 = s1 * s2_stream.standard_exponential(int(n_paths))
    return SamplePathSet(
        paths=np.column_stack([s1, s2]),
        weights=np.full(int(n_paths), 1.0 / n_paths),
    )


@dataclass
class TreeNode:
    period: int
    value: float
    prob: float = 1.0  # conditional probability given the parent
    children: list["TreeNode"] = field(default_factory=list)
    endowments: Sequence[float] | None = None


@dataclass
class ScenarioTree:
    root: TreeNode

    def __post_init__(self):
        if self.root.period != 0:
            raise ParameterError("tree root must sit at period 0")
        leaves = []
        self._check(self.root, leaves)
        depths = {leaf.period for leaf in leaves}
        if len(depths) != 1:
            raise ParameterError("every leaf must sit at the final period")
        self.horizon = depths.pop()
        if self.horizon < 1:
            raise ParameterError("tree needs at least one period")

    def _check(self, node, leaves):
        if not math.isfinite(node.value):
            raise ParameterError(f"non-finite value at period {node.period}")
        if not node.children:
            leaves.append(node)
            return
        total = math.fsum(c.prob for c in node.children)
        if abs(total - 1.0) > WEIGHT_TOL or any(c.prob < 0 for c in node.children):
            raise ParameterError(
                f"child probabilities at period {node.period} sum to {total}"
            )
        for c in node.children:
            if c.period != node.period + 1:
                raise ParameterError("child period must be parent period + 1")
            self._check(c, leaves)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioTree":
        def build(spec, period):
            kids = [build(c, period + 1) for c in spec.get("children", [])]
            return TreeNode(
                period=period,
                value=float(spec.get("value", 0.0)),
                prob=float(spec.get("prob", 1.0)),
                children=kids,
                endowments=spec.get("X"),
            )

        return cls(build(d, 0))

    def to_pathset(self) -> SamplePathSet:
        rows, weights, nodes, endow = [], [], [], []
        counter = iter(range(1 << 62))

        def walk(node, prob, vals, ids, xs, node_id):
            ids = ids + [node_id]
            if node.period > 0:
                vals = vals + [node.value]
                xs = xs + [node.endowments]
            if not node.children:
                rows.append(vals)
                weights.append(prob)
                nodes.append(ids)
                endow.append(xs)
                return
            for child in node.children:
                walk(child, prob * child.prob, vals, ids, xs, next(counter))

        walk(self.root, 1.0, [], [], [], next(counter))
        w = np.asarray(weights)
        w = w / w.sum()
        x = None
        if all(e is not None for path in endow for e in path):
            x = np.asarray(endow, dtype=float)
        return SamplePathSet(
            paths=np.asarray(rows, dtype=float),
            weights=w,
            agent_endowments=x,
            node_ids=np.asarray(nodes),
        )


def load_paths(rows: Iterable[Mapping[str, object]]) -> SamplePathSet:
    """Build a path set from records with keys path_id, period, S and
    optionally weight and X1..Xn. Errors name the offending row (1-based,
    header excluded)."""
    by_path: dict[str, dict[int, tuple]] = {}
    path_weight: dict[str, float] = {}
    order: list[str] = []
    x_cols: list[str] | None = None
    has_weight = None
    for lineno, row in enumerate(rows, start=1):
        try:
            pid = str(row["path_id"]).strip()
            period = int(row["period"])
            s = float(row["S"])
        except (KeyError, ValueError, TypeError) as exc:
            raise IngestionError(f"row {lineno}: malformed record ({exc})") from None
        if x_cols is None:
            x_cols = sorted(
                (k for k in row if k and k[0] == "X" and k[1:].isdigit()),
                key=lambda k: int(k[1:]),
            )
            has_weight = "weight" in row and row["weight"] not in (None, "")
        try:
            xs = tuple(float(row[k]) for k in x_cols)
        except (KeyError, ValueError, TypeError):
            raise IngestionError(f"row {lineno}: malformed endowment columns") from None
        if not math.isfinite(s) or not all(map(math.isfinite, xs)):
            raise IngestionError(f"row {lineno}: non-finite value")
        if xs and abs(math.fsum(xs) - s) > BUDGET_TOL:
            raise IngestionError(
                f"row {lineno}: endowments sum to {math.fsum(xs)} but S = {s}"
            )
        if has_weight:
            try:
                w = float(row["weight"])
            except (KeyError, ValueError, TypeError):
                raise IngestionError(f"row {lineno}: malformed weight") from None
            if pid in path_weight and path_weight[pid] != w:
                raise IngestionError(f"row {lineno}: weight differs within path {pid}")
            path_weight[pid] = w
        if pid not in by_path:
            by_path[pid] = {}
            order.append(pid)
        if period in by_path[pid]:
            raise IngestionError(f"row {lineno}: duplicate period {period} for path {pid}")
        by_path[pid][period] = (s, xs, lineno)

    if not order:
        raise IngestionError("no rows")
    horizon = max(len(v) for v in by_path.values())
    expected = set(range(1, horizon + 1))
    for pid in order:
        if set(by_path[pid]) != expected:
            last = max(r[2] for r in by_path[pid].values())
            raise IngestionError(f"row {last}: path {pid} has ragged periods")
    s = np.array([[by_path[p][t][0] for t in range(1, horizon + 1)] for p in order])
    x = None
    if x_cols:
        x = np.array([[by_path[p][t][1] for t in range(1, horizon + 1)] for p in order])
    if has_weight:
        w = np.array([path_weight[p] for p in order])
        if (w < 0).any() or abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
            raise IngestionError(f"path weights sum to {math.fsum(w)}, not 1")
    else:
        w = np.full(len(order), 1.0 / len(order))
    return SamplePathSet(paths=s, weights=w, agent_endowments=x)


def read_paths_csv(path: str | Path) -> SamplePathSet:
    with open(path, newline="") as fh:
        return load_paths(csv.DictReader(fh))


def write_paths_csv(pathset: SamplePathSet, path: str | Path) -> None:
    n = pathset.n_agents or 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "period", "weight", "S"] + [f"X{i + 1}" for i in range(n)])
        for p in range(pathset.n_paths):
            for t in range(pathset.horizon):
                row = [p, t + 1, repr(float(pathset.weights[p])), repr(float(pathset.paths[p, t]))]
                if n:
                    row += [repr(float(v)) for v in pathset.agent_endowments[p, t]]
                w.writerow(row)
