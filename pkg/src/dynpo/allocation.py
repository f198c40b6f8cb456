"""Allocation processes and their retention-function representation.

Also hosts the comonotonicity and convex-order tests, the comonotone
improvement, and the individual-rationality checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .dynrisk import RiskSpec, eval_one_step, risk_to_go_values
from .errors import ConfigError, IngestionError, ParameterError, ShapeError, UnsupportedError
from .scenario import BUDGET_TOL, EmpiricalDist, SamplePathSet, essinf, quantile

TIE_TOL = 1e-9
STRICT_GAP = 1e-6


@dataclass(frozen=True)
class AllocationProcess:
    """``values[p, t-1, i]`` is Y_t^{(i)} on path p."""

    values: np.ndarray
    pathset: SamplePathSet

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        ps = self.pathset
        if v.ndim != 3 or v.shape[:2] != (ps.n_paths, ps.horizon):
            raise ShapeError(f"allocation must be {ps.n_paths} x {ps.horizon} x n")
        if not np.isfinite(v).all():
            raise ShapeError("non-finite allocation value")
        gap = np.abs(v.sum(axis=2) - ps.paths)
        tol = BUDGET_TOL * max(1.0, float(np.abs(ps.paths).max()))
        if gap.max() > tol:
            p, t = np.unravel_index(int(gap.argmax()), gap.shape)
            raise ShapeError(
                f"allocation does not sum to S on path {p}, period {t + 1} (gap {gap.max():.3g})"
            )
        if ps.node_ids is not None:
            for t in range(1, ps.horizon + 1):
                for idx in ps.groups(t):
                    if np.ptp(v[idx, t - 1, :], axis=0).max() > tol:
                        raise ShapeError(
                            f"allocation at period {t} differs between paths {idx.tolist()} "
                            "that share one tree node"
                        )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_agents(self) -> int:
        return self.values.shape[2]

    def agent(self, i: int) -> np.ndarray:
        return self.values[:, :, i]

    @classmethod
    def from_endowments(cls, pathset: SamplePathSet) -> "AllocationProcess":
        if pathset.agent_endowments is None:
            raise ConfigError("path set carries no agent endowments")
        return cls(pathset.agent_endowments, pathset)


def risk_to_go_matrix(specs: Sequence[RiskSpec], alloc: AllocationProcess) -> np.ndarray:
    """N x (T+1) x n stack of every agent's risk-to-go."""
    _check_specs(specs, alloc)
    return np.stack(
        [risk_to_go_values(s, alloc.agent(i), alloc.pathset) for i, s in enumerate(specs)],
        axis=2,
    )


def _check_specs(specs, alloc):
    if len(specs) != alloc.n_agents:
        raise ShapeError(f"{len(specs)} risk specs for {alloc.n_agents} agents")


# --------------------------------------------------------------------------
# retention representation


@dataclass(frozen=True)
class RetentionFn:
    """Nondecreasing piecewise-linear g on [0, inf) with g(0) = 0 and slopes
    in [0, 1]; beyond the last breakpoint it continues with ``tail_slope``."""

    x: np.ndarray
    y: np.ndarray
    tail_slope: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 1 or x[0] != 0.0 or y[0] != 0.0:
            raise ParameterError("retention breakpoints must start at (0, 0)")
        if (np.diff(x) <= 0).any():
            raise ParameterError("retention breakpoints must be strictly increasing")
        slopes = np.diff(y) / np.diff(x)
        if (slopes < -TIE_TOL).any() or (slopes > 1 + TIE_TOL).any():
            raise ParameterError("retention slopes must lie in [0, 1]")
        if not -TIE_TOL <= self.tail_slope <= 1 + TIE_TOL:
            raise ParameterError("retention tail slope must lie in [0, 1]")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        out = np.interp(w, self.x, self.y)
        beyond = w > self.x[-1]
        out = np.where(beyond, self.y[-1] + self.tail_slope * (w - self.x[-1]), out)
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_slopes(cls, edges: np.ndarray, slopes: np.ndarray) -> "RetentionFn":
        """Integrate a step slope h: ``slopes[j]`` on [edges[j], edges[j+1]),
        the last slope continuing to infinity. ``edges[0]`` must be 0."""
        edges = np.asarray(edges, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        # merge runs of equal slope so breakpoints mark genuine kinks
        keep = np.concatenate([[True], slopes[1:] != slopes[:-1]])
        edges, slopes = edges[keep], slopes[keep]
        y = np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(edges))])
        return cls(edges, y, float(slopes[-1]))

    def to_json(self):
        return {
            "breakpoints": [[float(a), float(b)] for a, b in zip(self.x, self.y)],
            "tail_slope": float(self.tail_slope),
        }

    @classmethod
    def from_json(cls, d) -> "RetentionFn":
        pts = np.asarray(d["breakpoints"], dtype=float)
        return cls(pts[:, 0], pts[:, 1], float(d.get("tail_slope", 0.0)))


@dataclass(frozen=True)
class RetentionPeriod:
    t: int
    retention: tuple[RetentionFn, ...]
    premia: np.ndarray
    s_base: float
    r_base: float

    def __post_init__(self):
        object.__setattr__(self, "retention", tuple(self.retention))
        premia = np.asarray(self.premia, dtype=float)
        object.__setattr__(self, "premia", premia)
        if premia.shape != (len(self.retention),):
            raise ShapeError("one premium per retention function required")
        if abs(premia.sum() - (self.s_base + self.r_base)) > BUDGET_TOL * max(
            1.0, abs(self.s_base + self.r_base)
        ):
            raise ParameterError(
                f"premia at t={self.t} sum to {premia.sum()}, expected {self.s_base + self.r_base}"
            )

    def identity_defect(self, grid) -> float:
        """max |sum_i g_i(w) - w| over the supplied points."""
        grid = np.asarray(grid, dtype=float)
        return float(np.max(np.abs(sum(g(grid) for g in self.retention) - grid)))

    def to_json(self):
        return {
            "t": self.t,
            "s_base": self.s_base,
            "r_base": self.r_base,
            "premia": [float(c) for c in self.premia],
            "retention": [g.to_json() for g in self.retention],
        }

    @classmethod
    def from_json(cls, d) -> "RetentionPeriod":
        return cls(
            t=int(d["t"]),
            retention=tuple(RetentionFn.from_json(g) for g in d["retention"]),
            premia=np.asarray(d["premia"], dtype=float),
            s_base=float(d["s_base"]),
            r_base=float(d["r_base"]),
        )


@dataclass(frozen=True)
class RetentionSchedule:
    periods: tuple[RetentionPeriod, ...]  # ordered t = 1..T

    def __post_init__(self):
        periods = tuple(sorted(self.periods, key=lambda p: p.t))
        if [p.t for p in periods] != list(range(1, len(periods) + 1)):
            raise ShapeError("retention schedule must cover periods 1..T")
        object.__setattr__(self, "periods", periods)

    @property
    def horizon(self) -> int:
        return len(self.periods)

    def __getitem__(self, t: int) -> RetentionPeriod:
        return self.periods[t - 1]

    def to_json(self):
        return {"periods": [p.to_json() for p in self.periods]}

    @classmethod
    def from_json(cls, d) -> "RetentionSchedule":
        return cls(tuple(RetentionPeriod.from_json(p) for p in d["periods"]))


def retention_to_allocation(
    sched: RetentionSchedule, specs: Sequence[RiskSpec], pathset: SamplePathSet
) -> AllocationProcess:
    """Y_t^{(i)} = g_t^{(i)}(S_t + Rbar_t - r_t - s_t) - R_t^{(i)} + c_t^{(i)},
    built backward so that R_t comes from the already-built tail."""
    horizon = pathset.horizon
    if sched.horizon != horizon:
        raise ShapeError(f"schedule covers {sched.horizon} periods, path set {horizon}")
    n = len(specs)
    if any(len(sched[t].retention) != n for t in range(1, horizon + 1)):
        raise ShapeError("schedule agent count differs from number of specs")
    y = np.zeros((pathset.n_paths, horizon, n))
    r_next = np.zeros((pathset.n_paths, n))  # R_t for the current t
    for t in range(horizon, 0, -1):
        entry = sched[t]
        w = pathset.aggregate(t) + r_next.sum(axis=1) - entry.r_base - entry.s_base
        if w.min() < -BUDGET_TOL * max(1.0, float(np.abs(w).max())):
            raise ShapeError(f"base offsets at t={t} exceed the essential infimum")
        w = np.maximum(w, 0.0)
        for i, g in enumerate(entry.retention):
            y[:, t - 1, i] = g(w) - r_next[:, i] + entry.premia[i]
        # absorb rounding so the budget identity is exact
        y[:, t - 1, -1] += pathset.aggregate(t) - y[:, t - 1, :].sum(axis=1)
        if t > 1:
            r_next = np.column_stack(
                [
                    eval_one_step(s, t - 1, y[:, t - 1, i] + r_next[:, i], pathset)
                    for i, s in enumerate(specs)
                ]
            )
    return AllocationProcess(y, pathset)


def extract_retention(alloc: AllocationProcess, specs: Sequence[RiskSpec]) -> RetentionSchedule:
    """Recover (g_t, c_t) from a comonotone process.

    Below the smallest transformed aggregate the slope is split evenly, which
    fixes the otherwise free split of the base offsets into premia.
    """
    rtg = risk_to_go_matrix(specs, alloc)
    n = alloc.n_agents
    periods = []
    for t in range(1, alloc.pathset.horizon + 1):
        z = alloc.values[:, t - 1, :] + rtg[:, t, :]
        s_base = essinf(alloc.pathset.law(alloc.pathset.aggregate(t)))
        r_base = essinf(alloc.pathset.law(rtg[:, t, :].sum(axis=1)))
        w = z.sum(axis=1) - s_base - r_base
        # the minimum is 0 up to rounding
        w = np.where(w <= TIE_TOL * max(1.0, float(np.abs(w).max())), 0.0, w)
        order = np.argsort(w, kind="stable")
        ws, zs = w[order], z[order]
        levels, first = np.unique(ws, return_index=True)
        zl = zs[first]
        share = np.full(n, 1.0 / n)
        premia = zl[0] - share * levels[0]
        funcs = []
        for i in range(n):
            gx = np.concatenate([[0.0], levels])
            gy = np.concatenate([[0.0], zl[:, i] - premia[i]])
            if levels[0] == 0.0:
                gx, gy = gx[1:], gy[1:]
                gy[0] = 0.0
            slopes = np.clip(np.diff(gy) / np.diff(gx), 0.0, 1.0) if gx.size > 1 else np.empty(0)
            gy = np.concatenate([[0.0], np.cumsum(slopes * np.diff(gx))])
            funcs.append(RetentionFn(gx, gy, 1.0 / n))
        premia[-1] = s_base + r_base - premia[:-1].sum()
        periods.append(RetentionPeriod(t, tuple(funcs), premia, s_base, r_base))
    return RetentionSchedule(tuple(periods))


# --------------------------------------------------------------------------
# comonotonicity


def comonotone_defect(z: np.ndarray) -> float:
    """Largest decrease of any component when the rows of ``z`` (paths x
    agents) are sorted by their sum; 0 for a comonotone vector."""
    z = np.asarray(z, dtype=float)
    if z.shape[1] < 2 or z.shape[0] < 2:
        return 0.0
    order = np.lexsort((z[:, 0], z.sum(axis=1)))
    steps = np.diff(z[order], axis=0)
    return float(max(0.0, -steps.min()))


def pairwise_comonotone_defect(z: np.ndarray) -> float:
    """max over path pairs and agent pairs of -(dz_i * dz_j); O(N^2) reference."""
    z = np.asarray(z, dtype=float)
    d = z[:, None, :] - z[None, :, :]
    prod = d[..., :, None] * d[..., None, :]
    return float(max(0.0, -prod.min()))


def _transformed(alloc, specs):
    rtg = risk_to_go_matrix(specs, alloc)
    return [alloc.values[:, t - 1, :] + rtg[:, t, :] for t in range(1, alloc.pathset.horizon + 1)]


def is_comonotone_process(
    alloc: AllocationProcess, specs: Sequence[RiskSpec], tol: float = TIE_TOL
) -> list[bool]:
    """Per period t = 1..T: is (Y_t^{(i)} + R_t^{(i)})_i comonotone?"""
    out = []
    for z in _transformed(alloc, specs):
        scale = max(1.0, float(np.abs(z).max()))
        out.append(comonotone_defect(z) <= tol * scale)
    return out


# --------------------------------------------------------------------------
# convex order

DOMINATED = "dominated"
STRICTLY_DOMINATED = "strictly_dominated"
INCOMPARABLE = "incomparable"


def _equal_weight_sample(dist: EmpiricalDist, size: int) -> np.ndarray:
    if len(dist) == size and np.all(dist.weights == dist.weights[0]):
        return np.sort(dist.values)
    levels = (np.arange(size) + 0.5) / size
    return np.array([quantile(dist, q) for q in levels])


def convex_order_leq(y: EmpiricalDist, z: EmpiricalDist, tol: float = TIE_TOL) -> str:
    """Compare Y and Z in the convex order via upper partial sums.

    Tolerances scale with max(1, largest absolute value).
    """
    if not isinstance(y, EmpiricalDist):
        y = EmpiricalDist(y)
    if not isinstance(z, EmpiricalDist):
        z = EmpiricalDist(z)
    size = max(len(y), len(z))
    ys = _equal_weight_sample(y, size)
    zs = _equal_weight_sample(z, size)
    scale = max(1.0, float(np.abs(ys).max()), float(np.abs(zs).max()))
    top_y = np.cumsum(ys[::-1]) / size
    top_z = np.cumsum(zs[::-1]) / size
    if abs(top_y[-1] - top_z[-1]) > tol * scale:
        return INCOMPARABLE
    gap = top_z - top_y
    if gap.min() < -tol * scale:
        return INCOMPARABLE
    return STRICTLY_DOMINATED if gap.max() > STRICT_GAP * scale else DOMINATED


def static_comonotone_improvement(z: np.ndarray) -> np.ndarray:
    """Comonotone allocation of the row sums of ``z`` (equal-weight paths x
    agents) whose every column is convex-order dominated by the original.

    Solved as a linear feasibility problem: nondecreasing shares of the
    sorted aggregate, equal means, and upper partial sums bounded by those
    of the original columns.
    """
    z = np.asarray(z, dtype=float)
    n_paths, n = z.shape
    if n == 1 or n_paths == 1 or comonotone_defect(z) == 0.0:
        return z.copy()
    scale = max(1.0, float(np.abs(z).max()))
    zn = z / scale
    v = zn.sum(axis=1)
    order = np.argsort(v, kind="stable")
    vs = v[order]
    # tie groups along the sorted aggregate
    new_level = np.concatenate([[True], np.diff(vs) > 1e-12])
    level_of = np.cumsum(new_level) - 1
    n_levels = int(level_of[-1]) + 1
    level_val = np.array([vs[level_of == l].mean() for l in range(n_levels)])
    counts = np.bincount(level_of, minlength=n_levels).astype(float)

    nv = n * n_levels  # variable f[i, l] at i * n_levels + l
    rows_eq, cols_eq, vals_eq, b_eq = [], [], [], []
    r = 0
    for l in range(n_levels):
        for i in range(n):
            rows_eq.append(r), cols_eq.append(i * n_levels + l), vals_eq.append(1.0)
        b_eq.append(level_val[l])
        r += 1
    for i in range(n):
        for l in range(n_levels):
            rows_eq.append(r), cols_eq.append(i * n_levels + l), vals_eq.append(counts[l])
        b_eq.append(zn[:, i].sum())
        r += 1
    a_eq = sparse.csr_matrix((vals_eq, (rows_eq, cols_eq)), shape=(r, nv))

    # top-k membership counts: positions n_paths-k .. n_paths-1 in sorted order
    top_counts = np.zeros((n_paths - 1, n_levels))
    for k in range(1, n_paths):
        top_counts[k - 1] = np.bincount(level_of[n_paths - k:], minlength=n_levels)
    rows_ub, cols_ub, vals_ub, b_ub = [], [], [], []
    r = 0
    for i in range(n):
        bound = np.cumsum(np.sort(zn[:, i])[::-1])[:-1]
        for k in range(n_paths - 1):
            nz = np.flatnonzero(top_counts[k])
            rows_ub += [r] * nz.size
            cols_ub += list(i * n_levels + nz)
            vals_ub += list(top_counts[k, nz])
            b_ub.append(bound[k])
            r += 1
        for l in range(n_levels - 1):  # f[i, l] - f[i, l+1] <= 0
            rows_ub += [r, r]
            cols_ub += [i * n_levels + l, i * n_levels + l + 1]
            vals_ub += [1.0, -1.0]
            b_ub.append(0.0)
            r += 1
    a_ub = sparse.csr_matrix((vals_ub, (rows_ub, cols_ub)), shape=(r, nv))

    res = linprog(
        np.zeros(nv),
        A_ub=a_ub,
        b_ub=np.asarray(b_ub),
        A_eq=a_eq,
        b_eq=np.asarray(b_eq),
        bounds=(None, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise ParameterError(f"comonotone improvement LP failed: {res.message}")
    f = res.x.reshape(n, n_levels)
    f = np.maximum.accumulate(f, axis=1)
    out = np.empty_like(zn)
    out[order] = f[:, level_of].T
    out[:, -1] = v - out[:, :-1].sum(axis=1)
    return out * scale


def comonotone_improve(alloc: AllocationProcess, specs: Sequence[RiskSpec]) -> AllocationProcess:
    """Backward comonotone improvement: at each t, replace Y_t + R_t(improved
    tail) by a comonotone, convex-order smaller allocation of S_t + Rbar_t."""
    _check_specs(specs, alloc)
    ps = alloc.pathset
    if not ps.equal_weights:
        raise UnsupportedError("comonotone improvement requires equal-weight paths")
    y = np.array(alloc.values)
    r_t = np.zeros((ps.n_paths, alloc.n_agents))
    for t in range(ps.horizon, 0, -1):
        z = y[:, t - 1, :] + r_t
        zt = static_comonotone_improvement(z)
        y[:, t - 1, :] = zt - r_t
        y[:, t - 1, -1] += ps.aggregate(t) - y[:, t - 1, :].sum(axis=1)
        if t > 1:
            r_t = np.column_stack(
                [eval_one_step(s, t - 1, zt[:, i], ps) for i, s in enumerate(specs)]
            )
    return AllocationProcess(y, ps)


def improvement_orders(
    original: AllocationProcess, improved: AllocationProcess, specs: Sequence[RiskSpec]
) -> dict[tuple[int, int], str]:
    """Convex-order verdicts keyed by (t, agent): improved Y_t + R_t(improved
    tail) against original Y_t + R_t(improved tail)."""
    rtg = risk_to_go_matrix(specs, improved)
    ps = improved.pathset
    out = {}
    for t in range(1, ps.horizon + 1):
        for i in range(improved.n_agents):
            new = ps.law(improved.values[:, t - 1, i] + rtg[:, t, i])
            old = ps.law(original.values[:, t - 1, i] + rtg[:, t, i])
            out[(t, i)] = convex_order_leq(new, old)
    return out


# --------------------------------------------------------------------------
# individual rationality


def check_ir_t(
    specs: Sequence[RiskSpec], alloc: AllocationProcess, t: int, tol: float = TIE_TOL
) -> list[bool]:
    """Per agent: R_t(Y_{t+1:T}) <= R_t(X_{t+1:T}) on every path."""
    ps = alloc.pathset
    if ps.agent_endowments is None:
        raise ConfigError("individual rationality needs agent endowments")
    if not 0 <= t < ps.horizon:
        raise ParameterError(f"t must lie in 0..{ps.horizon - 1}")
    _check_specs(specs, alloc)
    out = []
    for i, s in enumerate(specs):
        ry = risk_to_go_values(s, alloc.agent(i), ps)[:, t]
        rx = risk_to_go_values(s, ps.agent_endowments[:, :, i], ps)[:, t]
        scale = max(1.0, float(np.abs(rx).max()))
        out.append(bool(np.all(ry <= rx + tol * scale)))
    return out


def check_dir(specs: Sequence[RiskSpec], alloc: AllocationProcess) -> list[bool]:
    """Dynamic IR per agent: IR at every t in 0..T-1."""
    per_t = [check_ir_t(specs, alloc, t) for t in range(alloc.pathset.horizon)]
    return [all(col) for col in zip(*per_t)]


# --------------------------------------------------------------------------
# CSV


def write_allocation_csv(alloc: AllocationProcess, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "period", "agent", "Y"])
        n_paths, horizon, n = alloc.values.shape
        for p in range(n_paths):
            for t in range(horizon):
                for i in range(n):
                    w.writerow([p, t + 1, i + 1, repr(float(alloc.values[p, t, i]))])


def read_allocation_csv(path: str | Path, pathset: SamplePathSet) -> AllocationProcess:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        recs = [(int(r["path_id"]), int(r["period"]), int(r["agent"]), float(r["Y"])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"malformed allocation row: {exc}") from None
    if not recs:
        raise IngestionError("empty allocation file")
    pids = sorted({r[0] for r in recs})
    index = {p: j for j, p in enumerate(pids)}
    n = max(r[2] for r in recs)
    if len(pids) != pathset.n_paths:
        raise IngestionError(f"allocation has {len(pids)} paths, path set {pathset.n_paths}")
    y = np.full((pathset.n_paths, pathset.horizon, n), np.nan)
    for p, t, i, val in recs:
        if not 1 <= t <= pathset.horizon or i < 1:
            raise IngestionError(f"bad period/agent index in row for path {p}")
        y[index[p], t - 1, i - 1] = val
    if np.isnan(y).any():
        raise IngestionError("allocation table is incomplete")
    return AllocationProcess(y, pathset)
