"""Backward-recursive solver for comonotone dynamic Pareto optima with
distortion-type agents, plus the myopic comparison tools."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .allocation import (
    AllocationProcess,
    RetentionFn,
    RetentionPeriod,
    RetentionSchedule,
    check_dir,
    is_comonotone_process,
    retention_to_allocation,
    risk_to_go_matrix,
)
from .distortion import DistortionFn, choquet_rows, mix
from .dynrisk import PeriodSpec, RiskSpec, eval_one_step, risk_to_go_values, specs_horizon
from .errors import ConfigError, InfeasibleError, ParameterError, ShapeError, UnsupportedError
from .scenario import EmpiricalDist, SamplePathSet, essinf

TIE_POLICIES = ("lowest-index", "equal-split", "exhaustive")
C_POLICIES = ("egalitarian-slack", "uniform", "none")
MAX_CANDIDATES = 64
_K_TOL = 1e-12


def compose_expected_distortion(period: PeriodSpec, pathset: SamplePathSet) -> DistortionFn:
    """k* with E[rho(X)] = I_{k*}(X): regime distortions mixed by their
    empirical path frequencies."""
    if period.mode != "marginal":
        raise UnsupportedError("the solver handles marginal-mode specs only")
    probs = period.regimes.regime_probabilities(pathset)
    parts = [(float(p), r.distortion) for p, r in zip(probs, period.regimes.regimes) if p > 0]
    total = sum(p for p, _ in parts)
    parts = [(p / total, k) for p, k in parts]
    return mix(parts)


@dataclass(frozen=True)
class TailAssessment:
    """Argmin structure of the composed distortions over the support of
    W = S_t + Rbar_t - r - s.

    ``support`` holds the sorted distinct values of W. Interval j is
    [support[j], support[j+1]); on it P(W > x) equals ``survival[j]`` and
    ``argmin[j]`` lists the agents with the smallest k_i at that level.
    """

    t: int
    k_stars: tuple[DistortionFn, ...]
    support: np.ndarray
    survival: np.ndarray
    argmin: tuple[tuple[int, ...], ...]
    thresholds: tuple[float, ...]
    r_base: float
    s_base: float

    @property
    def n_agents(self) -> int:
        return len(self.k_stars)

    @property
    def threshold(self) -> float | None:
        """First switch point of L in W-space."""
        return self.thresholds[0] if self.thresholds else None

    @property
    def x_star(self) -> float | None:
        """First switch point on the scale of S_t + Rbar_t."""
        return None if self.threshold is None else self.threshold + self.r_base + self.s_base

    def argmin_at(self, x: float) -> tuple[int, ...]:
        """L(x) for x in x-space; outside the interior intervals every agent ties."""
        j = int(np.searchsorted(self.support, x, side="right")) - 1
        if j < 0 or j >= len(self.argmin):
            return tuple(range(self.n_agents))
        return self.argmin[j]


def tail_assessment(
    t: int, k_stars: Sequence[DistortionFn], combined: EmpiricalDist, r: float, s: float
) -> TailAssessment:
    xs, masses = combined.atoms()
    if xs.size == 0:
        raise ParameterError("empty aggregate distribution")
    support, inverse = np.unique(np.maximum(xs - r - s, 0.0), return_inverse=True)
    masses = np.bincount(inverse, weights=masses, minlength=support.size)
    # P(W > w_j) for the interior intervals
    survival = np.clip(np.cumsum(masses[::-1])[::-1][1:], 0.0, 1.0)
    kv = np.array([k(survival) for k in k_stars]).reshape(len(k_stars), -1)
    argmin = []
    for j in range(support.size - 1):
        col = kv[:, j]
        argmin.append(tuple(int(i) for i in np.flatnonzero(col <= col.min() + _K_TOL)))
    thresholds = tuple(
        float(support[j]) for j in range(1, len(argmin)) if argmin[j] != argmin[j - 1]
    )
    return TailAssessment(
        t=t,
        k_stars=tuple(k_stars),
        support=support,
        survival=survival,
        argmin=tuple(argmin),
        thresholds=thresholds,
        r_base=float(r),
        s_base=float(s),
    )


@dataclass
class PeriodReport:
    t: int
    objective: float
    candidates: int
    truncated: bool
    tie_policy: str
    c_policy: str
    thresholds: list[float]
    s_base: float
    r_base: float
    premia: list[float]
    premia_bounds: list[float] | None = None
    ir_feasible: list[bool] | None = None

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class SolveReport:
    periods: list[PeriodReport] = field(default_factory=list)
    expected_total_risk: float = float("nan")
    dynamic_ir: list[bool] | None = None
    comonotone: list[bool] | None = None

    def period(self, t: int) -> PeriodReport:
        return next(p for p in self.periods if p.t == t)

    def to_json(self):
        return {
            "periods": [p.to_json() for p in sorted(self.periods, key=lambda p: p.t)],
            "expected_total_risk": self.expected_total_risk,
            "dynamic_ir": self.dynamic_ir,
            "comonotone": self.comonotone,
        }


def _tie_regions(argmin) -> list[tuple[int, int]]:
    """Maximal runs [a, b) of interior intervals sharing one multi-agent set."""
    regions, j = [], 0
    while j < len(argmin):
        if len(argmin[j]) > 1:
            b = j
            while b < len(argmin) and argmin[b] == argmin[j]:
                b += 1
            regions.append((j, b))
            j = b
        else:
            j += 1
    return regions


def _slope_candidates(assessment: TailAssessment, tie_policy: str):
    """Yield (slopes n x J) matrices over the interior intervals and report
    whether the enumeration was cut at MAX_CANDIDATES."""
    n, n_int = assessment.n_agents, len(assessment.argmin)
    base = np.zeros((n, max(n_int, 1)))
    if n_int == 0:
        # W is degenerate: one region spanning everything, all agents tied
        argmin = (tuple(range(n)),)
    else:
        argmin = assessment.argmin
    for j, members in enumerate(argmin):
        if tie_policy == "equal-split":
            base[list(members), j] = 1.0 / len(members)
        else:
            base[members[0], j] = 1.0
    if tie_policy != "exhaustive":
        return [base], False
    regions = _tie_regions(argmin)
    choices = [argmin[a] for a, _ in regions]
    total = int(np.prod([len(c) for c in choices])) if choices else 1
    out = []
    for combo in itertools.islice(itertools.product(*choices), MAX_CANDIDATES):
        h = base.copy()
        for (a, b), agent in zip(regions, combo):
            h[:, a:b] = 0.0
            h[agent, a:b] = 1.0
        out.append(h)
    return out, total > MAX_CANDIDATES


def _retention_from_slopes(assessment: TailAssessment, h: np.ndarray) -> list[RetentionFn]:
    # below the smallest support point and above the largest one every k_i
    # takes the same value (1 resp. 0), so the neighbouring assignment is
    # extended there
    edges = np.concatenate([[0.0], assessment.support[1:-1]])
    return [RetentionFn.from_slopes(edges, h[i, : edges.size]) for i in range(h.shape[0])]


def period_objective(retention: Sequence[RetentionFn], k_stars, w: np.ndarray, weights) -> float:
    """sum_i I_{k*_i}(g_i(W))."""
    return float(
        sum(choquet_rows(k, g(w)[None, :], weights)[0] for g, k in zip(retention, k_stars))
    )


def _premia(
    c_policy, t, retention, w, specs, pathset, endow_targets, r_base, s_base
) -> tuple[np.ndarray, list[float] | None, list[bool] | None]:
    n = len(retention)
    base = r_base + s_base
    if c_policy == "none":
        return np.full(n, base / n), None, None
    if endow_targets is None:
        if c_policy == "uniform":
            return np.full(n, base / n), None, None
        raise ConfigError("premia policy 'egalitarian-slack' needs agent endowments")
    bounds = []
    for i, (g, spec) in enumerate(zip(retention, specs)):
        own = eval_one_step(spec, t - 1, g(w), pathset)
        gap = endow_targets[:, i] - own
        bounds.append(float(gap[pathset.weights > 0].min()))
    bounds_arr = np.array(bounds)
    if c_policy == "uniform":
        c = np.full(n, base / n)
    else:
        if bounds_arr.sum() < base - 1e-9 * max(1.0, abs(base)):
            raise InfeasibleError(
                f"premia bounds at t={t} sum to {bounds_arr.sum():.6g} < {base:.6g}",
                agents=tuple(range(n)),
            )
        c = bounds_arr - (bounds_arr.sum() - base) / n
    feasible = [bool(ci <= b + 1e-9 * max(1.0, abs(b))) for ci, b in zip(c, bounds_arr)]
    return c, bounds, feasible


def solve_time_step(
    t: int,
    assessment: TailAssessment,
    w: np.ndarray,
    specs: Sequence[RiskSpec],
    pathset: SamplePathSet,
    tie_policy: str = "lowest-index",
    c_policy: str = "egalitarian-slack",
    endow_targets: np.ndarray | None = None,
) -> tuple[RetentionPeriod, PeriodReport]:
    """Retention functions and premia for period t.

    ``w`` is W = S_t + Rbar_t - r - s per path, built from the already
    solved tail. ``endow_targets[:, i]`` holds rho_{t-1}(X_t + R_t(X)) for
    agent i and is needed by the IR-aware premia policies.
    """
    if tie_policy not in TIE_POLICIES:
        raise ConfigError(f"unknown tie policy {tie_policy!r}")
    if c_policy not in C_POLICIES:
        raise ConfigError(f"unknown premia policy {c_policy!r}")
    candidates, truncated = _slope_candidates(assessment, tie_policy)
    best = None
    for h in candidates:
        funcs = _retention_from_slopes(assessment, h)
        obj = period_objective(funcs, assessment.k_stars, w, pathset.weights)
        if best is None or obj < best[0] - 1e-12 * max(1.0, abs(obj)):
            best = (obj, funcs)
    objective, funcs = best
    premia, bounds, feasible = _premia(
        c_policy, t, funcs, w, specs, pathset, endow_targets, assessment.r_base, assessment.s_base
    )
    entry = RetentionPeriod(t, tuple(funcs), premia, assessment.s_base, assessment.r_base)
    report = PeriodReport(
        t=t,
        objective=objective,
        candidates=len(candidates),
        truncated=truncated,
        tie_policy=tie_policy,
        c_policy=c_policy,
        thresholds=list(assessment.thresholds),
        s_base=assessment.s_base,
        r_base=assessment.r_base,
        premia=[float(c) for c in premia],
        premia_bounds=bounds,
        ir_feasible=feasible,
    )
    return entry, report


@dataclass(frozen=True)
class SolveConfig:
    agents: tuple[RiskSpec, ...]
    pathset: SamplePathSet
    tie_policy: str = "lowest-index"
    c_policy: str = "egalitarian-slack"

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.agents:
            raise ConfigError("at least one agent required")
        if specs_horizon(self.agents) != self.pathset.horizon:
            raise ConfigError("risk specs and scenario disagree on the horizon")
        if self.pathset.agent_endowments is not None and (
            self.pathset.n_agents != len(self.agents)
        ):
            raise ConfigError("endowments and agent list disagree on the number of agents")
        if self.tie_policy not in TIE_POLICIES:
            raise ConfigError(f"unknown tie policy {self.tie_policy!r}")
        if self.c_policy not in C_POLICIES:
            raise ConfigError(f"unknown premia policy {self.c_policy!r}")


@dataclass(frozen=True)
class SolveResult:
    allocation: AllocationProcess
    schedule: RetentionSchedule
    report: SolveReport
    assessments: tuple[TailAssessment, ...]  # ordered t = 1..T
    specs: tuple[RiskSpec, ...] = ()

    def assessment(self, t: int) -> TailAssessment:
        return self.assessments[t - 1]


def solve_cdpo(config: SolveConfig) -> SolveResult:
    specs, ps = config.agents, config.pathset
    for s in specs:
        if "tree" in s.modes:
            raise UnsupportedError("tree-mode risk specs are handled by the oracle only")
    n, horizon = len(specs), ps.horizon
    endow_rtg = None
    if ps.agent_endowments is not None:
        endow_rtg = np.stack(
            [risk_to_go_values(s, ps.agent_endowments[:, :, i], ps) for i, s in enumerate(specs)],
            axis=2,
        )
    r_next = np.zeros((ps.n_paths, n))
    entries, reports, assessments = [], [], []
    for t in range(horizon, 0, -1):
        aggregate = ps.aggregate(t)
        r_bar = r_next.sum(axis=1)
        combined = ps.law(aggregate + r_bar)
        s_base = essinf(ps.law(aggregate))
        r_base = essinf(ps.law(r_bar))
        k_stars = [compose_expected_distortion(s.periods[t - 1], ps) for s in specs]
        assessment = tail_assessment(t, k_stars, combined, r_base, s_base)
        w = np.maximum(aggregate + r_bar - r_base - s_base, 0.0)
        targets = None if endow_rtg is None else endow_rtg[:, t - 1, :]
        entry, report = solve_time_step(
            t, assessment, w, specs, ps, config.tie_policy, config.c_policy, targets
        )
        entries.append(entry)
        reports.append(report)
        assessments.append(assessment)
        r_next = np.column_stack(
            [
                eval_one_step(s, t - 1, entry.retention[i](w) + entry.premia[i], ps)
                for i, s in enumerate(specs)
            ]
        )
    schedule = RetentionSchedule(tuple(entries))
    alloc = retention_to_allocation(schedule, specs, ps)
    rtg = risk_to_go_matrix(specs, alloc)
    report = SolveReport(
        periods=sorted(reports, key=lambda p: p.t),
        expected_total_risk=float(ps.weights @ rtg[:, 0, :].sum(axis=1)),
        dynamic_ir=check_dir(specs, alloc) if ps.agent_endowments is not None else None,
        comonotone=is_comonotone_process(alloc, specs),
    )
    return SolveResult(alloc, schedule, report, tuple(reversed(assessments)), tuple(specs))


# --------------------------------------------------------------------------
# myopic comparison


def evaluate_myopic(specs: Sequence[RiskSpec], alloc: AllocationProcess, agent: int) -> float:
    """rho_0(rho_1(... rho_{T-1}(sum_t Y_t))) for one agent.

    Tree-mode periods apply the conditional measure to the whole running
    sum. A marginal-mode measure only sees unconditional laws, so the part
    of the sum already known at time t (Y_1 + ... + Y_t) is passed through
    by conditional translation invariance and the measure acts on the rest.
    """
    spec = specs[agent]
    ps = alloc.pathset
    if spec.horizon != ps.horizon:
        raise ShapeError("spec and allocation disagree on the horizon")
    y = alloc.values[:, :, agent]
    total = y.sum(axis=1)
    for t in range(ps.horizon - 1, -1, -1):
        if spec.periods[t].mode == "tree":
            total = eval_one_step(spec, t, total, ps)
        else:
            known = y[:, :t].sum(axis=1)
            total = known + eval_one_step(spec, t, total - known, ps)
    return float(ps.weights @ total)


@dataclass(frozen=True)
class MyopicConsistency:
    myopic: float
    dynamic: float

    @property
    def gap(self) -> float:
        return self.myopic - self.dynamic

    def consistent(self, tol: float = 1e-9) -> bool:
        return abs(self.gap) <= tol * max(1.0, abs(self.dynamic))


def myopic_consistency(specs, alloc: AllocationProcess, agent: int) -> MyopicConsistency:
    dyn = risk_to_go_values(specs[agent], alloc.agent(agent), alloc.pathset)[:, 0]
    return MyopicConsistency(
        evaluate_myopic(specs, alloc, agent), float(alloc.pathset.weights @ dyn)
    )


@dataclass(frozen=True)
class MyopicReport:
    applicable: bool
    reason: str = ""
    bound: float = float("nan")
    attained: float = float("nan")

    @property
    def gap(self) -> float:
        return self.attained - self.bound

    @property
    def relative_gap(self) -> float:
        return self.gap / max(abs(self.bound), 1e-12)

    def attains(self, rel_tol: float = 0.01) -> bool:
        return self.applicable and self.gap <= rel_tol * max(abs(self.bound), 1e-12)

    def to_json(self):
        return {
            "applicable": self.applicable,
            "reason": self.reason,
            "bound": self.bound,
            "attained": self.attained,
            "gap": self.gap if self.applicable else None,
        }


def _is_expectation_at_zero(spec: RiskSpec) -> bool:
    return all(d.is_identity for d in spec.periods[0].regimes.distortions)


def verify_myopic_optimality(specs: Sequence[RiskSpec], alloc: AllocationProcess) -> MyopicReport:
    """Compare sum_i rho_{0,2}^{(i)}(Y) with the lower bound
    E[S_1] + s_2 + min over comonotone splits of E[sum_i rho_1^{(i)}(g_i(S_2 - s_2))]."""
    ps = alloc.pathset
    if ps.horizon != 2:
        return MyopicReport(False, "requires a two-period instance")
    if not any(_is_expectation_at_zero(s) for s in specs):
        return MyopicReport(False, "no agent evaluates with the expectation at time 0")
    if any("tree" in s.modes for s in specs):
        return MyopicReport(False, "bound is computed for marginal-mode agents only")
    s2 = ps.aggregate(2)
    s_base = essinf(ps.law(s2))
    k_stars = [compose_expected_distortion(s.periods[1], ps) for s in specs]
    assessment = tail_assessment(2, k_stars, ps.law(s2), 0.0, s_base)
    w = np.maximum(s2 - s_base, 0.0)
    _, rep = solve_time_step(2, assessment, w, specs, ps, "lowest-index", "none")
    bound = float(ps.weights @ ps.aggregate(1)) + s_base + rep.objective
    rtg = risk_to_go_matrix(specs, alloc)
    attained = float(ps.weights @ rtg[:, 0, :].sum(axis=1))
    return MyopicReport(True, "", bound, attained)
