"""Brute-force ground truth on tiny instances.

Allocations are restricted to a share grid: in period t agent i receives
Y_t^{(i)} + R_t^{(i)} = (a_i / m) * (S_t + Rbar_t) with nonnegative integers
a_i summing to m. Every verdict is relative to that grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .allocation import (
    AllocationProcess,
    comonotone_defect,
    comonotone_improve,
    is_comonotone_process,
    risk_to_go_matrix,
)
from .dynrisk import RiskSpec, one_step_rows, risk_to_go_values, specs_horizon
from .errors import ConfigError, OracleBoundError, ParameterError
from .scenario import SamplePathSet, ScenarioTree

ENUMERATION_LIMIT = 10**7
PAIRWISE_LIMIT = 20_000
STRICT_GAP = 1e-9
CHUNK = 100_000
WHICH = ("PO_t", "CPO_t", "DPO", "CDPO", "MPO")


@dataclass(frozen=True)
class TinyInstance:
    pathset: SamplePathSet
    m: int

    def __post_init__(self):
        ps = self.pathset
        if isinstance(ps, ScenarioTree):
            object.__setattr__(self, "pathset", ps.to_pathset())
            ps = self.pathset
        if ps.n_paths > 8 or ps.horizon > 2:
            raise ParameterError("tiny instances allow at most 8 paths and 2 periods")
        if self.m < 1:
            raise ParameterError("grid resolution m must be >= 1")

    def enumeration_size(self, n_agents: int, periods: int) -> int:
        return (self.m + 1) ** ((n_agents - 1) * self.pathset.n_paths * periods)

    def check_bound(self, n_agents: int, periods: int) -> None:
        if n_agents > 3:
            raise ParameterError("tiny instances allow at most 3 agents")
        size = self.enumeration_size(n_agents, periods)
        if size > ENUMERATION_LIMIT:
            raise OracleBoundError(
                f"enumeration size {size} exceeds {ENUMERATION_LIMIT}; reduce m, paths or agents",
                size=size,
            )


def grid_note(m: int) -> str:
    return f"grid-relative: optimality certified only over allocations with shares in multiples of 1/{m}"


def compositions(n: int, m: int) -> np.ndarray:
    """All (a_1..a_n) of nonnegative integers summing to m, as rows."""
    rows = []
    for bars in combinations(range(m + n - 1), n - 1):
        prev, parts = -1, []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(m + n - 2 - prev)
        rows.append(parts)
    return np.array(rows, dtype=np.int64).reshape(-1, n)


def _decode(codes: np.ndarray, base: int, n_paths: int) -> np.ndarray:
    digits = np.empty((codes.size, n_paths), dtype=np.int64)
    rest = codes.copy()
    for p in range(n_paths):
        digits[:, p] = rest % base
        rest //= base
    return digits


def _comonotone_rows(z: np.ndarray, v: np.ndarray, tol: float) -> np.ndarray:
    """z: K x N x n shares of aggregate v (length N). True where each agent's
    values are nondecreasing in v and equal on ties of v."""
    order = np.argsort(v, kind="stable")
    zs = z[:, order, :]
    steps = np.diff(zs, axis=1)
    tied = np.diff(v[order]) <= tol
    ok = (steps >= -tol).all(axis=(1, 2))
    if tied.any():
        ok &= (np.abs(steps[:, tied, :]) <= tol).all(axis=(1, 2))
    return ok


@dataclass
class _PeriodBatch:
    codes: np.ndarray  # K share codes
    z: np.ndarray  # K x N x n transformed allocations
    risk: np.ndarray  # K x N x n one-step risk rho_{t-1}(z)
    comonotone: np.ndarray  # K


def _period_batches(inst, specs, t, r_next, comps, code_range=None):
    """Enumerate period-t share allocations in chunks. ``r_next`` is the
    N x n risk-to-go R_t of the fixed tail."""
    ps = inst.pathset
    n_paths = ps.n_paths
    v = ps.aggregate(t) + r_next.sum(axis=1)
    base = comps.shape[0]
    total = base**n_paths
    lo, hi = code_range or (0, total)
    tol = 1e-9 * max(1.0, float(np.abs(v).max()))
    groups = ps.groups(t) if ps.node_ids is not None else []
    for start in range(lo, hi, CHUNK):
        codes = np.arange(start, min(start + CHUNK, hi), dtype=np.int64)
        digits = _decode(codes, base, n_paths)
        # on a tree, paths through one period-t node must share their shares
        for idx in groups:
            if idx.size > 1:
                keep = (digits[:, idx] == digits[:, idx[:1]]).all(axis=1)
                codes, digits = codes[keep], digits[keep]
        z = comps[digits] * (v[None, :, None] / inst.m)
        risk = np.stack(
            [one_step_rows(s, t - 1, z[:, :, i], ps) for i, s in enumerate(specs)], axis=2
        )
        yield _PeriodBatch(codes, z, risk, _comonotone_rows(z, v, tol))


def _endowment_rtg(inst, specs):
    ps = inst.pathset
    if ps.agent_endowments is None:
        return None
    return np.stack(
        [risk_to_go_values(s, ps.agent_endowments[:, :, i], ps) for i, s in enumerate(specs)],
        axis=2,
    )


def _check_specs(inst, specs):
    if specs_horizon(specs) != inst.pathset.horizon:
        raise ConfigError("specs and instance disagree on the horizon")
    if inst.pathset.agent_endowments is not None and inst.pathset.n_agents != len(specs):
        raise ConfigError("endowments and specs disagree on the number of agents")


@dataclass
class OracleResult:
    best: float
    argmin: list[np.ndarray]  # Y_{t+1} (N x n) of every grid minimizer
    candidates: int
    feasible: int
    note: str = ""


def brute_force_cpo_t(
    inst: TinyInstance,
    specs: Sequence[RiskSpec],
    t: int,
    downstream: AllocationProcess | None = None,
    tol: float = 1e-9,
) -> OracleResult:
    """Minimize E[sum_i rho_t^{(i)}(Y_{t+1}^{(i)} + R_{t+1}^{(i)})] over
    comonotone, IR-at-t grid allocations of period t+1, with the periods
    after t+1 taken from ``downstream``."""
    specs = tuple(specs)
    _check_specs(inst, specs)
    ps = inst.pathset
    n = len(specs)
    if not 0 <= t < ps.horizon:
        raise ParameterError(f"t must lie in 0..{ps.horizon - 1}")
    inst.check_bound(n, 1)
    if t + 1 < ps.horizon:
        if downstream is None:
            raise ParameterError("a downstream allocation is required for t < T-1")
        r_next = risk_to_go_matrix(specs, downstream)[:, t + 1, :]
    else:
        r_next = np.zeros((ps.n_paths, n))
    endow = _endowment_rtg(inst, specs)
    comps = compositions(n, inst.m)
    best, argmin, count, feasible = np.inf, [], 0, 0
    for batch in _period_batches(inst, specs, t + 1, r_next, comps):
        count += batch.codes.size
        ok = batch.comonotone.copy()
        if endow is not None:
            scale = max(1.0, float(np.abs(endow).max()))
            ok &= (batch.risk <= endow[None, :, t, :] + tol * scale).all(axis=(1, 2))
        if not ok.any():
            continue
        feasible += int(ok.sum())
        obj = np.einsum("knj,n->k", batch.risk, ps.weights)
        obj[~ok] = np.inf
        cur = obj.min()
        slack = 1e-9 * max(1.0, abs(cur))
        if cur < best - slack:
            best, argmin = cur, []
        if cur <= best + slack:
            for k in np.flatnonzero(obj <= best + slack):
                y = batch.z[k] - r_next
                # distinct share codes coincide on paths with zero aggregate
                if not any(np.array_equal(y, other) for other in argmin):
                    argmin.append(y)
    return OracleResult(float(best), argmin, count, feasible, grid_note(inst.m))


# --------------------------------------------------------------------------
# full-process enumeration


def _process_batches(inst, specs):
    """Yield chunks of complete grid processes, built backward (T <= 2)."""
    ps = inst.pathset
    n, horizon, n_paths = len(specs), ps.horizon, ps.n_paths
    comps = compositions(n, inst.m)
    zero = np.zeros((n_paths, n))
    if horizon == 1:
        for b in _period_batches(inst, specs, 1, zero, comps):
            k = b.codes.size
            yield (
                b.codes[:, None],
                b.risk[:, None],
                b.comonotone,
                np.zeros((k, 1, n_paths, n)),
                [b.z],
            )
        return
    for outer in _period_batches(inst, specs, 2, zero, comps):
        for j in range(outer.codes.size):
            r1 = outer.risk[j]
            for inner in _period_batches(inst, specs, 1, r1, comps):
                k = inner.codes.size
                codes = np.column_stack([inner.codes, np.full(k, outer.codes[j])])
                profile = np.stack(
                    [inner.risk, np.broadcast_to(r1, inner.risk.shape)], axis=1
                )
                como = inner.comonotone & outer.comonotone[j]
                tail = np.zeros((k, 2, n_paths, n))
                tail[:, 0] = r1
                yield codes, profile, como, tail, [inner.z, np.broadcast_to(outer.z[j], inner.z.shape)]


def _process_from(z_list, r_tail, k, pathset) -> AllocationProcess:
    y = np.stack([z_list[t][k] - r_tail[k, t] for t in range(len(z_list))], axis=1)
    return AllocationProcess(y, pathset)


def _ir_mask(profile, endow, periods, tol):
    """profile: K x T x N x n. IR at every t in ``periods``."""
    if endow is None:
        return np.ones(profile.shape[0], dtype=bool)
    scale = max(1.0, float(np.abs(endow).max()))
    target = np.moveaxis(endow[:, : profile.shape[1], :], 1, 0)  # T x N x n
    ok = profile[:, periods] <= target[None, periods] + tol * scale
    return ok.all(axis=(1, 2, 3))


def _dominates(alt, ref, tol):
    """alt: K x D, ref: D. Weakly below everywhere, strictly below somewhere."""
    return (alt <= ref + tol).all(axis=1) & (alt < ref - tol).any(axis=1)


# --------------------------------------------------------------------------
# verdicts


@dataclass
class Verdict:
    which: str
    optimal: bool
    status: str  # "optimal", "dominated", "not_ir" or "not_comonotone"
    witness: AllocationProcess | None = None
    candidates: int = 0
    note: str = ""

    def to_json(self):
        d = {
            "which": self.which,
            "optimal": self.optimal,
            "status": self.status,
            "candidates": self.candidates,
            "note": self.note,
        }
        if self.witness is not None:
            d["witness"] = self.witness.values.tolist()
        return d


def _profile_of(specs, alloc):
    rtg = risk_to_go_matrix(specs, alloc)  # N x (T+1) x n
    return np.moveaxis(rtg[:, :-1, :], 1, 0)  # T x N x n


def verify_po_definition(
    inst: TinyInstance,
    specs: Sequence[RiskSpec],
    alloc: AllocationProcess,
    which: str,
    t: int = 0,
    tol: float = STRICT_GAP,
) -> Verdict:
    """Search the share grid for an allocation dominating ``alloc`` in the
    sense of ``which``. ``t`` selects the decision time for PO_t / CPO_t."""
    if which not in WHICH:
        raise ParameterError(f"which must be one of {WHICH}")
    specs = tuple(specs)
    _check_specs(inst, specs)
    ps = inst.pathset
    n = len(specs)
    note = grid_note(inst.m)
    endow = _endowment_rtg(inst, specs)
    ref = _profile_of(specs, alloc)  # T x N x n
    scale = max(1.0, float(np.abs(ref).max()))
    comonotone_needed = which in ("CPO_t", "CDPO")
    if which in ("PO_t", "CPO_t"):
        periods = [t]
    elif which == "MPO":
        periods = [0]
    else:
        periods = list(range(ps.horizon))
    # condition (i)
    if endow is not None:
        own = ref[periods] <= np.moveaxis(endow, 1, 0)[periods] + tol * max(
            1.0, float(np.abs(endow).max())
        )
        if not own.all():
            return Verdict(which, False, "not_ir", None, 0, note)
    if comonotone_needed:
        flags = is_comonotone_process(alloc, specs)
        relevant = flags[t:] if which == "CPO_t" else flags
        if not all(relevant):
            return Verdict(which, False, "not_comonotone", None, 0, note)

    if n == 1:
        return Verdict(which, True, "optimal", None, 1, note)

    if which in ("PO_t", "CPO_t"):
        if not 0 <= t < ps.horizon:
            raise ParameterError(f"t must lie in 0..{ps.horizon - 1}")
        inst.check_bound(n, 1)
        r_next = risk_to_go_matrix(specs, alloc)[:, t + 1, :]
        comps = compositions(n, inst.m)
        count = 0
        for b in _period_batches(inst, specs, t + 1, r_next, comps):
            count += b.codes.size
            ok = b.comonotone if comonotone_needed else np.ones(b.codes.size, dtype=bool)
            if endow is not None:
                ok = ok & _ir_mask(b.risk[:, None], endow[:, t : t + 1, :], [0], tol)
            hit = _dominates(b.risk.reshape(b.codes.size, -1), ref[t].ravel(), tol * scale) & ok
            if hit.any():
                k = int(np.flatnonzero(hit)[0])
                y = alloc.values.copy()
                y[:, t, :] = b.z[k] - r_next
                return Verdict(which, False, "dominated", AllocationProcess(y, ps), count, note)
        return Verdict(which, True, "optimal", None, count, note)

    inst.check_bound(n, ps.horizon)
    count = 0
    target = ref[periods].ravel()
    for codes, profile, como, tail, z_list in _process_batches(inst, specs):
        count += codes.shape[0]
        ok = _ir_mask(profile, endow, periods, tol)
        if comonotone_needed:
            ok &= como
        hit = _dominates(profile[:, periods].reshape(codes.shape[0], -1), target, tol * scale) & ok
        if hit.any():
            k = int(np.flatnonzero(hit)[0])
            witness = _process_from(z_list, tail, k, ps)
            return Verdict(which, False, "dominated", witness, count, note)
    return Verdict(which, True, "optimal", None, count, note)


@dataclass
class SetRelationReport:
    n_allocations: int
    n_ir: int
    n_comonotone: int
    dpo: np.ndarray  # indices into the grid table
    cdpo: np.ndarray
    demoted: list[int] = field(default_factory=list)
    violations: list[int] = field(default_factory=list)
    non_comonotone_dpo: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    max_dpo_defect: float = 0.0
    grid_slack: float = 0.0
    note: str = ""

    @property
    def inclusion_holds(self) -> bool:
        return not self.violations

    @property
    def dpo_comonotone_within_slack(self) -> bool:
        return self.max_dpo_defect <= self.grid_slack

    def lines(self) -> list[str]:
        return [
            f"grid allocations: {self.n_allocations} (IR {self.n_ir}, comonotone {self.n_comonotone})",
            f"grid-DPO: {len(self.dpo)}, grid-CDPO: {len(self.cdpo)}, demoted by improvement: {len(self.demoted)}",
            f"CDPO subset of DPO: {'yes' if self.inclusion_holds else 'NO'}",
            f"non-comonotone grid-DPO allocations: {len(self.non_comonotone_dpo)}",
            self.note,
        ]


def _undominated(points: np.ndarray, pool: np.ndarray, tol: float) -> np.ndarray:
    """Boolean mask over ``points``: not dominated by any row of ``pool``."""
    keep = np.ones(points.shape[0], dtype=bool)
    step = max(1, 2_000_000 // max(1, pool.shape[0] * points.shape[1]))
    for a in range(0, points.shape[0], step):
        p = points[a : a + step]
        weak = (pool[None, :, :] <= p[:, None, :] + tol).all(axis=2)
        strict = (pool[None, :, :] < p[:, None, :] - tol).any(axis=2)
        keep[a : a + step] = ~(weak & strict).any(axis=1)
    return keep


def check_set_relations(
    inst: TinyInstance, specs: Sequence[RiskSpec], tol: float = STRICT_GAP
) -> SetRelationReport:
    """Compute grid-DPO and grid-CDPO over every grid process and test
    CDPO within DPO.

    A comonotone grid process dominated by some grid process B is checked
    against the comonotone improvement of B: if that improvement dominates
    too, the process was only optimal relative to the sparser comonotone
    grid and is dropped from grid-CDPO; otherwise the inclusion fails.
    """
    specs = tuple(specs)
    _check_specs(inst, specs)
    ps = inst.pathset
    n = len(specs)
    inst.check_bound(n, ps.horizon)
    size = inst.enumeration_size(n, ps.horizon)
    if size > PAIRWISE_LIMIT:
        raise OracleBoundError(
            f"pairwise set relations need at most {PAIRWISE_LIMIT} grid processes, got {size}",
            size=size,
        )
    parts = list(_process_batches(inst, specs))
    profile = np.concatenate([p[1] for p in parts])
    como = np.concatenate([p[2] for p in parts])
    tails = np.concatenate([p[3] for p in parts])
    z_lists = [np.concatenate([p[4][t] for p in parts]) for t in range(ps.horizon)]
    k_total = profile.shape[0]
    flat = profile.reshape(k_total, -1)
    scale = max(1.0, float(np.abs(flat).max()))
    atol = tol * scale
    endow = _endowment_rtg(inst, specs)
    ir = _ir_mask(profile, endow, list(range(ps.horizon)), tol)

    ir_idx = np.flatnonzero(ir)
    dpo_mask = _undominated(flat[ir_idx], flat[ir_idx], atol)
    dpo = ir_idx[dpo_mask]

    cir_idx = np.flatnonzero(ir & como)
    cdpo_mask = _undominated(flat[cir_idx], flat[cir_idx], atol)
    cdpo_cand = cir_idx[cdpo_mask]

    dpo_set = set(dpo.tolist())
    cdpo, demoted, violations = [], [], []
    for k in cdpo_cand:
        if k in dpo_set:
            cdpo.append(int(k))
            continue
        pool = flat[ir_idx]
        dom = _dominates(pool, flat[k], atol)
        b = int(ir_idx[np.flatnonzero(dom)[0]])
        improved = comonotone_improve(_process_from(z_lists, tails, b, ps), specs)
        imp = _profile_of(specs, improved).ravel()
        if _dominates(imp[None, :], flat[k], atol)[0]:
            demoted.append(int(k))
        else:
            violations.append(int(k))
            cdpo.append(int(k))

    # comonotonicity defect of grid-DPO processes, per period
    defects = []
    for k in dpo:
        d = 0.0
        for t in range(ps.horizon):
            d = max(d, comonotone_defect(z_lists[t][k]))
        defects.append(d)
    defects = np.array(defects)
    vmax = max(float(np.abs(z).max()) for z in z_lists)
    slack = vmax / inst.m
    return SetRelationReport(
        n_allocations=k_total,
        n_ir=int(ir.sum()),
        n_comonotone=int(como.sum()),
        dpo=dpo,
        cdpo=np.array(cdpo, dtype=int),
        demoted=demoted,
        violations=violations,
        non_comonotone_dpo=dpo[~como[dpo]] if dpo.size else np.empty(0, dtype=int),
        max_dpo_defect=float(defects.max()) if defects.size else 0.0,
        grid_slack=slack,
        note=grid_note(inst.m),
    )


def grid_process(inst: TinyInstance, specs, index: int) -> AllocationProcess:
    """Rebuild the grid process with table index ``index`` (enumeration order)."""
    seen = 0
    for codes, _, _, tail, z_list in _process_batches(inst, specs):
        k = codes.shape[0]
        if index < seen + k:
            return _process_from(z_list, tail, index - seen, inst.pathset)
        seen += k
    raise ParameterError("grid index out of range")
