"""Command-line front end.

Exit codes: 0 ok, 2 configuration or input error, 3 IR infeasible,
4 unsupported solver mode, 5 oracle enumeration bound exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import example
from .allocation import (
    AllocationProcess,
    check_dir,
    comonotone_improve,
    improvement_orders,
    is_comonotone_process,
    read_allocation_csv,
    risk_to_go_matrix,
    write_allocation_csv,
)
from .distortion import intersect
from .dynrisk import RiskSpec
from .errors import ConfigError, DynPOError
from .oracle import WHICH, TinyInstance, check_set_relations, verify_po_definition
from .paretosolve import (
    C_POLICIES,
    TIE_POLICIES,
    SolveConfig,
    SolveResult,
    myopic_consistency,
    solve_cdpo,
    verify_myopic_optimality,
)
from .scenario import (
    SamplePathSet,
    ScenarioTree,
    empirical_survival,
    generate_exponential_chain,
    read_paths_csv,
    write_paths_csv,
)

FIGURES = ("fig1", "fig2", "fig3", "fig4", "fig5")

# acceptance bands for the built-in example at 100k paths
X_STAR_BAND = (740.0, 820.0)
REGIME_TARGETS = ((200.0, 4.0), (464.7, 15.0), (1074.1, 40.0))
FULL_SAMPLE = 100_000


@dataclass
class RunConfig:
    agents: list[RiskSpec]
    scenario: dict
    tie_policy: str = "lowest-index"
    c_policy: str = "egalitarian-slack"
    seed: int = 0
    n_paths: int = 1000
    base_dir: Path = field(default_factory=Path.cwd)
    m: int = 8
    which: str = "CDPO"
    t: int = 0

    def __post_init__(self):
        if not self.agents:
            raise ConfigError("config lists no agents")
        if int(self.n_paths) < 1:
            raise ConfigError("n_paths must be >= 1")
        if self.tie_policy not in TIE_POLICIES:
            raise ConfigError(f"tie_policy must be one of {TIE_POLICIES}")
        if self.c_policy not in C_POLICIES:
            raise ConfigError(f"c_policy must be one of {C_POLICIES}")
        if self.which not in WHICH:
            raise ConfigError(f"which must be one of {WHICH}")

    @classmethod
    def from_json(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        try:
            agents = [RiskSpec.from_json(a) for a in d["agents"]]
            scenario = d["scenario"]
        except KeyError as exc:
            raise ConfigError(f"config misses key {exc}") from None
        return cls(
            agents=agents,
            scenario=scenario,
            tie_policy=d.get("tie_policy", "lowest-index"),
            c_policy=d.get("c_policy", "egalitarian-slack"),
            seed=int(d.get("seed", 0)),
            n_paths=int(d.get("n_paths", 1000)),
            base_dir=base_dir or Path.cwd(),
            m=int(d.get("m", 8)),
            which=d.get("which", "CDPO"),
            t=int(d.get("t", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_json(data, path.parent)

    def pathset(self) -> SamplePathSet:
        sc = self.scenario
        if "generator" in sc:
            if sc["generator"] != "exponential_chain":
                raise ConfigError(f"unknown generator {sc['generator']!r}")
            return generate_exponential_chain(self.n_paths, float(sc.get("mean0", 200.0)), self.seed)
        if "csv" in sc:
            target = Path(sc["csv"])
            if not target.is_absolute():
                target = self.base_dir / target
            if not target.is_file():
                raise ConfigError(f"scenario file {target} not found")
            return read_paths_csv(target)
        if "tree" in sc:
            return ScenarioTree.from_dict(sc["tree"]).to_pathset()
        if "paths" in sc:
            endow = sc.get("endowments")
            return SamplePathSet(
                np.asarray(sc["paths"], dtype=float),
                None if sc.get("weights") is None else np.asarray(sc["weights"], dtype=float),
                None if endow is None else np.asarray(endow, dtype=float),
            )
        raise ConfigError("scenario needs 'generator', 'csv', 'tree' or 'paths'")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.paths is not None:
        cfg.n_paths = args.paths
    return cfg


def _solve(cfg: RunConfig, pathset: SamplePathSet | None = None) -> SolveResult:
    ps = pathset or cfg.pathset()
    return solve_cdpo(SolveConfig(tuple(cfg.agents), ps, cfg.tie_policy, cfg.c_policy))


def _write_solution(res: SolveResult, out: Path) -> None:
    _dump(res.schedule.to_json(), out / "retention.json")
    write_allocation_csv(res.allocation, out / "allocation.csv")
    _dump(res.report.to_json(), out / "report.json")
    write_paths_csv(res.allocation.pathset, out / "paths.csv")


def cmd_solve(args) -> int:
    cfg = _config(args)
    res = _solve(cfg)
    out = _out_dir(args)
    _write_solution(res, out)
    print(f"solved {len(cfg.agents)} agents over {res.allocation.pathset.horizon} periods")
    print(f"expected total risk-to-go at time 0: {res.report.expected_total_risk:.6g}")
    print(f"artifacts written to {out}")
    return 0


def _load_allocation(args, cfg: RunConfig, ps: SamplePathSet) -> AllocationProcess:
    if args.allocation:
        return read_allocation_csv(args.allocation, ps)
    return _solve(cfg, ps).allocation


def _evaluation(specs, alloc: AllocationProcess) -> dict:
    ps = alloc.pathset
    rtg = risk_to_go_matrix(specs, alloc)
    agents = []
    for i in range(alloc.n_agents):
        mc = myopic_consistency(specs, alloc, i)
        agents.append(
            {
                "agent": i + 1,
                "expected_risk_to_go": [float(ps.weights @ rtg[:, t, i]) for t in range(ps.horizon)],
                "myopic": mc.myopic,
                "dynamic_t0": mc.dynamic,
                "myopic_consistent": mc.consistent(),
            }
        )
    out = {"agents": agents, "comonotone": is_comonotone_process(alloc, specs)}
    if ps.agent_endowments is not None:
        out["dynamic_ir"] = check_dir(specs, alloc)
    return out


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ps = _scenario_for(args, cfg)
    alloc = _load_allocation(args, cfg, ps)
    report = _evaluation(cfg.agents, alloc)
    out = _out_dir(args)
    _dump(report, out / "evaluation.json")
    for a in report["agents"]:
        print(f"agent {a['agent']}: E[R_t] = {[round(v, 6) for v in a['expected_risk_to_go']]}")
    print(f"comonotone per period: {report['comonotone']}")
    return 0


def _scenario_for(args, cfg: RunConfig) -> SamplePathSet:
    if getattr(args, "paths_csv", None):
        return read_paths_csv(args.paths_csv)
    return cfg.pathset()


def cmd_improve(args) -> int:
    cfg = _config(args)
    ps = _scenario_for(args, cfg)
    if not args.allocation:
        raise ConfigError("--allocation is required for improve")
    alloc = read_allocation_csv(args.allocation, ps)
    better = comonotone_improve(alloc, cfg.agents)
    order = {
        f"t{t}_agent{i + 1}": verdict
        for (t, i), verdict in improvement_orders(alloc, better, cfg.agents).items()
    }
    out = _out_dir(args)
    write_allocation_csv(better, out / "improved_allocation.csv")
    _dump(
        {"convex_order": order, "comonotone": is_comonotone_process(better, cfg.agents)},
        out / "improve_report.json",
    )
    print(f"comonotone per period: {is_comonotone_process(better, cfg.agents)}")
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    ps = _scenario_for(args, cfg)
    inst = TinyInstance(ps, cfg.m)
    alloc = _load_allocation(args, cfg, ps)
    verdict = verify_po_definition(inst, cfg.agents, alloc, cfg.which, cfg.t)
    report = {"verdict": verdict.to_json()}
    if args.relations:
        rel = check_set_relations(inst, cfg.agents)
        report["set_relations"] = {
            "lines": rel.lines(),
            "inclusion_holds": rel.inclusion_holds,
            "dpo": rel.dpo.tolist(),
            "cdpo": rel.cdpo.tolist(),
        }
    out = _out_dir(args)
    _dump(report, out / "verify.json")
    print(f"{cfg.which}: {verdict.status} ({verdict.candidates} grid candidates)")
    print(verdict.note)
    if args.relations:
        for line in report["set_relations"]["lines"]:
            print(line)
    return 0


def replicate_example(seed: int = 1, n_paths: int = FULL_SAMPLE) -> tuple[SolveResult, list[tuple[str, bool, str]]]:
    """Solve the built-in example and grade it against the acceptance bands.

    Returns the solution and (label, passed, detail) rows.
    """
    specs = example.example_specs()
    ps = generate_exponential_chain(n_paths, example.MEAN0, seed)
    res = solve_cdpo(SolveConfig(specs, ps, "lowest-index", "none"))
    checks = []
    k1, k2 = (res.assessment(2).k_stars[i] for i in range(2))
    u = intersect(k1, k2)
    u_ok = len(u) == 1 and abs(u[0] - example.U_STAR) <= 1e-12
    checks.append(("u*", u_ok, f"{u[0] if u else float('nan'):.12f} (target {example.U_STAR:.12f})"))
    x_star = res.assessment(2).x_star
    x_ok = x_star is not None and X_STAR_BAND[0] <= x_star <= X_STAR_BAND[1]
    checks.append(("x*", x_ok, f"{x_star if x_star is not None else float('nan'):.2f} in {list(X_STAR_BAND)}"))
    rtg = risk_to_go_matrix(specs, res.allocation)
    regimes = _regime_values(rtg[:, 1, :].sum(axis=1))
    for (target, band), value in zip(REGIME_TARGETS, regimes + [float("nan")] * 3):
        ok = abs(value - target) <= band
        checks.append((f"Rbar_1 ~ {target}", ok, f"{value:.2f} (+-{band})"))
    g = res.schedule[1].retention
    w = np.concatenate([[0.0], res.assessment(1).support, [1e9]])
    retention_ok = bool(np.all(g[0](w) == 0.0) and np.all(g[1](w) == w))
    checks.append(("time-1 retention", retention_ok, "agent 1 retains nothing, agent 2 retains all"))
    return res, checks


def _regime_values(r_bar: np.ndarray) -> list[float]:
    return sorted(float(v) for v in np.unique(r_bar))


def cmd_replicate_example(args) -> int:
    seed = 1 if args.seed is None else args.seed
    n_paths = FULL_SAMPLE if args.paths is None else args.paths
    res, checks = replicate_example(seed, n_paths)
    if n_paths < FULL_SAMPLE:
        print(
            f"warning: {n_paths} paths is below {FULL_SAMPLE}; "
            "Monte Carlo bands are calibrated for the full sample and may not hold"
        )
    for label, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
    if args.out:
        out = _out_dir(args)
        _write_solution(res, out)
        _dump(
            {"seed": seed, "n_paths": n_paths, "checks": [{"label": l, "passed": ok, "detail": d} for l, ok, d in checks]},
            out / "replication.json",
        )
    return 0


# --------------------------------------------------------------------------
# plot data


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def _x_grid(values: np.ndarray, points: int = 501) -> np.ndarray:
    hi = float(np.quantile(values, 0.999))
    return np.linspace(0.0, hi, points)


def plot_data(res: SolveResult, out: Path, which) -> list[Path]:
    ps = res.allocation.pathset
    n = res.allocation.n_agents
    names = [f"agent{i + 1}" for i in range(n)]
    written = []
    horizon = ps.horizon
    rtg = risk_to_go_matrix(res.specs, res.allocation)
    for fig in which:
        path = out / f"{fig}.csv"
        if fig == "fig1":
            ks = res.assessment(horizon).k_stars
            u = np.unique(np.concatenate([np.linspace(0, 1, 1001)] + [k.u for k in ks]))
            _write_csv(path, ["u"] + names, np.column_stack([u] + [k(u) for k in ks]))
        elif fig in ("fig2", "fig4"):
            t = horizon if fig == "fig2" else 1
            a = res.assessment(t)
            v = ps.aggregate(t) + rtg[:, t, :].sum(axis=1)
            x = _x_grid(v)
            surv = empirical_survival(ps.law(v), x)
            _write_csv(path, ["x"] + names, np.column_stack([x] + [k(surv) for k in a.k_stars]))
        elif fig == "fig3":
            entry, a = res.schedule[horizon], res.assessment(horizon)
            x = _x_grid(ps.aggregate(horizon))
            w = np.maximum(x - a.r_base - a.s_base, 0.0)
            _write_csv(path, ["x"] + names, np.column_stack([x] + [g(w) for g in entry.retention]))
        elif fig == "fig5":
            entry = res.schedule[1]
            a = res.assessment(1)
            v = ps.aggregate(1) + rtg[:, 1, :].sum(axis=1)
            w = np.maximum(v - a.r_base - a.s_base, 0.0)
            order = np.argsort(ps.aggregate(1), kind="stable")
            step = max(1, order.size // 2000)
            idx = order[::step]
            cols = [ps.aggregate(1)[idx], v[idx]]
            cols += [entry.retention[i](w[idx]) for i in range(n)]
            cols += [entry.retention[i](w[idx]) - rtg[idx, 1, i] for i in range(n)]
            header = ["S1", "S1_plus_Rbar1"] + [f"g_{s}" for s in names] + [f"gfrak_{s}" for s in names]
            _write_csv(path, header, np.column_stack(cols))
        else:
            raise ConfigError(f"unknown figure {fig!r}; expected one of {FIGURES}")
        written.append(path)
    return written


def cmd_plotdata(args) -> int:
    which = FIGURES if args.which in (None, "all") else (args.which,)
    if any(f not in FIGURES for f in which):
        raise ConfigError(f"unknown figure {args.which!r}; expected one of {FIGURES}")
    if args.config:
        cfg = _config(args)
        res = _solve(cfg)
    else:
        res, _ = replicate_example(
            1 if args.seed is None else args.seed, FULL_SAMPLE if args.paths is None else args.paths
        )
    if res.allocation.pathset.horizon < 2 and any(f in ("fig4", "fig5") for f in which):
        raise ConfigError("fig4 and fig5 need at least two periods")
    out = _out_dir(args)
    for path in plot_data(res, out, which):
        print(f"wrote {path}")
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "improve": cmd_improve,
    "verify": cmd_verify,
    "replicate-example": cmd_replicate_example,
    "plotdata": cmd_plotdata,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynpo", description="Comonotone dynamic Pareto-optimal risk sharing"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--paths", type=int, help="override the number of sample paths")
    common.add_argument("--out", help="output directory (default: current directory)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "improve", "verify"):
            p.add_argument("--allocation", help="allocation CSV (path_id,period,agent,Y)")
            p.add_argument("--paths-csv", dest="paths_csv", help="scenario CSV overriding the config")
        if name == "verify":
            p.add_argument("--relations", action="store_true", help="also run the set-relation check")
        if name == "plotdata":
            p.add_argument("--which", default="all", help="fig1..fig5 or all")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DynPOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
