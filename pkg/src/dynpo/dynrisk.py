"""One-step conditional risk evaluation and the nested risk-to-go recursion,
with a randomized axiom checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distortion import (
    DistortionFn,
    Regime,
    RegimeDistortion,
    choquet_rows,
    observable_period,
)
from .errors import ConfigError, ParameterError, ShapeError
from .scenario import SamplePathSet

MODES = ("marginal", "tree")


@dataclass(frozen=True)
class PeriodSpec:
    regimes: RegimeDistortion
    mode: str = "marginal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown evaluation mode {self.mode!r}")


@dataclass(frozen=True)
class RiskSpec:
    """One-step conditional risk measures rho_0, ..., rho_{T-1} of one agent.

    ``periods[t]`` is applied at time t to period t+1 quantities.
    """

    periods: tuple[PeriodSpec, ...]
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(self.periods))
        if not self.periods:
            raise ConfigError("risk spec needs at least one period")
        for t, p in enumerate(self.periods):
            for r in p.regimes.regimes:
                if r.is_else:
                    continue
                k = observable_period(r.obs)
                if not 1 <= k <= t:
                    raise ConfigError(
                        f"rho_{t} conditions on {r.obs}, which is not known at time {t}"
                    )

    @property
    def horizon(self) -> int:
        return len(self.periods)

    @property
    def modes(self) -> set[str]:
        return {p.mode for p in self.periods}

    @property
    def concave(self) -> bool:
        return all(d.is_concave for p in self.periods for d in p.regimes.distortions)

    @classmethod
    def constant(cls, k: DistortionFn, horizon: int, mode: str = "marginal") -> "RiskSpec":
        return cls(tuple(PeriodSpec(RegimeDistortion.constant(k), mode) for _ in range(horizon)))

    @classmethod
    def from_json(cls, d) -> "RiskSpec":
        try:
            periods = [
                PeriodSpec(
                    RegimeDistortion(tuple(Regime.from_json(r) for r in p["regimes"])),
                    p.get("mode", "marginal"),
                )
                for p in d["periods"]
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed risk spec: {exc}") from None
        return cls(tuple(periods), name=d.get("name"))

    def to_json(self):
        d = {
            "periods": [
                {"mode": p.mode, "regimes": [r.to_json() for r in p.regimes.regimes]}
                for p in self.periods
            ]
        }
        if self.name:
            d["name"] = self.name
        return d


@dataclass(frozen=True)
class RiskToGoProcess:
    """N x (T+1) matrix; column t holds R_t on every path, column T is 0."""

    values: np.ndarray

    def at(self, t: int) -> np.ndarray:
        return self.values[:, t]


def _check_horizon(spec: RiskSpec, pathset: SamplePathSet):
    if spec.horizon != pathset.horizon:
        raise ShapeError(
            f"risk spec covers {spec.horizon} periods, path set has {pathset.horizon}"
        )


def one_step_rows(spec: RiskSpec, t: int, values, pathset: SamplePathSet) -> np.ndarray:
    """Vectorised rho_t over a K x N batch of next-period arguments."""
    if not 0 <= t < spec.horizon:
        raise ParameterError(f"period {t} outside 0..{spec.horizon - 1}")
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] != pathset.n_paths:
        raise ShapeError("argument must be defined on every path")
    period = spec.periods[t]
    rule = period.regimes
    chosen = rule.select(pathset)
    out = np.empty_like(values)
    if period.mode == "marginal":
        groups = [np.arange(pathset.n_paths)]
    else:
        groups = pathset.groups(t)
    for idx in groups:
        w = pathset.weights[idx]
        for j in np.unique(chosen[idx]):
            members = idx[chosen[idx] == j]
            val = choquet_rows(rule.regimes[j].distortion, values[:, idx], w)
            out[:, members] = val[:, None]
    return out


def eval_one_step(spec: RiskSpec, t: int, next_values, pathset: SamplePathSet) -> np.ndarray:
    """rho_t(next_values) on every path.

    Marginal mode integrates the regime-selected distortion against the
    unconditional law of the argument; tree mode uses the conditional law
    over the children of each path's time-t node.
    """
    return one_step_rows(spec, t, np.asarray(next_values, dtype=float)[None, :], pathset)[0]


def risk_to_go_values(spec: RiskSpec, y, pathset: SamplePathSet) -> np.ndarray:
    """Backward recursion R_T = 0, R_t = rho_t(Y_{t+1} + R_{t+1}) for an
    N x T matrix of one agent's allocations."""
    _check_horizon(spec, pathset)
    y = np.asarray(y, dtype=float)
    n, horizon = pathset.n_paths, pathset.horizon
    if y.shape != (n, horizon):
        raise ShapeError(f"allocation must be {n} x {horizon}")
    r = np.zeros((n, horizon + 1))
    for t in range(horizon - 1, -1, -1):
        r[:, t] = eval_one_step(spec, t, y[:, t] + r[:, t + 1], pathset)
    return r


def risk_to_go(spec: RiskSpec, alloc, agent: int) -> RiskToGoProcess:
    return RiskToGoProcess(risk_to_go_values(spec, alloc.values[:, :, agent], alloc.pathset))


def eval_dynamic(spec: RiskSpec, alloc, agent: int, t: int) -> np.ndarray:
    """rho_{t,T}(Y_{t+1:T}) per path, via the nested one-step recursion."""
    if not 0 <= t < alloc.pathset.horizon:
        raise ParameterError(f"t must lie in 0..{alloc.pathset.horizon - 1}")
    return risk_to_go(spec, alloc, agent).at(t)


# --------------------------------------------------------------------------
# axiom checks

AXIOMS = (
    "monotonicity",
    "translation_invariance",
    "positive_homogeneity",
    "subadditivity",
    "normalization",
    "equidistribution_preservation",
)


@dataclass
class AxiomResult:
    name: str
    max_violation: float = 0.0
    trials: int = 0
    tol: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tol


@dataclass
class AxiomReport:
    results: dict[str, AxiomResult] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def __getitem__(self, name) -> AxiomResult:
        return self.results[name]

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'} {r.name}: max violation {r.max_violation:.3e} over {r.trials} trials"
            for r in self.results.values()
        ]


def _shift_for(spec: RiskSpec, t: int, pathset: SamplePathSet, rng) -> np.ndarray:
    # marginal mode is law-based on the unconditional law, so only
    # deterministic shifts are admissible; tree mode admits node-measurable ones
    if spec.periods[t].mode == "marginal":
        return np.full(pathset.n_paths, rng.normal(0, 10))
    m = np.empty(pathset.n_paths)
    for idx in pathset.groups(t):
        m[idx] = rng.normal(0, 10)
    return m


def _label_permutation(spec, t, pathset, rng) -> np.ndarray:
    perm = np.arange(pathset.n_paths)
    groups = (
        [np.arange(pathset.n_paths)]
        if spec.periods[t].mode == "marginal"
        else pathset.groups(t)
    )
    for idx in groups:
        for w in np.unique(pathset.weights[idx]):
            same = idx[pathset.weights[idx] == w]
            perm[same] = rng.permutation(same)
    return perm


def check_axioms(
    spec: RiskSpec, pathset: SamplePathSet, trials: int = 200, seed: int = 0, tol: float = 1e-9
) -> AxiomReport:
    """Randomised property report for every one-step measure in ``spec``."""
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    _check_horizon(spec, pathset)
    rng = np.random.default_rng(seed)
    report = AxiomReport({name: AxiomResult(name, tol=tol) for name in AXIOMS})
    n = pathset.n_paths

    def rho(t, v):
        return eval_one_step(spec, t, v, pathset)

    def record(name, violation):
        res = report.results[name]
        res.max_violation = max(res.max_violation, float(violation))
        res.trials += 1

    for _ in range(trials):
        t = int(rng.integers(spec.horizon))
        scale = rng.uniform(0.5, 50.0)
        x = rng.normal(0, scale, n)
        y = rng.standard_t(3, n) * scale
        rx = rho(t, x)

        bump = np.abs(rng.normal(0, scale, n)) * (rng.random(n) < 0.5)
        record("monotonicity", np.max(rx - rho(t, x + bump), initial=0.0))

        m = _shift_for(spec, t, pathset, rng)
        record("translation_invariance", np.max(np.abs(rho(t, x + m) - rx - m)))

        c = rng.uniform(0, 5)
        record("positive_homogeneity", np.max(np.abs(rho(t, c * x) - c * rx)))

        record("subadditivity", np.max(rho(t, x + y) - rx - rho(t, y), initial=0.0))

        record("normalization", np.max(np.abs(rho(t, np.zeros(n)))))

        perm = _label_permutation(spec, t, pathset, rng)
        record("equidistribution_preservation", np.max(np.abs(rho(t, x[perm]) - rx)))
    return report


def specs_horizon(specs: Sequence[RiskSpec]) -> int:
    horizons = {s.horizon for s in specs}
    if len(horizons) != 1:
        raise ConfigError("agents' risk specs cover different horizons")
    return horizons.pop()
