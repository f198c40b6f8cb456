"""The built-in two-period, two-agent configuration with regime-dependent
Expected Shortfall levels driven by the first-period aggregate."""

from __future__ import annotations

from .distortion import Regime, RegimeDistortion, es_distortion, identity
from .dynrisk import PeriodSpec, RiskSpec

MEAN0 = 200.0
U_STAR = 0.4 / 7.6


def example_specs() -> tuple[RiskSpec, RiskSpec]:
    agent1 = RiskSpec(
        (
            PeriodSpec(RegimeDistortion.constant(es_distortion(0.9))),
            PeriodSpec(
                RegimeDistortion(
                    (
                        Regime(identity(), obs="S1", leq_quantile=0.2),
                        Regime(es_distortion(0.9)),
                    )
                )
            ),
        ),
        name="agent1",
    )
    agent2 = RiskSpec(
        (
            PeriodSpec(RegimeDistortion.constant(identity())),
            PeriodSpec(
                RegimeDistortion(
                    (
                        Regime(identity(), obs="S1", leq_quantile=0.6),
                        Regime(es_distortion(0.99)),
                    )
                )
            ),
        ),
        name="agent2",
    )
    return agent1, agent2


def example_config(n_paths: int = 100_000, seed: int = 1) -> dict:
    """JSON-ready solve configuration for the built-in example."""
    return {
        "agents": [s.to_json() for s in example_specs()],
        "scenario": {"generator": "exponential_chain", "mean0": MEAN0},
        "tie_policy": "lowest-index",
        "c_policy": "none",
        "seed": seed,
        "n_paths": n_paths,
    }
