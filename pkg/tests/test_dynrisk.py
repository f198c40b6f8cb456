import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynpo import (
    AllocationProcess,
    ConfigError,
    DistortionFn,
    PeriodSpec,
    Regime,
    RegimeDistortion,
    RiskSpec,
    SamplePathSet,
    ScenarioTree,
    check_axioms,
    convex_order_leq,
    es_distortion,
    eval_dynamic,
    eval_one_step,
    generate_exponential_chain,
    identity,
    risk_to_go,
)
from dynpo.dynrisk import risk_to_go_values
from dynpo.example import example_specs
from dynpo.scenario import quantile

from test_distortion import es_by_quantiles


def regime_spec(k_low, k_high, q, horizon=2):
    rule = RegimeDistortion((Regime(k_low, obs="S1", leq_quantile=q), Regime(k_high)))
    first = PeriodSpec(RegimeDistortion.constant(identity()))
    return RiskSpec((first, PeriodSpec(rule)))


@pytest.fixture(scope="module")
def chain():
    return generate_exponential_chain(100_000, 200.0, 5)


def test_expectation_of_second_period(chain):
    spec = RiskSpec.constant(identity(), 2)
    out = eval_one_step(spec, 1, chain.paths[:, 1], chain)
    assert np.ptp(out) == 0
    assert abs(out[0] - 200) <= 0.04 * 200


@pytest.mark.parametrize("mode", ["marginal", "tree"])
def test_constants_pass_through(mode):
    ps = ScenarioTree.from_dict(
        {"children": [{"value": v, "prob": 0.5, "children": [{"value": 1, "prob": 0.5}, {"value": 3, "prob": 0.5}]} for v in (1, 9)]}
    ).to_pathset()
    rule = RegimeDistortion((Regime(es_distortion(0.5), obs="S1", leq=2), Regime(es_distortion(0.9))))
    spec = RiskSpec((PeriodSpec(RegimeDistortion.constant(identity()), mode), PeriodSpec(rule, mode)))
    for t in range(2):
        assert np.all(eval_one_step(spec, t, np.full(4, 7.25), ps) == 7.25)


def test_example_agent_one_regimes(chain):
    spec = example_specs()[0]
    x_star = 780.0
    g = np.maximum(chain.paths[:, 1] - x_star, 0)
    out = eval_one_step(spec, 1, g, chain)
    low = chain.paths[:, 0] <= quantile(chain.law(chain.paths[:, 0]), 0.2)
    assert low.mean() == pytest.approx(0.2, abs=1e-4)
    assert np.allclose(out[low], g.mean(), rtol=1e-12)
    assert np.allclose(out[~low], es_by_quantiles(g, 0.9), rtol=1e-10)


def test_risk_to_go_terminal_and_deterministic():
    ps = SamplePathSet(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
    spec = RiskSpec.constant(identity(), 3)
    y = np.array([[1.0, 2.0, 3.0]] * 2)
    r = risk_to_go_values(spec, y, ps)
    assert r[:, 3].tolist() == [0, 0]
    assert r[0].tolist() == [6.0, 5.0, 3.0, 0.0]


def test_eval_dynamic_agent_two(chain):
    spec = example_specs()[1]
    rng = np.random.default_rng(0)
    y1 = rng.normal(0, 30, chain.n_paths)
    y2 = chain.paths[:, 1] * 0.5
    alloc = AllocationProcess(np.stack([np.stack([y1, y2], 1), chain.paths - np.stack([y1, y2], 1)], 2), chain)
    got = eval_dynamic(spec, alloc, 0, 0)
    low = chain.paths[:, 0] <= quantile(chain.law(chain.paths[:, 0]), 0.6)
    inner = np.where(low, y2.mean(), es_by_quantiles(y2, 0.99))
    assert np.allclose(got, np.mean(y1 + inner), rtol=1e-10)
    # base case and shift
    assert np.array_equal(eval_dynamic(spec, alloc, 0, 1), eval_one_step(spec, 1, y2, chain))
    shifted = AllocationProcess(alloc.values + np.array([0.0, 5.0])[None, :, None] * np.array([1, -1]), chain)
    assert np.allclose(eval_dynamic(spec, shifted, 0, 0), got + 5, rtol=1e-12)


def test_axioms_expectation_and_es():
    ps = generate_exponential_chain(200, 200.0, 3)
    for k in (identity(), es_distortion(0.9), es_distortion(0.5)):
        rep = check_axioms(RiskSpec.constant(k, 2), ps, trials=200, seed=1)
        assert rep.passed, rep.lines()


def test_axioms_flag_non_concave():
    ps = generate_exponential_chain(50, 200.0, 3)
    convex = DistortionFn([0, 0.9, 1], [0, 0.1, 1])
    rep = check_axioms(RiskSpec.constant(convex, 2), ps, trials=200, seed=2)
    assert not rep["subadditivity"].passed
    assert rep["translation_invariance"].passed


def test_axioms_in_tree_mode():
    ps = random_tree(np.random.default_rng(3))
    spec = RiskSpec.constant(es_distortion(0.6), 2, mode="tree")
    assert check_axioms(spec, ps, trials=100, seed=0).passed


def test_future_observable_is_rejected():
    rule = RegimeDistortion((Regime(identity(), obs="S2", leq=1), Regime(identity())))
    with pytest.raises(ConfigError):
        RiskSpec((PeriodSpec(rule), PeriodSpec(rule)))


def test_spec_json_round_trip():
    for spec in example_specs():
        back = RiskSpec.from_json(spec.to_json())
        assert back.to_json() == spec.to_json()


def random_tree(rng, branching=(2, 3)):
    def node(depth):
        if depth == 2:
            return {"value": float(rng.integers(0, 20))}
        kids = [node(depth + 1) for _ in range(branching[depth])]
        p = rng.dirichlet(np.ones(len(kids)))
        p[-1] = 1 - p[:-1].sum()
        for c, pi in zip(kids, p):
            c["prob"] = float(pi)
        out = {"children": kids}
        if depth:
            out["value"] = float(rng.integers(0, 20))
        return out

    return ScenarioTree.from_dict(node(0)).to_pathset()


def test_tree_mode_uses_conditional_law():
    ps = random_tree(np.random.default_rng(0))
    spec = RiskSpec.constant(identity(), 2, mode="tree")
    out = eval_one_step(spec, 1, ps.paths[:, 1], ps)
    for idx in ps.groups(1):
        w = ps.weights[idx] / ps.weights[idx].sum()
        assert np.allclose(out[idx], w @ ps.paths[idx, 1])


spec_strategy = st.sampled_from(
    [
        RiskSpec.constant(identity(), 2),
        RiskSpec.constant(es_distortion(0.8), 2),
        regime_spec(identity(), es_distortion(0.9), 0.4),
        RiskSpec.constant(DistortionFn([0, 0.3, 1], [0, 0.7, 1]), 2, mode="tree"),
    ]
)


@given(spec_strategy, st.integers(0, 2**32 - 1))
def test_recursion_identity_and_normalization(spec, seed):
    rng = np.random.default_rng(seed)
    ps = random_tree(rng)
    y = rng.normal(0, 5, (ps.n_paths, 2))
    r = risk_to_go_values(spec, y, ps)
    for t in range(2):
        assert np.array_equal(r[:, t], eval_one_step(spec, t, y[:, t] + r[:, t + 1], ps))
    assert np.all(risk_to_go_values(spec, np.zeros_like(y), ps) == 0)


@given(spec_strategy, st.integers(0, 2**32 - 1))
def test_monotone_and_time_consistent(spec, seed):
    rng = np.random.default_rng(seed)
    ps = random_tree(rng)
    y = rng.normal(0, 5, (ps.n_paths, 2))
    # equal first period, pathwise larger tail
    z = y.copy()
    z[:, 1] += np.abs(rng.normal(0, 3, ps.n_paths))
    ry, rz = risk_to_go_values(spec, y, ps), risk_to_go_values(spec, z, ps)
    assert (ry[:, 1] <= rz[:, 1] + 1e-9).all()
    assert (ry[:, 0] <= rz[:, 0] + 1e-9).all()


@given(st.sampled_from([identity(), es_distortion(0.7), DistortionFn([0, 0.2, 1], [0, 0.5, 1])]), st.integers(0, 2**32 - 1))
def test_convex_order_preserved(k, seed):
    rng = np.random.default_rng(seed)
    ps = SamplePathSet(rng.exponential(5, (12, 1)))
    y = rng.normal(0, 4, 12)
    # a mean-preserving spread of y
    z = y + rng.normal(0, 2, 12) * np.sign(y - y.mean())
    z += y.mean() - z.mean()
    if convex_order_leq(ps.law(y), ps.law(z)) == "incomparable":
        return
    spec = RiskSpec.constant(k, 1)
    assert eval_one_step(spec, 0, y, ps)[0] <= eval_one_step(spec, 0, z, ps)[0] + 1e-9
