import numpy as np
import pytest

from dynpo import (
    AllocationProcess,
    OracleBoundError,
    ParameterError,
    RiskSpec,
    SamplePathSet,
    SolveConfig,
    es_distortion,
    generate_exponential_chain,
    identity,
    is_comonotone_process,
    solve_cdpo,
)
from dynpo.allocation import risk_to_go_matrix
from dynpo.example import example_specs
from dynpo.oracle import (
    TinyInstance,
    brute_force_cpo_t,
    check_set_relations,
    compositions,
    grid_process,
    verify_po_definition,
)

from test_dynrisk import random_tree


def solver_value(specs, alloc, t):
    """sum_i E[rho_t(Y_{t+1} + R_{t+1})], the quantity the oracle minimizes."""
    ps = alloc.pathset
    return float(ps.weights @ risk_to_go_matrix(specs, alloc)[:, t, :].sum(axis=1))


def test_compositions():
    c = compositions(3, 4)
    assert c.shape == (15, 3) and (c.sum(axis=1) == 4).all()
    assert len({tuple(r) for r in c}) == 15


def test_single_agent_objective():
    ps = SamplePathSet(np.array([[1.0], [4.0], [7.0]]))
    spec = (RiskSpec.constant(es_distortion(0.5), 1),)
    res = brute_force_cpo_t(TinyInstance(ps, 4), spec, 0)
    # upper half of the quantile range of {1, 4, 7}: (4/6 + 7/3) / 0.5
    assert res.best == pytest.approx(6.0, abs=1e-12)


def test_expectation_agent_takes_the_high_state():
    ps = SamplePathSet(np.array([[0.0], [10.0]]))
    specs = (RiskSpec.constant(identity(), 1), RiskSpec.constant(es_distortion(0.5), 1))
    res = brute_force_cpo_t(TinyInstance(ps, 10), specs, 0)
    assert res.best == pytest.approx(5.0, abs=1e-12)
    assert any(np.allclose(y, [[0, 0], [10, 0]]) for y in res.argmin)
    sol = solve_cdpo(SolveConfig(specs, ps, c_policy="none"))
    assert np.allclose(sol.allocation.values[:, 0, :], [[0, 0], [10, 0]])


def test_discretized_example_matches_solver():
    specs = example_specs()
    ps = generate_exponential_chain(7, 200.0, 1)
    res = solve_cdpo(SolveConfig(specs, ps, c_policy="none"))
    oracle = brute_force_cpo_t(TinyInstance(ps, 8), specs, 1)
    slack = 2 * ps.aggregate(2).max() / 8
    assert abs(oracle.best - solver_value(specs, res.allocation, 1)) <= slack


def test_example_needs_smaller_grid_at_eight_paths():
    ps = generate_exponential_chain(8, 200.0, 1)
    with pytest.raises(OracleBoundError):
        brute_force_cpo_t(TinyInstance(ps, 8), example_specs(), 1)


def test_instance_limits():
    with pytest.raises(ParameterError):
        TinyInstance(SamplePathSet(np.ones((9, 1))), 4)
    with pytest.raises(ParameterError):
        TinyInstance(SamplePathSet(np.ones((2, 3))), 4)


def test_verify_solver_output():
    rng = np.random.default_rng(8)
    ps = SamplePathSet(np.round(rng.uniform(0, 10, (3, 2)), 1))
    specs = (RiskSpec.constant(es_distortion(0.4), 2), RiskSpec.constant(identity(), 2))
    res = solve_cdpo(SolveConfig(specs, ps, c_policy="none"))
    inst = TinyInstance(ps, 6)
    for which in ("CDPO", "DPO", "MPO"):
        assert verify_po_definition(inst, specs, res.allocation, which).status == "optimal"
    for t in (0, 1):
        assert verify_po_definition(inst, specs, res.allocation, "CPO_t", t).optimal


def test_endowment_allocation_has_gains_from_trade():
    s = np.array([[4.0], [4.0]])
    x = np.array([[[4.0, 0.0]], [[0.0, 4.0]]])
    ps = SamplePathSet(s, None, x)
    specs = (RiskSpec.constant(es_distortion(0.5), 1), RiskSpec.constant(es_distortion(0.3), 1))
    endow = AllocationProcess.from_endowments(ps)
    verdict = verify_po_definition(TinyInstance(ps, 4), specs, endow, "DPO")
    assert verdict.status == "dominated"
    ref = risk_to_go_matrix(specs, endow)[:, 0, :]
    alt = risk_to_go_matrix(specs, verdict.witness)[:, 0, :]
    assert (alt <= ref + 1e-12).all() and (alt < ref - 1e-9).any()


def test_not_comonotone_and_not_ir():
    s = np.array([[4.0], [4.0]])
    ps = SamplePathSet(s)
    specs = (RiskSpec.constant(identity(), 1),) * 2
    anti = AllocationProcess(np.array([[[4.0, 0.0]], [[0.0, 4.0]]]), ps)
    assert verify_po_definition(TinyInstance(ps, 4), specs, anti, "CDPO").status == "not_comonotone"
    x = np.array([[[2.0, 2.0]], [[2.0, 2.0]]])
    ps_x = SamplePathSet(s, None, x)
    bad = AllocationProcess(np.array([[[4.0, 0.0]], [[4.0, 0.0]]]), ps_x)
    assert verify_po_definition(TinyInstance(ps_x, 4), specs, bad, "DPO").status == "not_ir"


def test_single_agent_is_always_optimal():
    ps = SamplePathSet(np.array([[1.0, 2.0], [3.0, 1.0]]))
    spec = (RiskSpec.constant(es_distortion(0.3), 2),)
    alloc = AllocationProcess(ps.paths[:, :, None], ps)
    for which in ("PO_t", "CPO_t", "DPO", "CDPO", "MPO"):
        assert verify_po_definition(TinyInstance(ps, 5), spec, alloc, which).optimal
    rel = check_set_relations(TinyInstance(ps, 5), spec)
    assert rel.n_allocations == 1 and rel.dpo.tolist() == rel.cdpo.tolist() == [0]


def test_set_relations_two_states():
    ps = SamplePathSet(np.array([[3.0], [8.0]]))
    specs = (RiskSpec.constant(es_distortion(0.3), 1), RiskSpec.constant(es_distortion(0.7), 1))
    rel = check_set_relations(TinyInstance(ps, 6), specs)
    assert rel.inclusion_holds and not rel.violations
    assert set(rel.cdpo.tolist()) <= set(rel.dpo.tolist())


def test_expectation_agents_have_non_comonotone_optima():
    ps = SamplePathSet(np.array([[2.0], [5.0], [9.0]]))
    specs = (RiskSpec.constant(identity(), 1),) * 2
    rel = check_set_relations(TinyInstance(ps, 6), specs)
    assert rel.inclusion_holds
    assert rel.non_comonotone_dpo.size > 0
    k = int(rel.non_comonotone_dpo[0])
    assert not all(is_comonotone_process(grid_process(TinyInstance(ps, 6), specs, k), specs))


def test_pairwise_limit():
    ps = SamplePathSet(np.ones((5, 1)))
    specs = (RiskSpec.constant(identity(), 1),) * 2
    with pytest.raises(OracleBoundError):
        check_set_relations(TinyInstance(ps, 8), specs)


def test_tree_instance_respects_nodes():
    ps = random_tree(np.random.default_rng(5), branching=(2, 2))
    specs = tuple(RiskSpec.constant(k, 2, mode="tree") for k in (es_distortion(0.5), identity()))
    inst = TinyInstance(ps, 4)
    base = AllocationProcess(np.stack([ps.paths, np.zeros_like(ps.paths)], axis=2), ps)
    res = brute_force_cpo_t(inst, specs, 0, downstream=base)
    assert res.feasible > 0
    for y in res.argmin:
        for idx in ps.groups(1):
            assert np.ptp(y[idx], axis=0).max() <= 1e-12
