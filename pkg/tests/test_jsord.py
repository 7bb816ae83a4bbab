import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellsched.jsord import (
    InstanceError,
    build_instance,
    evaluate_omega,
    feasible_extensions,
    greedy_orchestrate,
    indicator_table,
    is_feasible,
    ratio_p,
    solve_all_channels,
    solve_dispatch_lp,
)
from cellsched.model import CLOUD, CloudCenter, ResourceCell
from cellsched.oracle import (
    brute_force_jsord,
    instance_suite,
    random_instance,
    reference_omega,
    vertex_enumeration_omega,
)

from conftest import dispatch_violation, line_topology, make_instance, svc


def test_lp_single_pair():
    inst = make_instance([svc()], W=[100.0], R=[10.0], lam=[[5.0]])
    plan, obj = solve_dispatch_lp(inst, {(0, 0)})
    assert obj == 5.0
    assert plan.y[0, 0, 0] == 1.0


def test_lp_empty_orchestration():
    inst = make_instance([svc()], W=[100.0], R=[10.0], lam=[[5.0]])
    plan, obj = solve_dispatch_lp(inst, set())
    assert obj == 0.0 and not plan.y.any()
    assert evaluate_omega(inst, frozenset()) == 0.0


def test_lp_capacity_example():
    # 2 services, w = 1 each, one cell with W = 4, lambda = (3, 3) at one node
    inst = make_instance([svc(0), svc(1)], W=[4.0], R=[10.0], lam=[[3.0], [3.0]])
    S = {(0, 0), (1, 0)}
    plan, obj = solve_dispatch_lp(inst, S)
    assert obj == pytest.approx(4.0, rel=1e-9)
    assert vertex_enumeration_omega(inst, S) == pytest.approx(4.0, rel=1e-9)
    assert dispatch_violation(inst, S, plan.y) <= 1e-9


def test_lp_respects_indicator():
    ind = np.array([[[False, True]]])
    inst = make_instance([svc()], W=[10.0, 10.0], R=[5.0, 5.0], lam=[[2.0]], indicator=ind)
    plan, obj = solve_dispatch_lp(inst, {(0, 0)})
    assert obj == 0.0
    plan, obj = solve_dispatch_lp(inst, {(0, 0), (0, 1)})
    assert obj == 2.0 and plan.y[0, 0, 0] == 0.0


def test_lp_rejects_bad_pairs_and_shapes():
    inst = make_instance([svc()], W=[1.0], R=[1.0], lam=[[1.0]])
    with pytest.raises(InstanceError):
        solve_dispatch_lp(inst, {(0, 3)})
    with pytest.raises(InstanceError):
        solve_dispatch_lp(inst, {(0, 0)}, arrivals=np.ones((2, 2)))


@pytest.mark.parametrize("cond", ["compute", "memory", None])
def test_lp_matches_independent_solvers(cond):
    for seed, inst in instance_suite(40, 17, cond, 4, 4, 4):
        rng = np.random.default_rng(seed)
        S = [e for e in inst.all_pairs() if rng.random() < 0.7]
        plan, obj = solve_dispatch_lp(inst, S)
        ref = reference_omega(inst, S)
        assert obj == pytest.approx(ref, rel=1e-6, abs=1e-6)
        assert dispatch_violation(inst, S, plan.y) <= 1e-6


def test_lp_arrivals_override():
    inst = make_instance([svc()], W=[100.0], R=[10.0], lam=[[5.0]])
    _, obj = solve_dispatch_lp(inst, {(0, 0)}, arrivals=np.array([[7.0]]))
    assert obj == 7.0


def test_feasible_extensions_examples():
    inst = make_instance([svc(0, r=2.0), svc(1, r=3.0)], W=[1.0, 1.0], R=[4.0, 4.0], lam=[[1.0], [1.0]])
    assert feasible_extensions(inst, set()) == set(inst.all_pairs())
    # (l0, m0) placed: 2 + 3 > 4, so nothing else fits on m0
    assert feasible_extensions(inst, {(0, 0)}) == {(0, 1), (1, 1)}
    full = make_instance([svc(0, r=2.0)], W=[1.0], R=[2.0], lam=[[1.0]])
    assert feasible_extensions(full, {(0, 0)}) == set()


def test_ratio_p_examples():
    assert ratio_p([svc(r=1.0)] * 3) == 1
    assert ratio_p([svc(0, r=2.0), svc(1, r=4.0)]) == 2
    assert ratio_p([svc(0, r=3.0), svc(1, r=7.0)]) == 3
    assert ratio_p([svc(0, r=0.0), svc(1, r=0.0)]) == 1


def test_greedy_empty_instance():
    inst = make_instance([], W=[1.0], R=[1.0], lam=np.zeros((0, 1)))
    res = greedy_orchestrate(inst)
    assert res.orchestration == frozenset() and res.objective == 0.0
    inst = make_instance([svc()], W=[], R=[], lam=[[1.0]])
    assert greedy_orchestrate(inst).objective == 0.0


def test_greedy_two_by_two_memory_bound():
    # memory lets each cell host exactly one service
    inst = make_instance(
        [svc(0, r=3.0), svc(1, r=3.0)], W=[5.0, 5.0], R=[4.0, 4.0], lam=[[4.0], [2.0]],
        indicator=np.array([[[True, True]], [[True, False]]]),
    )
    res = greedy_orchestrate(inst)
    opt, opt_set, count = brute_force_jsord(inst)
    assert count <= 16
    assert opt == pytest.approx(6.0)
    assert res.objective >= opt / (1 + ratio_p(inst.services)) - 1e-6
    # the first pick is the pair with the largest single-pair value
    assert res.trace[0][0] == (0, 0)
    assert is_feasible(inst, res.orchestration)


def test_greedy_tie_break_lowest_pair():
    inst = make_instance([svc(0), svc(1)], W=[10.0, 10.0], R=[1.0, 1.0], lam=[[2.0], [2.0]])
    res = greedy_orchestrate(inst)
    assert res.trace[0][0] == (0, 0)
    assert res.trace[1][0] == (0, 1) or res.trace[1][1] >= res.trace[0][1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["compute", "memory", None]))
def test_pruning_never_changes_the_plan(seed, cond):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, 3, 3, 3, condition=cond)
    a, b = greedy_orchestrate(inst, prune=True), greedy_orchestrate(inst, prune=False)
    assert a.same_plan(b)
    assert a.evaluations <= b.evaluations


def test_greedy_is_deterministic():
    inst = random_instance(np.random.default_rng(5), 3, 3, 4, condition=None)
    assert greedy_orchestrate(inst).same_plan(greedy_orchestrate(inst))


def _channel_instances(k):
    out = []
    for p in range(k):
        inst = random_instance(np.random.default_rng(100 + p), 3, 3, 3, condition=None)
        services = tuple(type(s)(p + 1, s.service_id, s.packet_size, s.memory_req, s.compute_req,
                                 s.deadline, s.exec_time) for s in inst.services)
        out.append(type(inst)(p + 1, services, tuple(range(3 * p, 3 * p + 3)), inst.cell_compute,
                              inst.cell_memory, inst.arrivals, inst.latency, inst.indicator))
    return out


def test_solve_all_channels_matches_sequential():
    insts = _channel_instances(6)
    seq = [greedy_orchestrate(i) for i in insts]
    for workers in (1, 2):
        par = solve_all_channels(insts, workers=workers)
        assert all(a.same_plan(b) for a, b in zip(seq, par))
    assert sum(r.objective for r in par) == pytest.approx(sum(r.objective for r in seq))
    one = solve_all_channels(insts[:1])
    assert one[0].same_plan(seq[0])


def test_solve_all_channels_rejects_overlap():
    insts = _channel_instances(2)
    clash = type(insts[1])(2, insts[1].services, insts[0].cell_ids, insts[1].cell_compute,
                           insts[1].cell_memory, insts[1].arrivals, insts[1].latency, insts[1].indicator)
    with pytest.raises(InstanceError):
        solve_all_channels([insts[0], clash])


def test_build_instance_tables(cloud):
    topo = line_topology(3, lat=2.0, bw=125.0)
    services = [svc(0, deadline=14.0, exec_time=10.0, h=125_000.0)]
    cells = [
        ResourceCell(7, 0, 1.0, 1.0, ((0, 1.0, 1.0),)),
        ResourceCell(9, 2, 1.0, 1.0, ((2, 0.5, 1.0), (CLOUD, 0.5, 0.0))),
    ]
    inst = build_instance(1, services, cells, np.ones((1, 3)), topo, cloud)
    assert inst.cell_ids == (7, 9)
    # node 0 -> cell on node 0: 1 ms serialization; node 2 -> 4 ms hop + 1 ms
    assert inst.latency[0, 0, 0] == pytest.approx(1.0)
    assert inst.latency[0, 2, 0] == pytest.approx(5.0)
    assert inst.latency[0, 0, 1] == pytest.approx(11.0)
    assert np.array_equal(inst.indicator, indicator_table(services, inst.latency))
    assert inst.indicator[0, 0, 0] and not inst.indicator[0, 2, 0] and not inst.indicator[0, 0, 1]


def test_instance_validation():
    with pytest.raises(InstanceError):
        make_instance([svc()], W=[1.0, 2.0], R=[1.0], lam=[[1.0]])
    with pytest.raises(InstanceError):
        make_instance([svc()], W=[1.0], R=[1.0], lam=[[-1.0]])
