import numpy as np
import pytest

from cellsched.jsord import evaluate_omega, greedy_orchestrate
from cellsched.oracle import (
    InstanceTooLarge,
    approximation_report,
    brute_force_jsord,
    check_monotonicity,
    check_submodularity,
    instance_suite,
    lemma1_condition,
    random_instance,
    reference_omega,
    vertex_enumeration_omega,
)

from conftest import make_instance, svc


def test_all_zero_arrivals_reports_empty_set():
    inst = make_instance([svc(0), svc(1)], W=[1.0, 1.0], R=[5.0, 5.0], lam=np.zeros((2, 2)))
    opt, best, _ = brute_force_jsord(inst)
    assert opt == 0.0 and best == frozenset()


def test_single_choice():
    inst = make_instance([svc()], W=[100.0], R=[5.0], lam=[[5.0]])
    opt, best, count = brute_force_jsord(inst)
    assert opt == 5.0 and best == frozenset({(0, 0)}) and count == 2


def test_enumeration_order_invariance():
    for _, inst in instance_suite(20, 4, None):
        fwd = brute_force_jsord(inst)
        rev = brute_force_jsord(inst, reverse=True)
        assert fwd[0] == pytest.approx(rev[0], abs=1e-9)
        assert reference_omega(inst, rev[1]) == pytest.approx(fwd[0], abs=1e-6)


def test_oracle_optimum_agrees_with_fast_evaluator():
    for _, inst in instance_suite(20, 8, None):
        a = brute_force_jsord(inst)[0]
        b = brute_force_jsord(inst, omega=evaluate_omega)[0]
        assert a == pytest.approx(b, rel=1e-6, abs=1e-6)


def test_size_guard():
    services = [svc(l) for l in range(5)]
    inst = make_instance(services, W=[1.0] * 4, R=[5.0] * 4, lam=np.ones((5, 1)))
    with pytest.raises(InstanceTooLarge):
        brute_force_jsord(inst)


def test_report_fields():
    inst = random_instance(np.random.default_rng(0), 2, 2, 2)
    rep = approximation_report(inst, seed=0)
    d = rep.to_dict()
    assert set(d) >= {"optimum", "optimal_set", "greedy_value", "ratio_bound", "bound_satisfied", "enumerated_sets"}
    assert rep.bound_satisfied == (rep.greedy_value >= rep.optimum * rep.ratio_bound - 1e-6)
    assert rep.greedy_value <= rep.optimum + 1e-6


def test_monotonicity_on_arbitrary_instances():
    for seed, inst in instance_suite(15, 21, None):
        assert check_monotonicity(inst, 20, seed) == []


def test_submodularity_on_condition_two():
    for seed, inst in instance_suite(15, 22, "compute"):
        assert lemma1_condition(inst) == "compute"
        assert check_submodularity(inst, 20, seed) == []


def test_submodularity_equal_sets_degenerate():
    inst = random_instance(np.random.default_rng(3), 2, 2, 2, condition=None)
    S = frozenset({(0, 0)})
    e = (1, 1)
    g = evaluate_omega(inst, S | {e}) - evaluate_omega(inst, S)
    assert g == evaluate_omega(inst, S | {e}) - evaluate_omega(inst, S)


def test_greedy_chain_nondecreasing():
    for _, inst in instance_suite(10, 23, None):
        vals = [v for _, v in greedy_orchestrate(inst).trace]
        assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


def test_generator_conditions():
    for _, inst in instance_suite(20, 24, "memory"):
        assert lemma1_condition(inst) in ("memory", "compute")
    for _, inst in instance_suite(20, 25, "lemma1"):
        assert lemma1_condition(inst) is not None


def test_suite_is_seeded():
    a = [i for _, i in instance_suite(5, 9, None)]
    b = [i for _, i in instance_suite(5, 9, None)]
    assert a == b


def test_vertex_enumeration_matches_reference():
    for seed, inst in instance_suite(30, 26, None, 2, 2, 2):
        rng = np.random.default_rng(seed)
        S = [e for e in inst.all_pairs() if rng.random() < 0.8]
        assert vertex_enumeration_omega(inst, S) == pytest.approx(reference_omega(inst, S), rel=1e-6, abs=1e-6)
