"""Brute-force ground truth and property checks for small channel instances."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linprog

from .jsord import (
    ChannelInstance,
    Pair,
    evaluate_omega,
    feasible_extensions,
    greedy_orchestrate,
    is_feasible,
    ratio_p,
)
from .model import ServiceSpec

MAX_PAIRS = 16
MAX_VERTEX_VARS = 10
GENERATOR_VERSION = "rand-instance/1"
VIOLATION_TOL = 1e-6


class InstanceTooLarge(ValueError):
    pass


def reference_omega(instance: ChannelInstance, orchestration: Iterable[Pair]) -> float:
    """Dispatch optimum from a plain dense LP over every (l, i, m) variable.

    Written separately from the optimizer's solver: request-count variables
    z = lambda * y, no variable elimination, no closed-form shortcut.
    """
    S = set(orchestration)
    L, N, M = instance.n_services, instance.n_nodes, instance.n_cells
    lam = instance.arrivals
    k = L * N * M
    if k == 0:
        return 0.0

    def col(l, i, m):
        return (l * N + i) * M + m

    ub = np.zeros(k)
    for l in range(L):
        for i in range(N):
            for m in range(M):
                if (l, m) in S and instance.indicator[l, i, m]:
                    ub[col(l, i, m)] = lam[l, i]
    if not ub.any():
        return 0.0
    A = []
    b = []
    for l in range(L):
        for i in range(N):
            row = np.zeros(k)
            for m in range(M):
                row[col(l, i, m)] = 1.0
            A.append(row)
            b.append(lam[l, i])
    for m in range(M):
        row = np.zeros(k)
        for l in range(L):
            for i in range(N):
                row[col(l, i, m)] = instance.services[l].compute_req
        A.append(row)
        b.append(instance.cell_compute[m])
    res = linprog(
        -np.ones(k),
        A_ub=np.array(A),
        b_ub=np.array(b),
        bounds=list(zip(np.zeros(k), ub)),
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"reference LP failed: {res.message}")
    return float(-res.fun)


def vertex_enumeration_omega(instance: ChannelInstance, orchestration: Iterable[Pair]) -> float:
    """Dispatch optimum by enumerating every vertex of the feasible polytope.

    Variables are y over eligible (l, i, m) with positive demand; a vertex
    fixes each nonbasic variable at 0 or 1 and makes one constraint row tight
    per basic variable.  The best feasible vertex is the LP optimum.
    """
    S = set(orchestration)
    lam = instance.arrivals
    w = instance.compute_req
    var = [
        (l, i, m)
        for l in range(instance.n_services)
        for i in range(instance.n_nodes)
        for m in range(instance.n_cells)
        if (l, m) in S and instance.indicator[l, i, m] and lam[l, i] > 0
    ]
    k = len(var)
    if k == 0:
        return 0.0
    if k > MAX_VERTEX_VARS:
        raise InstanceTooLarge(f"{k} dispatch variables exceeds the vertex limit of {MAX_VERTEX_VARS}")
    groups = sorted({(l, i) for l, i, _ in var})
    cells = sorted({m for _, _, m in var})
    A = np.zeros((len(groups) + len(cells), k))
    b = np.zeros(len(groups) + len(cells))
    for j, (l, i, m) in enumerate(var):
        A[groups.index((l, i)), j] = 1.0
        A[len(groups) + cells.index(m), j] = w[l] * lam[l, i]
    b[: len(groups)] = 1.0
    b[len(groups):] = instance.cell_compute[cells]
    c = np.array([lam[l, i] for l, i, _ in var])
    best = 0.0
    tol = 1e-9
    for nb in range(0, min(k, len(b)) + 1):
        for basic in itertools.combinations(range(k), nb):
            fixed = [j for j in range(k) if j not in basic]
            # every 0/1 pattern of the nonbasic variables, solved at once
            pats = np.array(list(itertools.product((0.0, 1.0), repeat=len(fixed))), dtype=float)
            pats = pats.reshape(2 ** len(fixed), len(fixed))
            for rows in itertools.combinations(range(len(b)), nb):
                Y = np.zeros((len(pats), k))
                Y[:, fixed] = pats
                if nb:
                    sub = A[np.ix_(rows, basic)]
                    if abs(np.linalg.det(sub)) < 1e-12:
                        continue
                    rhs = b[list(rows)][None, :] - pats @ A[np.ix_(rows, fixed)].T
                    Y[:, basic] = np.linalg.solve(sub, rhs.T).T
                ok = (np.all(Y >= -tol, axis=1) & np.all(Y <= 1 + tol, axis=1)
                      & np.all(Y @ A.T <= b + 1e-9 * np.maximum(1.0, np.abs(b)), axis=1))
                if ok.any():
                    best = max(best, float(np.max(Y[ok] @ c)))
    return best


def _feasible_subsets(instance: ChannelInstance, pairs: list[Pair], reverse: bool = False):
    n = len(pairs)
    masks = range((1 << n) - 1, -1, -1) if reverse else range(1 << n)
    for mask in masks:
        s = frozenset(pairs[j] for j in range(n) if mask >> j & 1)
        if is_feasible(instance, s):
            yield s


def brute_force_jsord(
    instance: ChannelInstance,
    omega: Callable | None = None,
    reverse: bool = False,
) -> tuple[float, frozenset, int]:
    """Exact optimum over all memory-feasible orchestration sets.

    Returns (optimum, optimal set, number of sets scored).  Among optimal sets
    the one enumerated first wins, so with the default order an all-zero
    instance reports the empty set.
    """
    pairs = instance.all_pairs()
    if len(pairs) > MAX_PAIRS:
        raise InstanceTooLarge(f"{len(pairs)} pairs exceeds the oracle limit of {MAX_PAIRS}")
    omega = omega or reference_omega
    best, best_set, count = -np.inf, frozenset(), 0
    for s in _feasible_subsets(instance, pairs, reverse=reverse):
        v = omega(instance, s)
        count += 1
        if v > best + VIOLATION_TOL:
            best, best_set = v, s
    return float(max(best, 0.0)), best_set, count


@dataclass
class OracleReport:
    optimum: float
    optimal_set: list
    greedy_value: float
    ratio_bound: float
    bound_satisfied: bool
    enumerated_sets: int
    ratio_p: int = 1
    instance_seed: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def approximation_report(instance: ChannelInstance, seed: int | None = None) -> OracleReport:
    opt, opt_set, count = brute_force_jsord(instance)
    greedy = greedy_orchestrate(instance)
    p = ratio_p(instance.services)
    bound = 1.0 / (1 + p)
    return OracleReport(
        optimum=opt,
        optimal_set=sorted(opt_set),
        greedy_value=greedy.objective,
        ratio_bound=bound,
        bound_satisfied=bool(
            greedy.objective >= opt * bound - VIOLATION_TOL
            and greedy.objective <= opt + VIOLATION_TOL
        ),
        enumerated_sets=count,
        ratio_p=p,
        instance_seed=seed,
    )


@dataclass
class Violation:
    kind: str
    s1: list
    s2: list
    element: list | None
    lhs: float
    rhs: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _random_chain(instance: ChannelInstance, rng: np.random.Generator):
    """Random feasible S1 subset of S2; S2 is a random greedy-feasible prefix."""
    pairs = instance.all_pairs()
    order = rng.permutation(len(pairs))
    chain: list[Pair] = []
    for j in order:
        cand = chain + [pairs[j]]
        if is_feasible(instance, cand):
            chain = cand
    k2 = int(rng.integers(0, len(chain) + 1))
    s2 = chain[:k2]
    keep = rng.random(len(s2)) < 0.5
    s1 = [e for e, kp in zip(s2, keep) if kp]
    return frozenset(s1), frozenset(s2)


def check_monotonicity(
    instance: ChannelInstance,
    samples: int,
    seed: int,
    omega: Callable = evaluate_omega,
) -> list[Violation]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(samples):
        s1, s2 = _random_chain(instance, rng)
        a, b = omega(instance, s1), omega(instance, s2)
        if a > b + VIOLATION_TOL:
            out.append(Violation("monotonicity", sorted(s1), sorted(s2), None, a, b))
    return out


def check_submodularity(
    instance: ChannelInstance,
    samples: int,
    seed: int,
    omega: Callable = evaluate_omega,
    max_attempts: int = 50,
) -> list[Violation]:
    """Sample S1 <= S2 and e outside S2 with S2 + e feasible; report marginal-gain inversions."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(samples):
        for _attempt in range(max_attempts):
            s1, s2 = _random_chain(instance, rng)
            ext = sorted(feasible_extensions(instance, s2))
            if ext:
                break
        else:
            continue
        e = ext[int(rng.integers(len(ext)))]
        g1 = omega(instance, s1 | {e}) - omega(instance, s1)
        g2 = omega(instance, s2 | {e}) - omega(instance, s2)
        if g1 < g2 - VIOLATION_TOL:
            out.append(Violation("submodularity", sorted(s1), sorted(s2), list(e), g1, g2))
    return out


def lemma1_condition(instance: ChannelInstance) -> str | None:
    """Which sufficient submodularity condition the instance meets, if any."""
    lam_w = float(np.sum(instance.compute_req[:, None] * instance.arrivals))
    if np.all(instance.cell_compute >= lam_w):
        return "compute"
    r = instance.memory_req
    R = instance.cell_memory
    if np.all(r > 0) and np.all(np.floor(R[None, :] / r[:, None]) <= 1):
        return "memory"
    return None


def random_instance(
    rng: np.random.Generator,
    n_services: int = 3,
    n_cells: int = 3,
    n_nodes: int = 4,
    condition: str | None = "compute",
    p_reachable: float = 0.7,
) -> ChannelInstance:
    """Small random channel instance.

    ``condition`` selects which sufficient submodularity condition to enforce:
    "compute" (cell compute covers the whole channel load), "memory" (no cell
    fits two replicas of any service) or None (contended compute).
    """
    L, M, N = n_services, n_cells, n_nodes
    exec_t = rng.uniform(1.0, 5.0, L)
    slack = rng.uniform(5.0, 30.0, L)
    services = tuple(
        ServiceSpec(
            channel_id=1,
            service_id=l,
            packet_size=float(rng.uniform(1e4, 1e5)),
            memory_req=float(rng.uniform(1.0, 4.0)),
            compute_req=float(rng.uniform(0.1, 1.0)),
            deadline=float(exec_t[l] + slack[l]),
            exec_time=float(exec_t[l]),
        )
        for l in range(L)
    )
    arrivals = rng.integers(0, 6, size=(L, N)).astype(float)
    reach = rng.random((L, N, M)) < p_reachable
    budget = (slack - 1e-3)[:, None, None]
    latency = np.where(reach, rng.uniform(0.0, 1.0, (L, N, M)) * budget, budget + rng.uniform(0.1, 20.0, (L, N, M)))
    indicator = (np.array([s.deadline - s.exec_time for s in services])[:, None, None] - latency) > 0
    load = float(np.sum(np.array([s.compute_req for s in services])[:, None] * arrivals))

    if condition == "compute":
        cell_compute = load + rng.uniform(0.0, 5.0, M)
        cell_memory = rng.uniform(2.0, 8.0, M)
    elif condition == "memory":
        cell_memory = rng.uniform(4.0, 5.0, M)
        services = tuple(
            ServiceSpec(
                s.channel_id, s.service_id, s.packet_size,
                float(rng.uniform(2.6, 5.0)), s.compute_req, s.deadline, s.exec_time,
            )
            for s in services
        )
        cell_compute = rng.uniform(0.2, 1.0, M) * max(load, 1.0)
    elif condition is None:
        cell_memory = rng.uniform(2.0, 8.0, M)
        cell_compute = rng.uniform(0.1, 0.6, M) * max(load, 1.0)
    else:
        raise ValueError(f"unknown condition {condition!r}")

    return ChannelInstance(
        channel_id=1,
        services=services,
        cell_ids=tuple(range(M)),
        cell_compute=cell_compute,
        cell_memory=cell_memory,
        arrivals=arrivals,
        latency=latency,
        indicator=indicator,
    )


def instance_suite(
    count: int,
    seed: int,
    condition: str | None = "compute",
    max_services: int = 3,
    max_cells: int = 3,
    max_nodes: int = 4,
):
    """Deterministic stream of (instance_seed, instance) pairs."""
    for k in range(count):
        s = seed * 100_003 + k
        rng = np.random.default_rng(s)
        L = int(rng.integers(1, max_services + 1))
        M = int(rng.integers(1, max_cells + 1))
        N = int(rng.integers(1, max_nodes + 1))
        cond = condition
        if condition == "lemma1":
            cond = "compute" if k % 4 else "memory"
        yield s, random_instance(rng, L, M, N, condition=cond)
