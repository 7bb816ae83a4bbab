"""Joint service orchestration and request dispatch, solved one channel at a time.

Orchestration picks a set of (service, cell) pairs under per-cell memory
budgets; dispatch routes each (service, node) demand fractionally onto
orchestrated cells that meet the service deadline, subject to per-cell compute.
The orchestration set is built greedily on the optimal-dispatch value.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import highspy
import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .model import (
    CloudCenter,
    DispatchPlan,
    ResourceCell,
    ServiceSpec,
    Topology,
    deadline_indicator,
    transmission_latency,
)

Pair = tuple[int, int]  # (service index l, cell index m), both local to the instance
OrchestrationSet = frozenset  # frozenset[Pair]

MEM_TOL = 1e-9


class InstanceError(ValueError):
    """Malformed channel instance (shape or index mismatch)."""


@dataclass(frozen=True, eq=False)
class ChannelInstance:
    """Everything the per-channel optimizer needs, as dense arrays.

    ``arrivals`` has shape (L, N); ``latency`` and ``indicator`` have shape
    (L, N, M) because the serialization term depends on the service's packet size.
    """

    channel_id: int
    services: tuple[ServiceSpec, ...]
    cell_ids: tuple[int, ...]
    cell_compute: np.ndarray
    cell_memory: np.ndarray
    arrivals: np.ndarray
    latency: np.ndarray
    indicator: np.ndarray
    priority: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "services", tuple(self.services))
        object.__setattr__(self, "cell_ids", tuple(int(c) for c in self.cell_ids))
        for name in ("cell_compute", "cell_memory", "arrivals", "latency"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "indicator", np.asarray(self.indicator, dtype=bool))
        L, M = len(self.services), len(self.cell_ids)
        if self.cell_compute.shape != (M,) or self.cell_memory.shape != (M,):
            raise InstanceError("cell capacity arrays must have one entry per cell")
        if self.arrivals.ndim != 2 or self.arrivals.shape[0] != L:
            raise InstanceError(f"arrivals shape {self.arrivals.shape} does not match {L} services")
        N = self.arrivals.shape[1]
        if self.latency.shape != (L, N, M) or self.indicator.shape != (L, N, M):
            raise InstanceError(f"latency/indicator tables must have shape {(L, N, M)}")
        if np.any(self.arrivals < 0):
            raise InstanceError("negative arrivals")
        if len(set(self.cell_ids)) != M:
            raise InstanceError("duplicate cell ids")

    @property
    def n_services(self) -> int:
        return len(self.services)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_nodes(self) -> int:
        return self.arrivals.shape[1]

    @property
    def memory_req(self) -> np.ndarray:
        return np.array([s.memory_req for s in self.services], dtype=float)

    @property
    def compute_req(self) -> np.ndarray:
        return np.array([s.compute_req for s in self.services], dtype=float)

    def all_pairs(self) -> list[Pair]:
        return [(l, m) for l in range(self.n_services) for m in range(self.n_cells)]

    def with_arrivals(self, arrivals: np.ndarray) -> ChannelInstance:
        return replace(self, arrivals=np.asarray(arrivals, dtype=float))

    def __eq__(self, other):
        if not isinstance(other, ChannelInstance):
            return NotImplemented
        return (
            self.channel_id == other.channel_id
            and self.services == other.services
            and self.cell_ids == other.cell_ids
            and self.priority == other.priority
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("cell_compute", "cell_memory", "arrivals", "latency", "indicator")
            )
        )

    __hash__ = None


def build_instance(
    channel_id: int,
    services: Sequence[ServiceSpec],
    cells: Sequence[ResourceCell],
    arrivals: np.ndarray,
    topology: Topology,
    cloud: CloudCenter,
    priority: float = 0.0,
) -> ChannelInstance:
    L, M, N = len(services), len(cells), topology.n_nodes
    lat = np.zeros((L, N, M))
    for l, svc in enumerate(services):
        for m, cell in enumerate(cells):
            for i in range(N):
                lat[l, i, m] = transmission_latency(topology, cloud, i, cell, svc)
    ind = np.zeros((L, N, M), dtype=bool)
    for l, svc in enumerate(services):
        ind[l] = (svc.deadline - svc.exec_time - lat[l]) > 0
    return ChannelInstance(
        channel_id=channel_id,
        services=tuple(services),
        cell_ids=tuple(c.cell_id for c in cells),
        cell_compute=np.array([c.compute for c in cells], dtype=float),
        cell_memory=np.array([c.memory for c in cells], dtype=float),
        arrivals=np.asarray(arrivals, dtype=float).reshape(L, N),
        latency=lat,
        indicator=ind,
        priority=priority,
    )


def indicator_table(services: Sequence[ServiceSpec], latency: np.ndarray) -> np.ndarray:
    """Deadline indicator for every (l, i, m), computed entry by entry."""
    out = np.zeros(latency.shape, dtype=bool)
    for idx in np.ndindex(*latency.shape):
        out[idx] = bool(deadline_indicator(services[idx[0]], float(latency[idx])))
    return out


def is_feasible(instance: ChannelInstance, orchestration: Iterable[Pair]) -> bool:
    used = np.zeros(instance.n_cells)
    r = instance.memory_req
    for l, m in orchestration:
        used[m] += r[l]
    return bool(np.all(used <= instance.cell_memory + MEM_TOL))


def _check_pairs(instance: ChannelInstance, orchestration: Iterable[Pair]) -> np.ndarray:
    x = np.zeros((instance.n_services, instance.n_cells), dtype=bool)
    for l, m in orchestration:
        if not (0 <= l < instance.n_services and 0 <= m < instance.n_cells):
            raise InstanceError(f"pair ({l}, {m}) outside the instance index space")
        x[l, m] = True
    return x


def solve_dispatch_lp(
    instance: ChannelInstance,
    orchestration: Iterable[Pair],
    arrivals: np.ndarray | None = None,
    cache: dict | None = None,
) -> tuple[DispatchPlan, float]:
    """Optimal fractional dispatch y for a fixed orchestration.

    Returns the plan and the number of requests served, sum(lambda * y).
    ``cache`` memoizes component solutions across calls with equal inputs.
    """
    lam = instance.arrivals if arrivals is None else np.asarray(arrivals, dtype=float)
    if lam.shape != instance.arrivals.shape:
        raise InstanceError(f"arrivals shape {lam.shape} != {instance.arrivals.shape}")
    x = _check_pairs(instance, orchestration)
    L, N, M = instance.n_services, instance.n_nodes, instance.n_cells
    y = np.zeros((L, N, M))
    free = x[:, None, :] & instance.indicator & (lam[:, :, None] > 0)
    if not free.any():
        return DispatchPlan(y), 0.0

    w = instance.compute_req
    W = instance.cell_compute
    # Peel: a cell whose potential load (every eligible request routed to it)
    # fits its capacity can take each of those (l, i) groups whole.  Moving a
    # group entirely onto such a cell never lowers the optimum, so peeled
    # groups are fixed at y = 1 and only the contended remainder needs an LP.
    served = 0.0
    while True:
        potential = np.einsum("l,li,lim->m", w, lam, free)
        slack = potential <= W
        reach = free & slack[None, None, :]
        covered = reach.any(axis=2)
        if not covered.any():
            break
        first = reach.argmax(axis=2)
        ls, is_ = np.nonzero(covered)
        y[ls, is_, first[ls, is_]] = 1.0
        served += float(np.sum(lam[covered]))
        free = free & ~covered[:, :, None]
    if not free.any():
        return DispatchPlan(y), served
    contended = potential > W

    var = np.argwhere(free)  # rows of (l, i, m)
    lv, iv, mv = var[:, 0], var[:, 1], var[:, 2]
    group = lv * N + iv
    # groups and cells interact only through shared variables; each connected
    # component is an independent LP
    G = L * N
    adj = sparse.coo_matrix((np.ones(len(var)), (group, G + mv)), shape=(G + M, G + M))
    _, comp = connected_components(adj, directed=False)
    vcomp = comp[group]
    sol = np.zeros(len(var))
    for c in np.unique(vcomp):
        idx = np.nonzero(vcomp == c)[0]
        sol[idx] = _solve_component(var[idx], lam, w, W, contended, cache)
    y[lv, iv, mv] = sol
    _repair(y, lam, w, W)
    return DispatchPlan(y), float(np.einsum("li,lim->", lam, y))


def _solve_component(var, lam, w, W, contended, cache) -> np.ndarray:
    lv, iv, mv = var[:, 0], var[:, 1], var[:, 2]
    coef = lam[lv, iv]
    key = None
    if cache is not None:
        key = (var.tobytes(), coef.tobytes())
        hit = cache.get(key)
        if hit is not None:
            return hit
    out = _closed_form(lv, iv, mv, coef, w, W, contended)
    if out is None:
        out = _component_lp(lv, iv, mv, coef, w, W, contended)
    if key is not None:
        cache[key] = out
    return out


def _closed_form(lv, iv, mv, coef, w, W, contended) -> np.ndarray | None:
    """Exact solutions for the two component shapes that need no LP."""
    cells = np.unique(mv)
    if len(cells) == 1:
        m = cells[0]
        if not contended[m]:
            return np.ones(len(lv))
        # fractional knapsack: every request is worth 1 and costs w_l
        out = np.zeros(len(lv))
        room = W[m]
        for j in np.argsort(w[lv], kind="stable"):
            need = w[lv[j]] * coef[j]
            if need <= room:
                out[j] = 1.0
                room -= need
            else:
                out[j] = room / need if need > 0 else 1.0
                break
        return out
    if len(np.unique(lv * (int(iv.max()) + 1) + iv)) == 1:
        # one (l, i) group over several cells, each too small to hold it alone
        out = np.zeros(len(lv))
        left = 1.0
        for j in range(len(lv)):
            need = w[lv[j]] * coef[j]
            cap = W[mv[j]] / need if contended[mv[j]] and need > 0 else 1.0
            out[j] = min(left, cap)
            left -= out[j]
            if left <= 0:
                break
        return out
    return None


def _component_lp(lv, iv, mv, coef, w, W, contended) -> np.ndarray:
    k = len(lv)
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    # per (l, i) total dispatch mass <= 1, only needed with two or more targets
    group = lv * (int(iv.max()) + 1) + iv
    uniq, counts = np.unique(group, return_counts=True)
    for g in uniq[counts > 1]:
        idx = np.nonzero(group == g)[0]
        rows.extend([r] * len(idx))
        cols.extend(idx.tolist())
        vals.extend([1.0] * len(idx))
        rhs.append(1.0)
        r += 1
    # per-cell compute capacity, only for cells that could be overloaded
    for m in np.unique(mv):
        if not contended[m]:
            continue
        idx = np.nonzero(mv == m)[0]
        rows.extend([r] * len(idx))
        cols.extend(idx.tolist())
        vals.extend((w[lv[idx]] * coef[idx]).tolist())
        rhs.append(W[m])
        r += 1
    A = sparse.csc_matrix((vals, (rows, cols)), shape=(r, k))
    # HiGHS called directly: same solver scipy's linprog wraps, minus the
    # per-call input validation that dominated runtime on these small LPs
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    lp = highspy.HighsLp()
    lp.num_col_, lp.num_row_ = k, r
    lp.col_cost_ = -coef
    lp.col_lower_ = np.zeros(k)
    lp.col_upper_ = np.ones(k)
    lp.row_lower_ = np.full(r, -highspy.kHighsInf)
    lp.row_upper_ = np.asarray(rhs, dtype=float)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    h.passModel(lp)
    h.run()
    status = h.getModelStatus()
    if status != highspy.HighsModelStatus.kOptimal:
        raise RuntimeError(f"dispatch LP failed: {h.modelStatusToString(status)}")
    return np.clip(np.asarray(h.getSolution().col_value), 0.0, 1.0)


def _repair(y: np.ndarray, lam: np.ndarray, w: np.ndarray, W: np.ndarray) -> None:
    """Scale away solver-tolerance violations of the mass and capacity rows in place."""
    mass = y.sum(axis=2)
    over = mass > 1.0
    if over.any():
        y[over] /= mass[over][:, None]
    load = np.einsum("l,li,lim->m", w, lam, y)
    for m in np.nonzero(load > W)[0]:
        y[:, :, m] *= W[m] / load[m]


def evaluate_omega(instance: ChannelInstance, orchestration: Iterable[Pair], cache: dict | None = None) -> float:
    """Optimal dispatch objective for a fixed orchestration set."""
    return solve_dispatch_lp(instance, orchestration, cache=cache)[1]


def feasible_extensions(instance: ChannelInstance, current: Iterable[Pair]) -> set[Pair]:
    current = set(current)
    used = np.zeros(instance.n_cells)
    r = instance.memory_req
    for l, m in current:
        used[m] += r[l]
    return {
        (l, m)
        for l in range(instance.n_services)
        for m in range(instance.n_cells)
        if (l, m) not in current and used[m] + r[l] <= instance.cell_memory[m] + MEM_TOL
    }


def ratio_p(services: Sequence[ServiceSpec]) -> int:
    """Independence-system parameter ceil(max r / min positive r); 1 if no memory demand."""
    rs = [s.memory_req for s in services]
    pos = [r for r in rs if r > 0]
    if not pos:
        return 1
    return max(1, math.ceil(max(pos) / min(pos) - 1e-9))


@dataclass
class GreedyResult:
    channel_id: int
    orchestration: frozenset
    x: np.ndarray
    dispatch: DispatchPlan
    objective: float
    rounds: int = 0
    evaluations: int = 0
    trace: list = field(default_factory=list, repr=False)

    def same_plan(self, other: GreedyResult) -> bool:
        return (
            self.channel_id == other.channel_id
            and self.orchestration == other.orchestration
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.dispatch.y, other.dispatch.y)
            and self.objective == other.objective
        )


def _gain_cap(instance: ChannelInstance, e: Pair) -> float:
    """Upper bound on what adding pair e can add to the dispatch objective."""
    l, m = e
    reach = float(np.sum(instance.arrivals[l] * instance.indicator[l, :, m]))
    w = instance.services[l].compute_req
    if w > 0:
        reach = min(reach, instance.cell_compute[m] / w)
    return reach


def greedy_orchestrate(instance: ChannelInstance, prune: bool = True) -> GreedyResult:
    """Greedy orchestration on the optimal-dispatch value.

    Each round adds the feasible pair with the largest value of the extended
    set; near-ties (1e-9 relative) go to the lexicographically smallest
    (service, cell).  With ``prune`` a candidate is skipped only when a valid
    upper bound proves it cannot reach the tie band, so the chosen pair is the
    same either way.
    """
    memo: dict[frozenset, float] = {}
    lp_cache: dict = {}
    evals = 0

    def omega(s: frozenset) -> float:
        nonlocal evals
        v = memo.get(s)
        if v is None:
            evals += 1
            v = memo[s] = evaluate_omega(instance, s, cache=lp_cache)
        return v

    S: frozenset = frozenset()
    cur = 0.0
    memo[S] = 0.0
    trace = []
    T = feasible_extensions(instance, S)
    while T:
        cand = sorted(T)
        caps = {e: _gain_cap(instance, e) for e in cand}
        order = sorted(cand, key=lambda e: (-caps[e], e)) if prune else cand
        values: dict[Pair, float] = {}
        best = -math.inf
        for e in order:
            if prune and cur + caps[e] < best - 1e-9 * max(1.0, abs(best)):
                break
            if caps[e] <= 0:
                v = cur  # no new eligible demand: value unchanged
            else:
                v = omega(S | {e})
            values[e] = v
            best = max(best, v)
        tol = 1e-9 * max(1.0, abs(best))
        e_star = min(e for e, v in values.items() if v >= best - tol)
        S = S | {e_star}
        cur = values[e_star]
        memo.setdefault(S, cur)
        trace.append((e_star, cur))
        T = feasible_extensions(instance, S)

    x = _check_pairs(instance, S).astype(np.int8)
    plan, obj = solve_dispatch_lp(instance, S, cache=lp_cache)
    return GreedyResult(
        channel_id=instance.channel_id,
        orchestration=S,
        x=x,
        dispatch=plan,
        objective=obj,
        rounds=len(trace),
        evaluations=evals,
        trace=trace,
    )


def solve_all_channels(
    instances: Sequence[ChannelInstance], workers: int = 1
) -> list[GreedyResult]:
    """Run the greedy independently per channel; results do not depend on ``workers``."""
    seen_cells: set[int] = set()
    seen_services: set[tuple[int, int]] = set()
    for inst in instances:
        overlap = seen_cells.intersection(inst.cell_ids)
        if overlap:
            raise InstanceError(f"cells {sorted(overlap)} appear in more than one channel")
        keys = {s.key for s in inst.services}
        if seen_services & keys:
            raise InstanceError("services appear in more than one channel")
        seen_cells.update(inst.cell_ids)
        seen_services |= keys
    if workers <= 1 or len(instances) <= 1:
        return [greedy_orchestrate(inst) for inst in instances]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(greedy_orchestrate, instances))
