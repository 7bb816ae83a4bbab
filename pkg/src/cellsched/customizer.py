"""Turn agent actions into resource cells and group cells into SLA channels."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    CLOUD,
    DEFAULT_ALPHA,
    DEFAULT_BETA,
    MB_PER_GB,
    CellCharacteristics,
    Channel,
    CloudCenter,
    ResourceCell,
    ServiceSpec,
    Topology,
    cell_characteristics,
    channel_priority,
)

_EPS = 1e-12


@dataclass(frozen=True)
class CellDemand:
    owner_node: int
    compute_frac: float
    memory_frac: float
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        for name in ("compute_frac", "memory_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def compute_req(self) -> float:
        return self.alpha * self.compute_frac

    @property
    def memory_req(self) -> float:
        return self.beta * self.memory_frac

    @property
    def degenerate(self) -> bool:
        return self.compute_req <= _EPS and self.memory_req <= _EPS


class RegionState:
    """Mutable availability of every edge node plus cloud draw totals.

    Single writer: cells must be allocated and released from one thread.
    Memory is tracked in MB.
    """

    def __init__(self, topology: Topology, cloud: CloudCenter, epsilon: float = 1.5,
                 alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA):
        self.topology = topology
        self.cloud = cloud
        self.epsilon = epsilon
        self.alpha = alpha
        self.beta = beta
        self.compute_cap = np.array([n.compute_cap for n in topology.nodes], dtype=float)
        self.memory_cap = np.array([n.memory_cap * MB_PER_GB for n in topology.nodes], dtype=float)
        self.avail_compute = self.compute_cap.copy()
        self.avail_memory = self.memory_cap.copy()
        self.cloud_compute = 0.0
        self.cloud_memory = 0.0
        self._neigh = [topology.neighborhood(i) for i in range(topology.n_nodes)]
        self._next_id = 0

    def neighborhood(self, i: int) -> list[int]:
        return self._neigh[i]

    def reset(self) -> None:
        self.avail_compute[:] = self.compute_cap
        self.avail_memory[:] = self.memory_cap
        self.cloud_compute = self.cloud_memory = 0.0
        self._next_id = 0

    def new_cell_id(self) -> int:
        cid = self._next_id
        self._next_id += 1
        return cid


def allocate_cell(state: RegionState, demand: CellDemand, cell_id: int | None = None) -> ResourceCell:
    """Draw the demand from the owner's neighbourhood, owner first then ascending ids,
    and take any shortfall from the cloud."""
    if demand.degenerate:
        raise ValueError("degenerate cell demand (0, 0)")
    need_c, need_m = demand.compute_req, demand.memory_req
    comp = []
    owner = demand.owner_node
    order = [owner] + [j for j in state.neighborhood(owner) if j != owner]
    for j in order:
        dc = min(state.avail_compute[j], need_c)
        dm = min(state.avail_memory[j], need_m)
        if dc <= 0 and dm <= 0:
            continue
        dc, dm = max(dc, 0.0), max(dm, 0.0)
        state.avail_compute[j] -= dc
        state.avail_memory[j] -= dm
        need_c -= dc
        need_m -= dm
        comp.append((j, dc, dm))
    if need_c > _EPS or need_m > _EPS:
        need_c, need_m = max(need_c, 0.0), max(need_m, 0.0)
        state.cloud_compute += need_c
        state.cloud_memory += need_m
        comp.append((CLOUD, need_c, need_m))
    cid = state.new_cell_id() if cell_id is None else cell_id
    cell = ResourceCell(
        cell_id=cid,
        owner_node=owner,
        compute=demand.compute_req,
        memory=demand.memory_req,
        composition=tuple(comp),
    )
    chars = cell_characteristics(cell, state.epsilon, state.alpha, state.beta)
    return ResourceCell(cid, owner, cell.compute, cell.memory, cell.composition, chars)


def release_cell(state: RegionState, cell: ResourceCell) -> None:
    for n, c, m in cell.composition:
        if n == CLOUD:
            state.cloud_compute -= c
            state.cloud_memory -= m
        else:
            state.avail_compute[n] = min(state.avail_compute[n] + c, state.compute_cap[n])
            state.avail_memory[n] = min(state.avail_memory[n] + m, state.memory_cap[n])


@dataclass
class ClusteringResult:
    channels: list[Channel]
    assignments: dict[int, int]  # cell_id -> channel_id
    centroids: np.ndarray  # (P, 3) raw (w, r, u) means, channel order
    iterations: int = 0
    labels: np.ndarray = field(default=None, repr=False)


def _features(cells: Sequence[ResourceCell], epsilon: float) -> np.ndarray:
    return np.array(
        [[c.characteristics.w_norm, c.characteristics.r_norm, epsilon * c.characteristics.edge_fraction]
         for c in cells],
        dtype=float,
    ).reshape(len(cells), 3)


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    for j in range(1, k):
        d2 = np.min(((X[:, None, :] - centers[None, :j, :]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = X[idx]
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _repair_empty(X: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> None:
    # move the worst-fit member of the largest cluster into each empty cluster
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        big = int(np.argmax(sizes))
        members = np.nonzero(labels == big)[0]
        d2 = ((X[members] - centers[big]) ** 2).sum(axis=1)
        far = members[int(np.argmax(d2))]
        labels[far] = j
        centers[j] = X[far]


def cluster_channels(
    cells: Sequence[ResourceCell],
    n_channels: int,
    epsilon: float,
    seed: int,
    services: Sequence[ServiceSpec] = (),
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusteringResult:
    """Lloyd k-means on (w, r, epsilon*u) with k-means++ seeding.

    Channels are numbered 1..P by descending priority.  Services are bound by
    SLA class when given.
    """
    k = n_channels
    if k < 1:
        raise ValueError("need at least one channel")
    if len(cells) < k:
        raise ValueError(f"{len(cells)} cells cannot form {k} channels")
    X = _features(cells, epsilon)
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels = np.full(len(X), -1)
    it = 0
    for it in range(1, max_iter + 1):
        new = _assign(X, centers)
        _repair_empty(X, new, centers, k)
        moved_centers = np.array([X[new == j].mean(axis=0) for j in range(k)])
        shift = float(np.max(np.linalg.norm(moved_centers - centers, axis=1)))
        stable = np.array_equal(new, labels)
        labels, centers = new, moved_centers
        if stable or shift < tol:
            break

    raw = np.array([
        [np.mean([cells[n].characteristics.w_norm for n in np.nonzero(labels == j)[0]]),
         np.mean([cells[n].characteristics.r_norm for n in np.nonzero(labels == j)[0]]),
         np.mean([cells[n].characteristics.edge_fraction for n in np.nonzero(labels == j)[0]])]
        for j in range(k)
    ])
    cents = [
        CellCharacteristics(float(a), float(b), float(min(max(u, 0.0), 1.0)), epsilon)
        for a, b, u in raw
    ]
    prio = [channel_priority(c) for c in cents]
    # descending priority; original cluster index breaks ties
    rank = sorted(range(k), key=lambda j: (-prio[j], j))
    by_class = assign_services_to_channels(services, k) if services else {}
    channels, assignments = [], {}
    relabel = np.empty(len(labels), dtype=int)
    for pos, j in enumerate(rank):
        cid = pos + 1
        members = [cells[n] for n in np.nonzero(labels == j)[0]]
        for c in members:
            assignments[c.cell_id] = cid
        relabel[labels == j] = cid
        channels.append(
            Channel(
                channel_id=cid,
                cells=tuple(members),
                services=tuple(by_class.get(cid, ())),
                priority=prio[j],
                centroid=cents[j],
            )
        )
    return ClusteringResult(
        channels=channels,
        assignments=assignments,
        centroids=raw[rank],
        iterations=it,
        labels=relabel,
    )


def assign_services_to_channels(
    services: Sequence[ServiceSpec], n_channels: int
) -> dict[int, list[ServiceSpec]]:
    """Bind each service to the channel whose priority rank equals its SLA class."""
    out: dict[int, list[ServiceSpec]] = {}
    for s in services:
        if not 1 <= s.channel_id <= n_channels:
            raise ValueError(f"service {s.key}: SLA class outside 1..{n_channels}")
        out.setdefault(s.channel_id, []).append(s)
    for v in out.values():
        v.sort(key=lambda s: s.service_id)
    return out
