"""Domain types and closed-form formulas for cell/channel scheduling.

Everything here is an immutable value object or a pure function.  Units:
compute in vCPUs (cells, nodes) or vCPU-slots per request (services), memory
in MB for cells and services and GB for physical nodes, latency in ms,
packet sizes in bits and bandwidth in Mbps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

CLOUD = -1  # node id used in cell compositions for the cloud center
TOL = 1e-9

DEFAULT_ALPHA = 2.0  # vCPUs, upper limit of one cell's compute
DEFAULT_BETA = 500.0  # MB, upper limit of one cell's memory
DEFAULT_CLOUD_LATENCY = 10.0  # ms
MB_PER_GB = 1024.0


class ConfigError(ValueError):
    """Invalid configuration or normalization constants."""


@dataclass(frozen=True)
class ServiceSpec:
    channel_id: int  # SLA class, 1 = highest priority
    service_id: int  # index within the class, 0-based
    packet_size: float  # bits
    memory_req: float  # MB
    compute_req: float  # vCPU-slots per request
    deadline: float  # ms
    exec_time: float  # ms

    def __post_init__(self):
        if not self.deadline > self.exec_time >= 0:
            raise ValueError(f"service {self.key}: need deadline > exec_time >= 0")
        if self.memory_req < 0 or self.compute_req < 0:
            raise ValueError(f"service {self.key}: negative resource requirement")
        if not self.packet_size > 0:
            raise ValueError(f"service {self.key}: packet_size must be positive")

    @property
    def key(self) -> tuple[int, int]:
        return (self.channel_id, self.service_id)


@dataclass(frozen=True)
class EdgeNode:
    node_id: int
    compute_cap: float  # vCPUs
    memory_cap: float  # GB
    bandwidth: float  # Mbps
    available_compute: float | None = None
    available_memory: float | None = None

    def __post_init__(self):
        if self.available_compute is None:
            object.__setattr__(self, "available_compute", self.compute_cap)
        if self.available_memory is None:
            object.__setattr__(self, "available_memory", self.memory_cap)
        if not 0 <= self.available_compute <= self.compute_cap + TOL:
            raise ValueError(f"node {self.node_id}: available compute out of range")
        if not 0 <= self.available_memory <= self.memory_cap + TOL:
            raise ValueError(f"node {self.node_id}: available memory out of range")
        if self.bandwidth <= 0:
            raise ValueError(f"node {self.node_id}: bandwidth must be positive")


@dataclass(frozen=True)
class CloudCenter:
    edge_to_cloud_latency: float = DEFAULT_CLOUD_LATENCY
    compute_cap: float = math.inf
    memory_cap: float = math.inf

    def __post_init__(self):
        if self.edge_to_cloud_latency < 0:
            raise ValueError("edge_to_cloud_latency must be >= 0")

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.compute_cap) and math.isinf(self.memory_cap)


@dataclass(frozen=True)
class Topology:
    """Undirected edge-cluster graph with per-link latencies (ms)."""

    nodes: tuple[EdgeNode, ...]
    edges: frozenset[tuple[int, int]]
    link_latency: Mapping[tuple[int, int], float]
    _paths: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        ids = [n.node_id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValueError("node ids must be 0..N-1 in order")
        norm = frozenset((min(a, b), max(a, b)) for a, b in self.edges)
        for a, b in norm:
            if a == b or not (0 <= a < len(ids) and 0 <= b < len(ids)):
                raise ValueError(f"edge ({a}, {b}) references a missing node")
        lat = {}
        for a, b in norm:
            v = self.link_latency.get((a, b), self.link_latency.get((b, a)))
            if v is None or v < 0:
                raise ValueError(f"edge ({a}, {b}) lacks a nonnegative latency")
            lat[(a, b)] = float(v)
        object.__setattr__(self, "edges", norm)
        object.__setattr__(self, "link_latency", lat)
        n = len(ids)
        if n and lat:
            rows, cols, vals = zip(*[(a, b, v) for (a, b), v in lat.items()])
            # zero-latency links must still count as edges for csgraph
            vals = [max(v, 1e-300) for v in vals]
            g = csr_matrix((vals, (rows, cols)), shape=(n, n))
            paths = shortest_path(g, method="D", directed=False)
            paths[paths < 1e-200] = 0.0
        else:
            paths = np.full((n, n), np.inf)
            np.fill_diagonal(paths, 0.0)
        object.__setattr__(self, "_paths", paths)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def neighborhood(self, i: int) -> list[int]:
        """Node i plus its direct neighbours, ascending ids."""
        out = {i}
        for a, b in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)

    def path_latency(self, i: int, j: int) -> float:
        return float(self._paths[i, j])

    @property
    def path_matrix(self) -> np.ndarray:
        return self._paths


@dataclass(frozen=True)
class CellCharacteristics:
    w_norm: float
    r_norm: float
    edge_fraction: float
    epsilon: float

    def __post_init__(self):
        for name in ("w_norm", "r_norm", "edge_fraction"):
            v = getattr(self, name)
            if not -TOL <= v <= 1 + TOL:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def vector(self) -> np.ndarray:
        """Weighted feature vector (w, r, epsilon * u) used for clustering."""
        return np.array([self.w_norm, self.r_norm, self.epsilon * self.edge_fraction])


@dataclass(frozen=True)
class ResourceCell:
    cell_id: int
    owner_node: int
    compute: float
    memory: float
    composition: tuple[tuple[int, float, float], ...]
    characteristics: CellCharacteristics | None = None

    def __post_init__(self):
        comp = tuple((int(n), float(c), float(m)) for n, c, m in self.composition)
        object.__setattr__(self, "composition", comp)
        if any(c < 0 or m < 0 for _, c, m in comp):
            raise ValueError(f"cell {self.cell_id}: negative share")
        sc = sum(c for _, c, _ in comp)
        sm = sum(m for _, _, m in comp)
        if not math.isclose(sc, self.compute, rel_tol=1e-9, abs_tol=1e-12) or not math.isclose(
            sm, self.memory, rel_tol=1e-9, abs_tol=1e-12
        ):
            raise ValueError(f"cell {self.cell_id}: shares do not sum to (compute, memory)")

    @property
    def has_cloud(self) -> bool:
        return any(n == CLOUD for n, _, _ in self.composition)

    @property
    def is_horizontal(self) -> bool:
        return not self.has_cloud


@dataclass(frozen=True)
class Channel:
    channel_id: int
    cells: tuple[ResourceCell, ...]
    services: tuple[ServiceSpec, ...]
    priority: float
    centroid: CellCharacteristics | None

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(self, "services", tuple(self.services))
        expected = 0.0 if self.centroid is None else channel_priority(self.centroid)
        if abs(self.priority - expected) > 1e-9:
            raise ValueError(f"channel {self.channel_id}: priority does not match centroid")


class Horizon(str, Enum):
    SLOT = "slot"
    FRAME = "frame"


@dataclass(frozen=True)
class ArrivalMatrix:
    """Request counts keyed by channel id; each value has shape (L_p, N)."""

    counts: Mapping[int, np.ndarray]
    horizon: Horizon = Horizon.SLOT

    def __post_init__(self):
        for p, arr in self.counts.items():
            if np.any(np.asarray(arr) < 0):
                raise ValueError(f"negative arrivals on channel {p}")

    def channel(self, p: int) -> np.ndarray:
        return np.asarray(self.counts[p])

    def total(self) -> float:
        return float(sum(np.sum(a) for a in self.counts.values()))


@dataclass(frozen=True)
class OrchestrationPlan:
    """Binary x per channel, shape (L_p, M_p)."""

    x: Mapping[int, np.ndarray]


@dataclass(frozen=True)
class DispatchPlan:
    """Fractional y for one channel, shape (L_p, N, M_p)."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.size and (y.min() < -TOL or y.max() > 1 + TOL):
            raise ValueError("dispatch probabilities outside [0, 1]")
        if y.size and np.any(y.sum(axis=2) > 1 + TOL):
            raise ValueError("dispatch mass exceeds 1 for some (service, node)")


def cell_characteristics(
    cell: ResourceCell,
    epsilon: float,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> CellCharacteristics:
    if alpha <= 0 or beta <= 0:
        raise ConfigError("cell normalization constants alpha and beta must be positive")
    edge_c = sum(c for n, c, _ in cell.composition if n != CLOUD)
    edge_m = sum(m for n, _, m in cell.composition if n != CLOUD)
    parts = []
    if cell.compute > 0:
        parts.append(edge_c / cell.compute)
    if cell.memory > 0:
        parts.append(edge_m / cell.memory)
    u = float(np.mean(parts)) if parts else 1.0
    return CellCharacteristics(
        w_norm=min(cell.compute / alpha, 1.0),
        r_norm=min(cell.memory / beta, 1.0),
        edge_fraction=min(max(u, 0.0), 1.0),
        epsilon=epsilon,
    )


def channel_priority(centroid: CellCharacteristics) -> float:
    """SLA priority: Euclidean norm of (w, r, epsilon * u)."""
    return math.sqrt(
        centroid.w_norm**2 + centroid.r_norm**2 + (centroid.epsilon * centroid.edge_fraction) ** 2
    )


def serialization_latency(packet_size: float, bandwidth_mbps: float) -> float:
    # 1 Mbps = 1000 bits/ms
    return packet_size / (bandwidth_mbps * 1000.0)


def transmission_latency(
    topology: Topology,
    cloud: CloudCenter,
    node_i: int,
    cell: ResourceCell,
    service: ServiceSpec,
) -> float:
    """Worst component latency from node_i into the cell plus serialization at node_i."""
    if not 0 <= node_i < topology.n_nodes:
        raise ValueError(f"unknown node {node_i}")
    worst = 0.0
    for n, _, _ in cell.composition:
        if n == CLOUD:
            hop = cloud.edge_to_cloud_latency
        else:
            hop = topology.path_latency(node_i, n)
            if math.isinf(hop):
                raise ValueError(f"cell {cell.cell_id}: node {n} unreachable from {node_i}")
        worst = max(worst, hop)
    bw = topology.nodes[node_i].bandwidth
    return worst + serialization_latency(service.packet_size, bw)


def deadline_indicator(service: ServiceSpec, t_im: float) -> int:
    return int(service.deadline - service.exec_time - t_im > 0)


def compute_reward(
    throughput_rates: Mapping[tuple[int, int], float],
    channel_priorities: Mapping[int, float],
) -> float:
    """Priority-weighted sum of per-service throughput rates."""
    total = 0.0
    for (p, _l), rate in throughput_rates.items():
        if not -TOL <= rate <= 1 + TOL:
            raise ValueError(f"throughput rate {rate} outside [0, 1]")
        total += channel_priorities.get(p, 0.0) * rate
    return total


def throughput_rate(served: float, arrived: float) -> float:
    # no requests -> no credit
    return served / arrived if arrived > 0 else 0.0


def services_by_channel(services: Sequence[ServiceSpec]) -> dict[int, list[ServiceSpec]]:
    out: dict[int, list[ServiceSpec]] = {}
    for s in services:
        out.setdefault(s.channel_id, []).append(s)
    for v in out.values():
        v.sort(key=lambda s: s.service_id)
    return out
