"""Two-time-scale edge-cloud simulator.

Per frame: rebuild cells from agent actions, cluster them into channels,
bind services by SLA class and orchestrate each channel greedily.  Per slot:
draw arrivals, solve the dispatch LP under the frame's orchestration, route
integral requests and account service, drops and capacity.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import networkx as nx
import numpy as np

from . import jsord
from .customizer import CellDemand, ClusteringResult, RegionState, allocate_cell, cluster_channels
from .jsord import ChannelInstance, GreedyResult, build_instance, solve_all_channels, solve_dispatch_lp
from .model import (
    Channel,
    CloudCenter,
    ConfigError,
    EdgeNode,
    ResourceCell,
    ServiceSpec,
    Topology,
    throughput_rate,
)
from .traceio import ArrivalProcess, WorkloadModel, load_trace

log = logging.getLogger(__name__)

CAP_TOL = 1e-9


@dataclass
class SimConfig:
    n_nodes: int = 10
    n_channels: int = 6
    slots_per_frame: int = 100
    cells_per_node: int = 6
    epsilon: float = 1.5
    compute_range: tuple[float, float] = (2.0, 4.0)  # vCPU per node
    memory_range: tuple[float, float] = (100.0, 200.0)  # GB per node
    bandwidth_choices: tuple[float, ...] = (125.0, 12.5)  # Mbps
    cloud_latency: float = 10.0  # ms
    alpha: float = 2.0  # vCPU, largest cell
    beta: float = 500.0  # MB, largest cell
    seed: int = 0
    # topology
    radius: float = 0.45
    ms_per_unit: float = 10.0
    topology_blobs: int = 0  # 0 places nodes uniformly
    blob_spread: float = 0.1
    resource_heterogeneity: float = 1.0  # 0 gives identical nodes, same totals in expectation
    # services
    services_per_channel: tuple[int, int] = (2, 4)
    packet_size_range: tuple[float, float] = (1e4, 1e5)  # bits
    service_memory_range: tuple[float, float] = (50.0, 200.0)  # MB
    service_compute_range: tuple[float, float] = (0.02, 0.1)  # vCPU-slots per request
    exec_time_range: tuple[float, float] = (1.0, 10.0)  # ms
    slack_range: tuple[float, float] = (2.0, 60.0)  # ms beyond exec time; split by class
    # workload
    rate_range: tuple[float, float] = (0.5, 3.0)  # requests per slot per (service, node)
    rate_scale: float = 1.0
    diurnal_amplitude: float = 0.0
    diurnal_period: int = 100
    burstiness: float = 0.0
    trace_path: str | None = None
    slot_width: float = 1.0  # seconds, trace binning only
    workers: int = 1

    def __post_init__(self):
        for name in ("compute_range", "memory_range", "bandwidth_choices", "services_per_channel",
                     "packet_size_range", "service_memory_range", "service_compute_range",
                     "exec_time_range", "slack_range", "rate_range"):
            setattr(self, name, tuple(getattr(self, name)))
        ints = ("n_nodes", "n_channels", "slots_per_frame", "cells_per_node")
        if any(getattr(self, k) < 1 for k in ints):
            raise ConfigError(f"{', '.join(ints)} must all be >= 1")
        if self.alpha <= 0 or self.beta <= 0 or self.epsilon < 0:
            raise ConfigError("alpha, beta must be positive and epsilon nonnegative")
        lo, hi = self.services_per_channel
        if not 1 <= lo <= hi:
            raise ConfigError("services_per_channel must satisfy 1 <= lo <= hi")
        if self.radius <= 0 or self.ms_per_unit < 0 or self.cloud_latency < 0:
            raise ConfigError("radius must be positive; latencies nonnegative")
        if min(self.compute_range) <= 0 or min(self.memory_range) <= 0 or min(self.bandwidth_choices) <= 0:
            raise ConfigError("node resources must be positive")
        if self.rate_scale < 0 or min(self.rate_range) < 0:
            raise ConfigError("arrival rates must be nonnegative")

    @classmethod
    def from_dict(cls, d: Mapping) -> SimConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @property
    def max_services(self) -> int:
        return self.services_per_channel[1]

    @property
    def obs_dim(self) -> int:
        """(i) arrivals and (ii) 4 descriptors per padded service slot,
        (iii) (w, r, u) per owned cell slot, (iv) neighbourhood availability."""
        return self.n_channels * self.max_services * 5 + 3 * self.cells_per_node + 2

    @property
    def action_dim(self) -> int:
        return 2 * self.cells_per_node


def make_topology(cfg: SimConfig, rng: np.random.Generator) -> tuple[Topology, np.ndarray]:
    """Random geometric graph over the unit square, patched to be connected."""
    n = cfg.n_nodes
    if cfg.topology_blobs > 0:
        centers = rng.uniform(0.2, 0.8, (cfg.topology_blobs, 2))
        which = rng.integers(cfg.topology_blobs, size=n)
        pos = np.clip(centers[which] + rng.normal(0.0, cfg.blob_spread, (n, 2)), 0.0, 1.0)
    else:
        pos = rng.uniform(0.0, 1.0, (n, 2))
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from((a, b) for a in range(n) for b in range(a + 1, n) if dist[a, b] <= cfg.radius)
    comps = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])
    while len(comps) > 1:
        base, rest = comps[0], [v for c in comps[1:] for v in c]
        sub = dist[np.ix_(base, rest)]
        a, b = np.unravel_index(np.argmin(sub), sub.shape)
        g.add_edge(base[a], rest[b])
        comps = sorted((sorted(c) for c in nx.connected_components(g)), key=lambda c: c[0])

    raw_w = rng.uniform(*cfg.compute_range, n)
    raw_r = rng.uniform(*cfg.memory_range, n)
    h = cfg.resource_heterogeneity
    w = np.clip(raw_w.mean() + h * (raw_w - raw_w.mean()), 1e-6, None)
    r = np.clip(raw_r.mean() + h * (raw_r - raw_r.mean()), 1e-6, None)
    bw = rng.choice(np.asarray(cfg.bandwidth_choices, dtype=float), size=n)
    nodes = tuple(EdgeNode(i, float(w[i]), float(r[i]), float(bw[i])) for i in range(n))
    edges = frozenset((min(a, b), max(a, b)) for a, b in g.edges)
    lat = {e: float(dist[e] * cfg.ms_per_unit) for e in edges}
    return Topology(nodes, edges, lat), pos


def make_services(cfg: SimConfig, rng: np.random.Generator) -> list[ServiceSpec]:
    """2-4 services per SLA class; lower classes get tighter deadlines."""
    out = []
    lo, hi = cfg.slack_range
    P = cfg.n_channels
    for p in range(1, P + 1):
        s_lo = lo + (p - 1) / P * (hi - lo)
        s_hi = lo + p / P * (hi - lo)
        for l in range(int(rng.integers(cfg.services_per_channel[0], cfg.services_per_channel[1] + 1))):
            ex = float(rng.uniform(*cfg.exec_time_range))
            out.append(ServiceSpec(
                channel_id=p,
                service_id=l,
                packet_size=float(rng.uniform(*cfg.packet_size_range)),
                memory_req=float(rng.uniform(*cfg.service_memory_range)),
                compute_req=float(rng.uniform(*cfg.service_compute_range)),
                deadline=ex + float(rng.uniform(s_lo, s_hi)),
                exec_time=ex,
            ))
    return out


@dataclass
class Metrics:
    arrived: dict[int, np.ndarray]  # channel -> (L_p, N), cumulative
    served: dict[int, np.ndarray]
    slots: int = 0
    frames: int = 0
    frame_rewards: list[list[float]] = field(default_factory=list)

    @classmethod
    def empty(cls, services: Mapping[int, Sequence[ServiceSpec]], n_nodes: int, n_channels: int) -> Metrics:
        z = {p: np.zeros((len(services.get(p, ())), n_nodes), dtype=np.int64) for p in range(1, n_channels + 1)}
        return cls({p: a.copy() for p, a in z.items()}, {p: a.copy() for p, a in z.items()})

    @property
    def total_arrived(self) -> int:
        return int(sum(a.sum() for a in self.arrived.values()))

    @property
    def total_served(self) -> int:
        return int(sum(a.sum() for a in self.served.values()))

    @property
    def sla_violations(self) -> dict[int, np.ndarray]:
        # every request not served within its deadline counts as a violation
        return {p: self.arrived[p] - self.served[p] for p in self.arrived}

    @property
    def throughput_rate(self) -> float:
        return throughput_rate(self.total_served, self.total_arrived)

    def channel_served(self) -> dict[int, int]:
        return {p: int(a.sum()) for p, a in self.served.items()}

    def copy(self) -> Metrics:
        return Metrics({p: a.copy() for p, a in self.arrived.items()},
                       {p: a.copy() for p, a in self.served.items()},
                       self.slots, self.frames, [list(r) for r in self.frame_rewards])

    def summary(self) -> dict:
        served = self.channel_served()
        arrived = {p: int(a.sum()) for p, a in self.arrived.items()}
        total = self.total_arrived
        rewards = np.array(self.frame_rewards) if self.frame_rewards else np.zeros((0, 0))
        return {
            "frames": self.frames,
            "slots": self.slots,
            "arrived": total,
            "served": self.total_served,
            "dropped": total - self.total_served,
            "throughput": self.throughput_rate,
            "channels": [
                {"channel_id": p, "arrived": arrived[p], "served": served[p],
                 "share": served[p] / total if total else 0.0}
                for p in sorted(served)
            ],
            "mean_reward": float(rewards.mean()) if rewards.size else 0.0,
        }


@dataclass
class SlotResult:
    slot: int
    arrived: dict[int, np.ndarray]  # (L_p, N)
    served: dict[int, np.ndarray]  # (L_p, N)
    routed: dict[int, np.ndarray]  # (L_p, N, M_p) integer requests served per cell


@dataclass
class FrameResult:
    frame: int
    rewards: np.ndarray
    observations: list[np.ndarray]
    record: dict


@dataclass
class AuditLog:
    """Counters filled when the simulator runs with ``audit=True``."""

    slots: int = 0
    conservation_errors: int = 0
    max_capacity_excess: float = -math.inf
    indicator_violations: int = 0
    memory_violations: int = 0
    priority_order_violations: int = 0
    plan_changes_within_frame: int = 0

    @property
    def clean(self) -> bool:
        return (self.conservation_errors == 0 and self.max_capacity_excess <= CAP_TOL
                and self.indicator_violations == 0 and self.memory_violations == 0
                and self.priority_order_violations == 0 and self.plan_changes_within_frame == 0)


def apportion(counts: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Largest-remainder split of integer counts (L, N) over cells by y (L, N, M).

    The leftover mass 1 - sum(y) is an extra "dropped" bucket, placed last so
    cells win ties.  Totals are conserved exactly.
    """
    L, N, M = y.shape
    share = np.concatenate([y, np.clip(1.0 - y.sum(axis=2, keepdims=True), 0.0, None)], axis=2)
    share = share.reshape(L * N, M + 1)
    share /= np.maximum(share.sum(axis=1, keepdims=True), 1e-300)
    n = counts.reshape(L * N).astype(np.int64)
    quota = share * n[:, None]
    base = np.floor(quota + 1e-12).astype(np.int64)
    base = np.minimum(base, n[:, None])
    rem = n - base.sum(axis=1)
    frac = quota - base
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(M + 1)[None, :].repeat(L * N, axis=0), axis=1)
    base += (rank < rem[:, None]).astype(np.int64)
    return base[:, :M].reshape(L, N, M)


def trim_to_capacity(routed: np.ndarray, w: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Drop requests from over-capacity cells, highest (service, node) index first."""
    routed = routed.copy()
    load = np.einsum("l,lim->m", w, routed)
    for m in np.nonzero(load > W + CAP_TOL)[0]:
        for l in range(routed.shape[0] - 1, -1, -1):
            for i in range(routed.shape[1] - 1, -1, -1):
                while routed[l, i, m] > 0 and load[m] > W[m] + CAP_TOL:
                    routed[l, i, m] -= 1
                    load[m] -= w[l]
    return routed


class EdgeSim:
    """Single-writer simulator; see module docstring for the per-frame/per-slot steps."""

    def __init__(self, cfg: SimConfig, arrival_process: ArrivalProcess | None = None, audit: bool = False):
        self.cfg = cfg
        self.audit_enabled = audit
        self._external_process = arrival_process
        self.reset()

    # setup
    def reset(self, episode_seed: int | None = None) -> list[np.ndarray]:
        cfg = self.cfg
        sys_rng = np.random.default_rng(cfg.seed)
        self.topology, self.positions = make_topology(cfg, sys_rng)
        self.cloud = CloudCenter(edge_to_cloud_latency=cfg.cloud_latency)
        self.services = make_services(cfg, sys_rng)
        self.services_by_class: dict[int, list[ServiceSpec]] = {p: [] for p in range(1, cfg.n_channels + 1)}
        for s in self.services:
            self.services_by_class[s.channel_id].append(s)
        self.service_keys = [s.key for s in self.services]
        self._rows = {}
        k = 0
        for p in range(1, cfg.n_channels + 1):
            n = len(self.services_by_class[p])
            self._rows[p] = slice(k, k + n)
            k += n
        rates = sys_rng.uniform(*cfg.rate_range, (len(self.services), cfg.n_nodes)) * cfg.rate_scale
        self.workload = WorkloadModel(rates, tuple(self.service_keys), cfg.diurnal_amplitude,
                                      cfg.diurnal_period, cfg.burstiness, cfg.seed)
        self.process = self._external_process
        if self.process is None and cfg.trace_path:
            per_class = {p: len(v) for p, v in self.services_by_class.items()}
            self.process = load_trace(cfg.trace_path, per_class, cfg.n_nodes, cfg.slot_width)
        if self.process is not None and list(self.process.service_keys) != self.service_keys:
            raise ConfigError("arrival process services do not match the generated service set")

        seq = np.random.SeedSequence([cfg.seed, 0 if episode_seed is None else episode_seed + 1])
        self.rng = np.random.default_rng(seq)
        self.region = RegionState(self.topology, self.cloud, cfg.epsilon, cfg.alpha, cfg.beta)
        self.frame = 0
        self.slot = 0
        self.cells: list[ResourceCell] = []
        self.channels: list[Channel] = []
        self.instances: dict[int, ChannelInstance] = {}
        self.plans: dict[int, GreedyResult] = {}
        self.clustering: ClusteringResult | None = None
        self.metrics = Metrics.empty(self.services_by_class, cfg.n_nodes, cfg.n_channels)
        # frame-average arrivals used as the predictor; cold start from generator rates
        self.predicted = {p: self.workload.base_rates[self._rows[p]].copy() for p in self._rows}
        self.last_frame_arrivals = {p: np.zeros_like(v) for p, v in self.predicted.items()}
        self.audit = AuditLog()
        self._neigh = [self.topology.neighborhood(i) for i in range(cfg.n_nodes)]
        return self.observe_all()

    # observations
    def observe(self, node: int) -> np.ndarray:
        cfg = self.cfg
        Lmax = cfg.max_services
        arr = np.zeros((cfg.n_channels, Lmax))
        desc = np.zeros((cfg.n_channels, Lmax, 4))
        rate_norm = max(cfg.rate_range[1] * cfg.rate_scale, 1e-9)
        w_norm = max(cfg.service_compute_range[1], 1e-9)
        for p in range(1, cfg.n_channels + 1):
            for l, s in enumerate(self.services_by_class[p]):
                arr[p - 1, l] = self.last_frame_arrivals[p][l, node] / rate_norm
                desc[p - 1, l] = (s.compute_req / w_norm, s.memory_req / cfg.beta,
                                  s.deadline / 100.0, s.exec_time / 100.0)
        own = np.zeros((cfg.cells_per_node, 3))
        mine = [c for c in self.cells if c.owner_node == node][: cfg.cells_per_node]
        for k, c in enumerate(mine):
            ch = c.characteristics
            own[k] = (ch.w_norm, ch.r_norm, ch.edge_fraction)
        nb = self._neigh[node]
        avail = (
            self.region.avail_compute[nb].sum() / self.region.compute_cap[nb].sum(),
            self.region.avail_memory[nb].sum() / self.region.memory_cap[nb].sum(),
        )
        return np.concatenate([arr.ravel(), desc.ravel(), own.ravel(), np.asarray(avail)])

    def observe_all(self) -> list[np.ndarray]:
        return [self.observe(i) for i in range(self.cfg.n_nodes)]

    # frame scale
    def customize(self, joint_actions: Sequence[np.ndarray]) -> None:
        """Rebuild cells and channels from actions and orchestrate every channel."""
        cfg = self.cfg
        if len(joint_actions) != cfg.n_nodes:
            raise ValueError(f"expected {cfg.n_nodes} action vectors, got {len(joint_actions)}")
        acts = []
        for i, a in enumerate(joint_actions):
            a = np.asarray(a, dtype=float)
            if a.shape != (cfg.action_dim,):
                raise ValueError(f"agent {i}: action shape {a.shape} != {(cfg.action_dim,)}")
            if np.any(a < -1e-12) or np.any(a > 1 + 1e-12):
                raise ValueError(f"agent {i}: actions must lie in [0, 1]")
            acts.append(np.clip(a, 0.0, 1.0))

        self.region.reset()  # every cell is torn down at the frame boundary
        cells = []
        for i, a in enumerate(acts):
            for k in range(cfg.cells_per_node):
                d = CellDemand(i, float(a[2 * k]), float(a[2 * k + 1]), cfg.alpha, cfg.beta)
                if d.degenerate:
                    continue
                cells.append(allocate_cell(self.region, d))
        self.cells = cells

        channels: list[Channel] = []
        self.clustering = None
        if cells:
            k = min(cfg.n_channels, len(cells))
            seed = int(np.random.SeedSequence([cfg.seed, 7919, self.frame]).generate_state(1)[0])
            self.clustering = cluster_channels(cells, k, cfg.epsilon, seed)
            channels = list(self.clustering.channels)
        for p in range(len(channels) + 1, cfg.n_channels + 1):
            channels.append(Channel(p, (), (), 0.0, None))
        self.channels = [
            Channel(c.channel_id, c.cells, tuple(self.services_by_class[c.channel_id]), c.priority, c.centroid)
            for c in channels
        ]

        self.instances = {}
        for ch in self.channels:
            if ch.cells and ch.services:
                self.instances[ch.channel_id] = build_instance(
                    ch.channel_id, ch.services, ch.cells, self.predicted[ch.channel_id],
                    self.topology, self.cloud, ch.priority,
                )
        order = sorted(self.instances)
        results = solve_all_channels([self.instances[p] for p in order], workers=cfg.workers)
        self.plans = dict(zip(order, results))
        if self.audit_enabled:
            self._audit_frame()

    def step_frame(self, joint_actions: Sequence[np.ndarray]) -> FrameResult:
        cfg = self.cfg
        self.customize(joint_actions)
        plan_snapshot = {p: r.x.copy() for p, r in self.plans.items()}
        f_arr = {p: np.zeros_like(a) for p, a in self.metrics.arrived.items()}
        f_srv = {p: np.zeros_like(a) for p, a in self.metrics.served.items()}
        for _ in range(cfg.slots_per_frame):
            res = self.step_slot()
            for p in f_arr:
                f_arr[p] += res.arrived[p]
                f_srv[p] += res.served[p]
        if self.audit_enabled:
            for p, x in plan_snapshot.items():
                if not np.array_equal(x, self.plans[p].x):
                    self.audit.plan_changes_within_frame += 1

        prio = {ch.channel_id: ch.priority for ch in self.channels}
        rewards = np.zeros(cfg.n_nodes)
        for i in range(cfg.n_nodes):
            rewards[i] = sum(
                prio[p] * throughput_rate(f_srv[p][l, i], f_arr[p][l, i])
                for p in f_arr for l in range(f_arr[p].shape[0])
            )
        self.last_frame_arrivals = {p: a / cfg.slots_per_frame for p, a in f_arr.items()}
        self.predicted = {p: a.copy() for p, a in self.last_frame_arrivals.items()}
        self.metrics.frames += 1
        self.metrics.frame_rewards.append(rewards.tolist())

        arrived = int(sum(a.sum() for a in f_arr.values()))
        served = int(sum(a.sum() for a in f_srv.values()))
        record = {
            "frame": self.frame,
            "arrived": arrived,
            "served": served,
            "throughput": throughput_rate(served, arrived),
            "rewards": rewards.tolist(),
            "n_cells": len(self.cells),
            "channels": [
                {
                    "channel_id": ch.channel_id,
                    "priority": ch.priority,
                    "n_cells": len(ch.cells),
                    "horizontal_cells": sum(c.is_horizontal for c in ch.cells),
                    "orchestrated": len(self.plans[ch.channel_id].orchestration) if ch.channel_id in self.plans else 0,
                    "arrived": int(f_arr[ch.channel_id].sum()),
                    "served": int(f_srv[ch.channel_id].sum()),
                }
                for ch in self.channels
            ],
        }
        self.frame += 1
        return FrameResult(self.frame - 1, rewards, self.observe_all(), record)

    # slot scale
    def _draw(self) -> np.ndarray:
        if self.process is not None:
            return self.process.at(self.slot)
        return self.workload.sample(self.slot, self.rng)

    def step_slot(self) -> SlotResult:
        if self.frame == 0 and not self.channels:
            raise RuntimeError("no orchestration plan: call step_frame/customize first")
        lam_all = self._draw()
        arrived, served, routed = {}, {}, {}
        for p, rows in self._rows.items():
            lam = np.asarray(lam_all[rows], dtype=np.int64)
            arrived[p] = lam
            inst = self.instances.get(p)
            if inst is None:
                served[p] = np.zeros_like(lam)
                routed[p] = np.zeros(lam.shape + (0,), dtype=np.int64)
                continue
            plan = self.plans[p]
            dispatch, _ = solve_dispatch_lp(inst, plan.orchestration, arrivals=lam.astype(float))
            n = apportion(lam, dispatch.y)
            n = trim_to_capacity(n, inst.compute_req, inst.cell_compute)
            routed[p] = n
            served[p] = n.sum(axis=2)
            if self.audit_enabled:
                self._audit_slot(inst, plan, lam, n)
        for p in arrived:
            self.metrics.arrived[p] += arrived[p]
            self.metrics.served[p] += served[p]
        self.metrics.slots += 1
        self.slot += 1
        if self.audit_enabled:
            self.audit.slots += 1
        return SlotResult(self.slot - 1, arrived, served, routed)

    # invariant auditing
    def _audit_slot(self, inst: ChannelInstance, plan: GreedyResult, lam: np.ndarray, n: np.ndarray) -> None:
        a = self.audit
        srv = n.sum(axis=2)
        dropped = lam - srv
        if np.any(dropped < 0) or int(srv.sum() + dropped.sum()) != int(lam.sum()):
            a.conservation_errors += 1
        load = np.einsum("l,lim->m", inst.compute_req, n)
        if load.size:
            a.max_capacity_excess = max(a.max_capacity_excess, float(np.max(load - inst.cell_compute)))
        allowed = plan.x.astype(bool)[:, None, :] & inst.indicator
        a.indicator_violations += int(np.sum(n[~allowed]))

    def _audit_frame(self) -> None:
        a = self.audit
        prios = [ch.priority for ch in self.channels if ch.cells]
        if any(x < y - 1e-12 for x, y in zip(prios, prios[1:])):
            a.priority_order_violations += 1
        for p, plan in self.plans.items():
            inst = self.instances[p]
            used = plan.x.T.astype(float) @ inst.memory_req
            if np.any(used > inst.cell_memory + jsord.MEM_TOL):
                a.memory_violations += 1

    # bench helpers
    def global_instance(self) -> ChannelInstance:
        """All services against all cells as a single orchestration problem."""
        lam = np.concatenate([self.predicted[p] for p in sorted(self._rows)], axis=0)
        return build_instance(0, self.services, self.cells, lam, self.topology, self.cloud)

    def save_state(self, path: str | Path) -> None:
        Path(path).write_bytes(pickle.dumps(self))

    @staticmethod
    def load_state(path: str | Path) -> EdgeSim:
        return pickle.loads(Path(path).read_bytes())


class Policy(Protocol):
    def act(self, observations: Sequence[np.ndarray]) -> list[np.ndarray]: ...


class RandomPolicy:
    def __init__(self, n_agents: int, action_dim: int, seed: int = 0):
        self.n_agents, self.action_dim = n_agents, action_dim
        self.rng = np.random.default_rng(seed)

    def act(self, observations):
        return [self.rng.random(self.action_dim) for _ in range(self.n_agents)]


class StaticPolicy:
    """Split each node's own compute evenly over its cell slots; fixed memory share."""

    def __init__(self, sim: EdgeSim, memory_frac: float = 0.5):
        cfg = sim.cfg
        self.actions = []
        for node in sim.topology.nodes:
            c = min(1.0, node.compute_cap / cfg.cells_per_node / cfg.alpha)
            self.actions.append(np.tile([c, memory_frac], cfg.cells_per_node))

    def act(self, observations):
        return [a.copy() for a in self.actions]


class NmacPolicy:
    """Decentralized execution: each agent's actor sees only its own observation."""

    def __init__(self, learner):
        self.learner = learner

    def act(self, observations):
        return [self.learner.act(i, o) for i, o in enumerate(observations)]


@dataclass
class EpisodeResult:
    metrics: Metrics
    records: list[dict]

    @property
    def mean_reward(self) -> float:
        r = self.metrics.frame_rewards
        return float(np.mean(r)) if r else 0.0


def run_episode(
    sim: EdgeSim,
    policy: Policy,
    frames: int,
    on_frame: Callable[[FrameResult], None] | None = None,
) -> EpisodeResult:
    obs = sim.observe_all()
    records = []
    for _ in range(frames):
        res = sim.step_frame(policy.act(obs))
        obs = res.observations
        records.append(res.record)
        if on_frame is not None:
            on_frame(res)
    return EpisodeResult(sim.metrics.copy(), records)


class SimEnv:
    """Adapter exposing the simulator to the training loop."""

    def __init__(self, cfg: SimConfig):
        self.sim = EdgeSim(cfg)
        self.obs_dims = [cfg.obs_dim] * cfg.n_nodes
        self.act_dims = [cfg.action_dim] * cfg.n_nodes

    def reset(self, seed: int) -> list[np.ndarray]:
        return self.sim.reset(episode_seed=seed)

    def step(self, actions):
        res = self.sim.step_frame(actions)
        return res.observations, res.rewards


def evaluate_policy(sim: EdgeSim, policy: Policy, episodes: int, frames: int, seed_offset: int = 10_000) -> np.ndarray:
    """Mean per-agent reward of each evaluation episode (episode seeds offset from training)."""
    out = np.zeros(episodes)
    for e in range(episodes):
        obs = sim.reset(episode_seed=seed_offset + e)
        total = 0.0
        for _ in range(frames):
            res = sim.step_frame(policy.act(obs))
            obs = res.observations
            total += float(np.mean(res.rewards))
        out[e] = total / max(frames, 1)
    return out
