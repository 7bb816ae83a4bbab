"""Request traces, synthetic workloads, and JSON/YAML (de)serialization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .jsord import ChannelInstance
from .model import ServiceSpec

TRACE_COLUMNS = (
    "timestamp_s",
    "node_id",
    "sla_class",
    "service_id",
    "request_count",
    "cpu_req",
    "mem_req",
    "deadline_ms",
)
INSTANCE_VERSION = "jsord-instance/1"


class TraceError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class ArrivalProcess:
    """Per-slot request counts, shape (slots, services, nodes).

    ``service_keys[k]`` is the (sla_class, service_id) of row k.  Reading past
    the end wraps around.
    """

    counts: np.ndarray
    service_keys: tuple[tuple[int, int], ...]
    slot_width: float = 1.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.service_keys = tuple((int(p), int(l)) for p, l in self.service_keys)
        if self.counts.ndim != 3 or self.counts.shape[1] != len(self.service_keys):
            raise ValueError("counts must have shape (slots, services, nodes)")
        if np.any(self.counts < 0):
            raise ValueError("negative request counts")

    @property
    def n_slots(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def at(self, t: int) -> np.ndarray:
        return self.counts[t % self.n_slots]


def _service_index(services_per_class: Mapping[int, int]) -> list[tuple[int, int]]:
    return [(p, l) for p in sorted(services_per_class) for l in range(services_per_class[p])]


def load_trace(
    path: str | Path,
    services_per_class: Mapping[int, int],
    n_nodes: int,
    slot_width: float = 1.0,
) -> ArrivalProcess:
    """Bin a normalized CSV trace into per-slot arrival counts.

    Slot 0 starts at the first record's timestamp.  ``sla_class`` maps to the
    channel of the same rank.
    """
    if slot_width <= 0:
        raise TraceError("slot width must be positive")
    keys = _service_index(services_per_class)
    index = {k: j for j, k in enumerate(keys)}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != TRACE_COLUMNS:
            raise TraceError(f"{path}:1: header must be {','.join(TRACE_COLUMNS)}")
        last_ts = -math.inf
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(TRACE_COLUMNS):
                raise TraceError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields, got {len(rec)}")
            try:
                ts = float(rec[0])
                node, cls, sid, count = (int(rec[k]) for k in (1, 2, 3, 4))
                cpu, mem, ddl = (float(rec[k]) for k in (5, 6, 7))
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(ts):
                raise TraceError(f"{path}:{lineno}: non-finite timestamp")
            if ts < last_ts:
                raise TraceError(f"{path}:{lineno}: timestamps must be nondecreasing")
            last_ts = ts
            if count < 0:
                raise TraceError(f"{path}:{lineno}: negative request_count")
            if not 0 <= node < n_nodes:
                raise TraceError(f"{path}:{lineno}: node_id {node} out of range")
            if cls not in services_per_class:
                raise TraceError(f"{path}:{lineno}: sla_class {cls} out of range")
            if (cls, sid) not in index:
                raise TraceError(f"{path}:{lineno}: service_id {sid} out of range for class {cls}")
            rows.append((ts, node, index[(cls, sid)], count))
    if not rows:
        raise TraceError(f"{path}: no records")
    t0 = rows[0][0]
    slots = [int((ts - t0) // slot_width) for ts, *_ in rows]
    counts = np.zeros((max(slots) + 1, len(keys), n_nodes), dtype=np.int64)
    for t, (_, node, j, count) in zip(slots, rows):
        counts[t, j, node] += count
    return ArrivalProcess(counts, tuple(keys), slot_width)


def write_trace(
    path: str | Path,
    process: ArrivalProcess,
    services: Sequence[ServiceSpec] = (),
) -> int:
    """Write nonzero cells of an arrival process as a normalized CSV trace."""
    spec = {s.key: s for s in services}
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t in range(process.n_slots):
            for j, (p, l) in enumerate(process.service_keys):
                s = spec.get((p, l))
                for i in np.nonzero(process.counts[t, j])[0]:
                    w.writerow([
                        repr(t * process.slot_width), int(i), p, l, int(process.counts[t, j, i]),
                        repr(s.compute_req if s else 0.0), repr(s.memory_req if s else 0.0),
                        repr(s.deadline if s else 0.0),
                    ])
                    n += 1
    return n


@dataclass
class WorkloadModel:
    """Poisson arrivals with optional diurnal modulation and gamma burstiness."""

    base_rates: np.ndarray  # (services, nodes), requests per slot
    service_keys: tuple[tuple[int, int], ...]
    diurnal_amplitude: float = 0.0
    diurnal_period: int = 100
    burstiness: float = 0.0  # variance of the mean-one rate multiplier
    seed: int = 0

    def __post_init__(self):
        self.base_rates = np.asarray(self.base_rates, dtype=float)
        self.service_keys = tuple((int(p), int(l)) for p, l in self.service_keys)
        if np.any(self.base_rates < 0):
            raise ValueError("rates must be nonnegative")
        if not 0.0 <= self.diurnal_amplitude <= 1.0:
            raise ValueError("diurnal amplitude must lie in [0, 1]")
        if self.base_rates.shape[0] != len(self.service_keys):
            raise ValueError("one rate row per service")

    def rate(self, t: int) -> np.ndarray:
        mod = 1.0
        if self.diurnal_amplitude:
            mod = 1.0 + self.diurnal_amplitude * math.sin(2 * math.pi * t / self.diurnal_period)
        return self.base_rates * mod

    def sample(self, t: int, rng: np.random.Generator) -> np.ndarray:
        lam = self.rate(t)
        if self.burstiness > 0:
            k = 1.0 / self.burstiness
            lam = lam * rng.gamma(k, 1.0 / k, size=lam.shape)
        return rng.poisson(lam)


def synth_trace(model: WorkloadModel, frames: int, slots_per_frame: int) -> ArrivalProcess:
    rng = np.random.default_rng(model.seed)
    n = frames * slots_per_frame
    counts = np.zeros((n,) + model.base_rates.shape, dtype=np.int64)
    for t in range(n):
        counts[t] = model.sample(t, rng)
    return ArrivalProcess(counts, model.service_keys)


_SERVICE_FIELDS = ("channel_id", "service_id", "packet_size", "memory_req", "compute_req", "deadline", "exec_time")
_INSTANCE_FIELDS = ("version", "channel_id", "services", "cell_ids", "cell_compute", "cell_memory",
                    "arrivals", "latency", "indicator")


def export_instance(inst: ChannelInstance) -> dict:
    return {
        "version": INSTANCE_VERSION,
        "channel_id": inst.channel_id,
        "priority": inst.priority,
        "services": [{k: getattr(s, k) for k in _SERVICE_FIELDS} for s in inst.services],
        "cell_ids": list(inst.cell_ids),
        "cell_compute": inst.cell_compute.tolist(),
        "cell_memory": inst.cell_memory.tolist(),
        "arrivals": inst.arrivals.tolist(),
        "latency": inst.latency.tolist(),
        "indicator": inst.indicator.astype(int).tolist(),
    }


def import_instance(doc: Mapping) -> ChannelInstance:
    for k in _INSTANCE_FIELDS:
        if k not in doc:
            raise SchemaError(f"instance document missing field {k!r}")
    if doc["version"] != INSTANCE_VERSION:
        raise SchemaError(f"unknown instance version {doc['version']!r}")
    services = []
    for j, s in enumerate(doc["services"]):
        for k in _SERVICE_FIELDS:
            if k not in s:
                raise SchemaError(f"services[{j}] missing field {k!r}")
        services.append(ServiceSpec(**{k: s[k] for k in _SERVICE_FIELDS}))
    L, M = len(services), len(doc["cell_ids"])
    arrivals = np.array(doc["arrivals"], dtype=float).reshape(L, -1)
    N = arrivals.shape[1]
    return ChannelInstance(
        channel_id=int(doc["channel_id"]),
        services=tuple(services),
        cell_ids=tuple(doc["cell_ids"]),
        cell_compute=np.array(doc["cell_compute"], dtype=float),
        cell_memory=np.array(doc["cell_memory"], dtype=float),
        arrivals=arrivals,
        latency=np.array(doc["latency"], dtype=float).reshape(L, N, M),
        indicator=np.array(doc["indicator"], dtype=bool).reshape(L, N, M),
        priority=float(doc.get("priority", 0.0)),
    )


def save_instance(inst: ChannelInstance, path: str | Path) -> None:
    Path(path).write_text(json.dumps(export_instance(inst), indent=1))


def load_instance(path: str | Path) -> ChannelInstance:
    return import_instance(json.loads(Path(path).read_text()))


def load_config(path: str | Path) -> dict:
    """Read a YAML config file into a plain dict (empty file -> {})."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be a mapping")
    return doc


def dump_config(cfg: Mapping, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dict(cfg), sort_keys=True))


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` (dotted keys allowed) with YAML-typed values."""
    out = json.loads(json.dumps(cfg))
    for item in overrides:
        if "=" not in item:
            raise SchemaError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SchemaError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return out
