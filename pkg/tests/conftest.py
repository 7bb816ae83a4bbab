import numpy as np
import pytest

from cellsched.jsord import ChannelInstance
from cellsched.model import CloudCenter, EdgeNode, ServiceSpec, Topology

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def svc(l=0, r=1.0, w=1.0, deadline=50.0, exec_time=10.0, h=1e4, p=1):
    return ServiceSpec(p, l, h, r, w, deadline, exec_time)


def line_topology(n=3, lat=2.0, bw=125.0, compute=4.0, memory=100.0):
    nodes = tuple(EdgeNode(i, compute, memory, bw) for i in range(n))
    edges = frozenset((i, i + 1) for i in range(n - 1))
    return Topology(nodes, edges, {e: lat for e in edges})


def make_instance(services, W, R, lam, indicator=None, latency=None):
    """Direct ChannelInstance constructor for hand-made cases."""
    W = np.asarray(W, dtype=float)
    R = np.asarray(R, dtype=float)
    lam = np.asarray(lam, dtype=float)
    lam = lam.reshape(len(services), lam.shape[-1] if lam.ndim == 2 else -1)
    L, N, M = len(services), lam.shape[1], len(W)
    ind = np.ones((L, N, M), dtype=bool) if indicator is None else np.asarray(indicator, dtype=bool)
    lat = np.zeros((L, N, M)) if latency is None else np.asarray(latency, dtype=float)
    return ChannelInstance(1, tuple(services), tuple(range(M)), W, R, lam, lat, ind)


def dispatch_violation(inst, S, y):
    """Largest violation of mass <= 1, cell capacity, y <= min(x, indicator) and 0 <= y <= 1."""
    x = np.zeros((inst.n_services, inst.n_cells), dtype=bool)
    for l, m in S:
        x[l, m] = True
    allowed = x[:, None, :] & inst.indicator
    lam = inst.arrivals
    load = np.einsum("l,li,lim->m", inst.compute_req, lam, y)
    return max(
        float(np.max(y.sum(axis=2) - 1.0, initial=0.0)),
        float(np.max(load - inst.cell_compute, initial=0.0)),
        float(np.max(np.abs(y[~allowed]), initial=0.0)),
        float(max(-y.min(initial=0.0), y.max(initial=0.0) - 1.0)),
    )


@pytest.fixture
def cloud():
    return CloudCenter()
