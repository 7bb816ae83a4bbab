import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellsched.customizer import (
    CellDemand,
    RegionState,
    allocate_cell,
    assign_services_to_channels,
    cluster_channels,
    release_cell,
)
from cellsched.model import CLOUD, CloudCenter, ResourceCell, cell_characteristics
from cellsched.sim import SimConfig, make_services

from conftest import line_topology, svc


def region(n=2, **kw):
    return RegionState(line_topology(n, **kw), CloudCenter(), epsilon=1.5)


def test_mixed_draw_example():
    st_ = region(2)
    st_.avail_compute[:] = [1.0, 1.0]
    st_.avail_memory[:] = [250.0, 0.0]
    cell = allocate_cell(st_, CellDemand(0, 1.0, 1.0))
    assert cell.composition == ((0, 1.0, 250.0), (1, 1.0, 0.0), (CLOUD, 0.0, 250.0))
    assert cell.characteristics.edge_fraction == pytest.approx(0.75)
    assert st_.avail_compute.tolist() == [0.0, 0.0]
    assert st_.avail_memory.tolist() == [0.0, 0.0]
    assert st_.cloud_memory == 250.0


def test_horizontal_cell():
    st_ = region(3)
    cell = allocate_cell(st_, CellDemand(1, 0.5, 0.5))
    assert cell.is_horizontal
    assert cell.characteristics.edge_fraction == 1.0
    assert cell.composition[0][0] == 1


def test_vertical_extreme():
    st_ = region(2)
    st_.avail_compute[:] = 0.0
    st_.avail_memory[:] = 0.0
    cell = allocate_cell(st_, CellDemand(0, 0.3, 0.4))
    assert cell.composition == ((CLOUD, 0.6, 200.0),)
    assert cell.characteristics.edge_fraction == 0.0


def test_degenerate_and_invalid_demand():
    with pytest.raises(ValueError):
        allocate_cell(region(), CellDemand(0, 0.0, 0.0))
    with pytest.raises(ValueError):
        CellDemand(0, 1.2, 0.0)


def test_allocation_is_deterministic():
    a, b = region(4), region(4)
    for d in [CellDemand(1, 1.0, 1.0), CellDemand(2, 0.7, 0.1), CellDemand(1, 1.0, 1.0)]:
        assert allocate_cell(a, d).composition == allocate_cell(b, d).composition


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0.01, 1.0), st.floats(0.0, 1.0)), min_size=1, max_size=25))
def test_resource_conservation(demands):
    topo = line_topology(4, compute=2.0, memory=0.5)
    s = RegionState(topo, CloudCenter())
    drawn_c, drawn_m = np.zeros(4), np.zeros(4)
    cells = []
    for owner, c, m in demands:
        cell = allocate_cell(s, CellDemand(owner, c, m))
        cells.append(cell)
        for n, dc, dm in cell.composition:
            if n != CLOUD:
                assert n in topo.neighborhood(owner)
                drawn_c[n] += dc
                drawn_m[n] += dm
    assert np.all(s.avail_compute >= 0) and np.all(s.avail_memory >= 0)
    np.testing.assert_allclose(s.compute_cap - s.avail_compute, drawn_c, atol=1e-9)
    np.testing.assert_allclose(s.memory_cap - s.avail_memory, drawn_m, atol=1e-9)
    for cell in cells:
        release_cell(s, cell)
    np.testing.assert_allclose(s.avail_compute, s.compute_cap, atol=1e-9)
    np.testing.assert_allclose(s.avail_memory, s.memory_cap, atol=1e-9)
    assert abs(s.cloud_compute) < 1e-9 and abs(s.cloud_memory) < 1e-9


def synthetic_cell(cid, w, r, u, alpha=2.0, beta=500.0):
    c, m = w * alpha, r * beta
    comp = ((0, c * u, m * u), (CLOUD, c * (1 - u), m * (1 - u)))
    cell = ResourceCell(cid, 0, c, m, comp)
    return ResourceCell(cid, 0, c, m, comp, cell_characteristics(cell, 1.5))


def test_single_channel():
    cells = [synthetic_cell(i, 0.1 * (i + 1), 0.5, 1.0) for i in range(5)]
    res = cluster_channels(cells, 1, 1.5, seed=0)
    assert len(res.channels) == 1 and len(res.channels[0].cells) == 5
    np.testing.assert_allclose(res.centroids[0], [0.3, 0.5, 1.0])


def test_separated_blobs():
    rng = np.random.default_rng(0)
    lo = [synthetic_cell(i, *rng.uniform(0.05, 0.15, 2), 0.0) for i in range(10)]
    hi = [synthetic_cell(10 + i, *rng.uniform(0.85, 0.95, 2), 1.0) for i in range(10)]
    res = cluster_channels(lo + hi, 2, 1.5, seed=1)
    # the edge-heavy blob has the larger priority so becomes channel 1
    assert {res.assignments[c.cell_id] for c in hi} == {1}
    assert {res.assignments[c.cell_id] for c in lo} == {2}


def test_identical_features_terminate():
    cells = [synthetic_cell(i, 0.5, 0.5, 0.5) for i in range(6)]
    res = cluster_channels(cells, 3, 1.5, seed=2)
    assert sum(len(ch.cells) for ch in res.channels) == 6
    assert res.iterations <= 100
    assert all(ch.cells for ch in res.channels)


def test_too_few_cells():
    with pytest.raises(ValueError):
        cluster_channels([synthetic_cell(0, 0.5, 0.5, 0.5)], 2, 1.5, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_postconditions(seed, k):
    rng = np.random.default_rng(seed)
    cells = [synthetic_cell(i, *rng.uniform(0.01, 1.0, 2), rng.uniform()) for i in range(k + int(rng.integers(0, 20)))]
    res = cluster_channels(cells, k, 1.5, seed=seed)
    assert len(res.channels) == k
    assert sorted(res.assignments) == [c.cell_id for c in cells]
    prios = [ch.priority for ch in res.channels]
    assert all(a >= b for a, b in zip(prios, prios[1:]))
    weighted = res.centroids * np.array([1.0, 1.0, 1.5])
    for c in cells:
        d = np.linalg.norm(weighted - c.characteristics.vector(), axis=1)
        own = d[res.assignments[c.cell_id] - 1]
        assert own <= d.min() + 1e-9


def test_clustering_is_seeded():
    rng = np.random.default_rng(4)
    cells = [synthetic_cell(i, *rng.uniform(0.01, 1.0, 2), rng.uniform()) for i in range(30)]
    a = cluster_channels(cells, 4, 1.5, seed=9)
    b = cluster_channels(cells, 4, 1.5, seed=9)
    assert a.assignments == b.assignments


def test_assign_services_bijection_and_errors():
    services = [svc(0, p=p) for p in (1, 2, 3)]
    m = assign_services_to_channels(services, 3)
    assert {p: [s.channel_id for s in v] for p, v in m.items()} == {1: [1], 2: [2], 3: [3]}
    assert assign_services_to_channels([], 3) == {}
    with pytest.raises(ValueError):
        assign_services_to_channels([svc(0, p=4)], 3)


def test_generated_services_per_channel():
    cfg = SimConfig()
    for seed in range(10):
        m = assign_services_to_channels(make_services(cfg, np.random.default_rng(seed)), 6)
        assert sorted(m) == list(range(1, 7))
        assert all(2 <= len(v) <= 4 for v in m.values())
