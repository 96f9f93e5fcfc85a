import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gto.errors import ConfigError, CoverageError, ValidationError
from gto.meshgraph import (DirectedEdgeSet, Mesh, edges_from_cells, flux_filter, merge_predictions,
                           orient_edges, partition_mesh, point_edge_consistent_sample, sample_edges,
                           scale_tier, symmetric_closure, topology_aware_sample)

from conftest import grid_mesh, square_mesh


def pair_set(es):
    return set(map(tuple, es.pairs.tolist()))


# ----------------------------------------------------------------- mesh

def test_mesh_rejects_bad_cells():
    with pytest.raises(ValidationError):
        Mesh(np.zeros((3, 2)), [[0, 1, 3]])
    with pytest.raises(ValidationError):
        Mesh(np.zeros((3, 2)), [[0, 1, 2]], node_type=[0, 0, 3], boundary_mask=[True, False, False])


def test_mesh_boundary_mask_defaults_to_typed_nodes():
    m = square_mesh()
    np.testing.assert_array_equal(m.boundary_mask, [True, True, False, False])


def test_edges_single_triangle():
    np.testing.assert_array_equal(edges_from_cells([[0, 1, 2]]), [[0, 1], [0, 2], [1, 2]])


def test_edges_two_triangles_share_edge():
    cells = [[0, 1, 2], [1, 3, 2]]
    # enumerate perimeters by hand and dedupe
    expected = {tuple(sorted(e)) for c in cells for e in zip(c, c[1:] + c[:1])}
    assert len(expected) == 5
    assert set(map(tuple, edges_from_cells(cells).tolist())) == expected


def test_edges_empty_and_degenerate():
    assert edges_from_cells(np.zeros((0, 3), dtype=int)).shape == (0, 2)
    with pytest.raises(ValidationError):
        edges_from_cells([[0, 1, 1]])


def test_quad_cells_give_perimeter_only():
    e = edges_from_cells([[0, 1, 2, 3]])
    assert set(map(tuple, e.tolist())) == {(0, 1), (1, 2), (2, 3), (0, 3)}


def test_subset_keeps_inner_cells():
    m = grid_mesh(3, 3)
    sub = m.subset([0, 1, 3, 4])
    assert sub.num_nodes == 4
    assert len(sub.cells) == 2
    np.testing.assert_array_equal(sub.coords, m.coords[[0, 1, 3, 4]])


# ------------------------------------------------------------ edge sets

def test_edge_set_invariants():
    with pytest.raises(ValidationError):
        DirectedEdgeSet([0], [0])
    with pytest.raises(ValidationError):
        DirectedEdgeSet([0, 0], [1, 1])
    with pytest.raises(ValidationError):
        DirectedEdgeSet([0], [5], num_nodes=3)


def test_orient_positive_negative_and_tie():
    coords = np.zeros((8, 2))
    coords[1] = [1, 0]
    flux = np.zeros((8, 2))
    flux[0] = [1, 0]
    assert orient_edges([[0, 1]], coords, flux).pairs.tolist() == [[0, 1]]
    flux[0] = [-1, 0]
    assert orient_edges([[0, 1]], coords, flux).pairs.tolist() == [[1, 0]]
    coords[3], coords[7] = [0, 0], [1, 0]
    flux[3] = [0, 1]
    assert orient_edges([[7, 3]], coords, flux).pairs.tolist() == [[3, 7]]
    assert orient_edges([[7, 3]], coords).pairs.tolist() == [[3, 7]]


def test_orient_shape_mismatch():
    with pytest.raises(ValidationError):
        orient_edges([[0, 1]], np.zeros((2, 2)), np.zeros((3, 2)))


def test_flux_filter_examples():
    es = DirectedEdgeSet.from_pairs([[0, 1], [1, 0], [1, 2], [2, 1]])
    assert len(flux_filter(es)) == 2
    one_way = DirectedEdgeSet.from_pairs([[2, 0], [1, 3]])
    assert flux_filter(one_way) == one_way


def test_flux_filter_matches_orientation_pairwise(rng):
    m = grid_mesh(4, 4)
    pairs = m.edges[:10]
    flux = rng.normal(size=(m.num_nodes, 2))
    both = symmetric_closure(pairs)
    kept = flux_filter(both, m.coords, flux)
    assert len(kept) == 10
    # pairwise scan: each undirected edge must follow the sign of the flux projection
    for i, j in pairs:
        phi = flux[i] @ (m.coords[j] - m.coords[i])
        want = (i, j) if phi > 0 or (phi == 0 and i < j) else (j, i)
        assert want in pair_set(kept)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_flux_filter_of_closure_is_idempotent(seed):
    r = np.random.default_rng(seed)
    m = grid_mesh(4, 3)
    flux = r.normal(size=(m.num_nodes, 2))
    once = flux_filter(symmetric_closure(m.edges), m.coords, flux)
    twice = flux_filter(symmetric_closure(once), m.coords, flux)
    assert once == twice
    assert len(once) == len(m.edges)


def test_relabel_drops_outside_edges():
    es = DirectedEdgeSet.from_pairs([[0, 1], [1, 2], [2, 3]])
    local = es.relabel(np.array([1, 2, 3]))
    assert pair_set(local) == {(0, 1), (1, 2)}


# -------------------------------------------------------------- sampling

def test_sample_edges_rho_one_keeps_all():
    es = symmetric_closure(grid_mesh(4, 4).edges)
    g = sample_edges(es, 1.0, 0)
    assert g.kept_edges == es


def test_sample_edges_binomial_bound():
    n = 10_000
    es = DirectedEdgeSet(np.arange(n), np.arange(n) + 1, check=False)
    kept = len(sample_edges(es, 0.5, 7).kept_edges)
    assert abs(kept - n * 0.5) <= 3 * np.sqrt(n * 0.25)


def test_sample_edges_rejects_bad_rho():
    es = DirectedEdgeSet.from_pairs([[0, 1]])
    for rho in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            sample_edges(es, rho, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_sample_edges_monotone_and_pure(seed, r1, r2):
    es = symmetric_closure(grid_mesh(5, 5).edges)
    lo, hi = min(r1, r2), max(r1, r2)
    a, b = sample_edges(es, lo, seed), sample_edges(es, hi, seed)
    assert pair_set(a.kept_edges) <= pair_set(b.kept_edges)
    again = sample_edges(es, lo, seed)
    assert again.kept_edges == a.kept_edges
    np.testing.assert_array_equal(again.kept_nodes, a.kept_nodes)
    ends = set(a.kept_edges.senders.tolist()) | set(a.kept_edges.receivers.tolist())
    assert ends == set(a.kept_nodes.tolist())


def test_point_edge_full_budget():
    m = grid_mesh(5, 4)
    es = symmetric_closure(m.edges)
    g = point_edge_consistent_sample(m, es, m.num_nodes, 0)
    np.testing.assert_array_equal(g.kept_nodes, np.arange(m.num_nodes))


def test_point_edge_budget_errors():
    m = grid_mesh(3, 3)
    es = symmetric_closure(m.edges)
    with pytest.raises(ConfigError):
        point_edge_consistent_sample(m, es, 1, 0)
    with pytest.raises(ConfigError):
        point_edge_consistent_sample(m, es, m.num_nodes + 1, 0)


def test_point_edge_endpoint_only_budget():
    # a path of 4 nodes: two disjoint edges cover the budget exactly
    m = Mesh(np.stack([np.arange(4.0), np.zeros(4)], 1), np.zeros((0, 3), dtype=int))
    es = DirectedEdgeSet.from_pairs([[0, 1], [2, 3]])
    g = point_edge_consistent_sample(m, es, 4, 3)
    assert len(g.kept_edges) == 2
    assert set(g.kept_nodes.tolist()) == {0, 1, 2, 3}


@pytest.mark.parametrize("seed", range(10))
def test_point_edge_half_budget_no_dangling(seed):
    m = grid_mesh(10, 10)
    es = symmetric_closure(m.edges)
    g = point_edge_consistent_sample(m, es, 50, seed)
    assert len(g.kept_nodes) == 50
    kept = set(g.kept_nodes.tolist())
    for s, r in g.kept_edges.pairs.tolist():
        assert s in kept and r in kept
    assert pair_set(g.kept_edges) <= pair_set(es)


def test_scale_tiers():
    assert scale_tier(99_999) == "small"
    assert scale_tier(100_000) == "medium"
    assert scale_tier(1_000_000) == "medium"
    assert scale_tier(1_000_001) == "large"


def test_topology_aware_sample_by_tier():
    m = grid_mesh(6, 6)
    es = symmetric_closure(m.edges)
    small = topology_aware_sample(m, es, 0.5, 0)
    assert small.kept_edges == es
    medium = topology_aware_sample(m, es, 0.5, 0, small_max=10, medium_max=1000)
    assert medium.kept_edges == sample_edges(es, 0.5, 0).kept_edges
    large = topology_aware_sample(m, es, 0.5, 0, small_max=10, medium_max=20)
    assert len(large.kept_nodes) == 18


# ------------------------------------------------------------- partition

def line_mesh(n):
    coords = np.stack([np.arange(n, dtype=float), np.zeros(n)], 1)
    return Mesh(coords, np.zeros((0, 3), dtype=int)), np.stack([np.arange(n - 1), np.arange(1, n)], 1)


def test_partition_single_part():
    m = grid_mesh(4, 4)
    p = partition_mesh(m, 1)
    np.testing.assert_array_equal(p.parts[0], np.arange(m.num_nodes))


def test_partition_line_two_parts_one_halo():
    m, pairs = line_mesh(10)
    p = partition_mesh(m, 2, halo_depth=1, edges=pairs)
    assert [len(c) for c in p.cores] == [5, 5]
    assert p.parts[0].tolist() == [0, 1, 2, 3, 4, 5]
    assert p.parts[1].tolist() == [4, 5, 6, 7, 8, 9]


def test_partition_k_too_large():
    m, pairs = line_mesh(3)
    with pytest.raises(ConfigError):
        partition_mesh(m, 4, edges=pairs)


@pytest.mark.parametrize("K,halo", [(2, 0), (3, 1), (5, 2), (7, 1)])
def test_partition_covers_and_identity_merge(K, halo, rng):
    m = grid_mesh(7, 6)
    p = partition_mesh(m, K, halo)
    assert sorted(np.concatenate(p.cores).tolist()) == list(range(m.num_nodes))
    assert set(np.concatenate(p.parts).tolist()) == set(range(m.num_nodes))
    assert all(len(o) >= 1 for o in p.owners)
    field = rng.normal(size=(m.num_nodes, 3))
    merged = merge_predictions(p, [field[nodes] for nodes in p.parts])
    np.testing.assert_array_equal(merged, field)


def test_merge_mean_and_oracle(rng):
    m, pairs = line_mesh(10)
    p = partition_mesh(m, 3, halo_depth=2, edges=pairs)
    outs = [rng.normal(size=(len(nodes), 2)) for nodes in p.parts]
    merged = merge_predictions(p, outs)
    for v in range(10):
        vals = [outs[k][list(p.parts[k]).index(v)] for k in range(3) if v in p.parts[k]]
        np.testing.assert_allclose(merged[v], np.mean(vals, axis=0), rtol=1e-14, atol=1e-15)


def test_merge_two_owner_mean():
    m, pairs = line_mesh(4)
    p = partition_mesh(m, 2, halo_depth=1, edges=pairs)
    outs = [np.full((len(n), 1), 1.0) for n in p.parts]
    outs[1][:] = 3.0
    merged = merge_predictions(p, outs)
    shared = sorted(set(p.parts[0].tolist()) & set(p.parts[1].tolist()))
    assert shared and np.all(merged[shared] == 2.0)


def test_merge_uncovered_node():
    m, pairs = line_mesh(4)
    p = partition_mesh(m, 2, halo_depth=0, edges=pairs)
    p.parts[1] = p.parts[1][:1]
    with pytest.raises(CoverageError):
        merge_predictions(p, [np.zeros((len(n), 1)) for n in p.parts])
