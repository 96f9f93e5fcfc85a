"""Meshes, flux-oriented edge sets, topology-aware sampling and partitioning."""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .autodiff import GatherPlan, SegmentPlan
from .errors import ConfigError, CoverageError, ValidationError

NODE_INTERIOR = 0
NODE_INLET = 1
NODE_OUTLET = 2
NODE_WALL = 3
NUM_NODE_TYPES = 4

SMALL_TIER_MAX = 100_000
MEDIUM_TIER_MAX = 1_000_000


@dataclass(frozen=True, eq=False)
class Mesh:
    """Discretized domain: node coordinates, cells and node types.

    ``boundary_mask`` defaults to ``node_type != NODE_INTERIOR``.
    """

    coords: np.ndarray
    cells: np.ndarray
    node_type: np.ndarray = None
    boundary_mask: np.ndarray = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] not in (1, 2, 3):
            raise ValidationError(f"coords must be [N, d] with d in 1..3, got {coords.shape}")
        n = coords.shape[0]
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.size == 0:
            cells = cells.reshape(0, 3)
        if cells.ndim != 2:
            raise ValidationError("cells must be a 2-D integer array")
        if cells.size and (cells.min() < 0 or cells.max() >= n):
            raise ValidationError(f"cell index outside [0, {n})")
        node_type = (np.zeros(n, dtype=np.int64) if self.node_type is None
                     else np.asarray(self.node_type, dtype=np.int64).reshape(-1))
        if node_type.shape != (n,):
            raise ValidationError("node_type must have one entry per node")
        typed = node_type != NODE_INTERIOR
        if self.boundary_mask is None:
            mask = typed
        else:
            mask = np.asarray(self.boundary_mask, dtype=bool).reshape(-1)
            if mask.shape != (n,):
                raise ValidationError("boundary_mask must have one entry per node")
            if np.any(typed & ~mask):
                raise ValidationError("inlet/outlet/wall nodes must be flagged in boundary_mask")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "node_type", node_type)
        object.__setattr__(self, "boundary_mask", mask)

    @property
    def num_nodes(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    @cached_property
    def edges(self):
        """Unique undirected edges ``[E, 2]`` with ``i < j``."""
        return edges_from_cells(self)

    def subset(self, nodes):
        """Mesh restricted to ``nodes`` (cells fully inside are kept, relabelled)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        local = np.full(self.num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        keep = np.all(local[self.cells] >= 0, axis=1) if self.cells.size else np.zeros(0, bool)
        return Mesh(self.coords[nodes], local[self.cells[keep]].reshape(-1, self.cells.shape[1]),
                    self.node_type[nodes], self.boundary_mask[nodes])


def edges_from_cells(mesh_or_cells):
    """Perimeter edges of every cell, deduplicated, as ``[E, 2]`` with ``i < j``."""
    cells = mesh_or_cells.cells if isinstance(mesh_or_cells, Mesh) else np.asarray(mesh_or_cells)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if cells.shape[1] < 3:
        raise ValidationError("cells need at least 3 vertices")
    srt = np.sort(cells, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        bad = int(np.nonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))[0][0])
        raise ValidationError(f"degenerate cell {bad}: repeated vertex {cells[bad].tolist()}")
    a = cells.reshape(-1)
    b = np.roll(cells, -1, axis=1).reshape(-1)
    pairs = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
    return np.unique(pairs, axis=0)


class DirectedEdgeSet:
    """List of directed (sender, receiver) pairs without self-loops or duplicates."""

    def __init__(self, senders, receivers, num_nodes=None, check=True):
        self.senders = np.asarray(senders, dtype=np.int64).reshape(-1)
        self.receivers = np.asarray(receivers, dtype=np.int64).reshape(-1)
        self.num_nodes = num_nodes
        self._plans = {}
        if check:
            self._validate()

    def _validate(self):
        if self.senders.shape != self.receivers.shape:
            raise ValidationError("senders and receivers differ in length")
        if np.any(self.senders == self.receivers):
            raise ValidationError("self-loop in edge set")
        if len(self) and (min(self.senders.min(), self.receivers.min()) < 0):
            raise ValidationError("negative node index in edge set")
        if self.num_nodes is not None and len(self) and \
                max(self.senders.max(), self.receivers.max()) >= self.num_nodes:
            raise ValidationError(f"edge endpoint outside [0, {self.num_nodes})")
        if len(np.unique(self.pairs, axis=0)) != len(self):
            raise ValidationError("duplicate directed edge")

    @classmethod
    def from_pairs(cls, pairs, num_nodes=None):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(pairs[:, 0], pairs[:, 1], num_nodes)

    def __len__(self):
        return self.senders.size

    def __eq__(self, other):
        return (isinstance(other, DirectedEdgeSet)
                and np.array_equal(self.senders, other.senders)
                and np.array_equal(self.receivers, other.receivers))

    def __repr__(self):
        return f"DirectedEdgeSet({len(self)} edges)"

    @property
    def pairs(self):
        return np.stack([self.senders, self.receivers], axis=1)

    def reverse(self):
        return DirectedEdgeSet(self.receivers, self.senders, self.num_nodes, check=False)

    def as_set(self):
        return set(zip(self.senders.tolist(), self.receivers.tolist()))

    def take(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return DirectedEdgeSet(self.senders[ids], self.receivers[ids], self.num_nodes, check=False)

    def plans(self, num_nodes):
        """Cached gather/segment operators used by message passing."""
        plan = self._plans.get(num_nodes)
        if plan is None:
            plan = (GatherPlan(self.senders, num_nodes), GatherPlan(self.receivers, num_nodes),
                    SegmentPlan(self.senders, num_nodes), SegmentPlan(self.receivers, num_nodes))
            self._plans[num_nodes] = plan
        return plan

    def relabel(self, nodes):
        """Edge set in local numbering of ``nodes``; edges leaving the set are dropped."""
        nodes = np.asarray(nodes, dtype=np.int64)
        n_full = max(self.num_nodes or 0, int(nodes.max()) + 1 if nodes.size else 0,
                     int(self.senders.max()) + 1 if len(self) else 0,
                     int(self.receivers.max()) + 1 if len(self) else 0)
        local = np.full(n_full, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        s, r = local[self.senders], local[self.receivers]
        keep = (s >= 0) & (r >= 0)
        return DirectedEdgeSet(s[keep], r[keep], nodes.size, check=False)


def symmetric_closure(edges):
    """Both directions of every edge (input may be directed or ``[E, 2]`` pairs)."""
    pairs = edges.pairs if isinstance(edges, DirectedEdgeSet) else np.asarray(edges).reshape(-1, 2)
    both = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)
    n = edges.num_nodes if isinstance(edges, DirectedEdgeSet) else None
    return DirectedEdgeSet(both[:, 0], both[:, 1], n, check=False)


def _forward_direction(i, j, coords, flux):
    """True where edge (i, j) keeps direction i -> j.

    Positive flux projection <u_i, x_j - x_i> keeps i -> j, a negative one flips
    it, and zero or missing flux falls back to min-index -> max-index.
    """
    if flux is None:
        return i < j
    phi = np.einsum("ed,ed->e", flux[i], coords[j] - coords[i])
    return np.where(phi > 0, True, np.where(phi < 0, False, i < j))


def _check_flux(coords, flux, n_needed):
    if flux is None:
        return None, None
    coords = np.asarray(coords, dtype=np.float64)
    flux = np.asarray(flux, dtype=np.float64)
    if flux.shape != coords.shape:
        raise ValidationError(f"flux field shape {flux.shape} != coords shape {coords.shape}")
    if coords.shape[0] < n_needed:
        raise ValidationError("edge endpoint outside coordinate array")
    return coords, flux


def orient_edges(edges, coords, flux=None):
    """Direct every undirected edge by the sign of its flux projection."""
    pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    coords = np.asarray(coords, dtype=np.float64)
    n_needed = int(pairs.max()) + 1 if pairs.size else 0
    if coords.shape[0] < n_needed:
        raise ValidationError("edge endpoint outside coordinate array")
    coords, flux = _check_flux(coords, flux, n_needed) if flux is not None else (coords, None)
    i, j = pairs[:, 0], pairs[:, 1]
    fwd = _forward_direction(i, j, coords, flux)
    return DirectedEdgeSet(np.where(fwd, i, j), np.where(fwd, j, i), coords.shape[0])


def flux_filter(edges, coords=None, flux=None):
    """Keep one direction per bidirectional pair, the one :func:`orient_edges` picks.

    Edges whose reverse is absent are kept unchanged.
    """
    if len(edges) == 0:
        return edges
    if flux is not None and coords is None:
        raise ValidationError("flux_filter needs coords when a flux field is given")
    s, r = edges.senders, edges.receivers
    lo, hi = np.minimum(s, r), np.maximum(s, r)
    n = int(hi.max()) + 1
    key = lo * n + hi
    _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    paired = counts[inverse] > 1
    if flux is not None:
        coords, flux = _check_flux(coords, flux, n)
    fwd = _forward_direction(lo, hi, coords, flux)
    preferred_s = np.where(fwd, lo, hi)
    keep = ~paired | (s == preferred_s)
    return DirectedEdgeSet(s[keep], r[keep], edges.num_nodes, check=False)


@dataclass
class SampledGraph:
    """Nodes and edges retained by a sampler; all indices refer to the parent mesh."""

    kept_nodes: np.ndarray
    kept_edges: DirectedEdgeSet
    sampling_ratio: float
    edge_ids: np.ndarray = None

    def local(self):
        """Edges renumbered to positions in ``kept_nodes``."""
        return self.kept_edges.relabel(self.kept_nodes)


def sample_edges(edges, rho, seed):
    """Keep each edge independently when its uniform draw is below ``rho``."""
    if not 0 < rho <= 1:
        raise ConfigError(f"sampling ratio must be in (0, 1], got {rho}")
    xi = np.random.default_rng(seed).random(len(edges))
    ids = np.nonzero(xi < rho)[0]
    kept = edges.take(ids)
    nodes = np.unique(np.concatenate([kept.senders, kept.receivers]))
    return SampledGraph(nodes, kept, float(rho), ids)


def point_edge_consistent_sample(mesh, edges, node_budget, seed, edge_share=1.0):
    """Edges first, then uniformly drawn uncovered nodes, up to ``node_budget`` nodes.

    Edges are visited in a seeded random order and accepted while the nodes
    they cover fit in ``edge_share * node_budget``.  The rest of the budget is
    filled with uniform draws among nodes no kept edge touches.
    """
    n = mesh.num_nodes
    if node_budget < 2:
        raise ConfigError("node budget must be at least 2")
    if node_budget > n:
        raise ConfigError(f"node budget {node_budget} exceeds mesh size {n}")
    if not 0 < edge_share <= 1:
        raise ConfigError("edge_share must be in (0, 1]")
    rng = np.random.default_rng(seed)
    edge_cap = int(np.floor(edge_share * node_budget))
    covered = np.zeros(n, dtype=bool)
    n_covered = 0
    chosen = []
    for e in rng.permutation(len(edges)):
        a, b = edges.senders[e], edges.receivers[e]
        new = int(not covered[a]) + int(not covered[b])
        if n_covered + new <= edge_cap:
            covered[a] = covered[b] = True
            n_covered += new
            chosen.append(e)
            if n_covered == edge_cap and new == 0:
                continue
    ids = np.sort(np.asarray(chosen, dtype=np.int64))
    uncovered = np.nonzero(~covered)[0]
    fill = rng.choice(uncovered, size=node_budget - n_covered, replace=False)
    nodes = np.sort(np.concatenate([np.nonzero(covered)[0], fill]))
    return SampledGraph(nodes, edges.take(ids), node_budget / n, ids)


def scale_tier(num_nodes, small_max=SMALL_TIER_MAX, medium_max=MEDIUM_TIER_MAX):
    if num_nodes < small_max:
        return "small"
    if num_nodes <= medium_max:
        return "medium"
    return "large"


def topology_aware_sample(mesh, edges, rho, seed, small_max=SMALL_TIER_MAX,
                          medium_max=MEDIUM_TIER_MAX):
    """Scale-dependent sampler over an already flux-filtered edge set.

    Small meshes are returned whole, medium meshes get uniform edge sampling,
    large meshes get point-edge consistent sampling with a ``rho * N`` budget.
    """
    tier = scale_tier(mesh.num_nodes, small_max, medium_max)
    if tier == "small" or rho == 1:
        return SampledGraph(np.arange(mesh.num_nodes), edges, 1.0, np.arange(len(edges)))
    if tier == "medium":
        return sample_edges(edges, rho, seed)
    budget = max(2, int(round(rho * mesh.num_nodes)))
    return point_edge_consistent_sample(mesh, edges, budget, seed)


@dataclass
class Partition:
    """Overlapping subgraphs; ``parts[k]`` holds all node ids (core + halo) of part k."""

    parts: list
    cores: list
    edges: list
    num_nodes: int
    owners: list = field(default=None)

    def __post_init__(self):
        if self.owners is None:
            owners = [[] for _ in range(self.num_nodes)]
            for k, nodes in enumerate(self.parts):
                for v in nodes.tolist():
                    owners[v].append(k)
            self.owners = owners

    @property
    def num_parts(self):
        return len(self.parts)


def _adjacency(num_nodes, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(num_nodes, num_nodes))
    return ((a + a.T) > 0).astype(np.int8).tocsr()


def partition_mesh(mesh, K, halo_depth=1, edges=None, directed=None):
    """Split nodes into ``K`` equal-count spatial bins, then grow each by ``halo_depth`` hops.

    Binning is recursive bisection along the longest bounding-box axis of the
    current node set.  ``edges`` (undirected pairs) drive the halo growth and
    default to the mesh's cell edges; ``directed`` is the edge set restricted
    onto each part (defaults to the undirected pairs).
    """
    n = mesh.num_nodes
    if K < 1:
        raise ConfigError("K must be at least 1")
    if K > n:
        raise ConfigError(f"K={K} exceeds node count {n}")
    if halo_depth < 0:
        raise ConfigError("halo_depth must be non-negative")
    pairs = mesh.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if directed is None:
        directed = DirectedEdgeSet(pairs[:, 0], pairs[:, 1], n, check=False)
    coords = mesh.coords

    def bisect(nodes, k):
        if k == 1:
            return [nodes]
        pts = coords[nodes]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = nodes[np.argsort(pts[:, axis], kind="stable")]
        k1 = k // 2
        n1 = int(round(len(nodes) * k1 / k))
        return bisect(order[:n1], k1) + bisect(order[n1:], k - k1)

    cores = [np.sort(c) for c in bisect(np.arange(n), K)]
    adj = _adjacency(n, pairs)
    parts, part_edges = [], []
    for core in cores:
        mask = np.zeros(n, dtype=bool)
        mask[core] = True
        for _ in range(halo_depth):
            mask |= (adj @ mask.astype(np.int8)) > 0
        nodes = np.nonzero(mask)[0]
        parts.append(nodes)
        part_edges.append(directed.relabel(nodes))
    return Partition(parts, cores, part_edges, n)


def merge_predictions(partition, outputs, core_only=False):
    """Average per-part predictions back onto the full node set.

    ``outputs[k]`` is ``[len(partition.parts[k]), c]``.  Every node takes the
    arithmetic mean over the parts that contain it (or over the parts whose
    core contains it when ``core_only``).
    """
    if len(outputs) != partition.num_parts:
        raise ValidationError("one output block per part is required")
    c = np.asarray(outputs[0]).shape[1]
    blocks = []
    for k, out in enumerate(outputs):
        out = np.asarray(out, dtype=np.float64)
        nodes = partition.parts[k]
        if out.shape != (nodes.size, c):
            raise ValidationError(f"part {k}: expected output shape {(nodes.size, c)}, got {out.shape}")
        if core_only:
            sel = np.isin(nodes, partition.cores[k])
            nodes, out = nodes[sel], out[sel]
        blocks.append((nodes, out))
    # mean written as first value plus averaged deviations, so parts that
    # agree on a node reproduce it bit for bit
    first = np.zeros((partition.num_nodes, c), dtype=np.float64)
    seen = np.zeros(partition.num_nodes, dtype=bool)
    for nodes, out in reversed(blocks):
        first[nodes] = out
        seen[nodes] = True
    if not seen.all():
        raise CoverageError(f"node {int(np.nonzero(~seen)[0][0])} is not covered by any part")
    dev = np.zeros_like(first)
    count = np.zeros(partition.num_nodes, dtype=np.int64)
    for nodes, out in blocks:
        np.add.at(dev, nodes, out - first[nodes])
        np.add.at(count, nodes, 1)
    return first + dev / count[:, None]
