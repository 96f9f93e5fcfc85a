"""Synthetic meshes, classical graph-PDE oracles and on-disk datasets."""

import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg
from scipy.spatial import Delaunay

from .errors import ConfigError, NumericError, ValidationError
from .fileformat import MeshFieldFile, read_meshfield, write_meshfield
from .meshgraph import NODE_INLET, NODE_INTERIOR, NODE_OUTLET, NODE_WALL, Mesh
from .model import BCSpec
from .training import SteadySample, TransientSample, fit_steady_stats, fit_transient_stats
from .encoder import NormStats

KINDS = ("graph_diffusion", "steady_darcy_like")
MAX_MESH_RETRIES = 8


# ------------------------------------------------------------------ meshes

def _blue_noise(rng, count, radius, lo, hi, taken):
    """Dart throwing inside ``[lo, hi]^2`` keeping a minimum spacing from all points."""
    pts = list(taken)
    out = []
    attempts = 0
    r2 = radius * radius
    while len(out) < count and attempts < 200 * max(count, 1):
        attempts += 1
        p = lo + (hi - lo) * rng.random(2)
        if pts:
            arr = np.asarray(pts)
            if np.min(np.sum((arr - p) ** 2, axis=1)) < r2:
                continue
        pts.append(p)
        out.append(p)
    if len(out) < count:
        # spacing too strict for this count; fill the rest uniformly
        out += list(lo + (hi - lo) * rng.random((count - len(out), 2)))
    return np.asarray(out).reshape(-1, 2)


def _try_mesh(n_target, rng):
    per_side = max(1, int(round(0.9 * np.sqrt(n_target))))
    per_side = min(per_side, max(1, n_target // 4))
    t = np.arange(per_side) / per_side
    bnd = np.concatenate([np.stack([t, np.zeros_like(t)], 1), np.stack([np.ones_like(t), t], 1),
                          np.stack([1 - t, np.ones_like(t)], 1), np.stack([np.zeros_like(t), 1 - t], 1)])
    n_int = n_target - len(bnd)
    margin = 0.35 / per_side
    interior = _blue_noise(rng, n_int, 0.75 / np.sqrt(max(n_target, 1)), margin, 1 - margin, bnd) \
        if n_int > 0 else np.zeros((0, 2))
    coords = np.concatenate([bnd, interior]).astype(np.float32).astype(np.float64)
    tri = Delaunay(coords)
    cells = tri.simplices.astype(np.int64)
    a, b, c = coords[cells[:, 0]], coords[cells[:, 1]], coords[cells[:, 2]]
    area = 0.5 * ((b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0])
    cells = cells[np.abs(area) > 1e-12]
    # orient counter-clockwise
    flip = area[np.abs(area) > 1e-12] < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    if len(np.unique(cells)) != len(coords):
        return None
    x, y = coords[:, 0], coords[:, 1]
    node_type = np.full(len(coords), NODE_INTERIOR, dtype=np.int64)
    on_bnd = np.arange(len(coords)) < len(bnd)
    node_type[on_bnd] = NODE_WALL
    node_type[on_bnd & (x == 0)] = NODE_INLET
    node_type[on_bnd & (x == 1)] = NODE_OUTLET
    node_type[on_bnd & ((y == 0) | (y == 1))] = NODE_WALL
    return Mesh(coords, cells, node_type)


def gen_mesh(n_target, seed):
    """Triangulated unit square with about ``n_target`` nodes.

    Boundary nodes are evenly spaced on the perimeter; interior nodes are
    blue-noise points.  Left side nodes are inlets, right side outlets, the
    rest of the perimeter walls.
    """
    if n_target < 4:
        raise ConfigError("n_target must be at least 4")
    for attempt in range(MAX_MESH_RETRIES):
        rng = np.random.default_rng([seed, attempt])
        mesh = _try_mesh(n_target, rng)
        if mesh is not None and is_connected(mesh):
            return mesh
    raise ValidationError(f"could not build a valid mesh after {MAX_MESH_RETRIES} attempts")


def undirected_adjacency(num_nodes, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(num_nodes, num_nodes))
    return ((a + a.T) > 0).astype(np.float64).tocsr()


def is_connected(mesh, edges=None):
    from scipy.sparse.csgraph import connected_components
    pairs = mesh.edges if edges is None else edges
    n_comp, _ = connected_components(undirected_adjacency(mesh.num_nodes, pairs), directed=False)
    return n_comp == 1


def graph_laplacian(num_nodes, pairs, weights=None):
    """Combinatorial (optionally edge-weighted) Laplacian ``D - A`` of an undirected edge list."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=np.float64)
    i, j = pairs[:, 0], pairs[:, 1]
    a = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                      shape=(num_nodes, num_nodes)).tocsr()
    return (sp.diags(np.asarray(a.sum(axis=1)).ravel()) - a).tocsr()


# ----------------------------------------------------------------- oracles

def max_stable_step(mesh, edges=None):
    """Largest ``kappa * dt`` for which the explicit scheme keeps the max principle."""
    pairs = mesh.edges if edges is None else np.asarray(edges).reshape(-1, 2)
    deg = np.bincount(pairs.reshape(-1), minlength=mesh.num_nodes)
    interior = ~mesh.boundary_mask
    dmax = deg[interior].max() if interior.any() else 1
    return 1.0 / max(dmax, 1)


def solve_diffusion_oracle(mesh, u0, kappa, dt, T, edges=None, check=True):
    """Explicit Euler ``u <- u - kappa*dt*L u`` with boundary rows held at ``u0``.

    Returns ``[T + 1, N, c]`` including the initial state.  With ``check`` the
    interior mass balance and the discrete max principle are asserted on
    every step.
    """
    pairs = mesh.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    u = np.asarray(u0, dtype=np.float64)
    squeeze = u.ndim == 1
    u = u[:, None] if squeeze else u.copy()
    if kappa < 0 or dt <= 0 or T < 0:
        raise ConfigError("need kappa >= 0, dt > 0 and T >= 0")
    r = kappa * dt
    if r > max_stable_step(mesh, pairs) + 1e-15:
        raise ConfigError(f"unstable explicit step: kappa*dt={r:g} exceeds {max_stable_step(mesh, pairs):g}")
    L = graph_laplacian(mesh.num_nodes, pairs)
    bnd = mesh.boundary_mask
    inner = ~bnd
    lo, hi = u.min(axis=0), u.max(axis=0)
    # boundary flux operator: sum over interior nodes of their boundary-edge differences
    i, j = pairs[:, 0], pairs[:, 1]
    cross = bnd[i] != bnd[j]
    ci = np.where(bnd[i[cross]], j[cross], i[cross])
    cb = np.where(bnd[i[cross]], i[cross], j[cross])
    traj = [u.copy()]
    for _ in range(T):
        du = -r * (L @ u)
        du[bnd] = 0
        if check:
            flux = -r * (u[ci] - u[cb]).sum(axis=0)
            scale = max(1.0, np.abs(u).max()) * max(1, len(pairs)) * r
            if np.any(np.abs(du[inner].sum(axis=0) - flux) > 1e-12 * scale):
                raise NumericError("interior mass change does not match boundary flux")
        u = u + du
        if check and (np.any(u < lo - 1e-9) or np.any(u > hi + 1e-9)):
            raise NumericError("max principle violated")
        traj.append(u.copy())
    out = np.stack(traj)
    return out[:, :, 0] if squeeze else out


def solve_darcy_like_oracle(mesh, coeff, source=1.0, edges=None, tol=1e-8, maxiter=10_000):
    """Solve ``L_a u = f`` on interior nodes with ``u = 0`` on the boundary.

    Edge weights are the endpoint means of ``coeff``.  Conjugate gradients
    runs to ``tol`` relative residual; failure raises :class:`NumericError`.
    """
    coeff = np.asarray(coeff, dtype=np.float64).reshape(-1)
    if np.any(coeff <= 0):
        raise ConfigError("coefficient field must be positive")
    n = mesh.num_nodes
    pairs = mesh.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    f = np.broadcast_to(np.asarray(source, dtype=np.float64), (n,)).copy()
    w = 0.5 * (coeff[pairs[:, 0]] + coeff[pairs[:, 1]])
    L = graph_laplacian(n, pairs, w)
    inner = np.nonzero(~mesh.boundary_mask)[0]
    u = np.zeros(n)
    if inner.size == 0:
        return u
    A = L[inner][:, inner].tocsr()
    b = f[inner]
    nb = np.linalg.norm(b)
    if nb == 0:
        return u
    x, info = cg(A, b, rtol=tol * 1e-2, atol=0.0, maxiter=maxiter)
    res = np.linalg.norm(A @ x - b) / nb
    if info != 0 or res > tol:
        raise NumericError(f"conjugate gradients did not converge (info={info}, residual={res:.3e})")
    u[inner] = x
    return u


# ------------------------------------------------------------ random fields

def smooth_random_field(coords, rng, n_modes=6, max_freq=2.0, amplitude=1.0):
    """Sum of random low-frequency sinusoids over the coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    k = rng.uniform(-max_freq, max_freq, size=(n_modes, coords.shape[1])) * np.pi
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    amp = rng.normal(size=n_modes) * amplitude / np.sqrt(n_modes)
    return (np.sin(coords @ k.T + phase) * amp).sum(axis=1)


# ---------------------------------------------------------------- datasets

DEFAULT_MAX_FREQ = {"graph_diffusion": 4.0, "steady_darcy_like": 2.0}


@dataclass
class SyntheticProblem:
    kind: str = "graph_diffusion"
    n_nodes: int = 300
    n_steps: int = 30
    kappa: float = 1.0
    dt: float = 0.1
    max_freq: float = None
    coeff_contrast: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if self.max_freq is None:
            # rough initial states for diffusion, smoother coefficients for the steady solve
            self.max_freq = DEFAULT_MAX_FREQ[self.kind]
        if self.max_freq <= 0:
            raise ConfigError("max_freq must be positive")
        if self.n_nodes < 4:
            raise ConfigError("n_nodes must be at least 4")
        if self.kind == "graph_diffusion" and self.n_steps < 1:
            raise ConfigError("n_steps must be at least 1")


def make_sample(problem, seed):
    """Generate one sample as a :class:`MeshFieldFile`."""
    mesh = gen_mesh(problem.n_nodes, seed)
    rng = np.random.default_rng([seed, 1])
    if problem.kind == "graph_diffusion":
        dt = min(problem.dt, max_stable_step(mesh) / max(problem.kappa, 1e-30))
        u0 = smooth_random_field(mesh.coords, rng, max_freq=problem.max_freq)
        traj = solve_diffusion_oracle(mesh, u0, problem.kappa, dt, problem.n_steps)
        times = dt * np.arange(problem.n_steps + 1)
        glob = np.stack([np.full_like(times, problem.kappa), times], axis=1)
        return MeshFieldFile(mesh, traj[:, :, None], glob)
    g = smooth_random_field(mesh.coords, rng, max_freq=problem.max_freq)
    coeff = np.exp(problem.coeff_contrast * g)
    u = solve_darcy_like_oracle(mesh, coeff)
    frames = np.stack([coeff, u], axis=1)[None]
    return MeshFieldFile(mesh, frames, np.zeros((1, 1)))


def to_sample(mf, kind):
    """Convert a stored file into a training sample (values as stored, in float64)."""
    if kind == "graph_diffusion":
        states = mf.frames.astype(np.float64)
        return TransientSample(mf.mesh, states, mf.globals_.astype(np.float64))
    frame = mf.frames[0].astype(np.float64)
    bc = BCSpec(np.nonzero(mf.mesh.boundary_mask)[0], 0.0)
    return SteadySample(mf.mesh, frame[:, :1], frame[:, 1:], mf.globals_[0].astype(np.float64), bc)


@dataclass
class DatasetInfo:
    manifest: str
    stats: NormStats
    kind: str
    train: list
    test: list


def sample_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_dataset(problem, n_samples, out_dir, seed, train_fraction=0.8):
    """Write one file per sample, a manifest and training-split statistics."""
    if n_samples < 2:
        raise ConfigError("n_samples must be at least 2")
    if not 0 < train_fraction < 1:
        raise ConfigError("train_fraction must be in (0, 1)")
    n_train = min(max(1, int(round(n_samples * train_fraction))), n_samples - 1)
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"# kind={problem.kind} n_nodes={problem.n_nodes} n_steps={problem.n_steps} "
             f"kappa={problem.kappa!r} dt={problem.dt!r} max_freq={problem.max_freq!r} "
             f"coeff_contrast={problem.coeff_contrast!r}"]
    train, test = [], []
    for i in range(n_samples):
        s = sample_seed(seed, i)
        mf = make_sample(problem, s)
        name = f"sample_{i:04d}.gtmf"
        path = os.path.join(out_dir, name)
        write_meshfield(path, mf)
        split = "train" if i < n_train else "test"
        (train if split == "train" else test).append(to_sample(mf, problem.kind))
        lines.append(f"{name},{split},{s},{mf.mesh.num_nodes},{mf.num_frames}")
    stats = (fit_transient_stats(train) if problem.kind == "graph_diffusion"
             else fit_steady_stats(train))
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(stats.to_dict(), fh, indent=1, sort_keys=True)
    return DatasetInfo(manifest, stats, problem.kind, train, test)


def read_manifest(path):
    """Return ``(header dict, rows)`` with rows ``(path, split, seed, N, T)``."""
    header, rows = {}, []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    header[k] = v
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValidationError(f"bad manifest line {line!r}")
            rows.append((os.path.join(base, parts[0]), parts[1], int(parts[2]), int(parts[3]),
                         int(parts[4])))
    return header, rows


def load_dataset(manifest):
    header, rows = read_manifest(manifest)
    kind = header.get("kind")
    if kind not in KINDS:
        raise ValidationError(f"manifest {manifest} declares unknown kind {kind!r}")
    train, test = [], []
    for path, split, _, _, _ in rows:
        (train if split == "train" else test).append(to_sample(read_meshfield(path), kind))
    stats_path = os.path.join(os.path.dirname(os.path.abspath(manifest)), "stats.json")
    stats = None
    if os.path.exists(stats_path):
        with open(stats_path) as fh:
            stats = NormStats.from_dict(json.load(fh))
    return DatasetInfo(manifest, stats, kind, train, test)
