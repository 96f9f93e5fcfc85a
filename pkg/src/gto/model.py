"""Full operator: embedding, stacked blocks, decoder and boundary enforcement."""

import dataclasses
import io
import struct
import weakref
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .block import BlockParams, flops_block, gto_block
from .encoder import (EncoderParams, NormStats, denormalize, edge_features, embed_nodes,
                      node_type_features, normalize_tensor, spe, spe_width)
from .errors import ConfigError, NumericError, ParseError, UsageError, ValidationError
from .meshgraph import (NUM_NODE_TYPES, DirectedEdgeSet, flux_filter, merge_predictions,
                        orient_edges, partition_mesh, symmetric_closure)
from .nn import MLP, mlp_macs

MODES = ("steady", "transient")
EDGE_SCHEMES = ("auto", "flux", "bidirectional")


@dataclass
class ModelConfig:
    L: int = 4
    C: int = 128
    M: int = None
    H: int = 4
    delta: int = 4
    rho: float = 1.0
    mode: str = "transient"
    d: int = 2
    c_in: int = 1
    c_out: int = 1
    global_dim: int = 0
    activation: str = "silu"
    node_type_onehot: bool = False
    out_gain: float = 0.01
    edge_scheme: str = "auto"
    flux_channels: tuple = None
    seed: int = 0

    def __post_init__(self):
        if self.M is None:
            self.M = self.C
        if isinstance(self.flux_channels, str):
            self.flux_channels = tuple(int(x) for x in self.flux_channels.split(";") if x)
        elif self.flux_channels is not None:
            self.flux_channels = tuple(int(x) for x in self.flux_channels)
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ConfigError("L must be at least 1")
        if self.C < 2 or self.C % 2:
            raise ConfigError(f"C={self.C} must be even and positive")
        if self.H < 1 or self.C % self.H:
            raise ConfigError(f"C={self.C} must be divisible by H={self.H}")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if self.delta < 1:
            raise ConfigError("delta must be at least 1")
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must be in (0, 1]")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.edge_scheme not in EDGE_SCHEMES:
            raise ConfigError(f"edge_scheme must be one of {EDGE_SCHEMES}")
        if self.mode == "transient" and self.c_in != self.c_out:
            raise ConfigError("transient mode needs c_in == c_out (state in, state out)")
        if self.flux_channels is not None and len(self.flux_channels) != self.d:
            raise ConfigError("flux_channels must name one field channel per axis")

    @property
    def spe_width(self):
        return spe_width(self.d, self.delta)

    @property
    def type_width(self):
        return NUM_NODE_TYPES if self.node_type_onehot else 1

    def to_items(self):
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "flux_channels":
                v = "" if v is None else ";".join(str(x) for x in v)
            out.append((f.name, str(v)))
        return out

    @classmethod
    def from_items(cls, items):
        kinds = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in items:
            if k not in kinds:
                raise ConfigError(f"unknown model config key {k!r}")
            if k == "flux_channels":
                kw[k] = v or None
            elif k in ("mode", "activation", "edge_scheme"):
                kw[k] = v
            elif k == "node_type_onehot":
                kw[k] = v.lower() in ("1", "true", "yes")
            elif k in ("rho", "out_gain"):
                kw[k] = float(v)
            else:
                kw[k] = int(v)
        return cls(**kw)


@dataclass
class BCSpec:
    """Dirichlet constraint: ``values[k]`` is imposed on node ``nodes[k]`` for ``channels``."""

    nodes: np.ndarray
    values: np.ndarray
    channels: tuple = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        v = np.asarray(self.values, dtype=np.float64)
        width = len(self.channels) if self.channels is not None else (v.shape[-1] if v.ndim == 2 else 1)
        self.values = np.broadcast_to(v, (self.nodes.size, width)).copy() if v.size else \
            np.zeros((0, width))

    @classmethod
    def from_state(cls, mesh, state, channels=None):
        """Hold every boundary node at its value in ``state``."""
        nodes = np.nonzero(mesh.boundary_mask)[0]
        state = np.asarray(state, dtype=np.float64)
        vals = state[nodes] if channels is None else state[np.ix_(nodes, channels)]
        return cls(nodes, vals, channels)


def bc_correct(outputs, mesh, bc_spec):
    """Overwrite constrained rows (and channels) with prescribed values; other entries untouched."""
    if bc_spec is None or bc_spec.nodes.size == 0:
        return outputs
    n = mesh.num_nodes if mesh is not None else outputs.shape[0]
    if bc_spec.nodes.min() < 0 or bc_spec.nodes.max() >= n:
        raise ValidationError(f"boundary node index outside [0, {n})")
    if isinstance(outputs, ad.Tensor):
        return ad.assign_rows(outputs, bc_spec.nodes, bc_spec.values, bc_spec.channels)
    out = np.array(outputs, copy=True)
    if bc_spec.channels is None:
        out[bc_spec.nodes] = bc_spec.values
    else:
        out[np.ix_(bc_spec.nodes, bc_spec.channels)] = bc_spec.values
    return out


@dataclass
class GraphInputs:
    """Per-mesh constants consumed by the network."""

    coords_scaled: np.ndarray
    type_feat: np.ndarray
    spe: np.ndarray
    edges: DirectedEdgeSet
    edge_feat: np.ndarray

    @property
    def num_nodes(self):
        return self.coords_scaled.shape[0]


class GraphBatch:
    """Disjoint union of several graphs; attention stays within each graph."""

    def __init__(self, graphs):
        self.graphs = graphs
        sizes = [g.num_nodes for g in graphs]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.graph_ptr = [(int(offsets[i]), int(offsets[i + 1])) for i in range(len(graphs))]
        self.graph_index = np.repeat(np.arange(len(graphs)), sizes)
        self.num_nodes = int(offsets[-1])
        if len(graphs) == 1:
            g = graphs[0]
            self.coords_scaled, self.type_feat, self.spe = g.coords_scaled, g.type_feat, g.spe
            self.edges, self.edge_feat = g.edges, g.edge_feat
            return
        self.coords_scaled = np.concatenate([g.coords_scaled for g in graphs])
        self.type_feat = np.concatenate([g.type_feat for g in graphs])
        self.spe = np.concatenate([g.spe for g in graphs])
        self.edge_feat = np.concatenate([g.edge_feat for g in graphs])
        self.edges = DirectedEdgeSet(
            np.concatenate([g.edges.senders + o for g, o in zip(graphs, offsets)]),
            np.concatenate([g.edges.receivers + o for g, o in zip(graphs, offsets)]),
            self.num_nodes, check=False)


class GTOModel:
    """Encoder, ``L`` blocks and a decoder sharing the global embedding with the encoder."""

    def __init__(self, config, stats=None, rng=None):
        config.validate()
        self.config = config
        self.stats = stats
        rng = np.random.default_rng(config.seed) if rng is None else rng
        C = config.C
        self.encoder = EncoderParams(config.d, config.c_in, config.global_dim + 1, C, rng,
                                     config.activation, config.type_width)
        self.blocks = [BlockParams(C, config.M, config.H, config.spe_width, rng, config.activation)
                       for _ in range(config.L)]
        self.decoder = MLP(2 * C, C, config.c_out, rng, config.activation, out_gain=config.out_gain)
        self._graph_cache = weakref.WeakKeyDictionary()

    # ------------------------------------------------------------ parameters

    def parameters(self):
        items = self.encoder.named_parameters("enc")
        for i, b in enumerate(self.blocks):
            items += b.named_parameters(f"blocks.{i}")
        items += self.decoder.named_parameters("dec")
        return OrderedDict(items)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters().values())

    def cast(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def _require_stats(self):
        if self.stats is None:
            raise UsageError("model has no normalization statistics; fit or load them first")
        return self.stats

    # ----------------------------------------------------------------- graph

    def edge_set(self, mesh, fields=None):
        """Directed edges the model uses on ``mesh`` for the given state.

        ``flux`` keeps one direction per mesh edge, oriented by the flux
        channels (index order when there are none); ``bidirectional`` keeps
        both; ``auto`` means ``flux`` when flux channels are configured and
        ``bidirectional`` otherwise.
        """
        flux = None
        if self.config.flux_channels is not None and fields is not None:
            flux = np.asarray(fields, dtype=np.float64)[:, list(self.config.flux_channels)]
        oriented = orient_edges(mesh.edges, mesh.coords, flux)
        scheme = self.config.edge_scheme
        if scheme == "auto":
            scheme = "flux" if self.config.flux_channels is not None else "bidirectional"
        if scheme == "bidirectional":
            return symmetric_closure(oriented)
        return oriented

    def graph_inputs(self, mesh, fields=None, edges=None):
        static = self.config.flux_channels is None and edges is None
        if static and mesh in self._graph_cache:
            return self._graph_cache[mesh]
        stats = self._require_stats()
        coords = stats.scale_coords(mesh.coords)
        if edges is None:
            edges = self.edge_set(mesh, fields)
        g = GraphInputs(coords, node_type_features(mesh.node_type, self.config.node_type_onehot),
                        spe(coords, self.config.delta), edges,
                        edge_features(coords, edges) / stats.edge_scale[0])
        if static:
            self._graph_cache[mesh] = g
        return g

    # --------------------------------------------------------------- forward

    def latent_forward(self, batch, fields_norm, conds_norm, maps=None):
        """Normalized decoder output for a batch of graphs."""
        dt = fields_norm.data.dtype
        V, g_rows = embed_nodes(self.encoder, batch.coords_scaled, batch.type_feat, fields_norm,
                                conds_norm, batch.graph_index)
        E = self.encoder.edge(ad.Tensor(batch.edge_feat.astype(dt)))
        pos = ad.Tensor(batch.spe.astype(dt))
        ptr = batch.graph_ptr if len(batch.graph_ptr) > 1 else None
        for blk in self.blocks:
            layer_maps = [] if maps is not None else None
            V, E = gto_block(V, E, batch.edges, blk, pos, ptr, layer_maps)
            if maps is not None:
                maps.append(layer_maps)
        out = self.decoder(ad.concat_cols([V, g_rows]))
        if not np.all(np.isfinite(out.data)):
            raise NumericError("non-finite value in decoder output")
        return out

    def _conds(self, conds_list, dt):
        stats = self._require_stats()
        rows = []
        for c in conds_list:
            c = np.asarray(c, dtype=np.float64).reshape(-1)
            if c.size != self.config.global_dim + 1:
                raise ValidationError(f"condition row needs {self.config.global_dim + 1} values, got {c.size}")
            rows.append((c - stats.cond_mean) / stats.cond_std)
        return ad.Tensor(np.stack(rows).astype(dt))

    def forward_steady_batch(self, meshes, inputs, conds, bcs=None, maps=None):
        """Physical-unit predictions for several steady samples, concatenated by rows."""
        if self.config.mode != "steady":
            raise UsageError("forward_steady called on a transient model")
        stats = self._require_stats()
        batch = GraphBatch([self.graph_inputs(m, x) for m, x in zip(meshes, inputs)])
        dt = ad.default_dtype()
        x = np.concatenate([np.asarray(i, dtype=np.float64) for i in inputs])
        fields = ad.Tensor(((x - stats.field_mean) / stats.field_std).astype(dt))
        out = denormalize(self.latent_forward(batch, fields, self._conds(conds, dt), maps), stats)
        return self._apply_bcs(out, batch, bcs)

    def forward_steady(self, mesh, frame, bc=None, maps=None):
        """Steady prediction on one mesh; ``frame`` is a :class:`FieldFrame` in physical units."""
        out = self.forward_steady_batch([mesh], [frame.fields], [frame.conditions],
                                        None if bc is None else [bc], maps)
        return out

    def _apply_bcs(self, out, batch, bcs):
        if bcs is None:
            return out
        nodes, vals = [], []
        channels = None
        for (a, _), bc in zip(batch.graph_ptr, bcs):
            if bc is None or bc.nodes.size == 0:
                continue
            nodes.append(bc.nodes + a)
            vals.append(bc.values)
            channels = bc.channels
        if not nodes:
            return out
        merged = BCSpec(np.concatenate(nodes), np.concatenate(vals), channels)
        return bc_correct(out, None, merged)

    def step_batch(self, meshes, states, conds, bcs=None, edges=None):
        """One Euler step for several graphs: ``state + increment`` then boundary correction.

        ``states`` is a tensor of the stacked physical states.
        """
        if self.config.mode != "transient":
            raise UsageError("step_transient called on a steady model")
        stats = self._require_stats()
        if not np.all(np.isfinite(states.data)):
            raise NumericError("non-finite value in rollout state; rollout aborted")
        sizes = np.cumsum([0] + [m.num_nodes for m in meshes])
        graphs = []
        for k, m in enumerate(meshes):
            fields = states.data[sizes[k]:sizes[k + 1]] if self.config.flux_channels else None
            graphs.append(self.graph_inputs(m, fields, None if edges is None else edges[k]))
        batch = GraphBatch(graphs)
        dt = states.data.dtype
        out = self.latent_forward(batch, normalize_tensor(states, stats, "field"), self._conds(conds, dt))
        new = states + denormalize(out, stats, "target")
        return self._apply_bcs(new, batch, bcs)

    def step_transient(self, mesh, state, cond, bc=None):
        """One step on a single mesh; accepts an array or tensor state."""
        st = state if isinstance(state, ad.Tensor) else ad.Tensor(np.asarray(state))
        return self.step_batch([mesh], st, [cond], None if bc is None else [bc])

    def rollout(self, mesh, u0, conds, T, bc="auto"):
        """Autoregressive rollout; returns the list of predicted states ``u^1..u^T`` as arrays.

        ``conds`` is either one condition row per step (row ``t-1`` feeds step
        ``t``) or a callable ``t -> row``.  ``bc="auto"`` pins boundary nodes
        to their values in ``u0``.
        """
        if T < 1:
            raise ConfigError("rollout length T must be at least 1")
        if isinstance(bc, str) and bc == "auto":
            bc = BCSpec.from_state(mesh, u0)
        state = ad.Tensor(np.asarray(u0))
        out = []
        with ad.no_tape():
            for t in range(1, T + 1):
                cond = conds(t) if callable(conds) else conds[t - 1]
                state = self.step_transient(mesh, state, cond, bc)
                out.append(state.data.copy())
        return out

    def infer_partitioned(self, mesh, frame, K, halo_depth=1, core_only=False, bc=None):
        """Split the mesh, predict every part independently and average overlaps."""
        part = partition_mesh(mesh, K, halo_depth)
        full_edges = self.edge_set(mesh, frame.fields)
        outputs = []
        with ad.no_tape():
            for nodes in part.parts:
                sub = mesh.subset(nodes)
                local_edges = full_edges.relabel(nodes)
                fields = frame.fields[nodes]
                g = self.graph_inputs(sub, fields, edges=local_edges)
                if self.config.mode == "steady":
                    x = ad.Tensor(((fields - self.stats.field_mean) / self.stats.field_std)
                                  .astype(ad.default_dtype()))
                    o = self.latent_forward(GraphBatch([g]), x, self._conds([frame.conditions],
                                                                            x.data.dtype))
                    o = denormalize(o, self.stats).data
                else:
                    o = self.step_batch([sub], ad.Tensor(fields), [frame.conditions],
                                        edges=[local_edges]).data
                outputs.append(o)
        merged = merge_predictions(part, outputs, core_only=core_only)
        return bc_correct(merged, mesh, bc)

    def attention_maps(self, mesh, frame):
        maps = []
        with ad.no_tape():
            if self.config.mode == "steady":
                self.forward_steady(mesh, frame, maps=maps)
            else:
                stats = self._require_stats()
                g = self.graph_inputs(mesh, frame.fields)
                x = normalize_tensor(ad.Tensor(frame.fields), stats, "field")
                self.latent_forward(GraphBatch([g]), x, self._conds([frame.conditions],
                                                                   x.data.dtype), maps)
        return maps


# ------------------------------------------------------------------ FLOPs

def count_flops(config, N, E_count, steps=1, breakdown=False):
    """Analytic multiply-add count of ``steps`` forward evaluations on a graph of ``N`` nodes."""
    if N <= 0 or E_count < 0 or steps < 1:
        raise ConfigError("count_flops needs positive N and steps")
    C, s = config.C, config.spe_width
    parts = {
        "enc_node": N * mlp_macs(config.d + config.type_width + config.c_in, C, C),
        "enc_global": mlp_macs(config.global_dim + 1, C, C),
        "enc_edge": E_count * mlp_macs(2 * config.d + 1, C, C),
        "dec": N * mlp_macs(2 * C, C, config.c_out),
    }
    blk = flops_block(N, E_count, C, config.M, config.H, s)
    for k, v in blk.items():
        if k != "total":
            parts[f"block_{k}"] = config.L * v
    total = steps * sum(parts.values())
    if breakdown:
        return total, {k: steps * v for k, v in parts.items()}
    return total


def mp_scheme_reduction(config, N, undirected_edges, steps=1):
    """Relative total-FLOPs saving of one-sided over two-sided message passing."""
    full = count_flops(config, N, 2 * undirected_edges, steps)
    half = count_flops(config, N, undirected_edges, steps)
    return 1.0 - half / full


# ------------------------------------------------------------- checkpoints

MAGIC = b"GTO1"
STAT_PREFIX = "stats."
OPT_PREFIX = "opt."


def write_tensor_records(fh, records):
    """Write ``(name, 2-D array)`` pairs as length-prefixed float32 little-endian blocks."""
    for name, arr in records:
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[None, :]
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_records(buf, offset=0):
    """Parse records from ``buf`` starting at ``offset`` until the end."""
    out = OrderedDict()
    n = len(buf)
    while offset < n:
        if offset + 4 > n:
            raise ParseError("truncated record name length", offset)
        (ln,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + ln + 8 > n:
            raise ParseError("truncated record header", offset)
        name = bytes(buf[offset:offset + ln]).decode("utf-8")
        offset += ln
        rows, cols = struct.unpack_from("<II", buf, offset)
        offset += 8
        nbytes = 4 * rows * cols
        if offset + nbytes > n:
            raise ParseError(f"truncated data for record {name!r}", offset)
        out[name] = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset) \
            .reshape(rows, cols).copy()
        offset += nbytes
    return out


def save_checkpoint(path, model, optimizer=None, extra=None):
    """Write config, statistics, parameters and (optionally) optimizer moments."""
    items = [(f"config.{k}", v) for k, v in model.config.to_items()]
    if optimizer is not None:
        items.append(("opt.step", str(optimizer.step)))
        items.append(("opt.skipped", str(optimizer.skipped)))
    for k, v in (extra or {}).items():
        items.append((f"extra.{k}", str(v)))
    manifest = "\n".join(f"{k}={v}" for k, v in items).encode("utf-8")
    records = [(n, p.data) for n, p in model.parameters().items()]
    if model.stats is not None:
        records += [(STAT_PREFIX + k, getattr(model.stats, k)) for k in NormStats.KEYS]
    if optimizer is not None:
        for n in model.parameters():
            if n in optimizer.m:
                records.append((f"{OPT_PREFIX}m.{n}", optimizer.m[n]))
                records.append((f"{OPT_PREFIX}v.{n}", optimizer.v[n]))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    write_tensor_records(buf, records)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


@dataclass
class Checkpoint:
    manifest: dict
    tensors: OrderedDict


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    if len(buf) < 8:
        raise ParseError("truncated manifest length", 4)
    (ln,) = struct.unpack_from("<I", buf, 4)
    if 8 + ln > len(buf):
        raise ParseError("truncated manifest", 8)
    manifest = {}
    for line in buf[8:8 + ln].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            manifest[k] = v
    return Checkpoint(manifest, read_tensor_records(buf, 8 + ln))


def load_checkpoint(path, optimizer=None):
    """Rebuild a model (and fill ``optimizer`` state when given)."""
    ck = read_checkpoint(path)
    cfg_items = [(k[len("config."):], v) for k, v in ck.manifest.items() if k.startswith("config.")]
    config = ModelConfig.from_items(cfg_items)
    stats = None
    if all(STAT_PREFIX + k in ck.tensors for k in NormStats.KEYS):
        stats = NormStats(**{k: ck.tensors[STAT_PREFIX + k].reshape(-1).astype(np.float64)
                             for k in NormStats.KEYS})
    model = GTOModel(config, stats)
    for name, p in model.parameters().items():
        if name not in ck.tensors:
            raise ParseError(f"checkpoint lacks parameter {name!r}", 0)
        arr = ck.tensors[name]
        if arr.shape != p.data.shape:
            raise ParseError(f"parameter {name!r} has shape {arr.shape}, expected {p.data.shape}", 0)
        p.data = arr.astype(ad.default_dtype())
    if optimizer is not None:
        optimizer.step = int(ck.manifest.get("opt.step", 0))
        optimizer.skipped = int(ck.manifest.get("opt.skipped", 0))
        optimizer.m, optimizer.v = {}, {}
        for name in model.parameters():
            if f"{OPT_PREFIX}m.{name}" in ck.tensors:
                optimizer.m[name] = ck.tensors[f"{OPT_PREFIX}m.{name}"].astype(np.float64)
                optimizer.v[name] = ck.tensors[f"{OPT_PREFIX}v.{name}"].astype(np.float64)
    return model
