"""Unified graph embedding: condition alignment, positional encoding and node/edge lifting."""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import UsageError, ValidationError
from .meshgraph import NUM_NODE_TYPES
from .nn import MLP


@dataclass(frozen=True, eq=False)
class FieldFrame:
    """Node fields plus the global condition vector at one time instant."""

    fields: np.ndarray
    global_params: np.ndarray
    time: float = 0.0
    mesh: object = None
    normalized: bool = False

    def __post_init__(self):
        f = np.asarray(self.fields, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[1] < 1:
            raise ValidationError(f"fields must be [N, c] with c >= 1, got {f.shape}")
        if self.mesh is not None and f.shape[0] != self.mesh.num_nodes:
            raise ValidationError(f"fields have {f.shape[0]} rows, mesh has {self.mesh.num_nodes} nodes")
        a = np.asarray(self.global_params, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(a)) and math.isfinite(self.time)):
            raise ValidationError("frame contains non-finite values")
        object.__setattr__(self, "fields", f)
        object.__setattr__(self, "global_params", a)

    @property
    def conditions(self):
        """Global condition row ``[a, t]``."""
        return np.concatenate([self.global_params, [self.time]])


def _safe_std(x, axis=0):
    s = np.std(x, axis=axis)
    return np.where(s > 0, s, 1.0)


@dataclass
class NormStats:
    """Per-channel z-score statistics and coordinate bounds, fitted on training data only.

    ``target_*`` describe the decoder target: the output field for steady
    problems, the one-step increment for transient ones.
    """

    field_mean: np.ndarray
    field_std: np.ndarray
    cond_mean: np.ndarray
    cond_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    coord_min: np.ndarray
    coord_max: np.ndarray
    edge_scale: np.ndarray = 1.0

    KEYS = ("field_mean", "field_std", "cond_mean", "cond_std",
            "target_mean", "target_std", "coord_min", "coord_max", "edge_scale")

    def __post_init__(self):
        # values are kept float32-representable so checkpoints reproduce them exactly
        for k in self.KEYS:
            v = np.asarray(getattr(self, k), dtype=np.float64).reshape(-1)
            setattr(self, k, v.astype(np.float32).astype(np.float64))
        for k in ("field_std", "cond_std", "target_std", "edge_scale"):
            v = getattr(self, k)
            setattr(self, k, np.where(v > 0, v, 1.0))

    @classmethod
    def fit(cls, fields, conds, targets, coords, edge_lengths=None):
        """Fit from stacked training rows: ``fields`` [*, c], ``conds`` [*, l+1], ``targets`` [*, c_out].

        ``edge_lengths`` are measured in min-max scaled coordinates; their mean
        becomes the length unit of edge features.
        """
        fields = np.asarray(fields, dtype=np.float64)
        conds = np.asarray(conds, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        coords = np.asarray(coords, dtype=np.float64)
        scale = 1.0 if edge_lengths is None or len(edge_lengths) == 0 else float(np.mean(edge_lengths))
        return cls(fields.mean(0), _safe_std(fields), conds.mean(0), _safe_std(conds),
                   targets.mean(0), _safe_std(targets), coords.min(0), coords.max(0), scale)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.KEYS}

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in cls.KEYS[:-1] if k not in d]
        if missing:
            raise UsageError(f"normalization statistics missing keys {missing}")
        return cls(**{k: d[k] for k in cls.KEYS if k in d})

    def scale_coords(self, coords):
        """Min-max scale coordinates into [0, 1] per axis (degenerate axes map to 0)."""
        span = self.coord_max - self.coord_min
        span = np.where(span > 0, span, 1.0)
        return (np.asarray(coords, dtype=np.float64) - self.coord_min) / span


def normalize_frame(frame, stats):
    """Return a copy of ``frame`` with z-scored fields and conditions."""
    if stats is None:
        raise UsageError("normalization statistics are required")
    if frame.normalized:
        return frame
    f = (frame.fields - stats.field_mean) / stats.field_std
    cond = (frame.conditions - stats.cond_mean) / stats.cond_std
    return replace(frame, fields=f, global_params=cond[:-1], time=float(cond[-1]), normalized=True)


def denormalize(outputs, stats, which="target"):
    """Undo the z-score of ``which`` in {"target", "field"}; accepts arrays or tensors."""
    mean = getattr(stats, f"{which}_mean")
    std = getattr(stats, f"{which}_std")
    if isinstance(outputs, ad.Tensor):
        dt = outputs.data.dtype
        return outputs * ad.Tensor(std[None, :].astype(dt)) + ad.Tensor(mean[None, :].astype(dt))
    return np.asarray(outputs) * std + mean


def normalize_tensor(values, stats, which="field"):
    """Differentiable z-score of a physical-unit tensor."""
    mean = getattr(stats, f"{which}_mean")
    std = getattr(stats, f"{which}_std")
    dt = values.data.dtype
    return (values - ad.Tensor(mean[None, :].astype(dt))) * ad.Tensor((1.0 / std)[None, :].astype(dt))


def spe_width(d, delta):
    return 2 * (2 * delta + 1) * d


def spe(X, delta):
    """Multi-frequency sinusoidal encoding of coordinates already scaled to [0, 1].

    Columns are all cosines first, then all sines.  Within each block, band
    ``i`` in ``-delta..delta`` occupies ``d`` consecutive columns (one per axis).
    """
    if delta < 1:
        raise ValueError("delta must be at least 1")
    X = np.asarray(X.data if isinstance(X, ad.Tensor) else X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    freqs = np.pi * 2.0 ** np.arange(-delta, delta + 1)
    ang = (X[:, None, :] * freqs[None, :, None]).reshape(X.shape[0], -1)
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def edge_features(coords, edges):
    """``[x_i - x_j, x_j - x_i, |x_i - x_j|]`` for every directed edge ``i -> j``."""
    coords = np.asarray(coords, dtype=np.float64)
    diff = coords[edges.senders] - coords[edges.receivers]
    return np.concatenate([diff, -diff, np.linalg.norm(diff, axis=1, keepdims=True)], axis=1)


def node_type_features(node_type, onehot=False):
    node_type = np.asarray(node_type, dtype=np.int64)
    if onehot:
        return np.eye(NUM_NODE_TYPES)[node_type]
    return node_type[:, None].astype(np.float64)


class EncoderParams:
    """Node-local, global-condition and edge embedding MLPs."""

    def __init__(self, d, c_in, cond_dim, C, rng, activation="silu", type_width=1):
        self.node_local = MLP(d + type_width + c_in, C, C, rng, activation)
        self.node_global = MLP(cond_dim, C, C, rng, activation)
        self.edge = MLP(2 * d + 1, C, C, rng, activation)

    def named_parameters(self, prefix="enc"):
        return (self.node_local.named_parameters(f"{prefix}.node_local")
                + self.node_global.named_parameters(f"{prefix}.node_global")
                + self.edge.named_parameters(f"{prefix}.edge"))


def embed_nodes(params, coords_scaled, type_feat, fields, conds, graph_index=None):
    """Tensor-level node embedding; returns ``(V, V_g)``.

    ``conds`` has one row per graph and ``graph_index`` maps nodes to graphs
    (all zeros when omitted).  ``V_g`` is the per-node global embedding row.
    """
    fields = fields if isinstance(fields, ad.Tensor) else ad.Tensor(fields)
    conds = conds if isinstance(conds, ad.Tensor) else ad.Tensor(conds)
    dt = fields.data.dtype
    local_in = ad.concat_cols([ad.Tensor(np.asarray(coords_scaled, dtype=dt)),
                               ad.Tensor(np.asarray(type_feat, dtype=dt)), fields])
    g = params.node_global(conds)
    if graph_index is None:
        graph_index = np.zeros(fields.rows, dtype=np.int64)
    g_rows = ad.gather_rows(g, graph_index)
    return params.node_local(local_in) + g_rows, g_rows


def encode_nodes(frame, params, stats=None, onehot=False):
    """Latent node features ``Phi1(x, n, u) + Phi2(a, t)`` of a normalized frame."""
    if not frame.normalized:
        raise UsageError("encode_nodes needs a normalized frame; call normalize_frame first")
    if frame.mesh is None:
        raise UsageError("frame has no mesh attached")
    coords = frame.mesh.coords if stats is None else stats.scale_coords(frame.mesh.coords)
    v, _ = embed_nodes(params, coords, node_type_features(frame.mesh.node_type, onehot),
                       frame.fields, frame.conditions[None, :])
    return v


def encode_edges(mesh, edges, params, coords=None):
    """Latent edge features ``Phi_E(x_i - x_j, x_j - x_i, |x_i - x_j|)``."""
    x = mesh.coords if coords is None else coords
    feat = edge_features(x, edges)
    return params.edge(ad.Tensor(feat))
