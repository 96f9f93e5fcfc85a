"""Graph-transformer block: flux-oriented message passing plus query-projection attention."""

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, NumericError
from .nn import MLP, Linear, mlp_macs


class BlockParams:
    """Weights of one block.

    ``spe_width`` is the positional-encoding width appended to node features
    before message passing.  The edge update sees the edge feature and both
    endpoint rows (``3C + 2s`` inputs); the node update sees the node row and
    its aggregated message (``2C + s``).
    """

    def __init__(self, C, M, H, spe_width, rng, activation="silu"):
        if C % 2:
            raise ConfigError(f"latent width C={C} must be even")
        if C % H:
            raise ConfigError(f"latent width C={C} is not divisible by H={H}")
        if M < 1:
            raise ConfigError("query count M must be at least 1")
        self.C, self.M, self.H, self.spe_width = C, M, H, spe_width
        self.activation = activation
        self.edge_update = MLP(3 * C + 2 * spe_width, C, C, rng, activation)
        self.node_update = MLP(2 * C + spe_width, C, C, rng, activation)
        self.queries = ad.parameter(rng.standard_normal((M, C)))
        self.attn_out = Linear(C, C, rng)
        self.ln_gain = ad.parameter(np.ones((1, C)))
        self.ln_bias = ad.parameter(np.zeros((1, C)))
        self.ffn_in = Linear(C, 2 * C, rng)
        self.ffn_out = Linear(2 * C, C, rng)

    def named_parameters(self, prefix="block"):
        return (self.edge_update.named_parameters(f"{prefix}.edge_update")
                + self.node_update.named_parameters(f"{prefix}.node_update")
                + [(f"{prefix}.queries", self.queries)]
                + self.attn_out.named_parameters(f"{prefix}.attn_out")
                + [(f"{prefix}.ln_gain", self.ln_gain), (f"{prefix}.ln_bias", self.ln_bias)]
                + self.ffn_in.named_parameters(f"{prefix}.ffn_in")
                + self.ffn_out.named_parameters(f"{prefix}.ffn_out"))

    def zero_(self):
        for _, p in self.named_parameters():
            p.data[...] = 0


def _edge_update(mlp, E, V, send, recv):
    """``mlp(concat([E, V[send], V[recv]]))`` with the first layer split by input block.

    Projecting node rows before gathering them onto edges gives the same
    result as the concatenated form with far fewer multiplies when edges
    outnumber nodes.
    """
    first = mlp.layers[0]
    C, w = E.cols, V.cols
    h = (ad.affine(E, ad.slice_rows(first.weight, 0, C), first.bias)
         + ad.gather_rows(V @ ad.slice_rows(first.weight, C, C + w), send)
         + ad.gather_rows(V @ ad.slice_rows(first.weight, C + w, C + 2 * w), recv))
    for layer in mlp.layers[1:]:
        h = layer(ad.activation(h, mlp.activation))
    return h


def message_pass(V, E, edges, params):
    """One round of directional message passing.

    ``V`` is ``[N, C + s]`` (latent plus positional encoding), ``E`` is
    ``[E, C]``.  The updated edge feature is split in two halves: the first
    half is averaged at the sender over its outgoing edges, the second at the
    receiver over its incoming edges.  Returns ``(V' [N, C], E')``.
    """
    C = E.cols
    if C % 2:
        raise ConfigError(f"edge width C={C} must be even to split into two halves")
    n = V.rows
    send, recv, out_seg, in_seg = edges.plans(n)
    E_new = E + _edge_update(params.edge_update, E, V, send, recv)
    out_half, in_half = ad.split_cols(E_new)
    msg = ad.concat_cols([ad.segment_mean(out_half, out_seg), ad.segment_mean(in_half, in_seg)])
    V_new = ad.slice_cols(V, 0, C) + params.node_update(ad.concat_cols([V, msg]))
    return V_new, E_new


def projection_attention(W0, Q, maps=None):
    """Project node tokens onto queries, refine among queries, project back.

    Scores use ``1/sqrt(width)`` with ``width = W0.cols``.  When ``maps`` is a
    list, the three row-stochastic matrices are appended as a dict.
    """
    scale = 1.0 / math.sqrt(W0.cols)
    a1 = ad.softmax_rows(ad.scale(Q @ W0.T, scale))
    W1 = a1 @ W0
    a2 = ad.softmax_rows(ad.scale(W1 @ W1.T, scale))
    W2 = a2 @ W1
    a3 = ad.softmax_rows(ad.scale(W0 @ W2.T, scale))
    W3 = a3 @ W2
    if maps is not None:
        maps.append({"query_to_node": a1.data, "query_to_query": a2.data, "node_to_query": a3.data})
    return W3


def _softmax_last(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_last_grad(s, g):
    return s * (g - (g * s).sum(axis=-1, keepdims=True))


def _fused_heads(W0, Q, H, maps):
    """All heads of :func:`projection_attention` as one recorded operation.

    Heads are stacked along a leading axis so each stage is one batched
    matmul; the backward pass is written out by hand.
    """
    N, C = W0.shape
    M = Q.rows
    w = C // H
    scale = 1.0 / math.sqrt(w)
    if np.isnan(W0.data).any() or np.isnan(Q.data).any():
        raise NumericError("attention received NaN input")
    X = W0.data.reshape(N, H, w).transpose(1, 0, 2)            # [H, N, w]
    Qh = Q.data.reshape(M, H, w).transpose(1, 0, 2)            # [H, M, w]
    Xt = X.transpose(0, 2, 1)
    a1 = _softmax_last((Qh @ Xt) * scale)                      # [H, M, N]
    W1 = a1 @ X
    W1t = W1.transpose(0, 2, 1)
    a2 = _softmax_last((W1 @ W1t) * scale)                     # [H, M, M]
    W2 = a2 @ W1
    W2t = W2.transpose(0, 2, 1)
    a3 = _softmax_last((X @ W2t) * scale)                      # [H, N, M]
    W3 = a3 @ W2
    if maps is not None:
        for h in range(H):
            maps.append({"query_to_node": a1[h], "query_to_query": a2[h], "node_to_query": a3[h]})
    out = np.ascontiguousarray(W3.transpose(1, 0, 2).reshape(N, C))

    def backward(g):
        g3 = g.reshape(N, H, w).transpose(1, 0, 2)
        gs3 = _softmax_last_grad(a3, g3 @ W2t) * scale
        gW2 = a3.transpose(0, 2, 1) @ g3 + gs3.transpose(0, 2, 1) @ X
        gX = gs3 @ W2
        gs2 = _softmax_last_grad(a2, gW2 @ W1t) * scale
        gW1 = a2.transpose(0, 2, 1) @ gW2 + (gs2 + gs2.transpose(0, 2, 1)) @ W1
        gs1 = _softmax_last_grad(a1, gW1 @ Xt) * scale
        gX = gX + a1.transpose(0, 2, 1) @ gW1 + gs1.transpose(0, 2, 1) @ Qh
        gQ = gs1 @ X
        return (gX.transpose(1, 0, 2).reshape(N, C), gQ.transpose(1, 0, 2).reshape(M, C))

    return ad.custom_op(out, (W0, Q), backward)


def multi_head_attention(W0, Q, H, maps=None):
    """Apply :func:`projection_attention` per column slice of width ``C/H`` and concatenate.

    With more than one head the slices run together in one fused operation.
    """
    C = W0.cols
    if C % H:
        raise ConfigError(f"width {C} is not divisible by {H} heads")
    if Q.cols != C:
        raise DimensionError(f"queries have width {Q.cols}, tokens {C}")
    if H == 1:
        return projection_attention(W0, Q, maps)
    return _fused_heads(W0, Q, H, maps)


def gto_block(V, E, edges, params, spe_feat, graph_ptr=None, maps=None):
    """Message passing, residual attention, then pre-norm feed-forward.

    ``graph_ptr`` holds ``(start, stop)`` row ranges when several graphs are
    batched; attention then runs separately inside each range.
    """
    dt = V.data.dtype
    pos = spe_feat if isinstance(spe_feat, ad.Tensor) else ad.Tensor(np.asarray(spe_feat, dtype=dt))
    W0, E_new = message_pass(ad.concat_cols([V, pos]), E, edges, params)
    if graph_ptr is None or len(graph_ptr) == 1:
        att = multi_head_attention(W0, params.queries, params.H, maps)
    else:
        att = ad.concat_rows([multi_head_attention(ad.slice_rows(W0, a, b), params.queries,
                                                   params.H, maps)
                              for a, b in graph_ptr])
    V1 = W0 + params.attn_out(att)
    hidden = ad.activation(params.ffn_in(ad.layer_norm(V1, params.ln_gain, params.ln_bias)),
                           params.activation)
    return V1 + params.ffn_out(hidden), E_new


def flops_block(N, E_count, C, M, H, s):
    """Multiply-add count of one block, broken down by stage.

    Attention counts the score and mixing products of all three stages
    (``4NMC + 2M^2 C`` summed over heads) plus the output projection.
    """
    if min(N, C, M, H) <= 0 or E_count < 0 or s < 0:
        raise ConfigError("flop counts need positive sizes")
    parts = {
        "mp_edge": E_count * mlp_macs(3 * C + 2 * s, C, C),
        "mp_aggregate": E_count * C,
        "mp_node": N * mlp_macs(2 * C + s, C, C),
        "attention": 4 * N * M * C + 2 * M * M * C,
        "attn_out": N * C * C,
        "norm": 2 * N * C,
        "ffn": 4 * N * C * C,
    }
    parts["total"] = sum(parts.values())
    return parts
