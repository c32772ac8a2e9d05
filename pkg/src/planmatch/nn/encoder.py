"""Shared node encoder: feature MLP plus two multi-head GATv2 layers.

Forward passes cache every intermediate needed by the matching hand-derived
reverse-mode backward passes; no autodiff framework is involved. Dropout is
inverted (active only in Train mode, scaled by 1/(1-p), pass-through in Eval),
and self-loops are added to the attention edge set at forward time so every
node attends at least to itself. Attention softmax normalizes over the
incoming edges of each destination node.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..graphs import SceneGraph
from .params import ArchConfig, EncoderParams


class EncoderError(ValueError):
    """Invalid encoder input or mismatched forward/backward state."""


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class AttentionEdges:
    """Directed message edges sorted by (destination, source).

    Groups are runs of equal destination; ``group_ptr`` holds run starts,
    ``group_dst`` the destination node per run, and ``edge_group`` maps each
    edge to its run, so segment reductions never see an empty group.
    """

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int
    group_ptr: np.ndarray
    group_dst: np.ndarray
    edge_group: np.ndarray

    @classmethod
    def from_arrays(cls, src, dst, n_nodes: int) -> "AttentionEdges":
        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        if src.shape != dst.shape or src.ndim != 1 or src.size == 0:
            raise EncoderError("edge arrays must be equal-length non-empty 1-d arrays")
        if src.min() < 0 or dst.min() < 0 or src.max() >= n_nodes or dst.max() >= n_nodes:
            raise EncoderError("edge endpoints out of range")
        order = np.lexsort((src, dst))
        src, dst = src[order], dst[order]
        breaks = dst[1:] != dst[:-1]
        group_ptr = np.concatenate([[0], np.flatnonzero(breaks) + 1])
        edge_group = np.concatenate([[0], np.cumsum(breaks)])
        return cls(
            src=src, dst=dst, n_nodes=n_nodes,
            group_ptr=group_ptr, group_dst=dst[group_ptr], edge_group=edge_group,
        )

    @classmethod
    def from_graph(cls, graph: SceneGraph) -> "AttentionEdges":
        """All graph edges plus one self-loop per node."""
        n = graph.n_nodes
        loops = np.arange(n, dtype=np.intp)
        src = np.concatenate([np.fromiter((e[0] for e in graph.edges), np.intp,
                                          count=len(graph.edges)), loops])
        dst = np.concatenate([np.fromiter((e[1] for e in graph.edges), np.intp,
                                          count=len(graph.edges)), loops])
        return cls.from_arrays(src, dst, n) if graph.edges else cls.from_arrays(loops, loops, n)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    # max(x, slope*x) == leaky ReLU for 0 < slope < 1.
    return np.maximum(x, slope * x)


def _leaky_grad(x: np.ndarray, slope: float) -> np.ndarray:
    # Subgradient 1 at exactly zero.
    return np.where(x >= 0.0, 1.0, slope)


def _keep_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    return rng.random(shape) >= p


# ---------------------------------------------------------------------------
# Feature MLP: two rounds of Dropout(ReLU(W z + b)).


@dataclass
class MLPCache:
    X: np.ndarray
    A1: np.ndarray
    D1: np.ndarray
    A2: np.ndarray
    mask1: np.ndarray | None
    mask2: np.ndarray | None
    dropout_p: float


def mlp_forward(
    X: np.ndarray,
    params: EncoderParams,
    mode: Mode = Mode.EVAL,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, MLPCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.feature_dim:
        raise EncoderError(f"MLP input must be (N, {params.arch.feature_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise EncoderError("MLP input contains non-finite values")
    p = params.arch.mlp_dropout_p
    train = mode is Mode.TRAIN and p > 0.0
    if train and rng is None:
        raise EncoderError("Train-mode forward needs an rng for dropout masks")
    t = params.tensors

    A1 = X @ t["mlp.W1"].T + t["mlp.b1"]
    R1 = np.maximum(A1, 0.0)
    mask1 = _keep_mask(rng, R1.shape, p) if train else None
    D1 = R1 * mask1 / (1.0 - p) if train else R1
    A2 = D1 @ t["mlp.W2"].T + t["mlp.b2"]
    R2 = np.maximum(A2, 0.0)
    mask2 = _keep_mask(rng, R2.shape, p) if train else None
    H0 = R2 * mask2 / (1.0 - p) if train else R2
    return H0, MLPCache(X=X, A1=A1, D1=D1, A2=A2, mask1=mask1, mask2=mask2, dropout_p=p)


def mlp_backward(
    cache: MLPCache,
    params: EncoderParams,
    gH0: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Accumulate MLP weight gradients; return the gradient wrt the input."""
    t = params.tensors
    p = cache.dropout_p
    gR2 = gH0 * cache.mask2 / (1.0 - p) if cache.mask2 is not None else gH0
    gA2 = gR2 * (cache.A2 > 0.0)  # ReLU subgradient 0 at 0
    grads["mlp.W2"] += gA2.T @ cache.D1
    grads["mlp.b2"] += gA2.sum(axis=0)
    gD1 = gA2 @ t["mlp.W2"]
    gR1 = gD1 * cache.mask1 / (1.0 - p) if cache.mask1 is not None else gD1
    gA1 = gR1 * (cache.A1 > 0.0)
    grads["mlp.W1"] += gA1.T @ cache.X
    grads["mlp.b1"] += gA1.sum(axis=0)
    return gA1 @ t["mlp.W1"]


# ---------------------------------------------------------------------------
# GATv2 attention layers.


def gatv2_scores(
    H: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    Wa: np.ndarray,
    a: np.ndarray,
    slope: float = 0.2,
) -> np.ndarray:
    """Single-head per-edge attention logits a . LeakyReLU(Wa [h_src || h_dst])."""
    d_in = H.shape[1]
    if Wa.shape[1] != 2 * d_in or Wa.shape[0] != a.shape[0]:
        raise EncoderError(f"score shapes inconsistent: H {H.shape}, Wa {Wa.shape}, a {a.shape}")
    q = H[src] @ Wa[:, :d_in].T + H[dst] @ Wa[:, d_in:].T
    return _leaky(q, slope) @ a


def attention_normalize(
    logits: np.ndarray,
    edges: AttentionEdges,
    mode: Mode = Mode.EVAL,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Max-stabilized softmax over each destination's incoming edges, with
    optional Train-mode attention dropout on the normalized weights."""
    flat = logits.ndim == 1
    L = logits[:, None] if flat else logits
    if L.shape[0] != edges.n_edges:
        raise EncoderError("one logit row per edge required")
    alpha = _segment_softmax(L, edges)
    if mode is Mode.TRAIN and dropout_p > 0.0:
        if rng is None:
            raise EncoderError("Train-mode attention dropout needs an rng")
        alpha = alpha * _keep_mask(rng, alpha.shape, dropout_p) / (1.0 - dropout_p)
    return alpha[:, 0] if flat else alpha


def _segment_softmax(logits: np.ndarray, edges: AttentionEdges) -> np.ndarray:
    mx = np.maximum.reduceat(logits, edges.group_ptr, axis=0)
    ex = np.exp(logits - mx[edges.edge_group])
    den = np.add.reduceat(ex, edges.group_ptr, axis=0)
    return ex / den[edges.edge_group]


@dataclass
class LayerCache:
    layer: int
    H: np.ndarray                 # layer input
    Wa_src: np.ndarray            # (heads, d_head, d_in) stacked weights
    Wa_dst: np.ndarray
    a: np.ndarray                 # (heads, d_head)
    Wh: np.ndarray                # (heads, d_head, d_in)
    q: np.ndarray                 # (E, heads, d_head) attention pre-activations
    r: np.ndarray                 # LeakyReLU(q)
    alpha_pre: np.ndarray         # (E, heads) softmax weights before dropout
    alpha: np.ndarray             # after attention dropout
    attn_mask: np.ndarray | None
    Z: np.ndarray                 # (N, heads, d_head) value projections
    preact: np.ndarray | None     # concat output before ReLU (layer 1 only)
    node_mask: np.ndarray | None


def _stack_layer_weights(params: EncoderParams, layer: int):
    """Pack one layer's per-head weights into (proj, a).

    ``proj`` has shape (heads, 3, d_head, d_in); slot 0 is the attention
    source half, slot 1 the destination half, slot 2 the value projection.
    Packing them contiguously lets the forward pass run all three head
    projections as a single matmul.
    """
    arch = params.arch
    d_in, d_head = arch.layer_dims(layer)
    heads = arch.n_heads
    proj = np.empty((heads, 3, d_head, d_in))
    a = np.empty((heads, d_head))
    t = params.tensors
    for h in range(heads):
        base = f"gat{layer}.h{h}"
        Wa = t[base + ".Wa"]
        proj[h, 0] = Wa[:, :d_in]
        proj[h, 1] = Wa[:, d_in:]
        proj[h, 2] = t[base + ".Wh"]
        a[h] = t[base + ".a"]
    return proj, a


def stack_encoder_weights(params: EncoderParams) -> dict[int, tuple]:
    """Prepack both attention layers' weights for repeated forward passes.

    The result can be handed to encoder_forward so that encoding several
    graphs under the same parameters packs the weights only once. It goes
    stale as soon as any parameter tensor changes.
    """
    return {1: _stack_layer_weights(params, 1), 2: _stack_layer_weights(params, 2)}


def gatv2_layer_forward(
    H: np.ndarray,
    edges: AttentionEdges,
    params: EncoderParams,
    layer: int,
    mode: Mode = Mode.EVAL,
    rng: np.random.Generator | None = None,
    stacked: tuple | None = None,
) -> tuple[np.ndarray, LayerCache]:
    """One multi-head attention layer.

    Layer 1 concatenates head outputs and applies ReLU then node dropout;
    layer 2 averages head outputs with no post-activation. Mask draw order in
    Train mode: attention mask first, then (layer 1) node mask.
    """
    arch = params.arch
    d_in, d_head = arch.layer_dims(layer)
    if H.shape != (edges.n_nodes, d_in):
        raise EncoderError(f"layer {layer} input must be ({edges.n_nodes}, {d_in}), got {H.shape}")
    train = mode is Mode.TRAIN
    if train and rng is None and (arch.attn_dropout_p > 0.0 or arch.node_dropout_p > 0.0):
        raise EncoderError("Train-mode forward needs an rng for dropout masks")
    proj_w, a = stacked if stacked is not None else _stack_layer_weights(params, layer)
    Wa_src, Wa_dst, Wh = proj_w[:, 0], proj_w[:, 1], proj_w[:, 2]

    # One matmul covers the source, destination, and value projections.
    n = H.shape[0]
    proj = (H @ proj_w.reshape(-1, d_in).T).reshape(n, arch.n_heads, 3, d_head)
    P_src = proj[:, :, 0, :]                               # (N, heads, d_head)
    P_dst = proj[:, :, 1, :]
    Z = proj[:, :, 2, :]
    q = P_src[edges.src] + P_dst[edges.dst]                # (E, heads, d_head)
    r = _leaky(q, arch.leaky_slope)
    logits = (r * a[None, :, :]).sum(axis=2)
    alpha_pre = _segment_softmax(logits, edges)

    attn_mask = None
    alpha = alpha_pre
    if train and arch.attn_dropout_p > 0.0:
        attn_mask = _keep_mask(rng, alpha_pre.shape, arch.attn_dropout_p)
        alpha = alpha_pre * attn_mask / (1.0 - arch.attn_dropout_p)

    msg = alpha[:, :, None] * Z[edges.src]
    m = np.zeros((edges.n_nodes, arch.n_heads, d_head))
    m[edges.group_dst] = np.add.reduceat(msg, edges.group_ptr, axis=0)

    preact = None
    node_mask = None
    if layer == 1:
        preact = m.reshape(edges.n_nodes, arch.n_heads * d_head)
        out = np.maximum(preact, 0.0)
        if train and arch.node_dropout_p > 0.0:
            node_mask = _keep_mask(rng, out.shape, arch.node_dropout_p)
            out = out * node_mask / (1.0 - arch.node_dropout_p)
    else:
        out = m.mean(axis=1)

    cache = LayerCache(
        layer=layer, H=H, Wa_src=Wa_src, Wa_dst=Wa_dst, a=a, Wh=Wh,
        q=q, r=r, alpha_pre=alpha_pre, alpha=alpha, attn_mask=attn_mask,
        Z=Z, preact=preact, node_mask=node_mask,
    )
    return out, cache


def gatv2_layer_backward(
    cache: LayerCache,
    params: EncoderParams,
    edges: AttentionEdges,
    gOut: np.ndarray,
    grads: dict[str, np.ndarray],
) -> np.ndarray:
    """Exact reverse of gatv2_layer_forward; returns gradient wrt layer input."""
    arch = params.arch
    d_in, d_head = arch.layer_dims(cache.layer)
    n = edges.n_nodes

    if cache.layer == 1:
        g = gOut
        if cache.node_mask is not None:
            g = g * cache.node_mask / (1.0 - arch.node_dropout_p)
        g = g * (cache.preact > 0.0)
        g_m = g.reshape(n, arch.n_heads, d_head)
    else:
        g_m = np.repeat(gOut[:, None, :], arch.n_heads, axis=1) / arch.n_heads

    gmsg = g_m[edges.dst]                                   # (E, heads, d_head)
    Zsrc = cache.Z[edges.src]
    galpha = (gmsg * Zsrc).sum(axis=2)
    gZ = np.zeros_like(cache.Z)
    np.add.at(gZ, edges.src, cache.alpha[:, :, None] * gmsg)

    if cache.attn_mask is not None:
        galpha_pre = galpha * cache.attn_mask / (1.0 - arch.attn_dropout_p)
    else:
        galpha_pre = galpha
    # Softmax backward per destination group.
    t = cache.alpha_pre * galpha_pre
    ssum = np.add.reduceat(t, edges.group_ptr, axis=0)
    glogit = t - cache.alpha_pre * ssum[edges.edge_group]

    ga = (cache.r * glogit[:, :, None]).sum(axis=0)
    gq = glogit[:, :, None] * cache.a[None, :, :] * _leaky_grad(cache.q, arch.leaky_slope)
    gP_src = np.zeros((n, arch.n_heads, d_head))
    np.add.at(gP_src, edges.src, gq)
    gP_dst = np.zeros_like(gP_src)
    gP_dst[edges.group_dst] = np.add.reduceat(gq, edges.group_ptr, axis=0)

    def weight_grad(G, X):  # (N, heads, d) x (N, k) -> (heads, d, k)
        return (G.reshape(n, -1).T @ X).reshape(arch.n_heads, d_head, d_in)

    def input_grad(G, W):  # (N, heads, d) x (heads, d, k) -> (N, k)
        return G.reshape(n, -1) @ W.reshape(arch.n_heads * d_head, d_in)

    gWa_src = weight_grad(gP_src, cache.H)
    gWa_dst = weight_grad(gP_dst, cache.H)
    gWh = weight_grad(gZ, cache.H)
    gH = (
        input_grad(gP_src, cache.Wa_src)
        + input_grad(gP_dst, cache.Wa_dst)
        + input_grad(gZ, cache.Wh)
    )
    for h in range(arch.n_heads):
        prefix = f"gat{cache.layer}.h{h}"
        grads[f"{prefix}.Wa"] += np.concatenate([gWa_src[h], gWa_dst[h]], axis=1)
        grads[f"{prefix}.a"] += ga[h]
        grads[f"{prefix}.Wh"] += gWh[h]
    return gH


# ---------------------------------------------------------------------------
# Full encoder.


@dataclass
class EncoderCache:
    edges: AttentionEdges
    mlp: MLPCache
    layer1: LayerCache
    layer2: LayerCache


def encoder_forward(
    graph: SceneGraph,
    params: EncoderParams,
    mode: Mode = Mode.EVAL,
    rng: np.random.Generator | None = None,
    edges: AttentionEdges | None = None,
    stacked: dict[int, tuple] | None = None,
) -> tuple[np.ndarray, EncoderCache]:
    """Encode a standardized graph into per-node embeddings.

    Train-mode rng consumption order: MLP masks, layer-1 attention mask,
    layer-1 node mask, layer-2 attention mask. ``edges`` lets callers reuse a
    precomputed attention edge set for the same graph, and ``stacked`` (from
    stack_encoder_weights) a prepacked copy of the current weights.
    """
    if graph.features is None:
        raise EncoderError("graph has no feature matrix; standardize it first")
    if edges is None:
        edges = AttentionEdges.from_graph(graph)
    if stacked is None:
        stacked = stack_encoder_weights(params)
    H0, mlp_cache = mlp_forward(graph.features, params, mode=mode, rng=rng)
    H1, l1_cache = gatv2_layer_forward(
        H0, edges, params, layer=1, mode=mode, rng=rng, stacked=stacked[1])
    H2, l2_cache = gatv2_layer_forward(
        H1, edges, params, layer=2, mode=mode, rng=rng, stacked=stacked[2])
    return H2, EncoderCache(edges=edges, mlp=mlp_cache, layer1=l1_cache, layer2=l2_cache)


def encoder_backward(
    cache: EncoderCache,
    params: EncoderParams,
    gH: np.ndarray,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients for one encoded graph."""
    if grads is None:
        grads = params.zero_grads()
    gH1 = gatv2_layer_backward(cache.layer2, params, cache.edges, gH, grads)
    gH0 = gatv2_layer_backward(cache.layer1, params, cache.edges, gH1, grads)
    mlp_backward(cache.mlp, params, gH0, grads)
    return grads
