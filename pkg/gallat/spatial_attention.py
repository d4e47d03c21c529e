"""Spatial attention layer: one embedding matrix M_t per snapshot.

Node i's embedding concatenates its own projection with attention-weighted
sums over its forward, backward and geographical neighbours. The attention
score of a neighbour j with pre-weight w_j is

    LeakyReLU(a1 . W_a v_i + w_j * (a2 . W_a v_j))

with the pre-weight applied to the neighbour features before the projection.

Two reduced layouts exist for ablation runs: ``semantic`` merges forward and
backward neighbours into one flow-weighted set, and ``gat`` is a plain graph
attention layer over the undirected flow neighbourhood plus a self loop, with
no pre-weights and no geographical neighbours.
"""
from typing import Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np

from gallat.autodiff import (
    DEFAULT_LEAKY_SLOPE,
    Node,
    NodeLike,
    as_node,
    add,
    concat_cols,
    leaky_relu,
    matmul,
    mul,
    row_softmax,
    slice_rows,
    transpose,
)
from gallat.ddw_graph import (
    DEFAULT_EPSILON,
    GeoMatrix,
    SnapshotGraph,
    neighbor_masks,
    pre_weight_matrices,
    semantic_pre_weight_matrix,
)
from gallat.errors import ContractError, DimensionError

Aggregator = Literal["attention", "mean"]
Layout = Literal["ddw", "semantic", "gat"]

# d_e-wide segments in M_t per layout
SEGMENTS: Dict[str, int] = {"ddw": 4, "semantic": 3, "gat": 1}


class SpatialParams(NamedTuple):
    W_s: Node  # d_e x d
    W_a: Node  # d_e x d
    a: Node  # 2d_e x 1


class AttentionWeights(NamedTuple):
    """Dense n x n attention weights; row i is node i's distribution over each neighbourhood."""
    psi: np.ndarray
    phi: np.ndarray
    theta: np.ndarray


class SlotContext(NamedTuple):
    """Parameter-independent neighbourhood data of one snapshot."""
    forward: np.ndarray
    backward: np.ndarray
    geo: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    semantic: np.ndarray
    s: np.ndarray

    def neighbourhoods(self, layout: Layout) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
        """(mask, pre-weights) per aggregated segment; ``None`` means unweighted scores."""
        if layout == "ddw":
            return [(self.forward, self.a), (self.backward, self.b), (self.geo, self.c)]
        if layout == "semantic":
            return [(self.semantic, self.s), (self.geo, self.c)]
        if layout == "gat":
            return [(self.semantic | np.eye(self.semantic.shape[0], dtype=bool), None)]
        raise ContractError(f"unknown spatial layout {layout!r}")


def spatial_shapes(d: int, d_e: int) -> dict:
    return {"W_s": (d_e, d), "W_a": (d_e, d), "a": (2 * d_e, 1)}


def spatial_width(layout: Layout, d_e: int) -> int:
    """Column count of M_t."""
    if layout not in SEGMENTS:
        raise ContractError(f"unknown spatial layout {layout!r}")
    return SEGMENTS[layout] * d_e


def slot_context(g: SnapshotGraph, r: GeoMatrix, L: float, epsilon: float = DEFAULT_EPSILON) -> SlotContext:
    forward, backward, geo = neighbor_masks(g, r, L)
    a, b, c = pre_weight_matrices(g, r, L, epsilon)
    semantic, s = semantic_pre_weight_matrix(g, epsilon)
    return SlotContext(forward, backward, geo, a, b, c, semantic, s)


def attention_net(vi: NodeLike, vj: NodeLike, p: SpatialParams, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    """Scalar affinity LeakyReLU(a^T (W_a v_i ++ W_a v_j)) for one pair of row vectors."""
    vi, vj = as_node(vi), as_node(vj)
    d = p.W_a.shape[1]
    if vi.shape != (1, d) or vj.shape != (1, d):
        raise DimensionError("attention_net", vi.shape, vj.shape, (1, d))
    projected = concat_cols([matmul(vi, transpose(p.W_a)), matmul(vj, transpose(p.W_a))])
    return leaky_relu(matmul(projected, p.a), slope)


def _aggregate(
    s: Node, u_row: Node, weights: Optional[np.ndarray], mask: np.ndarray, aggregator: Aggregator, slope: float
) -> Node:
    if aggregator == "mean":
        scores = Node.constant(np.zeros(mask.shape))
    elif weights is None:
        scores = leaky_relu(add(s, u_row), slope)
    else:
        scores = leaky_relu(add(s, mul(Node.constant(weights), u_row)), slope)
    return row_softmax(scores, mask)


def _spatial_forward(V, g, r, p, L, epsilon, slope, aggregator, context, layout):
    V = as_node(V)
    n, d = V.shape
    if g.n != n or r.n != n:
        raise DimensionError("spatial_embed", V.shape, g.counts.shape, r.dist.shape)
    if p.W_s.shape[1] != d or p.W_a.shape[1] != d:
        raise DimensionError("spatial_embed", V.shape, p.W_s.shape, p.W_a.shape)
    d_e = p.W_a.shape[0]
    if p.a.shape != (2 * d_e, 1):
        raise DimensionError("spatial_embed", p.a.shape, (2 * d_e, 1))
    ctx = context if context is not None else slot_context(g, r, L, epsilon)

    H = matmul(V, transpose(p.W_s))
    Z = matmul(V, transpose(p.W_a))
    s = matmul(Z, slice_rows(p.a, 0, d_e))
    u_row = transpose(matmul(Z, slice_rows(p.a, d_e, 2 * d_e)))

    probs = [
        _aggregate(s, u_row, weights, mask, aggregator, slope)
        for mask, weights in ctx.neighbourhoods(layout)
    ]
    own = [] if layout == "gat" else [H]
    M = concat_cols(own + [matmul(P, H) for P in probs])
    return M, [P.value for P in probs]


def spatial_embed(
    V: NodeLike,
    g: SnapshotGraph,
    r: GeoMatrix,
    p: SpatialParams,
    L: float,
    epsilon: float = DEFAULT_EPSILON,
    slope: float = DEFAULT_LEAKY_SLOPE,
    aggregator: Aggregator = "attention",
    context: Optional[SlotContext] = None,
    layout: Layout = "ddw",
) -> Node:
    """Embedding matrix M_t (n x 4d_e for the full layout); empty neighbourhoods contribute zero segments."""
    M, _ = _spatial_forward(V, g, r, p, L, epsilon, slope, aggregator, context, layout)
    return M


def attention_weights(
    V: NodeLike,
    g: SnapshotGraph,
    r: GeoMatrix,
    p: SpatialParams,
    L: float,
    epsilon: float = DEFAULT_EPSILON,
    slope: float = DEFAULT_LEAKY_SLOPE,
    aggregator: Aggregator = "attention",
) -> AttentionWeights:
    _, weights = _spatial_forward(V, g, r, p, L, epsilon, slope, aggregator, None, "ddw")
    return AttentionWeights(*weights)
