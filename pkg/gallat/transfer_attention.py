"""Transferring attention layer: demand head, transfer probabilities and OD matrix.

The ``dense`` variant replaces the attention scores with one dense layer that
maps each origin's representation straight to logits over all destinations.
"""
from typing import List, Literal, NamedTuple, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from gallat.autodiff import (
    DEFAULT_LEAKY_SLOPE,
    Node,
    NodeLike,
    add,
    as_node,
    leaky_relu,
    matmul,
    mul,
    row_softmax,
    scale,
    sigmoid,
    slice_rows,
    transpose,
)
from gallat.errors import ContractError, DimensionError


TransferLayer = Literal["attention", "dense"]


class TransferParams(NamedTuple):
    w: Node  # 4d_e x 1
    b: Node  # n x 1
    W_a: Node  # 4d_e x 4d_e
    a: Node  # 8d_e x 1


class DenseTransferParams(NamedTuple):
    w: Node  # 4d_e x 1
    b: Node  # n x 1
    W_d: Node  # 4d_e x n
    c: Node  # 1 x n


AnyTransferParams = Union[TransferParams, DenseTransferParams]


class TransferOutput(NamedTuple):
    """Graph nodes of one decoding pass (kept for the loss)."""
    d_hat_norm: Node
    d_hat: Node
    Q: Node
    G_hat: Node

    def to_prediction(self) -> "Prediction":
        return Prediction(
            d_hat=self.d_hat.value[:, 0].copy(),
            d_hat_norm=self.d_hat_norm.value[:, 0].copy(),
            Q=self.Q.value.copy(),
            G_hat=self.G_hat.value.copy(),
        )


class Prediction(BaseModel):
    """Next-slot demand vector, transfer matrix and OD matrix (count scale)."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    d_hat: np.ndarray
    d_hat_norm: np.ndarray
    Q: np.ndarray
    G_hat: np.ndarray


class Flow(NamedTuple):
    rank: int
    origin: int
    dest: int
    value: float


def transfer_shapes(n: int, width: int, layer: TransferLayer = "attention") -> dict:
    if layer == "dense":
        return {"w": (width, 1), "b": (n, 1), "W_d": (width, n), "c": (1, n)}
    if layer != "attention":
        raise ContractError(f"unknown transfer layer {layer!r}")
    return {"w": (width, 1), "b": (n, 1), "W_a": (width, width), "a": (2 * width, 1)}


def predict_demand(M: NodeLike, p: AnyTransferParams, D_max: float) -> Tuple[Node, Node]:
    """sigmoid(M w + b) in (0, 1), and the same rescaled by ``D_max`` to counts."""
    if D_max <= 0:
        raise ContractError(f"D_max must be positive, got {D_max}")
    M = as_node(M)
    if M.shape[1] != p.w.shape[0] or M.shape[0] != p.b.shape[0]:
        raise DimensionError("predict_demand", M.shape, p.w.shape, p.b.shape)
    d_hat_norm = sigmoid(add(matmul(M, p.w), p.b))
    return d_hat_norm, scale(d_hat_norm, D_max)


def transfer_probs(M: NodeLike, p: TransferParams, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    """q_ij = softmax_j LeakyReLU(a'^T (W'_a m_i ++ W'_a m_j)), self-transfer included."""
    M = as_node(M)
    width = p.W_a.shape[1]
    if M.shape[1] != width or p.a.shape != (2 * width, 1):
        raise DimensionError("transfer_probs", M.shape, p.W_a.shape, p.a.shape)
    Z = matmul(M, transpose(p.W_a))
    s = matmul(Z, slice_rows(p.a, 0, width))
    u_row = transpose(matmul(Z, slice_rows(p.a, width, 2 * width)))
    return row_softmax(leaky_relu(add(s, u_row), slope))


def dense_transfer_probs(M: NodeLike, p: DenseTransferParams) -> Node:
    """q_i = softmax(m'_i W_d + c)."""
    M = as_node(M)
    if M.shape[1] != p.W_d.shape[0] or p.W_d.shape[1] != M.shape[0] or p.c.shape != (1, M.shape[0]):
        raise DimensionError("dense_transfer_probs", M.shape, p.W_d.shape, p.c.shape)
    return row_softmax(add(matmul(M, p.W_d), p.c))


def predict_od(d_hat: NodeLike, Q: NodeLike) -> Node:
    """g_ij = d_i * q_ij."""
    d_hat, Q = as_node(d_hat), as_node(Q)
    if d_hat.shape != (Q.shape[0], 1):
        raise DimensionError("predict_od", d_hat.shape, Q.shape)
    return mul(d_hat, Q)


def decode(M: NodeLike, p: AnyTransferParams, D_max: float, slope: float = DEFAULT_LEAKY_SLOPE) -> TransferOutput:
    d_hat_norm, d_hat = predict_demand(M, p, D_max)
    Q = dense_transfer_probs(M, p) if isinstance(p, DenseTransferParams) else transfer_probs(M, p, slope)
    return TransferOutput(d_hat_norm, d_hat, Q, predict_od(d_hat, Q))


def top_flows(G_hat: np.ndarray, k: int) -> List[Flow]:
    """The ``k`` largest OD entries, ties broken by (origin, dest)."""
    n = G_hat.shape[0]
    flat = G_hat.ravel()
    order = np.lexsort((np.arange(flat.size), -flat))[:max(k, 0)]
    return [Flow(rank + 1, int(idx // n), int(idx % n), float(flat[idx])) for rank, idx in enumerate(order)]
