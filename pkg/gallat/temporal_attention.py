"""Temporal attention layer.

Four channels read historical embedding matrices: the same slot of the
previous P days (S1), the slot before it (S2), the slot after it (S3), and
the P most recent slots (S4). Each channel is a scaled dot-product attention
read queried by the target slot's features; a fifth attention unit fuses the
four channel outputs into the spatiotemporal representation M'_T.
"""
import math
from typing import Dict, List, Literal, NamedTuple, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from gallat.autodiff import Node, NodeLike, add, as_node, matmul, row_softmax, scale, transpose
from gallat.errors import ContractError, DimensionError, InsufficientHistoryError

CHANNELS = ("S1", "S2", "S3", "S4")
FUSION = "fusion"

Aggregator = Literal["attention", "mean"]

# with one slot per day the subsequent-slot channel S3 would read the target itself
MIN_SLOTS_PER_DAY = 2


def day_too_short(l: int) -> str:
    return (
        f"{l} slot(s) per day is too short: the subsequent-slot channel would read the target slot itself; "
        f"use at least {MIN_SLOTS_PER_DAY} slots per day"
    )


class ChannelSpec(BaseModel):
    """History layout for one target: ``T`` is the last observed slot, T+1 is predicted."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    P: int = Field(ge=1, description="History length per channel")
    l: int = Field(ge=MIN_SLOTS_PER_DAY, description="Slots per day")
    T: int = Field(description="Current (last observed) slot")
    earliest: int = Field(default=0, description="Smallest slot index with data")


class ChannelSequences(NamedTuple):
    s1: List[int]
    s2: List[int]
    s3: List[int]
    s4: List[int]

    def slots(self) -> List[int]:
        """Distinct slots over all four channels, ascending."""
        return sorted(set(self.s1) | set(self.s2) | set(self.s3) | set(self.s4))


class ChannelParams(NamedTuple):
    W_Q: Node  # d_v x 4d_e
    W_K: Node  # 4d_e x 4d_e
    W_V: Node  # 4d_e x 4d_e


class TemporalParams(NamedTuple):
    channels: Tuple[ChannelParams, ChannelParams, ChannelParams, ChannelParams]
    fusion: ChannelParams


def temporal_shapes(d_v: int, width: int) -> Dict[str, Tuple[int, int]]:
    """Query, key and value shapes of the four channels and the fusion unit over M_t of ``width`` columns."""
    shapes = {}
    for unit in CHANNELS + (FUSION,):
        shapes[f"{unit}.W_Q"] = (d_v, width)
        shapes[f"{unit}.W_K"] = (width, width)
        shapes[f"{unit}.W_V"] = (width, width)
    return shapes


def min_history(P: int, l: int) -> int:
    """Smallest T (relative to the earliest slot) whose channels are all available."""
    return max(l * P, P - 1)


def channel_sequences(spec: ChannelSpec) -> ChannelSequences:
    T, l, P = spec.T, spec.l, spec.P
    if T - l * P < spec.earliest or T - P + 1 < spec.earliest:
        raise InsufficientHistoryError(
            f"slot {T} needs history back to slot {min(T - l * P, T - P + 1)}, earliest is {spec.earliest}"
        )
    ps = range(1, P + 1)
    return ChannelSequences(
        s1=[T - l * p + 1 for p in ps],
        s2=[T - l * p for p in ps],
        s3=[T - l * p + 2 for p in ps],
        s4=list(range(T - P + 1, T + 1)),
    )


def attention_read(V_next: NodeLike, M: NodeLike, params: ChannelParams) -> Node:
    """Row-stochastic n x n matrix softmax((V W_Q)(M W_K)^T / sqrt(4 d_e))."""
    V_next, M = as_node(V_next), as_node(M)
    width = params.W_K.shape[0]
    if V_next.shape[1] != params.W_Q.shape[0] or M.shape[1] != width or params.W_Q.shape[1] != width:
        raise DimensionError("attention_read", V_next.shape, M.shape, params.W_Q.shape, params.W_K.shape)
    if V_next.shape[0] != M.shape[0]:
        raise DimensionError("attention_read", V_next.shape, M.shape)
    query = matmul(V_next, params.W_Q)
    key = matmul(M, params.W_K)
    return row_softmax(scale(matmul(query, transpose(key)), 1.0 / math.sqrt(width)))


def _attend_sum(
    V_next: NodeLike, seq: Sequence[NodeLike], params: ChannelParams, aggregator: Aggregator
) -> Node:
    if not seq:
        raise ContractError("attention over an empty sequence")
    out = None
    for M in seq:
        M = as_node(M)
        value = matmul(M, params.W_V)
        term = value if aggregator == "mean" else matmul(attention_read(V_next, M, params), value)
        out = term if out is None else add(out, term)
    if aggregator == "mean":
        out = scale(out, 1.0 / len(seq))
    return out


def channel_attend(
    V_next: NodeLike,
    seq: Sequence[NodeLike],
    params: ChannelParams,
    temporal_mean: bool = False,
    aggregator: Aggregator = "attention",
) -> Node:
    """Sum of one attention read per historical matrix (divided by P with ``temporal_mean``)."""
    out = _attend_sum(V_next, seq, params, aggregator)
    if temporal_mean and aggregator == "attention":
        out = scale(out, 1.0 / len(seq))
    return out


def fuse_channels(
    V_next: NodeLike, channel_outputs: Sequence[NodeLike], params: ChannelParams, aggregator: Aggregator = "attention"
) -> Node:
    """Merge the four channel outputs into M'_T with the shared fusion unit."""
    if len(channel_outputs) != len(CHANNELS):
        raise ContractError(f"expected {len(CHANNELS)} channel outputs, got {len(channel_outputs)}")
    shape = as_node(channel_outputs[0]).shape
    for M in channel_outputs[1:]:
        if as_node(M).shape != shape:
            raise DimensionError("fuse_channels", shape, as_node(M).shape)
    return _attend_sum(V_next, channel_outputs, params, aggregator)


def temporal_embed(
    V_next: NodeLike,
    embeddings: Dict[int, Node],
    sequences: ChannelSequences,
    params: TemporalParams,
    temporal_mean: bool = False,
    aggregator: Aggregator = "attention",
) -> Node:
    """Full layer: four channel reads over ``embeddings`` (slot -> M_t) and their fusion."""
    outputs = [
        channel_attend(V_next, [embeddings[t] for t in seq], cp, temporal_mean, aggregator)
        for seq, cp in zip(sequences, params.channels)
    ]
    return fuse_channels(V_next, outputs, params.fusion, aggregator)
