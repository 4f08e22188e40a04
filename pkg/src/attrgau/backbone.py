"""SR-GNN style backbone: session graphs, gated GNN, additive attention readout.

The backbone is split into two plug-in callables so alternative backbones can
be dropped in:

* a graph encoder ``(SessionBatch, node_embs[B, K, d]) -> [B, K, d]``
* a readout ``(SessionBatch, encoded[B, N, d]) -> [B, d]``

Everything runs on padded mini-batches; the single-session functions are thin
wrappers over batches of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import IngestionError, ShapeError
from .tensor import Tensor

GGNN_NAMES = ("W_in", "b_in", "W_out", "b_out", "W_z", "U_z", "W_r", "U_r", "W_h", "U_h")
ATT_NAMES = ("q", "W1", "W2", "c", "W3")
EMBEDDING_NAMES = ("item_emb", "parent_emb", "leaf_emb")


# -- session graphs -------------------------------------------------------------
@dataclass
class SessionGraph:
    unique_nodes: np.ndarray
    alias: np.ndarray
    A_in: np.ndarray
    A_out: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.unique_nodes)


def build_session_graph(session: Sequence[int], max_len: int | None = None) -> SessionGraph:
    """Directed session graph over distinct items, rows normalized by degree.

    Repeated transitions are counted once. ``max_len`` keeps only the most
    recent steps.
    """
    seq = [int(x) for x in session]
    if not seq:
        raise IngestionError("cannot build a session graph from an empty session")
    if max_len is not None and len(seq) > max_len:
        seq = seq[-max_len:]
    index: dict[int, int] = {}
    for item in seq:
        index.setdefault(item, len(index))
    alias = np.array([index[x] for x in seq], dtype=np.int64)
    k = len(index)
    adj = np.zeros((k, k))
    adj[alias[:-1], alias[1:]] = 1.0
    out_deg = adj.sum(axis=1, keepdims=True)
    in_deg = adj.sum(axis=0, keepdims=True)
    A_out = np.divide(adj, out_deg, out=np.zeros_like(adj), where=out_deg > 0)
    A_in = np.divide(adj, in_deg, out=np.zeros_like(adj), where=in_deg > 0).T.copy()
    return SessionGraph(np.array(list(index), dtype=np.int64), alias, A_in, A_out)


@dataclass
class SessionBatch:
    """Padded stack of session graphs."""

    items: np.ndarray      # [B, K] unique-node item ids (pad 0)
    A_in: np.ndarray       # [B, K, K]
    A_out: np.ndarray      # [B, K, K]
    alias: np.ndarray      # [B, N] position -> unique-node index (pad 0)
    mask: np.ndarray       # [B, N] 1.0 on real positions
    last: np.ndarray       # [B] index of the final position

    @property
    def size(self) -> int:
        return self.items.shape[0]


def collate(graphs: Sequence[SessionGraph]) -> SessionBatch:
    B = len(graphs)
    K = max(g.num_nodes for g in graphs)
    N = max(len(g.alias) for g in graphs)
    items = np.zeros((B, K), dtype=np.int64)
    A_in = np.zeros((B, K, K))
    A_out = np.zeros((B, K, K))
    alias = np.zeros((B, N), dtype=np.int64)
    mask = np.zeros((B, N))
    last = np.zeros(B, dtype=np.int64)
    for b, g in enumerate(graphs):
        k, n = g.num_nodes, len(g.alias)
        items[b, :k] = g.unique_nodes
        A_in[b, :k, :k] = g.A_in
        A_out[b, :k, :k] = g.A_out
        alias[b, :n] = g.alias
        mask[b, :n] = 1.0
        last[b] = n - 1
    return SessionBatch(items, A_in, A_out, alias, mask, last)


# -- parameters -------------------------------------------------------------------
class BackboneParams:
    """All trainable tensors, shared by every channel.

    Matrices are stored for row-vector products (``x @ W``), so the output
    mix is ``(2d, d)``.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    @classmethod
    def initialize(cls, num_items: int, num_parents: int, num_leaves: int, hidden_dim: int,
                   rng: np.random.Generator) -> "BackboneParams":
        d = hidden_dim
        shapes = {
            "item_emb": (num_items, d),
            "parent_emb": (num_parents, d),
            "leaf_emb": (num_leaves, d),
            "ggnn.W_in": (d, d), "ggnn.b_in": (d,),
            "ggnn.W_out": (d, d), "ggnn.b_out": (d,),
            "ggnn.W_z": (2 * d, d), "ggnn.U_z": (d, d),
            "ggnn.W_r": (2 * d, d), "ggnn.U_r": (d, d),
            "ggnn.W_h": (2 * d, d), "ggnn.U_h": (d, d),
            "att.q": (d,), "att.W1": (d, d), "att.W2": (d, d), "att.c": (d,),
            "att.W3": (2 * d, d),
        }
        bound = 1.0 / np.sqrt(d)
        return cls({name: T.parameter(rng.uniform(-bound, bound, size=shape), name=name)
                    for name, shape in shapes.items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "BackboneParams":
        return cls({k: T.parameter(v, name=k) for k, v in arrays.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    @property
    def hidden_dim(self) -> int:
        return self.tensors["item_emb"].shape[1]

    @property
    def num_items(self) -> int:
        return self.tensors["item_emb"].shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].data[...] = v

    def trainable(self, use_attributes: bool = True) -> dict[str, Tensor]:
        if use_attributes:
            return dict(self.tensors)
        return {k: t for k, t in self.tensors.items() if k not in ("parent_emb", "leaf_emb")}

    def to_bytes(self, metadata: dict | None = None) -> bytes:
        return checkpoint.dumps(self.arrays(), metadata)


# -- plug-in interfaces --------------------------------------------------------------
class GraphEncoder(Protocol):
    def __call__(self, batch: SessionBatch, node_embs: Tensor) -> Tensor: ...


class Readout(Protocol):
    def __call__(self, batch: SessionBatch, encoded: Tensor) -> Tensor: ...


def _linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W (+ b)`` over the last axis, as one 2-D product."""
    lead = x.shape[:-1]
    y = T.matmul(x.reshape(-1, x.shape[-1]), W)
    if b is not None:
        y = y + b
    return y.reshape(lead + (W.shape[1],))


class GGNN:
    """Gated graph network over in/out session adjacency."""

    def __init__(self, params: BackboneParams, steps: int = 1):
        if steps < 1:
            raise ShapeError("ggnn needs at least one propagation step")
        self.params = params
        self.steps = steps

    def __call__(self, batch: SessionBatch, node_embs: Tensor) -> Tensor:
        p = self.params
        if node_embs.shape[:2] != batch.items.shape:
            raise ShapeError(f"node embeddings {node_embs.shape} do not match batch {batch.items.shape}")
        A_in, A_out = Tensor(batch.A_in), Tensor(batch.A_out)
        h = node_embs
        for _ in range(self.steps):
            msg_in = T.matmul(A_in, _linear(h, p["ggnn.W_in"], p["ggnn.b_in"]))
            msg_out = T.matmul(A_out, _linear(h, p["ggnn.W_out"], p["ggnn.b_out"]))
            m = T.concat([msg_in, msg_out], axis=-1)
            z = T.sigmoid(_linear(m, p["ggnn.W_z"]) + _linear(h, p["ggnn.U_z"]))
            r = T.sigmoid(_linear(m, p["ggnn.W_r"]) + _linear(h, p["ggnn.U_r"]))
            cand = T.tanh(_linear(m, p["ggnn.W_h"]) + _linear(r * h, p["ggnn.U_h"]))
            h = h + z * (cand - h)
        return h


class AdditiveAttention:
    """Soft-attention readout anchored on the last position."""

    def __init__(self, params: BackboneParams):
        self.params = params

    def __call__(self, batch: SessionBatch, encoded: Tensor) -> Tensor:
        p = self.params
        B, N, d = encoded.shape
        v_n = T.take_rows(encoded.reshape(B * N, d), np.arange(B) * N + batch.last)
        q1 = _linear(v_n, p["att.W1"]).reshape(B, 1, d)
        q2 = _linear(encoded, p["att.W2"])
        gate = T.sigmoid(q1 + q2 + p["att.c"])
        alpha = _linear(gate, p["att.q"].reshape(d, 1)) * batch.mask[:, :, None]
        s_g = (alpha * encoded).sum(axis=1)
        return _linear(T.concat([v_n, s_g], axis=-1), p["att.W3"])


def expand_alias(batch: SessionBatch, node_states: Tensor) -> Tensor:
    """Map unique-node states [B, K, d] to session positions [B, N, d]."""
    B, K, d = node_states.shape
    flat_idx = np.arange(B)[:, None] * K + batch.alias
    return T.take_rows(node_states.reshape(B * K, d), flat_idx)


# -- dual-channel encoding -------------------------------------------------------------
@dataclass
class ChannelOutputs:
    v_sh: Tensor | None
    v_so: Tensor
    v_sv: Tensor
    s_h: Tensor | None
    s_o: Tensor | None
    s_v: Tensor


def encode_batch(batch: SessionBatch, params: BackboneParams, raw_items: Tensor,
                 holistic_items: Tensor | None, dropout_rate: float, training: bool,
                 rng: np.random.Generator | None = None, encoder: GraphEncoder | None = None,
                 readout: Readout | None = None, need_channel_sessions: bool = True) -> ChannelOutputs:
    """Run the shared backbone over the raw and holistic item views and fuse them.

    With ``holistic_items=None`` only the raw channel is encoded (the plain
    backbone); the fused representation is then the dropped-out raw channel.
    """
    if batch.items.size and batch.items.max() >= raw_items.shape[0]:
        raise IngestionError(f"item id {int(batch.items.max())} outside the catalog of {raw_items.shape[0]}")
    encoder = encoder or GGNN(params)
    readout = readout or AdditiveAttention(params)

    v_so = expand_alias(batch, encoder(batch, T.take_rows(raw_items, batch.items)))
    if holistic_items is None:
        v_sv = T.dropout(v_so, dropout_rate, training, rng)
        return ChannelOutputs(None, v_so, v_sv, None, None, readout(batch, v_sv))

    v_sh = expand_alias(batch, encoder(batch, T.take_rows(holistic_items, batch.items)))
    v_sv = T.dropout(v_sh, dropout_rate, training, rng) + T.dropout(v_so, dropout_rate, training, rng)
    s_v = readout(batch, v_sv)
    s_h = readout(batch, v_sh) if need_channel_sessions else None
    s_o = readout(batch, v_so) if need_channel_sessions else None
    return ChannelOutputs(v_sh, v_so, v_sv, s_h, s_o, s_v)


def score_logits(s_v: Tensor, raw_items: Tensor) -> Tensor:
    """Inner products against the raw (not holistic) item embeddings."""
    return T.matmul(s_v, raw_items.T)


def predict_scores(s_v: Tensor, raw_items: Tensor) -> Tensor:
    squeeze = s_v.ndim == 1
    if squeeze:
        s_v = s_v.reshape(1, -1)
    y = T.row_softmax(score_logits(s_v, raw_items))
    return y.reshape(-1) if squeeze else y


# -- single-session conveniences ---------------------------------------------------------
def ggnn_forward(g: SessionGraph, node_embs: Tensor, params: BackboneParams, steps: int = 1) -> Tensor:
    k, d = node_embs.shape
    if k != g.num_nodes:
        raise ShapeError(f"{k} node embeddings for a graph with {g.num_nodes} nodes")
    batch = collate([g])
    return GGNN(params, steps)(batch, node_embs.reshape(1, k, d)).reshape(k, d)


def attention_readout(encoded: Tensor, params: BackboneParams) -> Tensor:
    n, d = encoded.shape
    if n < 1:
        raise ShapeError("readout needs at least one position")
    batch = SessionBatch(np.zeros((1, 1), dtype=np.int64), np.zeros((1, 1, 1)), np.zeros((1, 1, 1)),
                         np.zeros((1, n), dtype=np.int64), np.ones((1, n)), np.array([n - 1]))
    return AdditiveAttention(params)(batch, encoded.reshape(1, n, d)).reshape(d)


def encode_session(session: Sequence[int], raw_items: Tensor, holistic_items: Tensor | None,
                   params: BackboneParams, dropout_rate: float = 0.0, training: bool = False,
                   rng: np.random.Generator | None = None, max_len: int | None = None) -> ChannelOutputs:
    batch = collate([build_session_graph(session, max_len)])
    out = encode_batch(batch, params, raw_items, holistic_items, dropout_rate, training, rng)

    def first(t):
        return None if t is None else t[0]

    return ChannelOutputs(first(out.v_sh), first(out.v_so), first(out.v_sv),
                          first(out.s_h), first(out.s_o), first(out.s_v))
