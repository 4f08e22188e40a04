"""Bipartite attributed graph construction and attribute-aware propagation.

Node indices are laid out as ``[items | parents | leaves]``. Items and leaves
are the graph vertices; each (item, parent, leaf) record is an edge between
the item and the leaf labelled by the parent. Parents sit on the diagonal of
the adjacency so that propagation leaves them fixed.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import GraphConstructionError, IngestionError
from .tensor import Tensor, spmm

logger = logging.getLogger(__name__)

GRAPH_FILE_VERSION = 1
_HEADER_RE = re.compile(r"#\s*items=(\d+)\s+parents=(\d+)\s+leaves=(\d+)")


@dataclass
class AttributeRecords:
    """(item, parent, leaf) triples plus the declared catalog sizes."""

    triples: np.ndarray
    num_items: int
    num_parents: int
    num_leaves: int

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self.triples = t
        if len(t) == 0:
            return
        limits = (self.num_items, self.num_parents, self.num_leaves)
        for col, (label, limit) in enumerate(zip(("item", "parent", "leaf"), limits)):
            bad = (t[:, col] < 0) | (t[:, col] >= limit)
            if bad.any():
                row = int(np.argmax(bad))
                raise IngestionError(f"{label} id {t[row, col]} out of range [0, {limit}) in triple {row}")

    @property
    def num_nodes(self) -> int:
        return self.num_items + self.num_parents + self.num_leaves

    def item_attributes(self, level: str) -> list[set[int]]:
        """Per-item set of parent (or leaf) ids."""
        col = {"parent": 1, "leaf": 2}[level]
        out: list[set[int]] = [set() for _ in range(self.num_items)]
        for row in self.triples:
            out[row[0]].add(int(row[col]))
        return out


def read_attributes(path: str | Path) -> AttributeRecords:
    """Parse the tab-separated attribute file (header line required)."""
    sizes = None
    rows: list[tuple[int, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER_RE.match(line)
                if m and sizes is None:
                    sizes = tuple(int(x) for x in m.groups())
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestionError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                rows.append(tuple(int(p) for p in parts))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: non-integer id") from exc
    if sizes is None:
        raise IngestionError(f"{path}: missing '#items=<n> parents=<n> leaves=<n>' header")
    return AttributeRecords(np.array(rows, dtype=np.int64).reshape(-1, 3), *sizes)


def write_attributes(path: str | Path, records: AttributeRecords) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#items={records.num_items} parents={records.num_parents} leaves={records.num_leaves}\n")
        for i, c, a in records.triples:
            fh.write(f"{i}\t{c}\t{a}\n")


@dataclass
class IncidenceMatrices:
    R: sp.csr_matrix
    H: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def R_bin(self) -> sp.csr_matrix:
        return _binarize(self.R)

    @property
    def H_bin(self) -> sp.csr_matrix:
        return _binarize(self.H)

    @property
    def B_bin(self) -> sp.csr_matrix:
        return _binarize(self.B)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.R.shape[0], self.R.shape[1], self.H.shape[1]


def _binarize(m: sp.csr_matrix) -> sp.csr_matrix:
    out = m.copy()
    out.eliminate_zeros()
    out.data = np.ones_like(out.data)
    return out


def _counts(rows, cols, shape) -> sp.csr_matrix:
    data = np.ones(len(rows), dtype=np.float64)
    return sp.coo_matrix((data, (rows, cols)), shape=shape).tocsr()


def build_incidence(records: AttributeRecords) -> IncidenceMatrices:
    """Count matrices: duplicate triples add up."""
    t = records.triples
    nv, np_, nq = records.num_items, records.num_parents, records.num_leaves
    return IncidenceMatrices(
        R=_counts(t[:, 0], t[:, 1], (nv, np_)),
        H=_counts(t[:, 0], t[:, 2], (nv, nq)),
        B=_counts(t[:, 1], t[:, 2], (np_, nq)),
    )


def _zeros(m: int, n: int) -> sp.csr_matrix:
    return sp.csr_matrix((m, n), dtype=np.float64)


def _blocks(rows) -> sp.csr_matrix:
    return sp.vstack([sp.hstack(r, format="csr") for r in rows], format="csr")


def build_adjacency(inc: IncidenceMatrices) -> sp.csr_matrix:
    nv, np_, nq = inc.sizes
    eye = sp.identity(np_, format="csr", dtype=np.float64)
    return _blocks([
        [_zeros(nv, nv), inc.R, inc.H],
        [_zeros(np_, nv), eye, _zeros(np_, nq)],
        [inc.H.T.tocsr(), inc.B.T.tocsr(), _zeros(nq, nq)],
    ])


def build_masks(inc: IncidenceMatrices) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    nv, np_, nq = inc.sizes
    H, R, B = inc.H_bin, inc.R_bin, inc.B_bin
    m1 = _blocks([
        [_zeros(nv, nv), _zeros(nv, np_), H],
        [_zeros(np_, nv), _zeros(np_, np_), _zeros(np_, nq)],
        [H.T.tocsr(), _zeros(nq, np_), _zeros(nq, nq)],
    ])
    m2 = _blocks([
        [_zeros(nv, nv), R, _zeros(nv, nq)],
        [_zeros(np_, nv), sp.identity(np_, format="csr", dtype=np.float64), _zeros(np_, nq)],
        [_zeros(nq, nv), B.T.tocsr(), _zeros(nq, nq)],
    ])
    return m1, m2


def corrected_degrees(A: sp.csr_matrix, num_items: int, num_parents: int) -> np.ndarray:
    """Row sums with item and leaf entries halved.

    Each record contributes once to the parent strip and once to the leaf (or
    item) strip of an item (or leaf) row, so halving recovers the record count.
    Isolated items/leaves get degree 1; their rows of the adjacency are empty.
    """
    deg = np.asarray(A.sum(axis=1)).ravel().astype(np.float64)
    half = np.ones_like(deg, dtype=bool)
    half[num_items:num_items + num_parents] = False
    deg[half] *= 0.5
    isolated = half & (deg == 0)
    deg[isolated] = 1.0
    return deg


def normalize_adjacency(A: sp.csr_matrix, degrees: np.ndarray, m1: sp.csr_matrix,
                        m2: sp.csr_matrix) -> sp.csr_matrix:
    """D^-1/2 (A D^-1/2 * M1 + D^-1/2 A * M2), elementwise masks."""
    touched = np.unique(np.concatenate([m1.tocoo().row, m2.tocoo().row, m1.tocoo().col]))
    if touched.size and np.any(degrees[touched] <= 0):
        raise GraphConstructionError("non-positive corrected degree under a masked adjacency entry")
    inv_sqrt = sp.diags(1.0 / np.sqrt(degrees))
    node_part = (A @ inv_sqrt).multiply(m1)
    edge_part = (inv_sqrt @ A).multiply(m2)
    out = (inv_sqrt @ (node_part + edge_part)).tocsr()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def uniform_layer_weights(num_layers: int) -> np.ndarray:
    return np.full(num_layers + 1, 1.0 / (num_layers + 1))


@dataclass
class AttributedGraph:
    num_items: int
    num_parents: int
    num_leaves: int
    A: sp.csr_matrix | None
    degrees: np.ndarray
    M1: sp.csr_matrix | None
    M2: sp.csr_matrix | None
    norm_adj: sp.csr_matrix
    num_layers: int = 2
    layer_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_layers < 1:
            raise GraphConstructionError("at least one propagation layer is required")
        if self.layer_weights is None:
            self.layer_weights = uniform_layer_weights(self.num_layers)
        w = np.asarray(self.layer_weights, dtype=np.float64)
        if len(w) != self.num_layers + 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise GraphConstructionError("layer weights must be L+1 positive numbers summing to 1")
        self.layer_weights = w

    @property
    def num_nodes(self) -> int:
        return self.num_items + self.num_parents + self.num_leaves

    @property
    def item_slice(self) -> slice:
        return slice(0, self.num_items)

    @property
    def parent_slice(self) -> slice:
        return slice(self.num_items, self.num_items + self.num_parents)

    @property
    def leaf_slice(self) -> slice:
        return slice(self.num_items + self.num_parents, self.num_nodes)

    def with_layers(self, num_layers: int, layer_weights=None) -> "AttributedGraph":
        return AttributedGraph(self.num_items, self.num_parents, self.num_leaves, self.A, self.degrees,
                               self.M1, self.M2, self.norm_adj, num_layers, layer_weights)


def build_graph(records: AttributeRecords, num_layers: int = 2, layer_weights=None) -> AttributedGraph:
    inc = build_incidence(records)
    A = build_adjacency(inc)
    deg = corrected_degrees(A, records.num_items, records.num_parents)
    m1, m2 = build_masks(inc)
    norm = normalize_adjacency(A, deg, m1, m2)
    return AttributedGraph(records.num_items, records.num_parents, records.num_leaves,
                           A, deg, m1, m2, norm, num_layers, layer_weights)


@dataclass
class HolisticEmbeddings:
    E0: Tensor
    Eh: Tensor
    per_layer: list[Tensor]


def propagate(graph: AttributedGraph, E0: Tensor) -> HolisticEmbeddings:
    """Stack ``L`` propagation layers and mix them with the layer weights."""
    if E0.shape[0] != graph.num_nodes:
        raise GraphConstructionError(f"E0 has {E0.shape[0]} rows, graph has {graph.num_nodes} nodes")
    layers = [E0]
    for _ in range(graph.num_layers):
        layers.append(spmm(graph.norm_adj, layers[-1]))
    w = graph.layer_weights
    Eh = layers[0] * w[0]
    for alpha, E in zip(w[1:], layers[1:]):
        Eh = Eh + E * alpha
    return HolisticEmbeddings(E0=E0, Eh=Eh, per_layer=layers)


def attrgc_node_oracle(records: AttributeRecords, node: int, layer_embs: np.ndarray) -> np.ndarray:
    """Refine one item or leaf by summing directly over its neighbour pairs.

    Reference implementation for the matrix form; neighbour counts are taken
    from the raw triples, not from the adjacency.
    """
    nv, np_ = records.num_items, records.num_parents
    t = records.triples
    out = np.zeros(layer_embs.shape[1])
    if node < nv:
        own, other_col, other_offset, node_id = 0, 2, nv + np_, node
    elif node >= nv + np_:
        own, other_col, other_offset, node_id = 2, 0, 0, node - nv - np_
    else:
        return layer_embs[node].copy()
    pairs = t[t[:, own] == node_id]
    n_self = len(pairs)
    for row in pairs:
        other = row[other_col]
        n_other = int(np.sum(t[:, other_col] == other))
        out += layer_embs[other_offset + other] / np.sqrt(n_self * n_other)
        out += layer_embs[nv + row[1]] / n_self
    return out


def oracle_propagate(records: AttributeRecords, E0: np.ndarray, num_layers: int) -> list[np.ndarray]:
    """Layer-by-layer application of :func:`attrgc_node_oracle` to every node."""
    layers = [np.asarray(E0, dtype=np.float64)]
    for _ in range(num_layers):
        prev = layers[-1]
        layers.append(np.stack([attrgc_node_oracle(records, k, prev) for k in range(len(prev))]))
    return layers


def neighborhood_sizes(records: AttributeRecords) -> tuple[np.ndarray, np.ndarray]:
    """Hand count of neighbour pairs per item and per leaf."""
    t = records.triples
    return (np.bincount(t[:, 0], minlength=records.num_items),
            np.bincount(t[:, 2], minlength=records.num_leaves))


def save_graph(path: str | Path, graph: AttributedGraph) -> None:
    adj = graph.norm_adj.tocsr()
    with open(path, "wb") as fh:
        np.savez(
            fh,
            version=np.array([GRAPH_FILE_VERSION], dtype=np.int64),
            sizes=np.array([graph.num_items, graph.num_parents, graph.num_leaves], dtype=np.int64),
            indptr=adj.indptr.astype(np.int64),
            indices=adj.indices.astype(np.int64),
            values=adj.data.astype("<f8"),
            degrees=graph.degrees.astype("<f8"),
        )


def load_graph(path: str | Path, num_layers: int = 2, layer_weights=None) -> AttributedGraph:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"][0])
        if version != GRAPH_FILE_VERSION:
            raise IngestionError(f"unsupported graph file version {version}")
        nv, np_, nq = (int(x) for x in z["sizes"])
        n = nv + np_ + nq
        adj = sp.csr_matrix((z["values"], z["indices"], z["indptr"]), shape=(n, n))
        degrees = np.array(z["degrees"])
    return AttributedGraph(nv, np_, nq, None, degrees, None, None, adj, num_layers, layer_weights)
