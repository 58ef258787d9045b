"""Undirected graphs and the message-passing primitives shared by all layers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .autodiff import spmm
from .errors import DimensionError

TARGET_KINDS = ("graph_label", "graph_vector", "node_labels", "node_vectors", "edge_scalars")


@dataclass
class Graph:
    """Node features, a symmetric edge list and (optionally) task targets.

    Every undirected edge is stored in both directions. Self-loops are never
    stored; operators that need them add them on the fly. ``batch`` maps each
    node to its source graph when several graphs are packed together.
    """

    x: np.ndarray
    edges: np.ndarray = None
    edge_attr: np.ndarray = None
    target: object = None
    target_kind: str = None
    batch: np.ndarray = None
    num_graphs: int = 1
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        if self.edges is None:
            self.edges = np.zeros((0, 2), dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edge_attr is not None:
            self.edge_attr = np.asarray(self.edge_attr, dtype=np.float64)
            if self.edge_attr.ndim == 1:
                self.edge_attr = self.edge_attr.reshape(-1, 1)

    @property
    def num_nodes(self):
        return self.x.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]

    @property
    def node_graph(self):
        if self.batch is None:
            return np.zeros(self.num_nodes, dtype=np.int64)
        return self.batch

    def degrees(self):
        if "deg" not in self._cache:
            self._cache["deg"] = np.bincount(self.src, minlength=self.num_nodes)
        return self._cache["deg"]

    def gcn_operator(self):
        """Sparse D^-1/2 (A + I) D^-1/2 built from the edge list."""
        if "gcn" not in self._cache:
            inv = 1.0 / np.sqrt(self.degrees() + 1.0)
            w = inv[self.src] * inv[self.dst]
            self._cache["gcn"] = _sparse(self, w, inv * inv)
        return self._cache["gcn"]

    def adjacency_operator(self, self_weight=None):
        key = ("adj", self_weight)
        if key not in self._cache:
            diag = None if self_weight is None else np.full(self.num_nodes, float(self_weight))
            self._cache[key] = _sparse(self, np.ones(self.num_edges), diag)
        return self._cache[key]


def _sparse(g, edge_weights, self_weights=None):
    n = g.num_nodes
    rows, cols, vals = g.src, g.dst, np.asarray(edge_weights, dtype=np.float64)
    if self_weights is not None:
        idx = np.arange(n)
        rows = np.concatenate([rows, idx])
        cols = np.concatenate([cols, idx])
        vals = np.concatenate([vals, np.asarray(self_weights, dtype=np.float64)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def validate_graph(g):
    """Return every invariant violation found in ``g`` (empty list when valid)."""
    problems = []
    n = g.num_nodes
    if g.x.ndim != 2:
        problems.append(f"node features must be 2-D, got shape {g.x.shape}")
    if n < 1:
        problems.append("graph has no nodes")
    if not np.all(np.isfinite(g.x)):
        problems.append("node features contain non-finite values")
    edges = g.edges
    bad = np.flatnonzero((edges < 0).any(axis=1) | (edges >= n).any(axis=1))
    for e in bad:
        problems.append(f"edge {e} ({edges[e, 0]}, {edges[e, 1]}) has an endpoint outside [0, {n})")
    loops = np.flatnonzero(edges[:, 0] == edges[:, 1])
    for e in loops:
        problems.append(f"edge {e} is a stored self-loop on node {edges[e, 0]}")
    pairs = {}
    for e, (i, j) in enumerate(map(tuple, edges.tolist())):
        if (i, j) in pairs:
            problems.append(f"edge {e} duplicates edge {pairs[(i, j)]} ({i}, {j})")
        else:
            pairs[(i, j)] = e
    for (i, j), e in pairs.items():
        if (j, i) not in pairs:
            problems.append(f"edge {e} ({i}, {j}) has no reverse edge ({j}, {i})")
    if g.edge_attr is not None and g.edge_attr.shape[0] != g.num_edges:
        problems.append(f"edge_attr has {g.edge_attr.shape[0]} rows for {g.num_edges} edges")
    problems.extend(_target_problems(g))
    return problems


def _target_problems(g):
    kind, target = g.target_kind, g.target
    if kind is None:
        return [] if target is None else ["target given without a target kind"]
    if kind not in TARGET_KINDS:
        return [f"unknown target kind {kind!r}"]
    t = np.asarray(target)
    expected_len = {"node_labels": g.num_nodes, "node_vectors": g.num_nodes,
                    "edge_scalars": g.num_edges}.get(kind)
    # packed batches carry one graph target per member graph
    packed = g.batch is not None
    if kind == "graph_label":
        ok = t.shape == ((g.num_graphs,) if packed else ())
        if not ok or np.any(t < 0) or np.any(t != t.astype(np.int64)):
            return [f"graph_label must be a non-negative integer per graph, got {target!r}"]
    if kind == "graph_vector" and t.ndim != (2 if packed else 1):
        return [f"graph_vector has wrong shape {t.shape}"]
    if expected_len is not None and (t.ndim == 0 or t.shape[0] != expected_len):
        return [f"{kind} needs {expected_len} entries, got shape {t.shape}"]
    if kind == "node_labels" and (np.any(t < 0) or np.any(t != t.astype(np.int64))):
        return ["node_labels must be non-negative integers"]
    if kind == "node_vectors" and t.ndim != 2:
        return [f"node_vectors must be 2-D, got shape {t.shape}"]
    return []


def degree_info(g):
    return g.degrees()


def degree_coefficient(g, u, v):
    deg = g.degrees()
    return 1.0 / np.sqrt((deg[u] + 1.0) * (deg[v] + 1.0))


def normalized_adjacency(g):
    """Dense symmetric D^-1/2 (A + I) D^-1/2."""
    n = g.num_nodes
    a = np.eye(n)
    a[g.src, g.dst] = 1.0
    inv = 1.0 / np.sqrt(a.sum(axis=1))
    return inv[:, None] * a * inv[None, :]


def neighbor_sum(g, H, include_self=False, weights=None, self_weights=None):
    """Row v = sum over u in N(v) (plus v itself if asked) of weight(v, u) * H[u].

    ``weights`` is aligned with ``g.edges``; ``self_weights`` with the nodes.
    Both default to ones.
    """
    if H.shape[0] != g.num_nodes:
        raise DimensionError(f"H has {H.shape[0]} rows for a {g.num_nodes}-node graph")
    if weights is None and (not include_self or self_weights is None):
        op = g.adjacency_operator(1.0 if include_self else None)
    else:
        w = np.ones(g.num_edges) if weights is None else weights
        sw = None
        if include_self:
            sw = np.ones(g.num_nodes) if self_weights is None else self_weights
        op = _sparse(g, w, sw)
    return spmm(op, H)


def batch_graphs(graphs):
    """Pack graphs into one disjoint-union graph with a node -> graph index."""
    xs, edges, attrs, batch = [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        xs.append(g.x)
        edges.append(g.edges + offset)
        if g.edge_attr is not None:
            attrs.append(g.edge_attr)
        batch.append(np.full(g.num_nodes, gi, dtype=np.int64))
        offset += g.num_nodes
    kinds = {g.target_kind for g in graphs}
    kind = kinds.pop() if len(kinds) == 1 else None
    target = None
    if kind in ("graph_label",):
        target = np.array([int(g.target) for g in graphs], dtype=np.int64)
    elif kind == "graph_vector":
        target = np.stack([np.asarray(g.target, dtype=np.float64) for g in graphs])
    elif kind is not None:
        target = np.concatenate([np.asarray(g.target) for g in graphs])
    return Graph(
        x=np.concatenate(xs),
        edges=np.concatenate(edges) if edges else None,
        edge_attr=np.concatenate(attrs) if len(attrs) == len(graphs) and attrs else None,
        target=target,
        target_kind=kind,
        batch=np.concatenate(batch),
        num_graphs=len(graphs),
    )


def permute_graph(g, perm):
    """Relabel nodes so that new node i is old node ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    target = g.target
    if g.target_kind in ("node_labels", "node_vectors"):
        target = np.asarray(target)[perm]
    return Graph(x=g.x[perm], edges=inverse[g.edges], edge_attr=g.edge_attr,
                 target=target, target_kind=g.target_kind)
