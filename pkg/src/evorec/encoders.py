"""Graph encoders: symmetric-normalised propagation with layer-sum readout,
and stage re-encoding seeded from the global table.

Node layout everywhere: rows ``0..U-1`` are users, ``U..U+I-1`` items.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import autograd as ag

ROLES = ("initial", "global", "stage", "evolved", "aggregated")


@dataclass
class NormalizedAdjacency:
    """Directed edge list covering both directions of every (u, i) edge,
    sorted by (dst, src) so per-node sums have a fixed order."""

    n_users: int
    n_items: int
    src: np.ndarray
    dst: np.ndarray
    coef: np.ndarray
    degree: np.ndarray  # per node, users first

    @property
    def n_nodes(self):
        return self.n_users + self.n_items

    @property
    def n_edges(self):
        return len(self.src) // 2

    def coefficient(self, u, i):
        node_i = self.n_users + i
        m = (self.dst == u) & (self.src == node_i)
        return float(self.coef[m][0]) if m.any() else 0.0

    def dense(self):
        A = np.zeros((self.n_nodes, self.n_nodes))
        A[self.dst, self.src] = self.coef
        return A


@dataclass
class EmbeddingTable:
    role: str
    values: object  # ndarray or Var, (U + I) x d
    n_users: int

    def __post_init__(self):
        if self.role.split("-")[0] not in ROLES:
            raise ValueError(f"unknown table role {self.role!r}")

    @property
    def data(self):
        return self.values.data if isinstance(self.values, ag.Var) else np.asarray(self.values)

    @property
    def users(self):
        return self.data[: self.n_users]

    @property
    def items(self):
        return self.data[self.n_users:]

    @property
    def dim(self):
        return self.data.shape[1]


def normalize_adjacency(edges, n_users, n_items) -> NormalizedAdjacency:
    """``edges`` is ``(user_idx, item_idx)``; duplicates are collapsed."""
    u, i = (np.asarray(x, dtype=np.int64) for x in edges)
    if len(u) != len(i):
        raise ShapeError("edges", (len(u),), (len(i),))
    if len(u):
        if u.min() < 0 or u.max() >= n_users:
            raise IndexError(f"user index out of range [0, {n_users})")
        if i.min() < 0 or i.max() >= n_items:
            raise IndexError(f"item index out of range [0, {n_items})")
        key = np.unique(u * n_items + i)
        u, i = key // n_items, key % n_items
    deg_u = np.bincount(u, minlength=n_users)
    deg_i = np.bincount(i, minlength=n_items)
    c = 1.0 / (np.sqrt(deg_u[u].astype(np.float64)) * np.sqrt(deg_i[i].astype(np.float64)))
    node_i = i + n_users
    src = np.concatenate([node_i, u])
    dst = np.concatenate([u, node_i])
    coef = np.concatenate([c, c])
    order = np.lexsort((src, dst))
    return NormalizedAdjacency(
        n_users, n_items, src[order], dst[order], coef[order], np.concatenate([deg_u, deg_i])
    )


def propagate(adj: NormalizedAdjacency, x, n_layers):
    """Layer-sum propagation on a raw (N, d) matrix or Var."""
    if n_layers < 0:
        raise ValueError("layer count must be >= 0")
    N = adj.n_nodes
    if tuple(x.shape[:1]) != (N,):
        raise ShapeError("embeddings", (N, x.shape[-1]), tuple(x.shape))
    layer = x
    total = x
    for _ in range(n_layers):
        layer = ag.spmm(adj.dst, adj.src, adj.coef, layer, N)
        total = total + layer
    return total


def propagate_layers(adj: NormalizedAdjacency, init: EmbeddingTable, n_layers, role="global") -> EmbeddingTable:
    out = propagate(adj, init.values, n_layers)
    if not isinstance(init.values, ag.Var):
        out = out.data if isinstance(out, ag.Var) else out
    return EmbeddingTable(role, out, init.n_users)


def stage_encode(stage_adj: NormalizedAdjacency, base: EmbeddingTable, n_layers, stage=None) -> EmbeddingTable:
    """Re-propagate over one stage's edges starting from ``base`` (the global
    table).  Nodes without edges in the stage keep their base row."""
    role = "stage" if stage is None else f"stage-{stage}"
    return propagate_layers(stage_adj, base, n_layers, role=role)


def init_embeddings(n_users, n_items, d, rng, item_features=None, projection=None, dtype=np.float64):
    """Initial parameters and table.

    Users: N(0, (0.1/sqrt(d))^2).  Items: same Gaussian, or, given features
    (I x F), ``features @ projection`` with a trainable F x d projection.
    Returns ``(table, params)`` where ``params`` holds the trainable arrays.
    """
    if d <= 0:
        raise ValueError("embedding dimension must be positive")
    scale = 0.1 / math.sqrt(d)
    params = {"user_emb": (rng.standard_normal((n_users, d)) * scale).astype(dtype)}
    if item_features is None:
        params["item_emb"] = (rng.standard_normal((n_items, d)) * scale).astype(dtype)
        items = params["item_emb"]
    else:
        feats = np.asarray(item_features)
        if feats.shape[0] != n_items:
            raise ShapeError("item_features", (n_items, "F"), feats.shape)
        F = feats.shape[1]
        if projection is None:
            projection = rng.standard_normal((F, d)) * (scale / math.sqrt(F))
        projection = np.asarray(projection, dtype=dtype)
        if projection.shape != (F, d):
            raise ShapeError("item_proj", (F, d), projection.shape)
        params["item_proj"] = projection
        items = feats.astype(dtype) @ projection
    table = EmbeddingTable("initial", np.concatenate([params["user_emb"], items]), n_users)
    return table, params
