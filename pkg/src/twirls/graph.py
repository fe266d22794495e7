"""Sparse undirected graphs and Laplacian-family operators.

Edges are stored once, canonically oriented ``u < v`` and sorted
lexicographically; that order is the fixed reduction order every operator
uses. A symmetric CSR adjacency mirrors the edge list for fast products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (m, 2) int64, rows (u, v) with u < v
    csr: sp.csr_matrix = field(repr=False)
    degree: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    def adjacency(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        """Symmetric adjacency, optionally with per-edge weights."""
        if weights is None:
            return self.csr
        w = check_edge_weights(self, weights)
        n = self.num_nodes
        rows = np.concatenate([self.src, self.dst])
        cols = np.concatenate([self.dst, self.src])
        return sp.csr_matrix((np.concatenate([w, w]), (rows, cols)), shape=(n, n))

    def weighted_degree(self, weights: np.ndarray | None = None) -> np.ndarray:
        if weights is None:
            return self.degree.astype(float)
        w = check_edge_weights(self, weights)
        n = self.num_nodes
        return np.bincount(self.src, w, minlength=n) + np.bincount(self.dst, w, minlength=n)

    def incidence(self) -> sp.csr_matrix:
        """m x n incidence matrix B with row e = e_u - e_v."""
        m, n = self.num_edges, self.num_nodes
        rows = np.repeat(np.arange(m), 2)
        cols = self.edges.reshape(-1)
        vals = np.tile([1.0, -1.0], m)
        return sp.csr_matrix((vals, (rows, cols)), shape=(m, n))

    def laplacian(self, weights: np.ndarray | None = None) -> sp.csr_matrix:
        """B^T diag(w) B = D_w - A_w."""
        deg = self.weighted_degree(weights)
        return (sp.diags(deg) - self.adjacency(weights)).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


def build_graph(n: int, edges) -> Graph:
    """Canonical graph from an edge list; duplicates and both orientations collapse.

    Raises GraphError on self-loops or out-of-range indices.
    """
    n = int(n)
    if n < 0:
        raise GraphError(f"negative node count {n}")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2) if len(edges) else np.zeros((0, 2), np.int64)
    if e.size:
        bad = (e < 0) | (e >= n)
        if bad.any():
            i = int(np.argwhere(bad.any(axis=1))[0, 0])
            raise GraphError(f"edge {i} {tuple(e[i])} has index outside [0, {n})")
        loops = e[:, 0] == e[:, 1]
        if loops.any():
            i = int(np.argmax(loops))
            raise GraphError(f"self-loop at node {e[i, 0]} (edge {i})")
    canon = np.sort(e, axis=1)
    canon = np.unique(canon, axis=0) if canon.size else canon
    m = canon.shape[0]
    rows = np.concatenate([canon[:, 0], canon[:, 1]])
    cols = np.concatenate([canon[:, 1], canon[:, 0]])
    csr = sp.csr_matrix((np.ones(2 * m), (rows, cols)), shape=(n, n))
    csr.sort_indices()
    degree = np.bincount(rows, minlength=n).astype(np.int64)
    canon.setflags(write=False)
    degree.setflags(write=False)
    return Graph(num_nodes=n, edges=canon, csr=csr, degree=degree)


def check_edge_weights(g: Graph, w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != g.num_edges:
        raise GraphError(f"edge weights have length {w.shape[0]}, graph has {g.num_edges} edges")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise GraphError("edge weights must be finite and nonnegative")
    return w


def _check_rows(g: Graph, Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] != g.num_nodes:
        raise GraphError(f"matrix has {Y.shape[0]} rows, graph has {g.num_nodes} nodes")
    return Y


def incidence_apply(g: Graph, Y) -> np.ndarray:
    """Per-edge differences ``y_u - y_v`` (m x d)."""
    Y = _check_rows(g, Y)
    return Y[g.src] - Y[g.dst]


def edge_sq_dist(g: Graph, Y) -> np.ndarray:
    diff = incidence_apply(g, Y)
    return np.einsum("ij,ij->i", diff, diff)


def laplacian_quadratic(g: Graph, Y, w=None) -> float:
    """sum_e w_e ||y_u - y_v||^2, i.e. tr(Y^T B^T diag(w) B Y)."""
    zsq = edge_sq_dist(g, Y)
    if w is None:
        return float(zsq.sum())
    return float(check_edge_weights(g, w) @ zsq)


def sym_norm_apply(g: Graph, Z) -> np.ndarray:
    """(D+I)^{-1/2} (A+I) (D+I)^{-1/2} Z."""
    Z = _check_rows(g, Z)
    s = 1.0 / np.sqrt(g.degree + 1.0)
    SZ = s[:, None] * Z
    return s[:, None] * (g.csr @ SZ + SZ)


def homophily_ratio(g: Graph, labels) -> float:
    """Fraction of edges whose endpoints share a label."""
    labels = np.asarray(labels)
    if labels.shape[0] != g.num_nodes:
        raise GraphError(f"labels have length {labels.shape[0]}, graph has {g.num_nodes} nodes")
    if g.num_edges == 0:
        raise GraphError("homophily ratio is undefined on an edgeless graph")
    return float(np.mean(labels[g.src] == labels[g.dst]))


def read_edge_list(path) -> list[tuple[int, int]]:
    """Parse ``u v`` lines; '#' starts a comment."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    return pairs


def write_edge_list(g: Graph, path) -> None:
    lines = [f"# {g.num_nodes} nodes, {g.num_edges} edges"]
    lines += [f"{u} {v}" for u, v in g.edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
