"""Datasets: on-disk format, synthetic generators, edge perturbation, splits.

Directory layout::

    edges.txt     one "u v" pair per line, 0-indexed, '#' comments
    features.csv  n rows of comma-separated decimals
    labels.txt    one integer per line, -1 = unlabeled
    splits.txt    three lines of space-separated indices: train, val, test
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph, build_graph, homophily_ratio, read_edge_list, write_edge_list

logger = logging.getLogger(__name__)

FILES = ("edges.txt", "features.csv", "labels.txt", "splits.txt")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    name: str = "dataset"
    duplicate_edges: int = field(default=0, compare=False)

    def __post_init__(self):
        n = self.graph.num_nodes
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DatasetError(f"features have {self.features.shape[0]} rows, graph has {n} nodes")
        if self.labels.shape != (n,):
            raise DatasetError(f"labels have length {self.labels.shape[0]}, graph has {n} nodes")
        if np.any(self.labels < -1):
            raise DatasetError("labels must be >= -1")
        seen = set()
        for s in SPLITS:
            idx = np.asarray(getattr(self, s), dtype=np.int64)
            setattr(self, s, idx)
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"{s} split has indices outside [0, {n})")
            if idx.size and np.any(self.labels[idx] < 0):
                raise DatasetError(f"{s} split contains unlabeled nodes")
            overlap = seen.intersection(idx.tolist())
            if overlap or len(set(idx.tolist())) != idx.size:
                raise DatasetError(f"{s} split overlaps another split or repeats indices")
            seen.update(idx.tolist())

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def with_graph(self, graph: Graph) -> "Dataset":
        return Dataset(graph, self.features, self.labels, self.train, self.val, self.test, self.name)


def load_dataset(path) -> Dataset:
    path = Path(path)
    for f in FILES:
        if not (path / f).is_file():
            raise DatasetError(f"missing file {path / f}")
    labels = np.array([int(x) for x in (path / "labels.txt").read_text(encoding="utf-8").split()],
                      dtype=np.int64)
    n = labels.shape[0]
    rows = [r for r in (path / "features.csv").read_text(encoding="utf-8").splitlines() if r.strip()]
    if len(rows) != n:
        raise DatasetError(f"features.csv has {len(rows)} rows but labels.txt has {n} nodes")
    features = np.array([[float(x) for x in r.split(",")] for r in rows], dtype=float)
    pairs = read_edge_list(path / "edges.txt")
    g = build_graph(n, pairs)
    dups = len(pairs) - g.num_edges
    if dups:
        logger.info("%s: dropped %d duplicate edge entries", path, dups)
    lines = (path / "splits.txt").read_text(encoding="utf-8").split("\n")
    lines = (lines + ["", "", ""])[:3]
    splits = [np.array([int(x) for x in ln.split()], dtype=np.int64) for ln in lines]
    ds = Dataset(g, features, labels, *splits, name=path.name)
    ds.duplicate_edges = dups
    return ds


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_edge_list(ds.graph, path / "edges.txt")
    (path / "features.csv").write_text(
        "".join(",".join(repr(float(x)) for x in row) + "\n" for row in ds.features), encoding="utf-8")
    (path / "labels.txt").write_text("".join(f"{int(x)}\n" for x in ds.labels), encoding="utf-8")
    (path / "splits.txt").write_text(
        "".join(" ".join(str(int(i)) for i in ds.split(s)) + "\n" for s in SPLITS), encoding="utf-8")


def dataset_hash(path) -> str:
    h = hashlib.sha256()
    for f in FILES:
        h.update(f.encode())
        h.update((Path(path) / f).read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------ splits

def _allocate(total: int, quotas: np.ndarray, capacity: np.ndarray) -> np.ndarray:
    """Integer counts per class summing to ``total`` (largest remainder, capped)."""
    counts = np.minimum(np.floor(quotas).astype(np.int64), capacity)
    order = np.argsort(-(quotas - np.floor(quotas)), kind="stable")
    while counts.sum() < total:
        progressed = False
        for c in order:
            if counts.sum() >= total:
                break
            if counts[c] < capacity[c]:
                counts[c] += 1
                progressed = True
        if not progressed:
            break
    return counts


def make_splits(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0, *,
                per_class_train: int | None = None, num_val: int | None = None,
                num_test: int | None = None):
    """Stratified train/val/test index sets over labeled nodes.

    Either by ``fractions`` of the labeled nodes, or with ``per_class_train``
    nodes per class for training and ``num_val`` / ``num_test`` drawn from
    the rest.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    labeled = np.flatnonzero(labels >= 0)
    if labeled.size == 0:
        raise DatasetError("no labeled nodes")
    classes = int(labels[labeled].max()) + 1
    by_class = [np.flatnonzero(labels == c) for c in range(classes)]
    empty = [c for c, idx in enumerate(by_class) if idx.size == 0]
    if empty:
        raise DatasetError(f"classes {empty} have no labeled nodes")
    by_class = [rng.permutation(idx) for idx in by_class]

    if per_class_train is not None:
        train = np.concatenate([idx[:per_class_train] for idx in by_class])
        rest = rng.permutation(np.concatenate([idx[per_class_train:] for idx in by_class]))
        nv = num_val or 0
        nt = num_test if num_test is not None else rest.size - nv
        if nv + nt > rest.size:
            raise DatasetError("not enough labeled nodes for the requested val/test sizes")
        return np.sort(train), np.sort(rest[:nv]), np.sort(rest[nv:nv + nt])

    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise DatasetError(f"fractions must be three nonnegative numbers summing to <= 1, got {fractions}")
    sizes = np.array([idx.size for idx in by_class])
    capacity = sizes.copy()
    out = []
    offset = np.zeros(classes, dtype=np.int64)
    for f in fractions:
        counts = _allocate(int(round(f * labeled.size)), f * sizes, capacity)
        out.append(np.sort(np.concatenate(
            [by_class[c][offset[c]:offset[c] + counts[c]] for c in range(classes)])).astype(np.int64))
        offset += counts
        capacity -= counts
    return tuple(out)


# -------------------------------------------------------------- generators

def gen_chains(num_chains: int = 20, length: int = 10, feat_dim: int = 100, seed: int = 0) -> Dataset:
    """Disjoint path graphs labeled 0/1; only one end node carries the label.

    The end node's first feature is +1 for label 1 and -1 for label 0, so
    every chain contributes exactly one nonzero feature entry.
    """
    if num_chains < 1 or length < 2 or feat_dim < 1:
        raise DatasetError("need num_chains >= 1, length >= 2, feat_dim >= 1")
    rng = np.random.default_rng(seed)
    n = num_chains * length
    chain_labels = rng.integers(0, 2, size=num_chains)
    labels = np.repeat(chain_labels, length)
    edges = [(c * length + j, c * length + j + 1) for c in range(num_chains) for j in range(length - 1)]
    X = np.zeros((n, feat_dim))
    X[np.arange(num_chains) * length, 0] = np.where(chain_labels == 1, 1.0, -1.0)
    # splits are over nodes, not chains; stratification is by label
    test_n = max(1, int(round(0.1 * n)))
    perm = rng.permutation(n)
    test = np.sort(perm[:test_n])
    val = np.sort(perm[test_n:2 * test_n])
    train = np.sort(perm[2 * test_n:])
    return Dataset(build_graph(n, edges), X, labels, train, val, test,
                   name=f"chains-{num_chains}x{length}")


def _sample_pairs(rng, k: int, pool_u: np.ndarray, pool_v_fn, accept, taken: set, max_tries: int):
    out = []
    tries = 0
    while len(out) < k:
        tries += 1
        if tries > max_tries:
            return None
        u = int(rng.choice(pool_u))
        v = pool_v_fn(u)
        if v is None or u == v:
            continue
        e = (min(u, v), max(u, v))
        if e in taken or not accept(*e):
            continue
        taken.add(e)
        out.append(e)
    return out


def gen_sbm(n: int = 400, classes: int = 4, target_h: float = 0.8, avg_degree: float = 8.0,
            feat_noise: float = 1.0, seed: int = 0, feat_dim: int | None = None,
            tolerance: float = 0.05, max_retries: int = 20) -> Dataset:
    """Planted-partition graph with homophily ratio close to ``target_h``.

    Exactly ``round(target_h * m)`` edges join same-class nodes, the rest
    join different classes. Features are a one-hot class centroid plus
    Gaussian noise with scale ``feat_noise``.
    """
    if not 0 <= target_h <= 1 or n < 2 or classes < 1 or avg_degree <= 0:
        raise DatasetError("infeasible SBM parameters")
    feat_dim = classes if feat_dim is None else feat_dim
    if feat_dim < classes:
        raise DatasetError("feat_dim must be >= classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    members = [np.flatnonzero(labels == c) for c in range(classes)]
    m = int(round(n * avg_degree / 2))
    m_in = int(round(target_h * m))
    m_out = m - m_in
    sizes = np.array([len(x) for x in members])
    intra_pairs = int(np.sum(sizes * (sizes - 1) // 2))
    inter_pairs = n * (n - 1) // 2 - intra_pairs
    if m_in > intra_pairs or m_out > inter_pairs:
        raise DatasetError(f"cannot place {m_in} intra / {m_out} inter edges "
                           f"(capacity {intra_pairs} / {inter_pairs})")
    all_nodes = np.arange(n)
    for _ in range(max_retries):
        taken: set = set()
        intra = _sample_pairs(rng, m_in, all_nodes,
                              lambda u: int(rng.choice(members[labels[u]])),
                              lambda u, v: True, taken, 50 * m + 1000)
        others = [np.flatnonzero(labels != c) for c in range(classes)]
        inter = _sample_pairs(rng, m_out, all_nodes,
                              lambda u: int(rng.choice(others[labels[u]])) if others[labels[u]].size else None,
                              lambda u, v: True, taken, 50 * m + 1000)
        if intra is None or inter is None:
            continue
        g = build_graph(n, sorted(intra + inter))
        if g.num_edges == 0 or abs(homophily_ratio(g, labels) - target_h) <= tolerance:
            break
    else:
        raise DatasetError(f"could not realize homophily {target_h} within {tolerance}")
    X = np.zeros((n, feat_dim))
    X[np.arange(n), labels] = 1.0
    X += feat_noise * rng.standard_normal((n, feat_dim))
    train, val, test = make_splits(labels, (0.6, 0.2, 0.2), seed=int(rng.integers(2**31)))
    return Dataset(g, X, labels, train, val, test, name=f"sbm-h{target_h:g}-s{seed}")


def perturb_edges(g: Graph, rate: float, mode: str = "mixed", seed: int = 0) -> Graph:
    """Randomly flip ``ceil(rate * m)`` edge slots.

    ``remove`` deletes existing edges, ``add`` inserts non-edges, ``mixed``
    does half of each (removals get the floor).
    """
    if not 0 <= rate <= 1:
        raise DatasetError(f"rate must be in [0, 1], got {rate}")
    if mode not in ("add", "remove", "mixed"):
        raise DatasetError(f"unknown perturbation mode {mode!r}")
    m, n = g.num_edges, g.num_nodes
    k = int(math.ceil(rate * m - 1e-12))
    if k == 0:
        return g
    n_remove = {"remove": k, "add": 0, "mixed": k // 2}[mode]
    n_add = k - n_remove
    free = n * (n - 1) // 2 - m
    if n_remove > m or n_add > free:
        raise DatasetError(f"cannot remove {n_remove} of {m} edges / add {n_add} of {free} non-edges")
    rng = np.random.default_rng(seed)
    keep = np.ones(m, dtype=bool)
    keep[rng.choice(m, size=n_remove, replace=False)] = False
    existing = set(map(tuple, g.edges.tolist()))
    added = []
    if n_add:
        if free <= 4 * n_add or n <= 64:
            iu, iv = np.triu_indices(n, 1)
            cand = [(int(u), int(v)) for u, v in zip(iu, iv) if (u, v) not in existing]
            pick = rng.choice(len(cand), size=n_add, replace=False)
            added = [cand[i] for i in sorted(pick)]
        else:
            taken = set(existing)
            while len(added) < n_add:
                u, v = (int(x) for x in rng.integers(0, n, size=2))
                e = (min(u, v), max(u, v))
                if u == v or e in taken:
                    continue
                taken.add(e)
                added.append(e)
    edges = [tuple(e) for e in g.edges[keep].tolist()] + added
    return build_graph(n, edges)
