"""Forest of two-point bisector trees for approximate cosine search.

Each internal node splits by the perpendicular bisector of two sampled
points; leaves hold at most ``leaf_cap`` rows. Queries walk all trees
best-first from one shared heap keyed by the smallest margin seen on the
path, then score every collected row exactly.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, IntegrityError, ParameterError, StateError

UNIT_TOL = 1e-6


def exact_scores(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise inner products. Each row is reduced independently, so a row's
    score does not depend on which other rows are in the matrix."""
    return np.multiply(vectors, q).sum(axis=1)


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list:
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def _as_id_matrix(embeddings):
    if isinstance(embeddings, dict):
        ids = np.fromiter(embeddings.keys(), dtype=np.uint64, count=len(embeddings))
        mat = np.array([np.asarray(v, dtype=np.float64) for v in embeddings.values()])
    else:
        ids, mat = embeddings
        ids = np.asarray(ids, dtype=np.uint64)
        mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or len(ids) != len(mat):
        raise ParameterError("embeddings must pair n ids with an (n, dim) matrix")
    return ids, mat


def brute_force_knn(embeddings, q, k: int) -> list:
    """Exact top-k by cosine (inner product of unit vectors); ties by id."""
    ids, mat = _as_id_matrix(embeddings)
    if k < 1:
        raise ParameterError("k must be >= 1")
    return _top_k(ids, exact_scores(mat, np.asarray(q, dtype=np.float64)), k)


@dataclass(frozen=True)
class AnnQueryBudget:
    k: int = 10
    search_nodes: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.search_nodes < 1:
            raise ParameterError("search_nodes must be >= 1")


@dataclass
class Tree:
    """Flat node arrays. A child reference ``c >= 0`` is an internal node,
    ``c < 0`` is leaf ``-c - 1``."""

    normals: np.ndarray
    offsets: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_end: np.ndarray
    leaf_rows: np.ndarray
    root: int

    def leaf_depths(self) -> list:
        depths = []
        stack = [(self.root, 0)]
        while stack:
            ref, depth = stack.pop()
            if ref < 0:
                depths.append(depth)
            else:
                stack.append((int(self.left[ref]), depth + 1))
                stack.append((int(self.right[ref]), depth + 1))
        return depths


def _build_tree(vectors: np.ndarray, leaf_cap: int, rng: np.random.Generator) -> Tree:
    dim = vectors.shape[1]
    normals, offsets, lefts, rights = [], [], [], []
    leaves = []

    def split(rows):
        # two distinct sampled points; fall back to an even split when every
        # sampled pair coincides or the bisector leaves one side empty
        for _ in range(8):
            i, j = rng.choice(len(rows), size=2, replace=False)
            diff = vectors[rows[i]] - vectors[rows[j]]
            norm = float(np.linalg.norm(diff))
            if norm == 0.0:
                continue
            normal = diff / norm
            offset = -float(normal @ (vectors[rows[i]] + vectors[rows[j]])) / 2.0
            side = vectors[rows] @ normal + offset > 0.0
            if side.any() and not side.all():
                return normal, offset, rows[side], rows[~side]
        half = len(rows) // 2
        return np.zeros(dim), 0.0, rows[:half], rows[half:]

    def build(rows) -> int:
        if len(rows) <= leaf_cap:
            leaves.append(rows)
            return -len(leaves)
        normal, offset, lrows, rrows = split(rows)
        node = len(normals)
        normals.append(normal)
        offsets.append(offset)
        lefts.append(0)
        rights.append(0)
        lefts[node] = build(lrows)
        rights[node] = build(rrows)
        return node

    root = build(np.arange(len(vectors), dtype=np.int64))
    sizes = np.array([len(r) for r in leaves], dtype=np.int64)
    ends = np.cumsum(sizes)
    return Tree(
        normals=np.array(normals, dtype=np.float64).reshape(-1, dim),
        offsets=np.array(offsets, dtype=np.float64),
        left=np.array(lefts, dtype=np.int64),
        right=np.array(rights, dtype=np.int64),
        leaf_start=ends - sizes,
        leaf_end=ends,
        leaf_rows=np.concatenate(leaves) if leaves else np.zeros(0, dtype=np.int64),
        root=root,
    )


class AnnForest:
    def __init__(self, ids, vectors, trees, leaf_cap: int, seed: int):
        self.ids = ids
        self.vectors = vectors
        self.trees = trees
        self.leaf_cap = leaf_cap
        self.seed = seed
        self._id_sorted = np.argsort(ids, kind="stable")
        # list views of the node arrays; the traversal loop indexes them per node
        self._nodes = [(list(t.normals), t.offsets.tolist(), t.left.tolist(), t.right.tolist(),
                        t.leaf_start.tolist(), t.leaf_end.tolist()) for t in trees]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def __len__(self):
        return len(self.ids)

    def vector(self, poi_id: int) -> np.ndarray:
        pos = np.searchsorted(self.ids[self._id_sorted], np.uint64(poi_id))
        return self.vectors[self._id_sorted[pos]]

    def build_stats(self) -> dict:
        depths = [d for t in self.trees for d in t.leaf_depths()]
        return {
            "n_vectors": len(self),
            "n_trees": self.n_trees,
            "leaf_cap": self.leaf_cap,
            "mean_leaf_depth": float(np.mean(depths)),
            "max_leaf_depth": int(max(depths)),
            "n_leaves": len(depths),
        }

    def query(self, q, budget: AnnQueryBudget) -> list:
        """Top-k (id, exact cosine) after visiting at most ``search_nodes`` nodes."""
        if len(self.ids) == 0 or not self.trees:
            raise StateError("forest is empty")
        if budget.search_nodes < self.n_trees:
            raise ParameterError("search_nodes must be at least the number of trees")
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise IntegrityError(f"query has dim {q.shape}, forest has dim {self.dim}")
        if abs(float(np.linalg.norm(q)) - 1.0) > UNIT_TOL:
            raise ParameterError("query vector must be unit-norm")
        # heap keys are negated priorities kept as Python floats; a child's
        # priority is min(parent priority, signed margin toward that child)
        heap = [(-math.inf, t, tree.root) for t, tree in enumerate(self.trees)]
        heapq.heapify(heap)
        found = []
        pop, push = heapq.heappop, heapq.heappush
        nodes = self._nodes
        for _ in range(budget.search_nodes):
            if not heap:
                break
            neg_pri, t, ref = pop(heap)
            normals, offsets, left, right, starts, ends = nodes[t]
            if ref < 0:
                leaf = -ref - 1
                found.append(self.trees[t].leaf_rows[starts[leaf]:ends[leaf]])
                continue
            margin = float(normals[ref].dot(q)) + offsets[ref]
            # -min(pri, margin) == max(neg_pri, -margin), and likewise for -margin
            push(heap, (neg_pri if neg_pri > -margin else -margin, t, left[ref]))
            push(heap, (neg_pri if neg_pri > margin else margin, t, right[ref]))
        if not found:
            return []
        rows = np.unique(np.concatenate(found))
        return _top_k(self.ids[rows], exact_scores(self.vectors[rows], q), budget.k)


def build_forest(embeddings, n_trees: int = 16, leaf_cap: int = 32, seed: int = 0) -> AnnForest:
    """Build ``n_trees`` trees; tree ``t`` draws its splits from ``seed + t``."""
    ids, mat = _as_id_matrix(embeddings)
    if len(ids) == 0:
        raise ParameterError("need at least one vector")
    if n_trees < 1 or leaf_cap < 1:
        raise ParameterError("n_trees and leaf_cap must be >= 1")
    if len(np.unique(ids)) != len(ids):
        raise IntegrityError("duplicate id")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise IntegrityError("all indexed vectors must be unit-norm")
    mat = np.ascontiguousarray(mat)
    trees = [_build_tree(mat, leaf_cap, np.random.default_rng(seed + t)) for t in range(n_trees)]
    return AnnForest(ids, mat, trees, leaf_cap, seed)


def ann_query(f: AnnForest, q, budget: AnnQueryBudget) -> list:
    return f.query(q, budget)


FOREST_MAGIC = b"PVANNF\0\0"
FOREST_VERSION = 1
_FOREST_HEADER = struct.Struct("<8sIIIIQq")
_TREE_HEADER = struct.Struct("<QQq")


def save_forest(f: AnnForest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_FOREST_HEADER.pack(FOREST_MAGIC, FOREST_VERSION, f.dim, f.n_trees, f.leaf_cap, len(f), f.seed))
        for t in f.trees:
            fh.write(_TREE_HEADER.pack(len(t.offsets), len(t.leaf_start), t.root))
            fh.write(t.normals.astype("<f8").tobytes())
            fh.write(t.offsets.astype("<f8").tobytes())
            fh.write(t.left.astype("<i8").tobytes())
            fh.write(t.right.astype("<i8").tobytes())
        for t in f.trees:
            fh.write(t.leaf_start.astype("<i8").tobytes())
            fh.write(t.leaf_end.astype("<i8").tobytes())
            fh.write(t.leaf_rows.astype("<i8").tobytes())
        fh.write(f.ids.astype("<u8").tobytes())
        fh.write(f.vectors.astype("<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, dtype, count):
        size = np.dtype(dtype).itemsize * count
        if self.off + size > len(self.raw):
            raise FormatError("forest file is truncated")
        arr = np.frombuffer(self.raw, dtype=dtype, count=count, offset=self.off)
        self.off += size
        return arr

    def unpack(self, st: struct.Struct):
        if self.off + st.size > len(self.raw):
            raise FormatError("forest file is truncated")
        vals = st.unpack_from(self.raw, self.off)
        self.off += st.size
        return vals


def load_forest(path) -> AnnForest:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic, version, dim, n_trees, leaf_cap, n, seed = r.unpack(_FOREST_HEADER)
    if magic != FOREST_MAGIC:
        raise FormatError("not a forest file")
    if version != FOREST_VERSION:
        raise FormatError(f"unsupported forest version {version}")
    nodes = []
    for _ in range(n_trees):
        n_int, n_leaf, root = r.unpack(_TREE_HEADER)
        normals = r.take("<f8", n_int * dim).reshape(n_int, dim).astype(np.float64)
        offsets = r.take("<f8", n_int).astype(np.float64)
        left = r.take("<i8", n_int).astype(np.int64)
        right = r.take("<i8", n_int).astype(np.int64)
        nodes.append((normals, offsets, left, right, n_leaf, root))
    trees = []
    for normals, offsets, left, right, n_leaf, root in nodes:
        starts = r.take("<i8", n_leaf).astype(np.int64)
        ends = r.take("<i8", n_leaf).astype(np.int64)
        rows = r.take("<i8", n).astype(np.int64)
        trees.append(Tree(normals, offsets, left, right, starts, ends, rows, root))
    ids = r.take("<u8", n).astype(np.uint64)
    vectors = r.take("<f8", n * dim).reshape(n, dim).astype(np.float64)
    if r.off != len(r.raw):
        raise FormatError("trailing bytes in forest file")
    return AnnForest(ids, vectors, trees, leaf_cap, seed)
