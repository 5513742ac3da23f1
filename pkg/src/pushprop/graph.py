"""Graph and dataset representation.

The graph is stored in compressed sparse row form over the self-loop
augmented adjacency: every node's neighbor list contains the node itself
exactly once, and ``degrees[v]`` counts neighbors including that loop.
All arrays are frozen after construction so instances can be shared
across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InputError, ParseError

SPARSE_DENSITY_CUTOFF = 0.25


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CsrGraph:
    """Symmetric self-loop-augmented adjacency in CSR form."""

    num_nodes: int
    row_offsets: np.ndarray  # int64, length num_nodes + 1
    col_indices: np.ndarray  # int64, neighbors incl. the self loop
    degrees: np.ndarray      # int64, degrees[v] = deg(v) + 1

    def neighbors(self, v: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[v]:self.row_offsets[v + 1]]

    @property
    def num_edges(self) -> int:
        """Undirected edge count excluding self loops."""
        return (len(self.col_indices) - self.num_nodes) // 2

    @property
    def degree_sum(self) -> int:
        """Sum of self-loop-augmented degrees, equals 2|E| + |V|."""
        return int(self.degrees.sum())

    def to_edge_list(self) -> list[tuple[int, int]]:
        """Undirected edges (u < v), self loops excluded."""
        out = []
        for u in range(self.num_nodes):
            for v in self.neighbors(u):
                if u < v:
                    out.append((u, int(v)))
        return out

    def adjacency(self) -> sp.csr_matrix:
        """Self-loop-augmented adjacency as a scipy CSR of unit weights."""
        data = np.ones(len(self.col_indices), dtype=np.float64)
        return sp.csr_matrix(
            (data, self.col_indices, self.row_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def transition(self) -> sp.csr_matrix:
        """Row-normalized adjacency (the one-step transition matrix)."""
        inv_deg = 1.0 / self.degrees.astype(np.float64)
        return sp.diags(inv_deg) @ self.adjacency()

    def validate(self) -> None:
        n = self.num_nodes
        if self.row_offsets.shape != (n + 1,):
            raise InputError("row_offsets length mismatch")
        if self.row_offsets[0] != 0 or self.row_offsets[-1] != len(self.col_indices):
            raise InputError("row_offsets bounds mismatch")
        if np.any(np.diff(self.row_offsets) < 1):
            raise InputError("every node needs at least its self loop")
        if np.any(np.diff(self.row_offsets) != self.degrees):
            raise InputError("degrees disagree with row extents")
        for v in range(n):
            nbrs = self.neighbors(v)
            if np.any(np.diff(nbrs) <= 0):
                raise InputError(f"neighbor list of {v} not strictly sorted")
            if np.count_nonzero(nbrs == v) != 1:
                raise InputError(f"node {v} must appear exactly once in its own list")


def build_csr(edges: Iterable[tuple[int, int]], num_nodes: int) -> CsrGraph:
    """Build a symmetric CSR graph with one self loop per node.

    Duplicate edges, orientation flips and input self loops are
    deduplicated. Node ids must lie in [0, num_nodes).
    """
    if num_nodes < 0:
        raise InputError("num_nodes must be non-negative")
    pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    if pairs.size:
        if pairs.min() < 0 or pairs.max() >= num_nodes:
            bad = pairs[(pairs < 0).any(axis=1) | (pairs >= num_nodes).any(axis=1)][0]
            raise InputError(
                f"edge ({bad[0]}, {bad[1]}) out of range for {num_nodes} nodes"
            )
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        keep = lo != hi  # self loops re-added uniformly below
        codes = np.unique(lo[keep] * np.int64(num_nodes) + hi[keep])
        lo, hi = codes // num_nodes, codes % num_nodes
    else:
        lo = hi = np.empty(0, dtype=np.int64)

    # both directions plus the self loop for every node
    src = np.concatenate([lo, hi, np.arange(num_nodes, dtype=np.int64)])
    dst = np.concatenate([hi, lo, np.arange(num_nodes, dtype=np.int64)])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    degrees = np.bincount(src, minlength=num_nodes).astype(np.int64)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(degrees, out=offsets[1:])
    return CsrGraph(
        num_nodes=num_nodes,
        row_offsets=_frozen(offsets),
        col_indices=_frozen(dst),
        degrees=_frozen(degrees),
    )


def load_edge_list(path) -> tuple[list[tuple[int, int]], int]:
    """Parse a "u<TAB>v" edge file, optional first line "#nodes N".

    Without the header, num_nodes is 1 + the largest id seen (0 for an
    empty file).
    """
    edges = []
    num_nodes = None
    max_id = -1
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if line_no == 1 and text.startswith("#nodes"):
                parts = text.split()
                if len(parts) != 2 or not parts[1].isdigit():
                    raise ParseError(path, line_no, "bad #nodes header")
                num_nodes = int(parts[1])
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected two fields, got {len(parts)}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, line_no, f"non-integer node id in {parts!r}") from None
            if u < 0 or v < 0:
                raise ParseError(path, line_no, "negative node id")
            edges.append((u, v))
            max_id = max(max_id, u, v)
    if num_nodes is None:
        num_nodes = max_id + 1
    elif max_id >= num_nodes:
        raise ParseError(path, 0, f"node id {max_id} exceeds declared #nodes {num_nodes}")
    return edges, num_nodes


def save_edge_list(path, graph: CsrGraph) -> None:
    """Write the graph back out (self loops excluded), with a #nodes header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#nodes {graph.num_nodes}\n")
        for u, v in graph.to_edge_list():
            fh.write(f"{u}\t{v}\n")


class FeatureMatrix:
    """Per-node feature vectors, stored sparse or dense by density.

    Rows are exposed dense through :meth:`row`; :meth:`dense` returns the
    full array (materialized lazily once for sparse storage).
    """

    def __init__(self, data):
        if sp.issparse(data):
            self._sparse = data.tocsr().astype(np.float64)
            self._dense = None
        else:
            self._sparse = None
            self._dense = np.asarray(data, dtype=np.float64)
        if not np.isfinite(self._values()).all():
            raise InputError("features must be finite")

    def _values(self) -> np.ndarray:
        return self._sparse.data if self._sparse is not None else self._dense

    @classmethod
    def from_coo(cls, num_nodes, num_features, rows, cols, vals) -> "FeatureMatrix":
        mat = sp.csr_matrix(
            (np.asarray(vals, dtype=np.float64), (rows, cols)),
            shape=(num_nodes, num_features),
        )
        density = mat.nnz / max(1, num_nodes * num_features)
        if density >= SPARSE_DENSITY_CUTOFF:
            return cls(mat.toarray())
        return cls(mat)

    @property
    def num_nodes(self) -> int:
        return self.shape[0]

    @property
    def num_features(self) -> int:
        return self.shape[1]

    @property
    def shape(self):
        return self._sparse.shape if self._sparse is not None else self._dense.shape

    @property
    def is_sparse(self) -> bool:
        return self._sparse is not None

    def row(self, i: int) -> np.ndarray:
        if self._sparse is not None:
            return self._sparse.getrow(i).toarray().ravel()
        return self._dense[i]

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self._sparse.toarray()
        return self._dense

    def row_normalize(self) -> "FeatureMatrix":
        """Scale each nonzero row to unit L1 norm; zero rows stay zero."""
        if self._sparse is not None:
            norms = np.abs(self._sparse).sum(axis=1).A.ravel()
            scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
            return FeatureMatrix(sp.diags(scale) @ self._sparse)
        norms = np.abs(self._dense).sum(axis=1, keepdims=True)
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        return FeatureMatrix(self._dense * scale)


def row_normalize_features(features: FeatureMatrix) -> FeatureMatrix:
    return features.row_normalize()


def load_sparse_features(path) -> FeatureMatrix:
    """Parse a COO feature file: header "N d", then "i j v" triples."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError(path, 1, "expected header 'N d'")
        try:
            n, d = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError(path, 1, "non-integer header fields") from None
        rows, cols, vals = [], [], []
        seen = set()
        for line_no, line in enumerate(fh, start=2):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 'i j v', got {text!r}")
            try:
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(path, line_no, f"bad triple {text!r}") from None
            if not (0 <= i < n and 0 <= j < d):
                raise ParseError(path, line_no, f"index ({i}, {j}) out of bounds {n}x{d}")
            if not np.isfinite(v):
                raise ParseError(path, line_no, "non-finite value")
            if (i, j) in seen:
                raise ParseError(path, line_no, f"duplicate entry ({i}, {j})")
            seen.add((i, j))
            rows.append(i)
            cols.append(j)
            vals.append(v)
    return FeatureMatrix.from_coo(n, d, rows, cols, vals)


def save_sparse_features(path, features: FeatureMatrix) -> None:
    n, d = features.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{n} {d}\n")
        if features.is_sparse:
            coo = features._sparse.tocoo()
            order = np.lexsort((coo.col, coo.row))
            triples = zip(coo.row[order], coo.col[order], coo.data[order])
        else:
            r, c = np.nonzero(features._dense)
            triples = zip(r, c, features._dense[r, c])
        for i, j, v in triples:
            fh.write(f"{i} {j} {v:.17g}\n")


@dataclass(frozen=True)
class LabelTable:
    """Partial node labels plus the train/valid/test split."""

    labels: Mapping[int, int]
    num_classes: int
    train: tuple[int, ...] = field(default_factory=tuple)
    valid: tuple[int, ...] = field(default_factory=tuple)
    test: tuple[int, ...] = field(default_factory=tuple)

    def validate(self, num_nodes: int) -> None:
        for node, cls in self.labels.items():
            if not 0 <= node < num_nodes:
                raise InputError(f"labeled node {node} out of range")
            if not 0 <= cls < self.num_classes:
                raise InputError(f"class {cls} out of range for C={self.num_classes}")
        splits = [set(self.train), set(self.valid), set(self.test)]
        names = ["train", "valid", "test"]
        for ids, name in zip(splits, names):
            if ids and (min(ids) < 0 or max(ids) >= num_nodes):
                raise InputError(f"{name} split contains out-of-range node ids")
        for a in range(3):
            for b in range(a + 1, 3):
                if splits[a] & splits[b]:
                    raise InputError(f"splits {names[a]} and {names[b]} overlap")


def load_labels(path, num_classes: int) -> dict[int, int]:
    """Parse "i c" label lines into a node -> class map."""
    labels: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(path, line_no, f"expected 'i c', got {text!r}")
            try:
                node, cls = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, line_no, f"bad label line {text!r}") from None
            if cls < 0 or cls >= num_classes:
                raise ParseError(path, line_no, f"class {cls} >= num_classes {num_classes}")
            if node in labels:
                raise ParseError(path, line_no, f"duplicate label for node {node}")
            labels[node] = cls
    return labels


def load_split(path) -> tuple[int, ...]:
    """Parse one node id per line; duplicates are rejected."""
    ids: list[int] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                node = int(text)
            except ValueError:
                raise ParseError(path, line_no, f"bad node id {text!r}") from None
            if node in seen:
                raise ParseError(path, line_no, f"duplicate node {node} in split")
            seen.add(node)
            ids.append(node)
    return tuple(ids)


def load_dataset(graph_path, features_path, labels_path, num_classes,
                 train_path=None, valid_path=None, test_path=None,
                 normalize_features=True):
    """Load every dataset piece and cross-validate them against each other."""
    edges, num_nodes = load_edge_list(graph_path)
    graph = build_csr(edges, num_nodes)
    features = load_sparse_features(features_path)
    if features.num_nodes != num_nodes:
        raise InputError(
            f"feature rows ({features.num_nodes}) disagree with graph nodes ({num_nodes})"
        )
    if normalize_features:
        features = features.row_normalize()
    labels = load_labels(labels_path, num_classes)
    table = LabelTable(
        labels=labels,
        num_classes=num_classes,
        train=load_split(train_path) if train_path else (),
        valid=load_split(valid_path) if valid_path else (),
        test=load_split(test_path) if test_path else (),
    )
    table.validate(num_nodes)
    return graph, features, table
