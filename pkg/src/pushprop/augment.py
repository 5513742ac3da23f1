"""DropNode mask sampling and random propagation over panel rows.

Training-time augmentation keeps each neighbor's contribution with
probability 1 - delta and applies no rescale; the matching 1 - delta
factor is applied once at inference by the exact power-iteration path.

Masks come from a counter-based generator keyed by (step, source,
augmentation index), so augmentation is reproducible and independent of
evaluation order or worker scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .errors import InputError
from .graph import CsrGraph, FeatureMatrix
from .push import PropagationWeights, SparseRowVector, SparsifiedPanel


@dataclass(frozen=True)
class DropMask:
    """Keep bits for the node ids covered by one augmentation draw."""

    nodes: np.ndarray  # int64, strictly increasing
    keep: np.ndarray   # bool, aligned with nodes

    @classmethod
    def from_bits(cls, nodes, keep) -> "DropMask":
        nodes = np.ascontiguousarray(nodes, dtype=np.int64)
        keep = np.ascontiguousarray(keep, dtype=bool)
        if nodes.shape != keep.shape:
            raise InputError("nodes and keep bits must align")
        if nodes.size and np.any(np.diff(nodes) <= 0):
            raise InputError("mask nodes must be strictly increasing")
        return cls(nodes=nodes, keep=keep)

    @classmethod
    def from_mapping(cls, bits: Mapping[int, int]) -> "DropMask":
        items = sorted(bits.items())
        nodes = np.fromiter((n for n, _ in items), dtype=np.int64, count=len(items))
        keep = np.fromiter((bool(b) for _, b in items), dtype=bool, count=len(items))
        return cls(nodes=nodes, keep=keep)

    def bits_for(self, indices: np.ndarray) -> np.ndarray:
        """Keep bits for the queried node ids; all must be covered."""
        pos = np.searchsorted(self.nodes, indices)
        ok = (pos < self.nodes.size) & (self.nodes[np.minimum(pos, self.nodes.size - 1)] == indices)
        if not ok.all():
            missing = np.asarray(indices)[~ok]
            raise InputError(f"mask does not cover nodes {missing.tolist()}")
        return self.keep[pos]

    def as_mapping(self) -> dict[int, int]:
        return {int(n): int(b) for n, b in zip(self.nodes, self.keep)}


class MaskSampler:
    """Deterministic DropNode mask source.

    Default granularity is one Bernoulli(1 - delta) draw per
    (source, augmentation, neighbor). ``shared_per_augmentation`` switches
    to one draw per (node, augmentation) shared by every row in the step,
    reproducing the whole-matrix masking convention.
    """

    def __init__(self, seed: int, delta: float, shared_per_augmentation: bool = False,
                 num_nodes: int | None = None):
        if not 0.0 <= delta < 1.0:
            raise InputError("delta must lie in [0, 1)")
        if shared_per_augmentation and num_nodes is None:
            raise InputError("shared masks need num_nodes")
        self.seed = int(seed)
        self.delta = float(delta)
        self.shared = bool(shared_per_augmentation)
        self.num_nodes = num_nodes
        self._shared_cache: dict[tuple[int, int], np.ndarray] = {}

    def _uniforms(self, counter, count) -> np.ndarray:
        bits = np.random.Generator(np.random.Philox(key=[self.seed, 0], counter=counter))
        return bits.random(count)

    def mask_for(self, step: int, source: int, m: int,
                 indices: np.ndarray) -> DropMask:
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        if self.shared:
            key = (step, m)
            full = self._shared_cache.get(key)
            if full is None:
                u = self._uniforms([step, 0, m, 1], self.num_nodes)
                full = u < (1.0 - self.delta)
                for stale in [k for k in self._shared_cache if k[0] != step]:
                    del self._shared_cache[stale]
                self._shared_cache[key] = full
            return DropMask.from_bits(indices, full[indices])
        u = self._uniforms([step, source, m, 0], indices.size)
        return DropMask.from_bits(indices, u < (1.0 - self.delta))


def _matrix_of(features) -> tuple[object, int]:
    """Accept a FeatureMatrix or a plain dense array; return (matrix, dim)."""
    if isinstance(features, FeatureMatrix):
        mat = features._sparse if features.is_sparse else features.dense()
        return mat, features.num_features
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError("feature array must be 2-d")
    return arr, arr.shape[1]


def _gather_rows(matrix, indices) -> np.ndarray:
    sub = matrix[indices]
    return sub.toarray() if sp.issparse(sub) else sub


def random_propagate_row(panel_row: SparseRowVector, features,
                         mask: DropMask) -> np.ndarray:
    """Augmented vector: sum of kept neighbors' features, panel-weighted."""
    matrix, dim = _matrix_of(features)
    bits = mask.bits_for(panel_row.indices)
    w = panel_row.values * bits
    if panel_row.nnz == 0:
        return np.zeros(dim, dtype=np.float64)
    return w @ _gather_rows(matrix, panel_row.indices)


@dataclass
class AugmentedBatch:
    """M augmented feature vectors per batch node, masks retained."""

    nodes: np.ndarray                  # (b,)
    features: np.ndarray               # (M, b, d)
    masks: list[list[DropMask]]        # [m][i] aligned with nodes
    mac_count: int                     # kept-entry multiply-accumulates x d


def propagate_with_masks(panel: SparsifiedPanel, features, batch,
                         masks: list[list[DropMask]]) -> AugmentedBatch:
    """Apply already-drawn masks to the panel rows of a batch.

    The masked rows are assembled into one sparse operator per
    augmentation so the whole batch is produced by a single
    sparse-times-feature product.
    """
    nodes = np.ascontiguousarray(batch, dtype=np.int64)
    rows = [panel.row(int(s)) for s in nodes]
    matrix, dim = _matrix_of(features)
    num_cols = matrix.shape[0]

    out = np.empty((len(masks), nodes.size, dim), dtype=np.float64)
    macs = 0
    for m, per_row in enumerate(masks):
        if len(per_row) != nodes.size:
            raise InputError("masks must align with the batch")
        if nodes.size == 0:
            continue
        kept = [r.values * mk.bits_for(r.indices) for r, mk in zip(rows, per_row)]
        data = np.concatenate(kept)
        cols = np.concatenate([r.indices for r in rows])
        indptr = np.zeros(nodes.size + 1, dtype=np.int64)
        np.cumsum([r.nnz for r in rows], out=indptr[1:])
        op = sp.csr_matrix((data, cols, indptr), shape=(nodes.size, num_cols))
        prod = op @ matrix
        out[m] = prod.toarray() if sp.issparse(prod) else prod
        macs += int(sum(np.count_nonzero(w) for w in kept)) * dim
    return AugmentedBatch(nodes=nodes, features=out, masks=masks, mac_count=macs)


def random_propagate_batch(panel: SparsifiedPanel, features, batch,
                           delta: float, m_aug: int, sampler: MaskSampler,
                           step: int = 0) -> AugmentedBatch:
    """Draw a fresh mask per (node, augmentation), then propagate."""
    if m_aug < 1:
        raise InputError("m_aug must be >= 1")
    if sampler.delta != delta:
        raise InputError("sampler delta disagrees with requested delta")
    nodes = np.ascontiguousarray(batch, dtype=np.int64)
    masks = [
        [sampler.mask_for(step, int(s), m, panel.row(int(s)).indices) for s in nodes]
        for m in range(m_aug)
    ]
    return propagate_with_masks(panel, features, nodes, masks)


def backprop_propagate(panel_row: SparseRowVector, mask: DropMask,
                       grad_out: np.ndarray) -> dict[int, np.ndarray]:
    """Gradient of the propagated vector wrt each kept neighbor's input."""
    bits = mask.bits_for(panel_row.indices)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return {
        int(v): float(w) * grad_out
        for v, w, b in zip(panel_row.indices, panel_row.values, bits)
        if b
    }


def scatter_batch_gradient(panel: SparsifiedPanel, aug: AugmentedBatch,
                           grad_features: np.ndarray, num_nodes: int) -> np.ndarray:
    """Accumulate d(loss)/d(input rows) over every (node, augmentation).

    Returns a dense (num_nodes, d) array; rows never touched stay zero.
    Equals summing backprop_propagate over the batch.
    """
    grad = np.zeros((num_nodes, grad_features.shape[-1]), dtype=np.float64)
    for m, per_row in enumerate(aug.masks):
        for i, s in enumerate(aug.nodes):
            row = panel.row(int(s))
            w = row.values * per_row[i].keep
            grad[row.indices] += np.outer(w, grad_features[m, i])
    return grad


def deterministic_propagate(graph: CsrGraph, features, weights: PropagationWeights,
                            scale: float = 1.0) -> np.ndarray:
    """Exact propagation sum(w_n P^n) (scale * X) by power iteration."""
    matrix, _ = _matrix_of(features)
    dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
    if dense.shape[0] != graph.num_nodes:
        raise InputError("feature rows disagree with graph nodes")
    transition = graph.transition()
    term = dense * scale
    acc = weights.weights[0] * term
    for n in range(1, weights.order + 1):
        term = transition @ term
        acc += weights.weights[n] * term
    return acc
