"""Approximation of rows of the mixed-order propagation matrix.

The propagation matrix is sum(w_n * P^n) for the row-normalized
self-loop-augmented adjacency P. A single row is approximated by
simulating the N-step probability diffusion from the source node and
pushing a node's residue to its neighbors only while the residue
exceeds degree * r_max; what remains unpushed is the truncation error,
bounded in L1 by N * (2|E| + |V|) * r_max.

The hot loop runs under numba over the raw CSR arrays. Dense scratch
buffers plus explicit frontier lists stand in for per-step sparse maps;
only touched entries are ever written or cleared, so per-row work stays
proportional to the push work, not to |V|.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InputError, OracleCapError
from .graph import CsrGraph

SCHEMES = ("ppr", "avg", "single")
_SCHEME_TAG = {"ppr": 0, "avg": 1, "single": 2}
_TAG_SCHEME = {v: k for k, v in _SCHEME_TAG.items()}

PANEL_MAGIC = b"GPNL"
PANEL_VERSION = 1


@dataclass(frozen=True)
class PropagationWeights:
    """Step weights w_0..w_N for one of the three mixing schemes."""

    scheme: str
    order: int
    alpha: float | None
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def weights_for(scheme: str, order: int, alpha: float | None = None,
                renormalize: bool = False) -> PropagationWeights:
    """ppr: w_n = alpha(1-alpha)^n; avg: 1/(N+1); single: w_N = 1.

    Truncated ppr weights sum to 1 - (1-alpha)^(N+1); pass
    ``renormalize=True`` to rescale them to unit total.
    """
    if order < 0:
        raise InputError("order must be >= 0")
    if scheme == "ppr":
        if alpha is None or not 0.0 < alpha <= 1.0:
            raise InputError("ppr requires alpha in (0, 1]")
        w = alpha * (1.0 - alpha) ** np.arange(order + 1, dtype=np.float64)
        if renormalize:
            w = w / w.sum()
    elif scheme == "avg":
        if alpha is not None:
            raise InputError("alpha is only meaningful for the ppr scheme")
        w = np.full(order + 1, 1.0 / (order + 1), dtype=np.float64)
    elif scheme == "single":
        if alpha is not None:
            raise InputError("alpha is only meaningful for the ppr scheme")
        w = np.zeros(order + 1, dtype=np.float64)
        w[order] = 1.0
    else:
        raise InputError(f"unknown scheme {scheme!r}, expected one of {SCHEMES}")
    w.flags.writeable = False
    return PropagationWeights(scheme=scheme, order=order, alpha=alpha, weights=w)


class SparseRowVector:
    """Sparse nonnegative row: sorted node ids with their masses."""

    __slots__ = ("indices", "values")

    def __init__(self, indices, values):
        indices = np.ascontiguousarray(indices, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise InputError("indices and values must be 1-d and aligned")
        if indices.size and np.any(np.diff(indices) <= 0):
            raise InputError("indices must be strictly increasing")
        if not np.isfinite(values).all() or np.any(values < 0):
            raise InputError("masses must be finite and non-negative")
        self.indices = indices
        self.values = values

    @classmethod
    def from_dict(cls, entries) -> "SparseRowVector":
        items = sorted(entries.items())
        idx = np.fromiter((i for i, _ in items), dtype=np.int64, count=len(items))
        val = np.fromiter((v for _, v in items), dtype=np.float64, count=len(items))
        return cls(idx, val)

    @classmethod
    def from_dense(cls, row) -> "SparseRowVector":
        idx = np.nonzero(row)[0].astype(np.int64)
        return cls(idx, np.asarray(row, dtype=np.float64)[idx])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def get(self, node: int) -> float:
        pos = np.searchsorted(self.indices, node)
        if pos < self.indices.size and self.indices[pos] == node:
            return float(self.values[pos])
        return 0.0

    def l1(self) -> float:
        return float(self.values.sum())

    def to_dense(self, num_nodes: int) -> np.ndarray:
        out = np.zeros(num_nodes, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseRowVector)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"SparseRowVector({self.entries!r})"


@dataclass(frozen=True)
class GfpushResult:
    pi: SparseRowVector
    reserves: list[SparseRowVector] | None   # q(0)..q(N), record mode only
    residues: list[SparseRowVector] | None   # r(0)..r(N), record mode only
    step_updates: np.ndarray                 # neighbor updates per step 1..N


@njit(cache=True, nogil=True)
def _push_core(indptr, indices, degrees, weights, r_max, source,
               r_prev, r_cur, fr_prev, fr_cur, pi, seen, pi_touch, counts,
               record, q_out, r_out):
    # r_prev/r_cur must arrive zeroed; they leave zeroed. pi/seen accumulate
    # the touched entries listed in pi_touch[:return value]; caller cleans.
    order = weights.shape[0] - 1
    npi = 0
    r_prev[source] = 1.0
    fr_prev[0] = source
    n_prev = 1
    seen[source] = 1
    pi_touch[npi] = source
    npi += 1
    pi[source] += weights[0]
    if record:
        q_out[0, source] = 1.0
    for step in range(1, order + 1):
        w = weights[step]
        n_cur = 0
        upd = 0
        for ii in range(n_prev):
            v = fr_prev[ii]
            rv = r_prev[v]
            if rv > degrees[v] * r_max:
                mass = rv / degrees[v]
                r_prev[v] = 0.0
                for jj in range(indptr[v], indptr[v + 1]):
                    u = indices[jj]
                    if r_cur[u] == 0.0:
                        fr_cur[n_cur] = u
                        n_cur += 1
                    r_cur[u] += mass
                upd += degrees[v]
        counts[step - 1] = upd
        if record:  # r_prev now holds the final residue vector of step-1
            for ii in range(n_prev):
                v = fr_prev[ii]
                if r_prev[v] != 0.0:
                    r_out[step - 1, v] = r_prev[v]
        for ii in range(n_cur):  # reserves of this step feed the output row
            u = fr_cur[ii]
            if record:
                q_out[step, u] = r_cur[u]
            if seen[u] == 0:
                seen[u] = 1
                pi_touch[npi] = u
                npi += 1
            if w != 0.0:
                pi[u] += w * r_cur[u]
        for ii in range(n_prev):  # retire leftover residues, then swap buffers
            r_prev[fr_prev[ii]] = 0.0
        tmp = r_prev
        r_prev = r_cur
        r_cur = tmp
        tmpf = fr_prev
        fr_prev = fr_cur
        fr_cur = tmpf
        n_prev = n_cur
    if record:
        for ii in range(n_prev):
            v = fr_prev[ii]
            if r_prev[v] != 0.0:
                r_out[order, v] = r_prev[v]
    for ii in range(n_prev):
        r_prev[fr_prev[ii]] = 0.0
    return npi


@njit(cache=True, nogil=True)
def _gfpush_single(indptr, indices, degrees, weights, r_max, source,
                   record, q_out, r_out):
    n = degrees.shape[0]
    order = weights.shape[0] - 1
    r_prev = np.zeros(n, dtype=np.float64)
    r_cur = np.zeros(n, dtype=np.float64)
    fr_prev = np.empty(n, dtype=np.int64)
    fr_cur = np.empty(n, dtype=np.int64)
    pi = np.zeros(n, dtype=np.float64)
    seen = np.zeros(n, dtype=np.uint8)
    pi_touch = np.empty(n, dtype=np.int64)
    counts = np.zeros(max(order, 1), dtype=np.int64)
    npi = _push_core(indptr, indices, degrees, weights, r_max, source,
                     r_prev, r_cur, fr_prev, fr_cur, pi, seen, pi_touch,
                     counts, record, q_out, r_out)
    idx = np.sort(pi_touch[:npi])
    out_idx = np.empty(npi, dtype=np.int64)
    out_val = np.empty(npi, dtype=np.float64)
    nnz = 0
    for ii in range(npi):
        v = pi[idx[ii]]
        if v != 0.0:
            out_idx[nnz] = idx[ii]
            out_val[nnz] = v
            nnz += 1
    return out_idx[:nnz], out_val[:nnz], counts


@njit(cache=True, nogil=True)
def _panel_batch(indptr, indices, degrees, weights, r_max, sources, k):
    n = degrees.shape[0]
    order = weights.shape[0] - 1
    ns = sources.shape[0]
    cap = min(k, n)
    r_prev = np.zeros(n, dtype=np.float64)
    r_cur = np.zeros(n, dtype=np.float64)
    fr_prev = np.empty(n, dtype=np.int64)
    fr_cur = np.empty(n, dtype=np.int64)
    pi = np.zeros(n, dtype=np.float64)
    seen = np.zeros(n, dtype=np.uint8)
    pi_touch = np.empty(n, dtype=np.int64)
    dummy = np.zeros((1, 1), dtype=np.float64)
    out_idx = np.empty(ns * cap, dtype=np.int64)
    out_val = np.empty(ns * cap, dtype=np.float64)
    out_nnz = np.empty(ns, dtype=np.int64)
    counts_out = np.zeros((ns, max(order, 1)), dtype=np.int64)
    for si in range(ns):
        npi = _push_core(indptr, indices, degrees, weights, r_max, sources[si],
                         r_prev, r_cur, fr_prev, fr_cur, pi, seen, pi_touch,
                         counts_out[si], False, dummy, dummy)
        idx = np.sort(pi_touch[:npi])
        vals = np.empty(npi, dtype=np.float64)
        m = 0
        for ii in range(npi):
            v = pi[idx[ii]]
            if v != 0.0:
                idx[m] = idx[ii]
                vals[m] = v
                m += 1
        keep = min(cap, m)
        # stable sort on descending mass keeps ascending-id order among ties
        top = np.argsort(-vals[:m], kind="mergesort")[:keep]
        chosen = np.sort(idx[top])
        base = si * cap
        for ii in range(keep):
            out_idx[base + ii] = chosen[ii]
        for ii in range(keep):
            pos = np.searchsorted(idx[:m], chosen[ii])
            out_val[base + ii] = vals[pos]
        out_nnz[si] = keep
        for ii in range(npi):
            pi[pi_touch[ii]] = 0.0
            seen[pi_touch[ii]] = 0
    return out_idx, out_val, out_nnz, counts_out


def gfpush(graph: CsrGraph, source: int, weights: PropagationWeights,
           r_max: float, record: bool = False) -> GfpushResult:
    """Approximate one row of the mixed-order matrix.

    With ``record=True`` the per-step reserve and residue vectors are
    returned as well (test inspection); production callers leave it off.
    """
    if not 0 <= source < graph.num_nodes:
        raise InputError(f"source {source} out of range")
    if r_max <= 0:
        raise InputError("r_max must be positive")
    order = weights.order
    if record:
        q_out = np.zeros((order + 1, graph.num_nodes), dtype=np.float64)
        r_out = np.zeros((order + 1, graph.num_nodes), dtype=np.float64)
    else:
        q_out = r_out = np.zeros((1, 1), dtype=np.float64)
    idx, val, counts = _gfpush_single(
        graph.row_offsets, graph.col_indices, graph.degrees,
        weights.weights, r_max, source, record, q_out, r_out,
    )
    reserves = residues = None
    if record:
        reserves = [SparseRowVector.from_dense(q_out[i]) for i in range(order + 1)]
        residues = [SparseRowVector.from_dense(r_out[i]) for i in range(order + 1)]
    return GfpushResult(
        pi=SparseRowVector(idx, val),
        reserves=reserves,
        residues=residues,
        step_updates=counts[:order],
    )


def top_k_sparsify(vec: SparseRowVector, k: int) -> SparseRowVector:
    """Keep the k largest masses; ties broken toward smaller node ids."""
    if k < 1:
        raise InputError("k must be >= 1")
    if vec.nnz <= k:
        return vec
    order = np.lexsort((vec.indices, -vec.values))[:k]
    keep = np.sort(vec.indices[order])
    pos = np.searchsorted(vec.indices, keep)
    return SparseRowVector(keep, vec.values[pos])


@dataclass(frozen=True)
class PanelParams:
    scheme: str
    alpha: float | None
    order: int
    r_max: float
    k: int

    def weights(self) -> PropagationWeights:
        return weights_for(self.scheme, self.order, self.alpha)


class SparsifiedPanel:
    """Top-k-sparsified row approximations for a set of source nodes."""

    def __init__(self, params: PanelParams, rows: dict[int, SparseRowVector]):
        self.params = params
        self.rows = rows

    def __contains__(self, node) -> bool:
        return node in self.rows

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, node: int) -> SparseRowVector:
        try:
            return self.rows[node]
        except KeyError:
            raise InputError(f"node {node} not present in panel") from None

    def mean_nnz(self) -> float:
        if not self.rows:
            return 0.0
        return sum(r.nnz for r in self.rows.values()) / len(self.rows)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparsifiedPanel)
            and self.params == other.params
            and self.rows.keys() == other.rows.keys()
            and all(self.rows[s] == other.rows[s] for s in self.rows)
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(PANEL_MAGIC)
            fh.write(struct.pack("<I", PANEL_VERSION))
            alpha = 0.0 if self.params.alpha is None else self.params.alpha
            fh.write(struct.pack(
                "<BdIdI", _SCHEME_TAG[self.params.scheme], alpha,
                self.params.order, self.params.r_max, self.params.k,
            ))
            fh.write(struct.pack("<Q", len(self.rows)))
            pair = np.dtype([("i", "<u8"), ("v", "<f8")])
            for source in sorted(self.rows):
                row = self.rows[source]
                fh.write(struct.pack("<QI", source, row.nnz))
                buf = np.empty(row.nnz, dtype=pair)
                buf["i"] = row.indices
                buf["v"] = row.values
                fh.write(buf.tobytes())

    @classmethod
    def load(cls, path) -> "SparsifiedPanel":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != PANEL_MAGIC:
            raise InputError(f"{path}: not a panel file (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != PANEL_VERSION:
            raise InputError(f"{path}: unsupported panel version {version}")
        tag, alpha, order, r_max, k = struct.unpack_from("<BdIdI", data, 8)
        if tag not in _TAG_SCHEME:
            raise InputError(f"{path}: unknown scheme tag {tag}")
        scheme = _TAG_SCHEME[tag]
        params = PanelParams(
            scheme=scheme,
            alpha=None if scheme != "ppr" else alpha,
            order=order,
            r_max=r_max,
            k=k,
        )
        offset = 8 + struct.calcsize("<BdIdI")
        (n_rows,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        pair = np.dtype([("i", "<u8"), ("v", "<f8")])
        rows: dict[int, SparseRowVector] = {}
        for _ in range(n_rows):
            source, nnz = struct.unpack_from("<QI", data, offset)
            offset += 12
            buf = np.frombuffer(data, dtype=pair, count=nnz, offset=offset)
            offset += nnz * pair.itemsize
            rows[int(source)] = SparseRowVector(
                buf["i"].astype(np.int64), buf["v"].astype(np.float64)
            )
        if offset != len(data):
            raise InputError(f"{path}: trailing bytes after last row")
        return cls(params, rows)


def build_panel(graph: CsrGraph, nodes, weights: PropagationWeights,
                r_max: float, k: int, workers: int = 1) -> SparsifiedPanel:
    """Approximate and sparsify rows for every node in ``nodes``.

    Rows are independent, so chunks are fanned out over a thread pool
    (the kernel releases the GIL); output is identical for any worker
    count.
    """
    if workers < 1:
        raise InputError("workers must be >= 1")
    if k < 1:
        raise InputError("k must be >= 1")
    if r_max <= 0:
        raise InputError("r_max must be positive")
    sources = np.array(sorted({int(v) for v in nodes}), dtype=np.int64)
    if sources.size and (sources[0] < 0 or sources[-1] >= graph.num_nodes):
        raise InputError("panel node id out of range")
    params = PanelParams(weights.scheme, weights.alpha, weights.order, r_max, k)
    if sources.size == 0:
        return SparsifiedPanel(params, {})

    def run(chunk):
        return _panel_batch(graph.row_offsets, graph.col_indices, graph.degrees,
                            weights.weights, r_max, chunk, k)

    if workers == 1:
        chunks = [sources]
        results = [run(sources)]
    else:
        chunks = np.array_split(sources, min(workers, sources.size))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))

    cap = min(k, graph.num_nodes)
    rows: dict[int, SparseRowVector] = {}
    for chunk, (idx, val, nnz, _counts) in zip(chunks, results):
        for si, source in enumerate(chunk):
            lo = si * cap
            m = int(nnz[si])
            rows[int(source)] = SparseRowVector(
                idx[lo:lo + m].copy(), val[lo:lo + m].copy()
            )
    return SparsifiedPanel(params, rows)


def dense_transition_powers(graph: CsrGraph, order: int,
                            cap: int = 2000) -> list[np.ndarray]:
    """Exact dense P^0..P^order by repeated sparse-times-dense products."""
    if graph.num_nodes > cap:
        raise OracleCapError(
            f"dense oracle refused: {graph.num_nodes} nodes exceeds cap {cap}"
        )
    transition = graph.transition()
    powers = [np.eye(graph.num_nodes, dtype=np.float64)]
    for _ in range(order):
        powers.append(transition @ powers[-1])
    return powers


def exact_row(graph: CsrGraph, source: int, weights: PropagationWeights,
              cap: int = 2000) -> np.ndarray:
    """Exact row of the mixed-order matrix for one source node."""
    if graph.num_nodes > cap:
        raise OracleCapError(
            f"dense oracle refused: {graph.num_nodes} nodes exceeds cap {cap}"
        )
    if not 0 <= source < graph.num_nodes:
        raise InputError(f"source {source} out of range")
    transition = graph.transition()
    row = np.zeros(graph.num_nodes, dtype=np.float64)
    row[source] = 1.0
    acc = weights.weights[0] * row
    for n in range(1, weights.order + 1):
        row = row @ transition
        acc = acc + weights.weights[n] * row
    return acc


def error_bound(graph: CsrGraph, weights: PropagationWeights,
                r_max: float) -> float:
    """L1 truncation bound N * (2|E| + |V|) * r_max."""
    return weights.order * graph.degree_sum * r_max
