#!/usr/bin/env python3
"""Convert a pickled Planetoid-style citation dataset into plain-text files.

Input directory must hold the eight files ind.<name>.{x,y,tx,ty,allx,ally,
graph,test.index}. Output is the text layout the loaders expect:

    edges.tsv      "#nodes N" header, then one "u<TAB>v" line per edge
    features.txt   "N d" header, then COO triples "i j v"
    labels.txt     "i c" lines
    train.txt / valid.txt / test.txt   one node id per line

The public split convention: the first len(y) nodes are training, the next
500 are validation, and the sorted test.index ids are the test set.
"""

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp


def _read_pickle(src: Path, name: str, part: str):
    with open(src / f"ind.{name}.{part}", "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def load_planetoid(src: Path, name: str):
    """Return (features csr, labels onehot, graph dict, train/valid/test ids)."""
    x, y, tx, ty, allx, ally = (
        _read_pickle(src, name, p) for p in ("x", "y", "tx", "ty", "allx", "ally")
    )
    graph = _read_pickle(src, name, "graph")
    test_order = np.loadtxt(src / f"ind.{name}.test.index", dtype=np.int64)

    num_nodes = len(graph)
    num_feats = allx.shape[1]
    features = sp.lil_matrix((num_nodes, num_feats), dtype=np.float64)
    features[: allx.shape[0]] = allx
    # tx rows are listed in test.index file order, not ascending id order
    features[test_order] = tx
    onehot = np.zeros((num_nodes, ally.shape[1]), dtype=np.float64)
    onehot[: ally.shape[0]] = ally
    onehot[test_order] = ty

    train = np.arange(len(y), dtype=np.int64)
    valid = np.arange(len(y), len(y) + 500, dtype=np.int64)
    test = np.sort(test_order)
    return features.tocsr(), onehot, graph, train, valid, test


def write_text(out: Path, features, onehot, graph, train, valid, test) -> None:
    out.mkdir(parents=True, exist_ok=True)
    num_nodes = features.shape[0]

    edges = set()
    for u, nbrs in graph.items():
        for v in nbrs:
            if u != v:
                edges.add((min(u, v), max(u, v)))
    with open(out / "edges.tsv", "w") as fh:
        fh.write(f"#nodes {num_nodes}\n")
        for u, v in sorted(edges):
            fh.write(f"{u}\t{v}\n")

    coo = features.tocoo()
    with open(out / "features.txt", "w") as fh:
        fh.write(f"{num_nodes} {features.shape[1]}\n")
        order = np.lexsort((coo.col, coo.row))
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i} {j} {v:.17g}\n")

    with open(out / "labels.txt", "w") as fh:
        for i in range(num_nodes):
            row = onehot[i]
            if row.sum() > 0:  # citeseer has a few unlabeled filler nodes
                fh.write(f"{i} {int(np.argmax(row))}\n")

    for fname, ids in (("train.txt", train), ("valid.txt", valid), ("test.txt", test)):
        with open(out / fname, "w") as fh:
            for i in ids:
                fh.write(f"{i}\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--src", type=Path, required=True, help="dir with ind.<name>.* files")
    ap.add_argument("--name", default="cora", choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("--out", type=Path, required=True, help="output directory")
    args = ap.parse_args(argv)

    features, onehot, graph, train, valid, test = load_planetoid(args.src, args.name)
    write_text(args.out, features, onehot, graph, train, valid, test)
    n_edges = sum(len(nbrs) for nbrs in graph.values())
    print(
        f"{args.name}: {features.shape[0]} nodes, {features.shape[1]} features, "
        f"{n_edges} adjacency entries, splits {len(train)}/{len(valid)}/{len(test)}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
