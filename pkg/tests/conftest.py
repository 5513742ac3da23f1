import numpy as np
import pytest

from pushprop import CsrGraph, FeatureMatrix, LabelTable, build_csr

CORA_DIR = "data/cora"


def erdos_renyi(rng: np.random.Generator, num_nodes: int, avg_degree: float):
    """Random undirected edge list with roughly the requested mean degree."""
    p = min(1.0, avg_degree / max(1, num_nodes - 1))
    upper = rng.random((num_nodes, num_nodes)) < p
    rows, cols = np.nonzero(np.triu(upper, k=1))
    return list(zip(rows.tolist(), cols.tolist()))


def random_graph(seed: int, num_nodes: int, avg_degree: float = 4.0) -> CsrGraph:
    rng = np.random.default_rng(seed)
    return build_csr(erdos_renyi(rng, num_nodes, avg_degree), num_nodes)


@pytest.fixture
def path_graph() -> CsrGraph:
    # 0 - 1 - 2 plus self loops; degrees [2, 3, 2]
    return build_csr([(0, 1), (1, 2)], 3)


@pytest.fixture
def two_triangles():
    """Separable toy fixture: two triangles with nearly one-hot features."""
    graph = build_csr([(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6)
    base = np.zeros((6, 2))
    base[:3, 0] = 1.0
    base[3:, 1] = 1.0
    noise = 0.01 * np.random.default_rng(7).normal(size=(6, 2))
    features = FeatureMatrix(base + noise)
    labels = LabelTable(
        labels={i: 0 if i < 3 else 1 for i in range(6)},
        num_classes=2,
        train=(0, 3),
        valid=(1, 4),
        test=(2, 5),
    )
    return graph, features, labels


@pytest.fixture(scope="session")
def cora():
    from pushprop.graph import load_dataset

    return load_dataset(
        f"{CORA_DIR}/edges.tsv",
        f"{CORA_DIR}/features.txt",
        f"{CORA_DIR}/labels.txt",
        7,
        train_path=f"{CORA_DIR}/train.txt",
        valid_path=f"{CORA_DIR}/valid.txt",
        test_path=f"{CORA_DIR}/test.txt",
    )
