import os
from pathlib import Path

import numpy as np
import pytest

from hopflow.graph import graph_from_edges

REPO_ROOT = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("HOPFLOW_DATA", REPO_ROOT / "data"))


def dataset_dir(name: str) -> Path:
    """Path to a real benchmark dataset, skipping the test when absent.

    Real datasets are not committed; scripts/fetch_datasets.py downloads and
    converts them (network required).
    """
    path = DATA_ROOT / name
    if not (path / "edges.tsv").is_file():
        pytest.skip(
            f"dataset {name!r} not present under {DATA_ROOT}; "
            "run scripts/fetch_datasets.py to enable this test"
        )
    return path


def toy_dir(name: str) -> Path:
    """Path to a committed toy dataset, regenerating it if needed."""
    path = DATA_ROOT / name
    if not (path / "edges.tsv").is_file():
        from hopflow import toydata

        toydata.generate_all(DATA_ROOT)
    return path


def random_graph(rng: np.random.Generator, n: int, edge_prob: float = 0.4):
    """Random undirected simple graph as a canonical SparseGraph."""
    mask = rng.random((n, n)) < edge_prob
    mask = np.triu(mask, k=1)
    edges = np.argwhere(mask)
    return graph_from_edges(n, edges.reshape(-1, 2))
