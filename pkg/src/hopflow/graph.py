"""Dataset ingestion, sparse adjacency construction, statistics and splits.

A dataset directory holds three files (plus an optional ``splits.json``):

    edges.tsv     one edge per line, ``src<TAB>dst``, zero-based decimal node
                  ids; lines starting with ``#`` are ignored
    features.bin  magic ``HGF1``, two u64 little-endian fields (num nodes,
                  feature dim), then N*d float32 little-endian values row-major
    labels.tsv    ``node<TAB>class`` per line; nodes absent from the file are
                  unlabeled (sentinel -1)

Edges are symmetrized, deduplicated and stripped of self-loops on load, so a
``SparseGraph`` is always a canonical CSR form of an undirected simple graph.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

FEATURES_MAGIC = b"HGF1"
UNLABELED = -1

#: train/val/test fractions used throughout the experiments
DEFAULT_RATIOS = (0.48, 0.32, 0.20)


@dataclass
class SparseGraph:
    """CSR adjacency. ``values[row_offsets[u]:row_offsets[u+1]]`` are the
    weights of u's outgoing edges, with column indices strictly increasing
    within each row."""

    num_nodes: int
    row_offsets: np.ndarray  # int64, length N+1
    col_indices: np.ndarray  # int64, length nnz
    values: np.ndarray       # float64, length nnz

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def num_undirected_edges(self) -> int:
        """Edge count with (u,v) and (v,u) counted once; self-loops count 1."""
        diag = int(np.count_nonzero(self.col_indices == self._row_ids()))
        return (self.nnz - diag) // 2 + diag

    def _row_ids(self) -> np.ndarray:
        counts = np.diff(self.row_offsets)
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), counts)

    def degrees(self) -> np.ndarray:
        """Weighted out-degree per node (row sums)."""
        out = np.zeros(self.num_nodes, dtype=np.float64)
        np.add.at(out, self._row_ids(), self.values)
        return out

    def has_self_loops(self) -> bool:
        return bool(np.any(self.col_indices == self._row_ids()))

    def validate(self) -> None:
        off, col = self.row_offsets, self.col_indices
        if off.shape != (self.num_nodes + 1,):
            raise ValueError("row_offsets must have length num_nodes+1")
        if off[0] != 0 or off[-1] != self.nnz or np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be non-decreasing from 0 to nnz")
        if self.nnz and (col.min() < 0 or col.max() >= self.num_nodes):
            raise ValueError("column index out of range")
        # strictly increasing columns within each row (canonical, no dups)
        inner = np.ones(self.nnz, dtype=bool)
        if self.nnz > 1:
            inner[1:] = np.diff(col) > 0
            bounds = off[1:-1]
            inner[bounds[bounds < self.nnz]] = True  # row boundaries may decrease
        if not inner.all():
            raise ValueError("columns must be strictly increasing within rows")
        if self.values.shape != col.shape:
            raise ValueError("values and col_indices must align")

    def is_structurally_symmetric(self) -> bool:
        rows = self._row_ids()
        fwd = np.sort(rows * self.num_nodes + self.col_indices)
        rev = np.sort(self.col_indices * self.num_nodes + rows)
        return bool(np.array_equal(fwd, rev))

    def to_dense(self) -> np.ndarray:
        """Dense copy for oracles and tests; do not call on large graphs."""
        dense = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        dense[self._row_ids(), self.col_indices] = self.values
        return dense


@dataclass
class FeatureMatrix:
    data: np.ndarray  # float32, shape (N, d)

    @property
    def num_nodes(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


@dataclass
class LabeledNodes:
    labels: np.ndarray  # int64, length N; UNLABELED where unknown
    num_classes: int

    def labeled_ids(self) -> np.ndarray:
        return np.flatnonzero(self.labels != UNLABELED)


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, num_nodes: int) -> None:
        parts = [self.train, self.val, self.test]
        if any(len(p) == 0 for p in parts):
            raise ValueError("every split part must be non-empty")
        allids = np.concatenate(parts)
        if allids.min() < 0 or allids.max() >= num_nodes:
            raise ValueError("split contains node id out of range")
        if len(np.unique(allids)) != len(allids):
            raise ValueError("split parts must be pairwise disjoint")


def _pairs_to_csr(num_nodes: int, src: np.ndarray, dst: np.ndarray) -> SparseGraph:
    """Canonicalize directed (src, dst) pairs: symmetrize, dedup, drop loops."""
    u = np.concatenate([src, dst]).astype(np.int64)
    v = np.concatenate([dst, src]).astype(np.int64)
    keep = u != v
    u, v = u[keep], v[keep]
    codes = np.unique(u * num_nodes + v)
    u, v = codes // num_nodes, codes % num_nodes
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(u, minlength=num_nodes), out=offsets[1:])
    return SparseGraph(num_nodes, offsets, v, np.ones(len(v), dtype=np.float64))


def graph_from_edges(num_nodes: int, edges: np.ndarray) -> SparseGraph:
    """Build a canonical undirected SparseGraph from an (E, 2) edge array."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges.max() >= num_nodes):
        raise DataFormatError(
            f"edge endpoint {int(edges.max())} out of range for {num_nodes} nodes"
        )
    return _pairs_to_csr(num_nodes, edges[:, 0], edges[:, 1])


def _read_edges_tsv(path: Path, num_nodes: int) -> np.ndarray:
    src, dst = [], []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if a < 0 or b < 0 or a >= num_nodes or b >= num_nodes:
                raise DataFormatError(
                    f"{path}:{lineno}: node id out of range [0, {num_nodes})"
                )
            src.append(a)
            dst.append(b)
    return np.array([src, dst], dtype=np.int64).T.reshape(-1, 2)


def _read_features_bin(path: Path) -> FeatureMatrix:
    raw = path.read_bytes()
    if len(raw) < 20:
        raise DataFormatError(f"{path}: file too short for HGF1 header")
    if raw[:4] != FEATURES_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {FEATURES_MAGIC!r}")
    n, d = struct.unpack_from("<QQ", raw, 4)
    if d < 1:
        raise DataFormatError(f"{path}: feature dim must be >= 1, got {d}")
    expected = 20 + n * d * 4
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: header claims {n}x{d} float32 ({expected} bytes) but file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=20).reshape(n, d)
    if not np.all(np.isfinite(data)):
        raise DataFormatError(f"{path}: features contain non-finite entries")
    return FeatureMatrix(np.ascontiguousarray(data))


def _read_labels_tsv(path: Path, num_nodes: int) -> LabeledNodes:
    labels = np.full(num_nodes, UNLABELED, dtype=np.int64)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'node<TAB>class', got {line!r}")
            try:
                node, cls = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if node < 0 or node >= num_nodes:
                raise DataFormatError(f"{path}:{lineno}: node id {node} out of range [0, {num_nodes})")
            if cls < 0:
                raise DataFormatError(f"{path}:{lineno}: class id must be non-negative")
            labels[node] = cls
    labeled = labels[labels != UNLABELED]
    if labeled.size == 0:
        raise DataFormatError(f"{path}: no labeled nodes")
    num_classes = int(labeled.max()) + 1
    if num_classes < 2:
        raise DataFormatError(f"{path}: need at least 2 classes, found {num_classes}")
    return LabeledNodes(labels, num_classes)


def load_dataset(dir_path: str | Path) -> tuple[SparseGraph, FeatureMatrix, LabeledNodes]:
    """Load a dataset directory into (graph, features, labels).

    The returned graph is symmetrized, deduplicated and self-loop-free;
    feature row i belongs to node i; the class count is derived from the
    labels actually present.
    """
    dir_path = Path(dir_path)
    for name in ("edges.tsv", "features.bin", "labels.tsv"):
        if not (dir_path / name).is_file():
            raise DataFormatError(f"missing dataset file: {dir_path / name}")
    feats = _read_features_bin(dir_path / "features.bin")
    edges = _read_edges_tsv(dir_path / "edges.tsv", feats.num_nodes)
    labels = _read_labels_tsv(dir_path / "labels.tsv", feats.num_nodes)
    graph = graph_from_edges(feats.num_nodes, edges)
    return graph, feats, labels


def save_dataset(
    dir_path: str | Path,
    graph: SparseGraph,
    feats: FeatureMatrix,
    labels: LabeledNodes,
) -> None:
    """Write a dataset directory in the standard format (inverse of load)."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    rows = graph._row_ids()
    upper = rows <= graph.col_indices  # emit each undirected edge once
    with (dir_path / "edges.tsv").open("w", encoding="utf-8") as fh:
        for a, b in zip(rows[upper], graph.col_indices[upper]):
            fh.write(f"{a}\t{b}\n")
    write_features_bin(dir_path / "features.bin", feats.data)
    with (dir_path / "labels.tsv").open("w", encoding="utf-8") as fh:
        for node in labels.labeled_ids():
            fh.write(f"{node}\t{labels.labels[node]}\n")


def write_features_bin(path: str | Path, data: np.ndarray) -> None:
    """Write an N x d float32 matrix in the HGF1 container."""
    data = np.ascontiguousarray(data, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<QQ", data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def normalize(graph: SparseGraph, mode: str = "sym", add_self_loops: bool = True) -> SparseGraph:
    """Degree-normalize the adjacency.

    ``sym`` returns D^-1/2 (A+I) D^-1/2 (the usual graph-convolution form),
    ``row`` returns D^-1 (A+I); with ``add_self_loops=False`` the identity is
    skipped and isolated nodes keep an all-zero row (a warning is emitted).
    Symmetric weights are computed from per-node degree factors so the stored
    value of (u,v) and (v,u) is bit-identical.
    """
    if mode not in ("sym", "row"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    rows = graph._row_ids()
    cols = graph.col_indices.copy()
    vals = graph.values.astype(np.float64, copy=True)
    if add_self_loops:
        n = graph.num_nodes
        rows = np.concatenate([rows, np.arange(n, dtype=np.int64)])
        cols = np.concatenate([cols, np.arange(n, dtype=np.int64)])
        vals = np.concatenate([vals, np.ones(n, dtype=np.float64)])
        # merge duplicates (pre-existing diagonal entries add up)
        codes = rows * n + cols
        uniq, inv = np.unique(codes, return_inverse=True)
        merged = np.zeros(len(uniq), dtype=np.float64)
        np.add.at(merged, inv, vals)
        rows, cols, vals = uniq // n, uniq % n, merged
    deg = np.zeros(graph.num_nodes, dtype=np.float64)
    np.add.at(deg, rows, vals)
    isolated = deg == 0.0
    if np.any(isolated):
        warnings.warn(
            f"{int(isolated.sum())} isolated node(s) with degree 0; their rows stay all-zero",
            stacklevel=2,
        )
    with np.errstate(divide="ignore"):
        if mode == "sym":
            scale = np.where(isolated, 0.0, 1.0 / np.sqrt(deg))
            vals = vals * scale[rows] * scale[cols]
        else:
            scale = np.where(isolated, 0.0, 1.0 / deg)
            vals = vals * scale[rows]
    offsets = np.zeros(graph.num_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=graph.num_nodes), out=offsets[1:])
    return SparseGraph(graph.num_nodes, offsets, cols, vals)


def edge_homophily(graph: SparseGraph, labels: LabeledNodes) -> float:
    """Fraction of edges whose endpoints share a label."""
    if graph.nnz == 0:
        raise ValueError("edge homophily undefined on a graph without edges")
    rows = graph._row_ids()
    if np.any(rows == graph.col_indices):
        raise ValueError("edge homophily expects a graph without self-loops")
    lab = labels.labels
    endpoint = np.concatenate([rows, graph.col_indices])
    missing = endpoint[lab[endpoint] == UNLABELED]
    if missing.size:
        raise ValueError(f"node {int(missing[0])} is unlabeled; homophily needs full labels")
    same = lab[rows] == lab[graph.col_indices]
    return float(np.count_nonzero(same) / graph.nnz)


def make_splits(
    num_nodes: int,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
    k: int = 10,
) -> list[Split]:
    """Generate k seeded random splits at the given train/val/test ratios.

    Sizes are floor(train), floor(val) and the remainder goes to test.
    Deterministic given (seed, k, num_nodes).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(num_nodes * ratios[0])
    n_val = int(num_nodes * ratios[1])
    n_test = num_nodes - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{num_nodes} nodes is too small for ratios {ratios}")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(k):
        perm = rng.permutation(num_nodes)
        split = Split(
            train=np.sort(perm[:n_train]),
            val=np.sort(perm[n_train : n_train + n_val]),
            test=np.sort(perm[n_train + n_val :]),
        )
        split.validate(num_nodes)
        splits.append(split)
    return splits


def load_split(path: str | Path, num_nodes: int | None = None) -> Split:
    """Read a splits.json file ({"train": [...], "val": [...], "test": [...]})."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from None
    missing = {"train", "val", "test"} - set(payload)
    if missing:
        raise DataFormatError(f"{path}: missing split keys {sorted(missing)}")
    split = Split(
        train=np.asarray(payload["train"], dtype=np.int64),
        val=np.asarray(payload["val"], dtype=np.int64),
        test=np.asarray(payload["test"], dtype=np.int64),
    )
    if num_nodes is not None:
        split.validate(num_nodes)
    return split


def save_split(path: str | Path, split: Split) -> None:
    doc = {
        "train": [int(i) for i in split.train],
        "val": [int(i) for i in split.val],
        "test": [int(i) for i in split.test],
    }
    Path(path).write_text(json.dumps(doc, indent=0, sort_keys=True) + "\n", encoding="utf-8")
