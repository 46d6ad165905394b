"""Multi-hop feature pre-computation and the hop-stack container.

``precompute_hops`` turns a normalized adjacency plus raw features into a
``HopTensor``: for every node, the stack of its 0..L hop propagated feature
vectors. Training code consumes only this tensor (via ``gather_batch``) and
never sees the graph again.

Cache file layout (magic ``HGH1``):

    bytes 0..3    magic
    bytes 4..27   u64 LE num_nodes, num_hops (= L+1), dim
    payload       N * num_hops * dim float32 LE, [node][hop][dim] order
    trailer       16-byte MD5 of the payload
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .graph import SparseGraph

HOPS_MAGIC = b"HGH1"
_HEADER = struct.Struct("<4sQQQ")

# rows per SpMM block; bounds the (entries x dim) float64 scratch buffer
_SPMM_ROW_BLOCK = 16384


@dataclass
class HopTensor:
    """Per-node stack of propagated features, shape (N, L+1, d).

    ``data`` may be an ordinary array or a read-only memmap of a cache file;
    either way it is treated as immutable.
    """

    data: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.data.shape[0])

    @property
    def num_hops(self) -> int:
        return int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])

    def truncated(self, num_hops_kept: int) -> "HopTensor":
        """View of the first ``num_hops_kept`` hop slices (no copy, no recompute)."""
        if not 1 <= num_hops_kept <= self.num_hops:
            raise ValueError(f"cannot keep {num_hops_kept} of {self.num_hops} hop slices")
        return HopTensor(self.data[:, :num_hops_kept, :])


def spmm(graph: SparseGraph, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product adjacency @ x.

    Accumulates in float64 regardless of the input dtype and casts back, so
    long propagation chains do not drift. Row blocks are processed
    independently with a fixed per-row accumulation order, which keeps the
    result deterministic.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected 2-d feature matrix, got shape {x.shape}")
    if x.shape[0] != graph.num_nodes:
        raise ValueError(
            f"graph has {graph.num_nodes} nodes but features have {x.shape[0]} rows"
        )
    out = np.zeros((graph.num_nodes, x.shape[1]), dtype=np.float64)
    offsets = graph.row_offsets
    for r0 in range(0, graph.num_nodes, _SPMM_ROW_BLOCK):
        r1 = min(r0 + _SPMM_ROW_BLOCK, graph.num_nodes)
        s, e = int(offsets[r0]), int(offsets[r1])
        if s == e:
            continue
        cols = graph.col_indices[s:e]
        contrib = graph.values[s:e, None] * x[cols]  # float64 scratch
        starts = offsets[r0:r1] - s
        nonempty = np.flatnonzero(offsets[r0 + 1 : r1 + 1] > offsets[r0:r1])
        # reduceat over the starts of non-empty rows sums exactly each row's
        # entries; empty rows keep their zero initialization
        out[r0 + nonempty] = np.add.reduceat(contrib, starts[nonempty], axis=0)
    return out.astype(x.dtype, copy=False)


def planned_bytes(num_nodes: int, num_hops_total: int, dim: int) -> int:
    return num_nodes * num_hops_total * dim * 4


def _default_byte_budget() -> int:
    try:
        with open("/proc/meminfo", "r", encoding="ascii") as fh:
            for line in fh:
                if line.startswith("MemAvailable:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return 1 << 36  # 64 GiB fallback when meminfo is unavailable


def precompute_hops(
    graph: SparseGraph,
    x: np.ndarray,
    num_hops: int,
    max_bytes: int | None = None,
) -> HopTensor:
    """Propagate features through the graph 0..num_hops times.

    Hop slice 0 is the raw input; slice l is the adjacency applied l times,
    carried in float64 between hops and stored as float32. The full power of
    the adjacency is never materialized.
    """
    if num_hops < 0:
        raise ValueError("num_hops must be >= 0")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != graph.num_nodes:
        raise ValueError(f"features must be ({graph.num_nodes}, d), got {x.shape}")
    need = planned_bytes(graph.num_nodes, num_hops + 1, x.shape[1])
    budget = _default_byte_budget() if max_bytes is None else max_bytes
    if need > budget:
        raise DataFormatError(
            f"hop tensor would need {need} bytes "
            f"({graph.num_nodes} x {num_hops + 1} x {x.shape[1]} float32), "
            f"exceeding the budget of {budget} bytes"
        )
    out = np.empty((graph.num_nodes, num_hops + 1, x.shape[1]), dtype=np.float32)
    out[:, 0, :] = x.astype(np.float32, copy=False)
    carry = x.astype(np.float64, copy=False)
    for hop in range(1, num_hops + 1):
        carry = spmm(graph, carry)
        out[:, hop, :] = carry.astype(np.float32)
    return HopTensor(out)


def save_hops(hops: HopTensor, path: str | Path) -> None:
    payload = np.ascontiguousarray(hops.data, dtype="<f4").tobytes()
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(HOPS_MAGIC, hops.num_nodes, hops.num_hops, hops.dim))
        fh.write(payload)
        fh.write(hashlib.md5(payload).digest())


def load_hops(path: str | Path, mmap: bool = False, verify_checksum: bool = True) -> HopTensor:
    """Load a hop cache. With ``mmap=True`` the payload is file-mapped
    read-only, so gathering batches from a cache far larger than memory only
    touches the requested rows."""
    path = Path(path)
    size = path.stat().st_size
    if size < _HEADER.size + 16:
        raise DataFormatError(f"{path}: file too short for HGH1 header and checksum")
    with path.open("rb") as fh:
        magic, n, num_hops, dim = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != HOPS_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {HOPS_MAGIC!r}")
        payload_bytes = n * num_hops * dim * 4
        if size != _HEADER.size + payload_bytes + 16:
            raise DataFormatError(
                f"{path}: header claims {payload_bytes} payload bytes but file has "
                f"{size - _HEADER.size - 16}"
            )
        if verify_checksum:
            digest = hashlib.md5()
            remaining = payload_bytes
            while remaining:
                chunk = fh.read(min(remaining, 1 << 24))
                if not chunk:
                    raise DataFormatError(f"{path}: truncated payload")
                digest.update(chunk)
                remaining -= len(chunk)
            if digest.digest() != fh.read(16):
                raise DataFormatError(f"{path}: payload checksum mismatch")
    shape = (n, num_hops, dim)
    if mmap:
        data = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=shape)
    else:
        with path.open("rb") as fh:
            fh.seek(_HEADER.size)
            data = np.frombuffer(fh.read(payload_bytes), dtype="<f4").reshape(shape)
    return HopTensor(data)


def gather_batch(hops: HopTensor, node_ids: np.ndarray) -> np.ndarray:
    """Copy the hop stacks of the given nodes, in order, duplicates allowed.

    Returns a fresh (len(ids), L+1, d) float32 array.
    """
    ids = np.asarray(node_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("node_ids must be 1-d")
    if ids.size and (ids.min() < 0 or ids.max() >= hops.num_nodes):
        bad = ids[(ids < 0) | (ids >= hops.num_nodes)][0]
        raise IndexError(f"node id {int(bad)} out of range [0, {hops.num_nodes})")
    out = hops.data[ids]  # fancy indexing already copies, also from a memmap
    return out if out.dtype == np.float32 else out.astype(np.float32)
