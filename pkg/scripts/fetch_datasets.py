#!/usr/bin/env python3
"""Download the real benchmark datasets and convert them to the standard
on-disk format (edges.tsv / features.bin / labels.tsv per dataset directory).

Requires network access; run once, then the full test suite (including the
real-data acceptance criteria) picks the datasets up from --root.

Sources
-------
cora, citeseer   LINQS plain-text releases (paper-id keyed bag-of-words).
                 Note: this citeseer release has 3312 nodes; some published
                 tables count 3327 from a different packaging of the same
                 corpus. The loader derives all counts from the files.
texas, wisconsin, cornell, chameleon, squirrel, film
                 plain-text node/edge files from the geom-gcn repository.

Usage
-----
    python scripts/fetch_datasets.py [--root data] [--only cora,texas]
"""

from __future__ import annotations

import argparse
import io
import sys
import tarfile
import urllib.request
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from hopflow.graph import write_features_bin

LINQS = {
    "cora": "https://linqs-data.soe.ucsc.edu/public/lbc/cora.tgz",
    "citeseer": "https://linqs-data.soe.ucsc.edu/public/lbc/citeseer.tgz",
}
GEOM_GCN_RAW = (
    "https://raw.githubusercontent.com/graphdml-uiuc-jlu/geom-gcn/master/new_data"
)
GEOM_GCN_SETS = ("texas", "wisconsin", "cornell", "chameleon", "squirrel", "film")


def fetch(url: str) -> bytes:
    print(f"  fetching {url}")
    with urllib.request.urlopen(url, timeout=120) as resp:
        return resp.read()


def write_dataset(out_dir: Path, edges, features, labels) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "edges.tsv").open("w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a}\t{b}\n")
    write_features_bin(out_dir / "features.bin", np.asarray(features, dtype=np.float32))
    with (out_dir / "labels.tsv").open("w", encoding="utf-8") as fh:
        for node, cls in enumerate(labels):
            fh.write(f"{node}\t{cls}\n")


def convert_linqs(name: str, root: Path) -> None:
    blob = fetch(LINQS[name])
    tar = tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz")

    def read(member: str) -> list[str]:
        for candidate in (f"{name}/{member}", member):
            try:
                fh = tar.extractfile(candidate)
            except KeyError:
                continue
            if fh is not None:
                return fh.read().decode("utf-8", errors="replace").splitlines()
        raise FileNotFoundError(f"{member} not in {name} archive")

    node_ids: dict[str, int] = {}
    rows, classes = [], []
    for line in read(f"{name}.content"):
        parts = line.strip().split()
        if not parts:
            continue
        paper, *feat, cls = parts
        node_ids[paper] = len(node_ids)
        rows.append([float(v) for v in feat])
        classes.append(cls)
    class_ids = {c: i for i, c in enumerate(sorted(set(classes)))}
    labels = [class_ids[c] for c in classes]

    edges = []
    skipped = 0
    for line in read(f"{name}.cites"):
        parts = line.strip().split()
        if len(parts) != 2:
            continue
        a, b = parts
        if a in node_ids and b in node_ids:
            edges.append((node_ids[a], node_ids[b]))
        else:
            skipped += 1  # citations touching papers without content rows
    if skipped:
        print(f"  {name}: skipped {skipped} citation lines without feature rows")
    write_dataset(root / name, edges, rows, labels)
    print(f"  {name}: {len(rows)} nodes, {len(edges)} raw edges, {len(class_ids)} classes")


def convert_geom_gcn(name: str, root: Path) -> None:
    node_lines = fetch(f"{GEOM_GCN_RAW}/{name}/out1_node_feature_label.txt").decode().splitlines()
    edge_lines = fetch(f"{GEOM_GCN_RAW}/{name}/out1_graph_edges.txt").decode().splitlines()

    features: dict[int, np.ndarray] = {}
    labels: dict[int, int] = {}
    sparse_dim = 932 if name == "film" else None  # film lists active indices
    for line in node_lines[1:]:  # first line is a header
        parts = line.strip().split("\t")
        if len(parts) != 3:
            continue
        node = int(parts[0])
        if sparse_dim is None:
            features[node] = np.array(parts[1].split(","), dtype=np.float32)
        else:
            vec = np.zeros(sparse_dim, dtype=np.float32)
            vec[np.array(parts[1].split(","), dtype=np.int64)] = 1.0
            features[node] = vec
        labels[node] = int(parts[2])

    n = max(features) + 1
    dim = len(next(iter(features.values())))
    matrix = np.zeros((n, dim), dtype=np.float32)
    label_list = [0] * n
    for node, vec in features.items():
        matrix[node] = vec
        label_list[node] = labels[node]

    edges = []
    for line in edge_lines[1:]:
        parts = line.strip().split("\t")
        if len(parts) == 2:
            edges.append((int(parts[0]), int(parts[1])))
    out = "actor" if name == "film" else name
    write_dataset(root / out, edges, matrix, label_list)
    print(f"  {out}: {n} nodes, {len(edges)} raw edges, {len(set(label_list))} classes")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="data", type=Path)
    parser.add_argument("--only", default=None, help="comma-separated subset of dataset names")
    args = parser.parse_args()
    wanted = set(args.only.split(",")) if args.only else None

    for name in LINQS:
        if wanted is None or name in wanted:
            print(f"[{name}]")
            convert_linqs(name, args.root)
    for name in GEOM_GCN_SETS:
        public = "actor" if name == "film" else name
        if wanted is None or public in wanted or name in wanted:
            print(f"[{public}]")
            convert_geom_gcn(name, args.root)
    print("done; verify with: pytest tests/test_graph.py -k cora")
    return 0


if __name__ == "__main__":
    sys.exit(main())
