"""Seeded generators for the two committed toy datasets.

toy-parity
    A hop-order probe. Sample node v (the only labeled nodes) sits at the
    center of a dedicated gadget: m1 inner neighbors carrying +s_v in feature
    coordinate 0, each inner node fanning out to m2 outer nodes carrying
    -c * s_v with c chosen so that, under row normalization without
    self-loops, v's hop-1 aggregate is +s_v and its hop-2 aggregate is
    exactly -s_v in coordinate 0. The label is the sign s_v.

    Consequence: the unordered multiset of v's hop tokens {0, +u, -u} is
    identically distributed for both classes, so any model invariant to hop
    permutation is at chance, while a single glance at the *first* hop solves
    the task. Keeping the multiset truly uninformative takes two precautions:
    sample nodes carry exactly zero features (any own-feature noise would
    reappear in hop 2 via the v->inner->v path and fingerprint that token),
    and outer-ring noise is scaled so the hop-1 and hop-2 noise variances
    match per coordinate (otherwise noise magnitude identifies the hop).
    A linear rule (sign of hop-1 coordinate 0) is verified against the real
    propagation pipeline at generation time, so the task is solvable by
    construction.

toy-homophily
    A 50-node three-class stochastic block model with class-informative
    features; a quick end-to-end sanity target for the full pipeline.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import (
    DEFAULT_RATIOS,
    FeatureMatrix,
    LabeledNodes,
    graph_from_edges,
    load_dataset,
    make_splits,
    normalize,
    save_dataset,
    save_split,
)
from .hops import precompute_hops

PARITY_NAME = "toy-parity"
HOMOPHILY_NAME = "toy-homophily"

PARITY_SAMPLES = 300
PARITY_INNER = 3    # m1: direct neighbors per sample node
PARITY_OUTER = 4    # m2: second-ring nodes per inner node
PARITY_DIM = 8
PARITY_SEED = 7

HOMOPHILY_NODES = 50
HOMOPHILY_CLASSES = 3
HOMOPHILY_DIM = 16
HOMOPHILY_SEED = 11


def make_parity_dataset(
    out_dir: str | Path,
    samples: int = PARITY_SAMPLES,
    inner: int = PARITY_INNER,
    outer: int = PARITY_OUTER,
    dim: int = PARITY_DIM,
    seed: int = PARITY_SEED,
) -> Path:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    num_nodes = samples * (1 + inner + inner * outer)
    signs = np.where(np.arange(samples) % 2 == 0, 1.0, -1.0)
    rng.shuffle(signs)

    # the outer magnitude makes the hop-2 coefficient exactly -1 under row
    # normalization: inner degree is 1 + outer, so c * outer / (1 + outer) = 1
    outer_mag = (1.0 + outer) / outer
    # per-coordinate hop-1 noise variance is sigma_i^2/inner; hop-2 collects
    # inner*outer sources at weight 1/(inner*(1+outer)); equalize them so the
    # noise level cannot fingerprint a hop
    noise_ratio = np.sqrt((inner * (1.0 + outer) ** 2) / (inner * outer))
    sig_noise, bg_noise = 0.05, 0.3

    feats = np.zeros((num_nodes, dim), dtype=np.float32)
    edges = []
    cursor = samples  # auxiliary node ids start after the sample block
    for v in range(samples):
        s = signs[v]
        for _ in range(inner):
            inner_id = cursor
            cursor += 1
            feats[inner_id, 0] = s + rng.normal(0.0, sig_noise)
            feats[inner_id, 1:] = rng.normal(0.0, bg_noise, size=dim - 1)
            edges.append((v, inner_id))
            for _ in range(outer):
                outer_id = cursor
                cursor += 1
                feats[outer_id, 0] = -outer_mag * s + rng.normal(0.0, sig_noise * noise_ratio)
                feats[outer_id, 1:] = rng.normal(0.0, bg_noise * noise_ratio, size=dim - 1)
                edges.append((inner_id, outer_id))
    assert cursor == num_nodes

    labels = np.full(num_nodes, -1, dtype=np.int64)
    labels[:samples] = (signs > 0).astype(np.int64)

    graph = graph_from_edges(num_nodes, np.array(edges, dtype=np.int64))
    save_dataset(out_dir, graph, FeatureMatrix(feats), LabeledNodes(labels, 2))
    (splits,) = make_splits(samples, DEFAULT_RATIOS, seed=seed, k=1)
    save_split(out_dir / "splits.json", splits)

    rule_acc = parity_linear_rule_accuracy(out_dir)
    if rule_acc != 1.0:
        raise AssertionError(
            f"parity construction broken: hop-1 sign rule scores {rule_acc:.3f}, expected 1.0"
        )
    return out_dir


def parity_linear_rule_accuracy(data_dir: str | Path) -> float:
    """Accuracy of the constructed closed-form solution (sign of the hop-1
    aggregate in the signal coordinate), computed through the real pipeline."""
    graph, feats, labels = load_dataset(data_dir)
    hops = precompute_hops(normalize(graph, "row", add_self_loops=False), feats.data, 2)
    ids = labels.labeled_ids()
    predicted = (hops.data[ids, 1, 0] > 0).astype(np.int64)
    return float((predicted == labels.labels[ids]).mean())


def make_homophily_dataset(
    out_dir: str | Path,
    num_nodes: int = HOMOPHILY_NODES,
    num_classes: int = HOMOPHILY_CLASSES,
    dim: int = HOMOPHILY_DIM,
    seed: int = HOMOPHILY_SEED,
    p_in: float = 0.35,
    p_out: float = 0.03,
) -> Path:
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes) % num_classes
    rng.shuffle(labels)

    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    mask = np.triu(rng.random((num_nodes, num_nodes)) < prob, k=1)
    edges = np.argwhere(mask)

    prototypes = rng.normal(0.0, 1.0, size=(num_classes, dim))
    feats = (1.5 * prototypes[labels] + rng.normal(0.0, 0.8, size=(num_nodes, dim))).astype(
        np.float32
    )

    graph = graph_from_edges(num_nodes, edges)
    save_dataset(out_dir, graph, FeatureMatrix(feats), LabeledNodes(labels.astype(np.int64), num_classes))
    (splits,) = make_splits(num_nodes, DEFAULT_RATIOS, seed=seed, k=1)
    save_split(out_dir / "splits.json", splits)
    return out_dir


def generate_all(root: str | Path) -> list[Path]:
    """Create both toy datasets under ``root`` (skipping ones that exist)."""
    root = Path(root)
    made = []
    parity = root / PARITY_NAME
    if not (parity / "edges.tsv").is_file():
        made.append(make_parity_dataset(parity))
    homophily = root / HOMOPHILY_NAME
    if not (homophily / "edges.tsv").is_file():
        made.append(make_homophily_dataset(homophily))
    return made
