"""Experiment orchestration: dataset -> hop cache -> repeated training runs.

This is the only training-side module allowed to touch graph structure; it
feeds everything downstream through the HopTensor. All entry points are
deterministic given their seeds, and multi-run protocols reuse one hop cache
and one set of splits so variants stay comparable.
"""

from __future__ import annotations

import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import (
    DEFAULT_RATIOS,
    LabeledNodes,
    Split,
    load_dataset,
    load_split,
    make_splits,
    normalize,
)
from .hops import HopTensor, gather_batch, load_hops, precompute_hops, save_hops
from .model import ModelConfig, ParamStore, forward, init_params
from .training import AdamState, TrainConfig, adam_step, train, _step_loss
from .autodiff import Tape


def prepare_hops(
    data_dir: str | Path,
    num_hops: int,
    norm: str = "sym",
    add_self_loops: bool = True,
    cache_path: str | Path | None = None,
    mmap: bool = False,
) -> tuple[HopTensor, LabeledNodes]:
    """Load a dataset and produce its hop stack, using/creating a cache file.

    An existing cache is trusted if its dimensions cover the request (extra
    hop slices are fine; prefixes are views).
    """
    data_dir = Path(data_dir)
    if cache_path is not None and Path(cache_path).is_file():
        hops = load_hops(cache_path, mmap=mmap)
        _, _, labels = load_dataset(data_dir)
        if hops.num_hops < num_hops + 1:
            raise ConfigError(
                f"cache {cache_path} holds {hops.num_hops} hop slices, need {num_hops + 1}"
            )
        return hops, labels
    graph, feats, labels = load_dataset(data_dir)
    hops = precompute_hops(normalize(graph, norm, add_self_loops), feats.data, num_hops)
    if cache_path is not None:
        save_hops(hops, cache_path)
    return hops, labels


def _resolve_config(cfg: TrainConfig, hops: HopTensor, labels: LabeledNodes) -> TrainConfig:
    """Fill in data-derived model dims, or verify them when already set."""
    model = replace(cfg.model)
    if model.in_dim == 0:
        model.in_dim = hops.dim
    if model.num_classes == 0:
        model.num_classes = labels.num_classes
    if model.in_dim != hops.dim:
        raise ConfigError(f"model in_dim {model.in_dim} != cache dim {hops.dim}")
    if model.num_classes != labels.num_classes:
        raise ConfigError(
            f"model num_classes {model.num_classes} != labels {labels.num_classes}"
        )
    return replace(cfg, model=model)


def _splits_for(
    num_nodes: int,
    cfg: TrainConfig,
    num_splits: int,
    split_files: list[str | Path] | None,
) -> list[Split]:
    if split_files:
        return [load_split(f, num_nodes) for f in split_files]
    return make_splits(num_nodes, DEFAULT_RATIOS, seed=cfg.seed, k=num_splits)


def run_protocol(
    data_dir: str | Path,
    cfg: TrainConfig,
    num_splits: int = 10,
    norm: str = "sym",
    add_self_loops: bool = True,
    cache_path: str | Path | None = None,
    split_files: list[str | Path] | None = None,
) -> dict:
    """Train once per split and aggregate mean/std test accuracy.

    Per-split runs use seed ``cfg.seed + split_index``. Returns a report dict
    with the aggregate row plus every per-split RunReport.
    """
    t0 = time.perf_counter()
    hops, labels = prepare_hops(data_dir, cfg.model.hops, norm, add_self_loops, cache_path)
    cfg = _resolve_config(cfg, hops, labels)
    hops = hops.truncated(cfg.model.num_tokens)
    precompute_s = time.perf_counter() - t0

    splits = _splits_for(hops.num_nodes, cfg, num_splits, split_files)
    runs = []
    stores = []
    for i, split in enumerate(splits):
        run_cfg = replace(cfg, seed=cfg.seed + i)
        store, report = train(hops, labels.labels, split, run_cfg)
        runs.append(report)
        stores.append(store)
    accs = np.array([r.test_acc for r in runs])
    doc = {
        "name": Path(data_dir).name,
        "mean": float(accs.mean()),
        "std": float(accs.std()),
        "num_splits": len(splits),
        "config": cfg.to_dict(),
        "timings": {"precompute_s": 0.0 if cfg.determinism else precompute_s},
        "splits": [r.to_dict() for r in runs],
    }
    return {"report": doc, "stores": stores, "config": cfg}


def sweep_hops(
    data_dir: str | Path,
    cfg: TrainConfig,
    hop_counts: list[int],
    num_splits: int = 3,
    norm: str = "sym",
    add_self_loops: bool = True,
    cache_path: str | Path | None = None,
    split_files: list[str | Path] | None = None,
) -> dict:
    """Accuracy as a function of propagation depth.

    The cache is built once at the maximum depth; shallower models consume
    prefix views of it (never a recompute). All depths share the same splits.
    """
    if not hop_counts or min(hop_counts) < 1:
        raise ConfigError("hop sweep needs depths >= 1")
    deepest = max(hop_counts)
    hops, labels = prepare_hops(data_dir, deepest, norm, add_self_loops, cache_path)
    base = _resolve_config(replace(cfg, model=replace(cfg.model, hops=deepest)), hops, labels)
    splits = _splits_for(hops.num_nodes, base, num_splits, split_files)

    rows = []
    for depth in hop_counts:
        run_cfg = replace(base, model=replace(base.model, hops=depth))
        view = hops.truncated(depth + 1)
        accs = []
        for i, split in enumerate(splits):
            _, report = train(view, labels.labels, split, replace(run_cfg, seed=run_cfg.seed + i))
            accs.append(report.test_acc)
        accs = np.array(accs)
        rows.append({"hops": depth, "mean": float(accs.mean()), "std": float(accs.std())})
    return {
        "name": Path(data_dir).name,
        "rows": rows,
        "num_splits": len(splits),
        "config": base.to_dict(),
    }


ABLATION_SUITES = {
    "order": [
        ("default", {}),
        ("no_order_embedding", {"use_order_embedding": False}),
    ],
    "fusion": [
        ("mean", {"fusion_kind": "mean"}),
        ("max", {"fusion_kind": "max"}),
        ("attention", {"fusion_kind": "attention"}),
    ],
    "interaction": [
        ("attention", {"interaction_kind": "attention"}),
        ("none", {"interaction_kind": "none"}),
        ("mlp", {"interaction_kind": "mlp"}),
        ("gcn_mean", {"interaction_kind": "gcn_mean"}),
        ("sage", {"interaction_kind": "sage"}),
    ],
}


def run_ablation(
    data_dir: str | Path,
    cfg: TrainConfig,
    suite: str,
    num_splits: int = 3,
    norm: str = "sym",
    add_self_loops: bool = True,
    cache_path: str | Path | None = None,
    split_files: list[str | Path] | None = None,
) -> dict:
    """Run one variant grid and report accuracy deltas against the default
    configuration (first row of the suite)."""
    if suite not in ABLATION_SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; have {sorted(ABLATION_SUITES)}")
    hops, labels = prepare_hops(data_dir, cfg.model.hops, norm, add_self_loops, cache_path)
    base = _resolve_config(cfg, hops, labels)
    hops = hops.truncated(base.model.num_tokens)
    splits = _splits_for(hops.num_nodes, base, num_splits, split_files)

    rows = []
    for name, overrides in ABLATION_SUITES[suite]:
        variant = replace(base, model=replace(base.model, **overrides))
        accs = []
        for i, split in enumerate(splits):
            _, report = train(hops, labels.labels, split, replace(variant, seed=variant.seed + i))
            accs.append(report.test_acc)
        accs = np.array(accs)
        rows.append({"variant": name, "mean": float(accs.mean()), "std": float(accs.std())})
    baseline = rows[0]["mean"]
    for row in rows:
        row["delta"] = row["mean"] - baseline
    return {
        "name": Path(data_dir).name,
        "suite": suite,
        "rows": rows,
        "num_splits": len(splits),
        "config": base.to_dict(),
    }


def bench_training(
    hops: HopTensor,
    labels: np.ndarray,
    train_ids: np.ndarray,
    cfg: TrainConfig,
    steps: int = 100,
    batch_size: int | None = None,
    warmup: int = 3,
) -> dict:
    """Measure steady-state training throughput and its phase breakdown.

    Batches are drawn seeded with replacement so the measurement does not
    depend on the epoch structure. Returns steps/sec, per-phase seconds
    (gather / forward / backward / optimizer) and the same peak-memory
    estimate the training loop reports.
    """
    if steps < 1:
        raise ConfigError("need at least one measured step")
    batch_size = batch_size or cfg.batch_size
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.Generator(np.random.SFC64(cfg.seed + 1))
    store = init_params(cfg.model, np.random.default_rng(cfg.seed + 2))
    state = AdamState(store)
    phases = {"gather_s": 0.0, "forward_s": 0.0, "backward_s": 0.0, "optimizer_s": 0.0}
    step_seconds = []
    peak_tape = 0
    total0 = time.perf_counter()
    for step in range(warmup + steps):
        measured = step >= warmup
        t0 = time.perf_counter()
        ids = train_ids[rng.integers(0, len(train_ids), size=min(batch_size, len(train_ids)))]
        batch = gather_batch(hops, ids)
        t1 = time.perf_counter()
        tape = Tape(training=True, rng=dropout_rng, dtype=np.float32)
        loss = _step_loss(batch, labels[ids], store, cfg, tape)
        t2 = time.perf_counter()
        store.zero_grad()
        tape.backward(loss)
        t3 = time.perf_counter()
        adam_step(store, state, cfg.lr, weight_decay=cfg.weight_decay)
        t4 = time.perf_counter()
        peak_tape = max(peak_tape, tape.peak_bytes)
        if measured:
            phases["gather_s"] += t1 - t0
            phases["forward_s"] += t2 - t1
            phases["backward_s"] += t3 - t2
            phases["optimizer_s"] += t4 - t3
            step_seconds.append(t4 - t0)
        if step == warmup - 1:
            total0 = time.perf_counter()
    total = time.perf_counter() - total0
    return {
        "steps": steps,
        "batch_size": int(batch_size),
        "steps_per_sec": steps / total,
        "median_step_s": float(np.median(step_seconds)),  # robust to scheduler bursts
        "phase_seconds": phases,
        "peak_bytes": store.nbytes() + state.nbytes() + 2 * peak_tape,
    }


def export_embeddings(
    store: ParamStore,
    mcfg: ModelConfig,
    hops: HopTensor,
    layer: str = "Z",
    batch_size: int = 4096,
) -> np.ndarray:
    """Eval-mode representations for every node: the fused vector (``Z``,
    N x hidden) or the flattened post-interaction tokens (``HK``,
    N x tokens*hidden)."""
    if layer not in ("Z", "HK"):
        raise ConfigError(f"unknown embedding layer {layer!r}, expected 'Z' or 'HK'")
    pieces = []
    ids = np.arange(hops.num_nodes)
    for chunk in np.array_split(ids, max(1, -(-ids.size // batch_size))):
        batch = gather_batch(hops, chunk)
        out = forward(batch, store, mcfg, Tape(training=False))
        if layer == "Z":
            pieces.append(out.fused.data.astype(np.float32))
        else:
            b = out.hidden_tokens.data.shape[0]
            pieces.append(out.hidden_tokens.data.reshape(b, -1).astype(np.float32))
    return np.concatenate(pieces, axis=0)
