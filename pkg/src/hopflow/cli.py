"""Command-line experiments.

Subcommands: precompute, train, eval, ablate, sweep-hops, bench,
export-embeddings, make-toys. Every command is deterministic given its seeds
and flags (timings are zeroed inside reports unless --no-determinism), and
every emitted table exists both as JSON and as aligned text rendered from the
same rows.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
``HOPFLOW_THREADS`` caps the worker threads of the underlying BLAS; it must
be honored before numpy loads, which is why this module defers all heavy
imports into the command bodies.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path


def _apply_thread_env() -> None:
    threads = os.environ.get("HOPFLOW_THREADS")
    if not threads:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, threads)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned text view of the same rows that go into the JSON report."""
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [columns] + [[fmt(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(columns))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _load_train_config(config_path, overrides):
    from .errors import ConfigError
    from .training import TrainConfig

    doc = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        doc = json.loads(path.read_text(encoding="utf-8"))
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} collides with a scalar")
        node[parts[-1]] = _parse_override_value(raw)
    try:
        cfg = TrainConfig.from_dict(doc)
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    return cfg


def _split_files_arg(args) -> list | None:
    return list(args.split_file) if getattr(args, "split_file", None) else None


# ---------------------------------------------------------------------------
# commands


def cmd_precompute(args) -> int:
    from .graph import load_dataset, normalize
    from .hops import planned_bytes, precompute_hops, save_hops

    t0 = time.perf_counter()
    graph, feats, _ = load_dataset(args.data)
    normalized = normalize(graph, args.norm, args.self_loops)
    hops = precompute_hops(normalized, feats.data, args.hops)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_hops(hops, out)
    wall = time.perf_counter() - t0
    payload = planned_bytes(hops.num_nodes, hops.num_hops, hops.dim)
    print(
        f"wrote {out} ({payload} payload bytes, "
        f"{hops.num_nodes} x {hops.num_hops} x {hops.dim}) in {wall:.2f}s"
    )
    return 0


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .protocol import run_protocol

    cfg = _load_train_config(args.config, args.override)
    if args.no_determinism:
        from dataclasses import replace

        cfg = replace(cfg, determinism=False)
    result = run_protocol(
        args.data,
        cfg,
        num_splits=args.splits,
        norm=args.norm,
        add_self_loops=args.self_loops,
        cache_path=args.cache,
        split_files=_split_files_arg(args),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "report.json", result["report"])
    for i, store in enumerate(result["stores"]):
        save_checkpoint(out_dir / f"checkpoint-{i:02d}.hgm", store, result["config"].model)
    row = result["report"]
    print(render_table([row], ["name", "mean", "std", "num_splits"]))
    return 0


def cmd_eval(args) -> int:
    from .graph import load_dataset, load_split
    from .hops import load_hops
    from .model import load_checkpoint
    from .training import evaluate

    store, mcfg = load_checkpoint(args.checkpoint)
    hops = load_hops(args.cache)
    _, _, labels = load_dataset(args.data)
    if hops.num_hops < mcfg.num_tokens:
        from .errors import ConfigError

        raise ConfigError(
            f"cache has {hops.num_hops} hop slices, model needs {mcfg.num_tokens}"
        )
    hops = hops.truncated(mcfg.num_tokens)
    if args.split_file:
        split = load_split(args.split_file, hops.num_nodes)
        ids = getattr(split, args.part)
    else:
        ids = labels.labeled_ids()
    import numpy as np

    ids = np.asarray(ids)
    ids = ids[labels.labels[ids] >= 0]
    result = evaluate(store, mcfg, hops, ids, labels.labels)
    doc = {
        "accuracy": result.accuracy,
        "mean_ce": result.mean_ce,
        "per_class_accuracy": {str(k): v for k, v in result.per_class.items()},
        "num_nodes": int(ids.size),
        "part": args.part if args.split_file else "all-labeled",
    }
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .protocol import run_ablation

    cfg = _load_train_config(args.config, args.override)
    report = run_ablation(
        args.data,
        cfg,
        suite=args.suite,
        num_splits=args.splits,
        norm=args.norm,
        add_self_loops=args.self_loops,
        cache_path=args.cache,
        split_files=_split_files_arg(args),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / f"ablation-{args.suite}.json", report)
    print(render_table(report["rows"], ["variant", "mean", "std", "delta"]))
    return 0


def cmd_sweep_hops(args) -> int:
    from .errors import ConfigError
    from .protocol import sweep_hops

    cfg = _load_train_config(args.config, args.override)
    try:
        hop_counts = [int(x) for x in args.hops_list.split(",") if x]
    except ValueError:
        raise ConfigError(f"--hops-list must be comma-separated integers, got {args.hops_list!r}") from None
    if args.max_hops and max(hop_counts) > args.max_hops:
        raise ConfigError("--hops-list exceeds --max-hops")
    report = sweep_hops(
        args.data,
        cfg,
        hop_counts,
        num_splits=args.splits,
        norm=args.norm,
        add_self_loops=args.self_loops,
        cache_path=args.cache,
        split_files=_split_files_arg(args),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "sweep-hops.json", report)
    print(render_table(report["rows"], ["hops", "mean", "std"]))
    return 0


def cmd_bench(args) -> int:
    from .protocol import bench_training, prepare_hops, _resolve_config

    cfg = _load_train_config(args.config, args.override)
    hops, labels = prepare_hops(
        args.data, cfg.model.hops, args.norm, args.self_loops, cache_path=args.cache
    )
    cfg = _resolve_config(cfg, hops, labels)
    hops = hops.truncated(cfg.model.num_tokens)
    report = bench_training(
        hops,
        labels.labels,
        labels.labeled_ids(),
        cfg,
        steps=args.steps,
        batch_size=args.batch,
    )
    if args.out:
        _write_json(Path(args.out), report)
    rows = [
        {"phase": name, "seconds": secs}
        for name, secs in report["phase_seconds"].items()
    ]
    print(f"steps/sec: {report['steps_per_sec']:.2f}  (batch {report['batch_size']}, "
          f"peak ~{report['peak_bytes'] / 1e6:.1f} MB)")
    print(render_table(rows, ["phase", "seconds"]))
    return 0


def cmd_export_embeddings(args) -> int:
    from .graph import write_features_bin
    from .hops import load_hops
    from .model import load_checkpoint
    from .protocol import export_embeddings

    store, mcfg = load_checkpoint(args.checkpoint)
    hops = load_hops(args.cache).truncated(mcfg.num_tokens)
    matrix = export_embeddings(store, mcfg, hops, layer=args.layer)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_features_bin(out, matrix)
    print(f"wrote {out}: {matrix.shape[0]} x {matrix.shape[1]} float32")
    return 0


def cmd_make_toys(args) -> int:
    from .toydata import generate_all

    made = generate_all(args.out)
    for path in made:
        print(f"generated {path}")
    if not made:
        print("toy datasets already present")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_data_opts(p, cache=True):
    p.add_argument("--data", required=True, help="dataset directory")
    if cache:
        p.add_argument("--cache", default=None, help="hop cache file (reused if present)")
    p.add_argument("--norm", choices=("sym", "row"), default="sym")
    loops = p.add_mutually_exclusive_group()
    loops.add_argument("--self-loops", dest="self_loops", action="store_true", default=True)
    loops.add_argument("--no-self-loops", dest="self_loops", action="store_false")


def _add_config_opts(p):
    p.add_argument("--config", default=None, help="TrainConfig JSON file")
    p.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override, e.g. model.interaction_kind=none",
    )
    p.add_argument("--splits", type=int, default=10, help="number of seeded splits")
    p.add_argument(
        "--split-file",
        action="append",
        default=[],
        help="explicit splits.json (repeatable; overrides seeded splits)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hopflow",
        description="hop-interaction graph learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precompute", help="build and persist the hop feature cache")
    _add_data_opts(p, cache=False)
    p.add_argument("--hops", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("train", help="train over seeded splits and report mean/std")
    _add_data_opts(p)
    _add_config_opts(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-determinism", action="store_true",
                   help="keep wall-clock timings in the report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split-file", default=None)
    p.add_argument("--part", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a variant grid and report deltas")
    _add_data_opts(p)
    _add_config_opts(p)
    p.add_argument("--suite", choices=("order", "fusion", "interaction"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-hops", help="accuracy vs propagation depth from one cache")
    _add_data_opts(p)
    _add_config_opts(p)
    p.add_argument("--max-hops", type=int, default=None)
    p.add_argument("--hops-list", "--layers-list", dest="hops_list", required=True,
                   help="comma-separated depths, e.g. 2,6,16,32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_hops)

    p = sub.add_parser("bench", help="training throughput and memory estimate")
    _add_data_opts(p)
    p.add_argument("--config", default=None)
    p.add_argument("--override", action="append", default=[])
    p.add_argument("--batch", type=int, default=3000)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-embeddings", help="write node representations (HGF1)")
    p.add_argument("--cache", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", choices=("HK", "Z"), default="Z")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("make-toys", help="generate the committed toy datasets")
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_make_toys)

    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    from .errors import ConfigError, DataFormatError, NumericError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
