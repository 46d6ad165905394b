"""Mini-batch training with Adam, validation-accuracy early stopping and
seeded determinism.

Everything here consumes the precomputed hop stack only; graph structure is
out of reach by construction (this module must not import hopflow.graph).
A split is any object with ``train``/``val``/``test`` integer index arrays.

RNG discipline: the master seed spawns independent streams for parameter
init, batch shuffling and dropout, so e.g. changing the dropout rate does not
perturb the initial weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as A
from . import losses as L
from . import model as M
from .autodiff import Tape
from .errors import ConfigError, NumericError
from .hops import HopTensor, gather_batch

UNLABELED = -1


@dataclass
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 5e-4
    batch_size: int = 3000
    max_epochs: int = 500
    patience: int = 100
    seed: int = 0
    determinism: bool = True
    decoupled_weight_decay: bool = False  # classic L2-in-gradient by default
    eval_batch_size: int = 4096
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        min_batch = 2 if self.loss.ssl_kind == "barlow" else 1
        if self.batch_size < min_batch:
            raise ConfigError(f"batch_size must be >= {min_batch} for ssl_kind={self.loss.ssl_kind}")
        self.loss.validate()

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model"] = self.model.to_dict()
        doc["loss"] = self.loss.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        model = M.ModelConfig.from_dict(doc.pop("model", {}))
        loss = L.LossConfig.from_dict(doc.pop("loss", {}))
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(model=model, loss=loss, **doc)


class AdamState:
    """First/second moment arrays mirroring a ParamStore, plus step count."""

    def __init__(self, store: M.ParamStore):
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) * 2


def adam_step(
    store: M.ParamStore,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> None:
    """One bias-corrected Adam update from the gradients in the store.

    Weight decay is the classic L2 term added to the gradient unless
    ``decoupled`` is set.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in store:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {p.name!r}")
        if weight_decay != 0.0 and not decoupled:
            g = g + weight_decay * p.data
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if decoupled and weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    mean_ce: float


def _gather_eval_chunks(hops, node_ids, labels, batch_size):
    """Pre-gathered (batch, truth) pairs, reusable across epochs."""
    ids = np.asarray(node_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("evaluation needs at least one node")
    y = np.asarray(labels, dtype=np.int64)[ids]
    if y.min() < 0:
        raise ValueError("evaluation set contains unlabeled nodes")
    chunks = []
    for piece in np.array_split(np.arange(ids.size), max(1, -(-ids.size // batch_size))):
        chunks.append((gather_batch(hops, ids[piece]), y[piece]))
    return chunks


def _evaluate_chunks(store, mcfg, chunks) -> EvalResult:
    total = sum(len(truth) for _, truth in chunks)
    correct = 0
    ce_sum = 0.0
    class_total = np.zeros(mcfg.num_classes, dtype=np.int64)
    class_hit = np.zeros(mcfg.num_classes, dtype=np.int64)
    for batch, truth in chunks:
        tape = Tape(training=False)
        out = M.forward(batch, store, mcfg, tape)
        pred = out.probs.argmax(axis=1)
        correct += int((pred == truth).sum())
        ce_sum += float(L.cross_entropy(tape, out.logits, truth).data) * len(truth)
        np.add.at(class_total, truth, 1)
        np.add.at(class_hit, truth[pred == truth], 1)
    per_class = {
        int(c): float(class_hit[c] / class_total[c])
        for c in range(mcfg.num_classes)
        if class_total[c] > 0
    }
    return EvalResult(
        accuracy=correct / total,
        per_class=per_class,
        mean_ce=ce_sum / total,
    )


def evaluate(
    store: M.ParamStore,
    mcfg: M.ModelConfig,
    hops: HopTensor,
    node_ids: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 4096,
) -> EvalResult:
    """Deterministic eval-mode accuracy, per-class accuracy and mean CE."""
    return _evaluate_chunks(store, mcfg, _gather_eval_chunks(hops, node_ids, labels, batch_size))


@dataclass
class RunReport:
    """Everything observable about one training run.

    ``peak_bytes`` is an accounting estimate: parameters + gradients + Adam
    moments + twice the largest live tape footprint (activations and their
    adjoints) + the gathered batch. Wall-clock timings are recorded but
    serialized as zero when the run was made under the determinism flag, so
    reports of identical runs are byte-identical.
    """

    train_loss: list[float]
    val_acc: list[float]
    val_ce: list[float]
    best_epoch: int
    best_val_acc: float
    best_val_ce: float
    test_acc: float
    test_ce: float
    per_class_acc: dict[int, float]
    epochs_run: int
    stopped_early: bool
    timings: dict[str, float]
    peak_bytes: int
    determinism: bool
    seed: int

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.determinism:
            doc["timings"] = {k: 0.0 for k in self.timings}
        doc["per_class_acc"] = {str(k): v for k, v in self.per_class_acc.items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _iter_batches(ids: np.ndarray, batch_size: int, min_size: int):
    """Consecutive slices of the (already shuffled) id array; an undersized
    trailing batch is folded into its predecessor when a minimum applies."""
    bounds = list(range(0, len(ids), batch_size))
    chunks = [ids[b : b + batch_size] for b in bounds]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _step_loss(batch, y, store, cfg: TrainConfig, tape: Tape):
    """Loss for one batch: plain CE, or two dropout views with an auxiliary
    objective (CE averaged over both views)."""
    if cfg.loss.ssl_kind == "none":
        out = M.forward(batch, store, cfg.model, tape)
        return L.cross_entropy(tape, out.logits, y)
    view_a = M.forward(batch, store, cfg.model, tape)
    view_b = M.forward(batch, store, cfg.model, tape)
    ce = L.cross_entropy(tape, view_a.logits, y)
    ce_b = L.cross_entropy(tape, view_b.logits, y)
    ce = A.mul_scalar(tape, A.add(tape, ce, ce_b), 0.5)
    if cfg.loss.ssl_kind == "barlow":
        ssl = L.barlow_loss(tape, view_a.hidden_tokens, view_b.hidden_tokens, cfg.loss.alpha)
    else:
        emb = A.concat(tape, [view_a.fused, view_b.fused], axis=0)
        ssl = L.scl_loss(tape, emb, np.concatenate([y, y]), cfg.loss.tau, cfg.loss.scl_normalize)
    return L.total_loss(tape, ce, ssl, cfg.loss.lam)


def train(
    hops: HopTensor,
    labels: np.ndarray,
    split,
    cfg: TrainConfig,
) -> tuple[M.ParamStore, RunReport]:
    """Train on the split's labeled train nodes; early-stop on validation
    accuracy (ties broken by lower validation CE); return the best-validation
    parameters and a full report. Deterministic given the seed."""
    cfg.validate()
    cfg.model.validate()
    labels = np.asarray(labels, dtype=np.int64)

    def _labeled(ids):
        ids = np.asarray(ids, dtype=np.int64)
        return ids[labels[ids] != UNLABELED]

    train_ids = _labeled(split.train)
    val_ids = _labeled(split.val)
    test_ids = _labeled(split.test)
    if train_ids.size == 0:
        raise ValueError("train split has no labeled nodes")
    if val_ids.size == 0 or test_ids.size == 0:
        raise ValueError("val and test splits need labeled nodes")
    if cfg.loss.ssl_kind == "barlow" and train_ids.size < 2:
        raise ConfigError("the cross-view objective needs at least 2 training nodes")
    if hops.dim != cfg.model.in_dim:
        raise ValueError(
            f"hop cache dim {hops.dim} does not match model in_dim {cfg.model.in_dim}"
        )
    if hops.num_hops < cfg.model.num_tokens:
        raise ValueError(
            f"hop cache has {hops.num_hops} slices but model needs {cfg.model.num_tokens}"
        )

    seq = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, dropout_seed = seq.spawn(3)
    init_rng = np.random.default_rng(init_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    # dropout draws one uniform per activation entry every step; SFC64 is the
    # fastest generator numpy ships and the stream is still fully seeded
    dropout_rng = np.random.Generator(np.random.SFC64(dropout_seed))

    store = M.init_params(cfg.model, init_rng)
    state = AdamState(store)
    min_batch = 2 if cfg.loss.ssl_kind == "barlow" else 1

    # single-batch epochs always see the same node set; gather it once and
    # skip the (order-irrelevant) shuffle
    full_batch = train_ids.size <= cfg.batch_size
    if full_batch:
        cached_batch = gather_batch(hops, train_ids)
        cached_labels = labels[train_ids]
    val_chunks = _gather_eval_chunks(hops, val_ids, labels, cfg.eval_batch_size)

    report_rows = {"train_loss": [], "val_acc": [], "val_ce": []}
    best = {"acc": -1.0, "ce": float("inf"), "epoch": -1, "snap": None}
    bad_epochs = 0
    stopped_early = False
    peak_tape = 0
    t_train = 0.0
    t_val = 0.0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        if full_batch:
            step_batches = [(train_ids, cached_batch, cached_labels)]
        else:
            order = shuffle_rng.permutation(train_ids.size)
            step_batches = (
                (ids, gather_batch(hops, ids), labels[ids])
                for ids in _iter_batches(train_ids[order], cfg.batch_size, min_batch)
            )
        epoch_loss = 0.0
        for bi, (batch_ids, batch, batch_labels) in enumerate(step_batches):
            tape = Tape(training=True, rng=dropout_rng, dtype=np.float32)
            loss = _step_loss(batch, batch_labels, store, cfg, tape)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            store.zero_grad()
            tape.backward(loss)
            adam_step(
                store,
                state,
                cfg.lr,
                weight_decay=cfg.weight_decay,
                decoupled=cfg.decoupled_weight_decay,
            )
            epoch_loss += lval * len(batch_ids)
            peak_tape = max(peak_tape, tape.peak_bytes)
        t_train += time.perf_counter() - t0

        t0 = time.perf_counter()
        val = _evaluate_chunks(store, cfg.model, val_chunks)
        t_val += time.perf_counter() - t0
        report_rows["train_loss"].append(epoch_loss / train_ids.size)
        report_rows["val_acc"].append(val.accuracy)
        report_rows["val_ce"].append(val.mean_ce)

        if val.accuracy > best["acc"] or (val.accuracy == best["acc"] and val.mean_ce < best["ce"]):
            best.update(acc=val.accuracy, ce=val.mean_ce, epoch=epoch, snap=store.snapshot())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_early = True
                break

    store.restore(best["snap"])
    t0 = time.perf_counter()
    test = evaluate(store, cfg.model, hops, test_ids, labels, cfg.eval_batch_size)
    t_test = time.perf_counter() - t0

    report = RunReport(
        train_loss=report_rows["train_loss"],
        val_acc=report_rows["val_acc"],
        val_ce=report_rows["val_ce"],
        best_epoch=best["epoch"],
        best_val_acc=best["acc"],
        best_val_ce=best["ce"],
        test_acc=test.accuracy,
        test_ce=test.mean_ce,
        per_class_acc=test.per_class,
        epochs_run=len(report_rows["train_loss"]),
        stopped_early=stopped_early,
        timings={"train_s": t_train, "val_eval_s": t_val, "test_eval_s": t_test},
        peak_bytes=store.nbytes() + state.nbytes() + 2 * peak_tape,
        determinism=cfg.determinism,
        seed=cfg.seed,
    )
    return store, report
