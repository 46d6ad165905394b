"""Training objectives: supervised cross-entropy, a redundancy-reduction
auxiliary loss over two dropout views, and a supervised contrastive variant.

All functions build on the autodiff tape and return scalar Values. The
auxiliary losses consume two stochastic forward passes of the same batch
(independent dropout masks); no graph-level augmentation exists anywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as A
from .autodiff import Tape, Value, apply_op
from .errors import ConfigError

SSL_KINDS = ("none", "barlow", "scl")

# biased (1/b) variance with this eps guards the per-dimension standardization
STANDARDIZE_EPS = 1e-5


@dataclass
class LossConfig:
    ssl_kind: str = "none"
    lam: float = 5e-4          # auxiliary task weight
    alpha: float = 0.1         # decorrelation strength (barlow)
    tau: float = 0.5           # temperature (scl)
    scl_normalize: bool = True  # length-normalize embeddings before scl

    def validate(self) -> None:
        if self.ssl_kind not in SSL_KINDS:
            raise ConfigError(f"unknown ssl kind {self.ssl_kind!r}")
        if self.lam < 0:
            raise ConfigError("auxiliary weight must be >= 0")
        if self.alpha < 0:
            raise ConfigError("decorrelation weight must be >= 0")
        if self.tau <= 0:
            raise ConfigError("temperature must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "LossConfig":
        doc = dict(doc)
        if "lambda" in doc:  # accept the mathematical name as an alias
            doc["lam"] = doc.pop("lambda")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**doc)


def cross_entropy(tape: Tape, logits: Value, labels: np.ndarray, mask: np.ndarray | None = None) -> Value:
    """Mean negative log-likelihood over the masked rows, via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(logits.shape[0]) if mask is None else np.asarray(mask, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("cross entropy needs a non-empty node mask")
    x = logits.data[rows]
    y = labels[rows] if mask is not None else labels
    c = logits.shape[1]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    nll = (m + np.log(s)).squeeze(1) - x[np.arange(len(y)), y]
    out = np.asarray(nll.mean(), dtype=tape.dtype)

    def vjp(g):
        if not logits.needs_grad:
            return
        soft = e / s
        soft[np.arange(len(y)), y] -= 1.0
        d = np.zeros_like(logits.data)
        np.add.at(d, rows, soft * (g / len(y)))
        logits.accumulate(d)

    return apply_op(tape, out, (logits,), vjp)


def _standardize_columns(tape: Tape, x: Value) -> Value:
    mu = A.reduce_mean(tape, x, axis=0, keepdims=True)
    centered = A.sub(tape, x, mu)
    var = A.reduce_mean(tape, A.mul(tape, centered, centered), axis=0, keepdims=True)
    std = A.sqrt(tape, A.add_scalar(tape, var, STANDARDIZE_EPS))
    return A.div(tape, centered, std)


def barlow_loss(tape: Tape, view_a: Value, view_b: Value, alpha: float) -> Value:
    """Pull the view cross-correlation matrix toward identity.

    Views are flattened to (batch, features), each feature standardized
    across the batch, then C = A^T B / batch. The loss is the squared
    diagonal deviation from 1 plus alpha times the squared off-diagonals.
    """
    if view_a.data.ndim == 3:
        view_a = A.flatten_tokens(tape, view_a)
    if view_b.data.ndim == 3:
        view_b = A.flatten_tokens(tape, view_b)
    if view_a.shape != view_b.shape:
        raise ValueError(f"views disagree: {view_a.shape} vs {view_b.shape}")
    b, dim = view_a.shape
    if b < 2:
        raise ValueError("need a batch of >= 2 for cross-view correlation")
    a_std = _standardize_columns(tape, view_a)
    b_std = _standardize_columns(tape, view_b)
    corr = A.mul_scalar(tape, A.matmul(tape, A.transpose2d(tape, a_std), b_std), 1.0 / b)
    dev = A.sub_const(tape, corr, np.eye(dim))
    weights = np.full((dim, dim), alpha)
    np.fill_diagonal(weights, 1.0)
    return A.reduce_sum(tape, A.mul_const(tape, A.mul(tape, dev, dev), weights))


def scl_loss(tape: Tape, embeddings: Value, labels: np.ndarray, tau: float,
             normalize: bool = True) -> Value:
    """Supervised contrastive loss over a (2*batch, dim) two-view stack.

    For each anchor, positives are the other rows sharing its label; each
    anchor contributes the mean over positives of -log softmax(sim/tau)
    restricted to all-but-self. Anchors without positives are skipped with a
    warning. Embeddings are length-normalized first unless disabled.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    labels = np.asarray(labels, dtype=np.int64)
    m = embeddings.shape[0]
    if labels.shape != (m,):
        raise ValueError(f"need one label per embedding row, got {labels.shape} for {m} rows")
    if normalize:
        sq = A.reduce_sum(tape, A.mul(tape, embeddings, embeddings), axis=-1, keepdims=True)
        embeddings = A.div(tape, embeddings, A.sqrt(tape, A.add_scalar(tape, sq, 1e-12)))
    sims = A.mul_scalar(
        tape, A.matmul(tape, embeddings, A.transpose2d(tape, embeddings)), 1.0 / tau
    )
    self_block = np.zeros((m, m))
    np.fill_diagonal(self_block, np.inf)
    lse = A.logsumexp(tape, A.sub_const(tape, sims, self_block), axis=1)
    pos = (labels[:, None] == labels[None, :]).astype(float)
    np.fill_diagonal(pos, 0.0)
    counts = pos.sum(axis=1)
    anchors = counts > 0
    if not anchors.all():
        warnings.warn(
            f"{int((~anchors).sum())} anchor(s) have no positive pair and are skipped",
            stacklevel=2,
        )
    safe = np.where(anchors, counts, 1.0)
    pos_mean = A.mul_const(tape, A.reduce_sum(tape, A.mul_const(tape, sims, pos), axis=1), 1.0 / safe)
    per_anchor = A.sub(tape, lse, pos_mean)
    return A.reduce_sum(tape, A.mul_const(tape, per_anchor, anchors.astype(float)))


def total_loss(tape: Tape, ce: Value, ssl: Value | None = None, lam: float = 0.0) -> Value:
    """Supervised loss plus lam times the auxiliary loss."""
    if ssl is None or lam == 0.0:
        return ce
    return A.add(tape, ce, A.mul_scalar(tape, ssl, lam))
