"""The hop-interaction classifier.

Four stages, all operating on a (batch, tokens, dim) stack where the tokens
are a node's 0..L hop features:

1. encode: one shared linear layer per hop slice, plus a learnable per-hop
   order embedding (so order-insensitive interaction can still tell hop 1
   from hop 5);
2. interact: K residual layers mixing the tokens, by default multi-head
   self-attention over the fully-connected token graph; ``gcn_mean``,
   ``sage``, ``mlp`` and ``none`` variants exist for ablations;
3. fuse: pool the tokens to a single vector (mean by default, max or
   attention-weighted as variants);
4. predict: linear head to class logits.

Training code differentiates through all stages via ``hopflow.autodiff``.
This module never touches graph structure.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as A
from .autodiff import Parameter, Tape, Value
from .errors import ConfigError, DataFormatError

CHECKPOINT_MAGIC = b"HGM1"

INTERACTION_KINDS = ("attention", "gcn_mean", "sage", "mlp", "none")
FUSION_KINDS = ("mean", "max", "attention")


@dataclass
class ModelConfig:
    in_dim: int = 0            # raw feature dim; filled from the hop cache
    num_classes: int = 0       # filled from the labels
    hops: int = 6
    interaction_layers: int = 2
    hidden: int = 128
    heads: int = 1
    interaction_kind: str = "attention"
    fusion_kind: str = "mean"
    use_order_embedding: bool = True
    dropout: float = 0.5
    encoder_relu: bool = False  # plain linear encoding by default

    def validate(self) -> None:
        if self.in_dim < 1 or self.num_classes < 2:
            raise ConfigError(
                f"model needs in_dim >= 1 and num_classes >= 2, got {self.in_dim}/{self.num_classes}"
            )
        if self.hops < 0:
            raise ConfigError("hops must be >= 0")
        if self.hops < 1 and self.interaction_kind != "none":
            # the degenerate single-token model is only allowed without mixing
            raise ConfigError("hops must be >= 1 unless interaction_kind='none'")
        if self.interaction_kind not in INTERACTION_KINDS:
            raise ConfigError(f"unknown interaction kind {self.interaction_kind!r}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion_kind!r}")
        if self.interaction_kind != "none" and self.interaction_layers < 1:
            raise ConfigError("need at least one interaction layer (or interaction_kind='none')")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def num_tokens(self) -> int:
        return self.hops + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


class ParamStore:
    """Ordered collection of named parameters with gradient slots."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def nbytes(self) -> int:
        return sum(p.data.nbytes + p.grad.nbytes for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, data in snap.items():
            self._params[name].data[...] = data

    def astype(self, dtype) -> "ParamStore":
        """Copy with a different dtype (float64 for gradient checks)."""
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.data.astype(dtype))
        return out


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Fresh parameters: uniform +-sqrt(6/(fan_in+fan_out)) weights, zero
    biases, zero order embedding (so training starts at the no-order model)."""
    cfg.validate()
    store = ParamStore()
    store.add("encoder.weight", _glorot(rng, (cfg.in_dim, cfg.hidden)))
    store.add("encoder.bias", np.zeros(cfg.hidden, dtype=np.float32))
    if cfg.use_order_embedding:
        store.add(
            "order_embedding",
            np.zeros((1, cfg.num_tokens, cfg.hidden), dtype=np.float32),
        )
    if cfg.interaction_kind != "none":
        head_dim = cfg.hidden // cfg.heads
        for k in range(cfg.interaction_layers):
            if cfg.interaction_kind == "attention":
                for h in range(cfg.heads):
                    store.add(f"layers.{k}.attn.q{h}", _glorot(rng, (cfg.hidden, head_dim)))
                    store.add(f"layers.{k}.attn.k{h}", _glorot(rng, (cfg.hidden, head_dim)))
                    store.add(f"layers.{k}.attn.v{h}", _glorot(rng, (cfg.hidden, head_dim)))
            elif cfg.interaction_kind == "sage":
                store.add(f"layers.{k}.mix.weight", _glorot(rng, (2 * cfg.hidden, cfg.hidden)))
                store.add(f"layers.{k}.mix.bias", np.zeros(cfg.hidden, dtype=np.float32))
            else:  # gcn_mean, mlp
                store.add(f"layers.{k}.mix.weight", _glorot(rng, (cfg.hidden, cfg.hidden)))
                store.add(f"layers.{k}.mix.bias", np.zeros(cfg.hidden, dtype=np.float32))
            store.add(f"layers.{k}.norm.gamma", np.ones(cfg.hidden, dtype=np.float32))
            store.add(f"layers.{k}.norm.beta", np.zeros(cfg.hidden, dtype=np.float32))
    if cfg.fusion_kind == "attention":
        store.add("fusion.score", _glorot(rng, (cfg.hidden, 1)))
    store.add("head.weight", _glorot(rng, (cfg.hidden, cfg.num_classes)))
    store.add("head.bias", np.zeros(cfg.num_classes, dtype=np.float32))
    return store


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of the ParamStore implied by a config."""
    d, c, t = cfg.hidden, cfg.num_classes, cfg.num_tokens
    total = cfg.in_dim * d + d          # encoder
    if cfg.use_order_embedding:
        total += t * d
    if cfg.interaction_kind != "none":
        if cfg.interaction_kind == "attention":
            per_layer = 3 * d * d       # heads * 3 * d * (d/heads)
        elif cfg.interaction_kind == "sage":
            per_layer = 2 * d * d + d
        else:
            per_layer = d * d + d
        per_layer += 2 * d              # layer norm affine
        total += cfg.interaction_layers * per_layer
    if cfg.fusion_kind == "attention":
        total += d
    total += d * c + c                  # head
    return total


# ---------------------------------------------------------------------------
# forward stages


@dataclass
class ModelOutput:
    logits: Value
    probs: np.ndarray
    hidden_tokens: Value  # post-interaction token stack, SSL consumes this
    fused: Value          # pooled representation


def encode_hops(batch: np.ndarray, store: ParamStore, cfg: ModelConfig, tape: Tape) -> Value:
    """Shared linear encoding of every hop slice plus the order embedding.

    Input dropout is applied in training mode before the encoder.
    """
    b, t, d_in = batch.shape
    if t != cfg.num_tokens:
        raise ValueError(f"batch has {t} hop tokens but model expects {cfg.num_tokens}")
    if d_in != cfg.in_dim:
        raise ValueError(f"batch feature dim {d_in} does not match encoder in_dim {cfg.in_dim}")
    x = A.dropout(tape, tape.leaf(batch, needs_grad=False), cfg.dropout)
    flat = A.reshape(tape, x, (b * t, d_in))
    enc = A.linear(tape, flat, tape.param(store["encoder.weight"]), tape.param(store["encoder.bias"]))
    if cfg.encoder_relu:
        enc = A.relu(tape, enc)
    h = A.reshape(tape, enc, (b, t, cfg.hidden))
    if cfg.use_order_embedding:
        h = A.add(tape, h, tape.param(store["order_embedding"]))
    return h


def interaction_core(
    h: Value, store: ParamStore, cfg: ModelConfig, tape: Tape, layer: int,
    return_weights: bool = False,
):
    """One token-mixing step plus the residual, before normalization."""
    kind = cfg.interaction_kind
    if kind not in INTERACTION_KINDS:
        raise ValueError(f"unknown interaction kind {kind!r}")
    b, t, d = h.shape
    weights = None
    if kind == "none":
        return (h, None) if return_weights else h
    if kind == "attention":
        wq = [tape.param(store[f"layers.{layer}.attn.q{i}"]) for i in range(cfg.heads)]
        wk = [tape.param(store[f"layers.{layer}.attn.k{i}"]) for i in range(cfg.heads)]
        wv = [tape.param(store[f"layers.{layer}.attn.v{i}"]) for i in range(cfg.heads)]
        mixed, weights = A.multi_head_attention(tape, h, wq, wk, wv, return_weights=True)
    else:
        w = tape.param(store[f"layers.{layer}.mix.weight"])
        bias = tape.param(store[f"layers.{layer}.mix.bias"])
        if kind == "gcn_mean":
            # every token listens to the mean of all tokens (dense convolution)
            pooled = A.reduce_mean(tape, h, axis=1, keepdims=False)
            mixed_2d = A.linear(tape, pooled, w, bias)
            mixed = A.reshape(tape, mixed_2d, (b, 1, d))  # broadcast over tokens in the add
        elif kind == "sage":
            total = A.reduce_sum(tape, h, axis=1, keepdims=True)
            others = A.mul_scalar(tape, A.sub(tape, total, h), 1.0 / (t - 1)) if t > 1 else \
                A.mul_scalar(tape, h, 0.0)
            cat = A.concat(tape, [h, others], axis=-1)
            mixed_2d = A.linear(tape, A.reshape(tape, cat, (b * t, 2 * d)), w, bias)
            mixed = A.reshape(tape, mixed_2d, (b, t, d))
        else:  # mlp
            mixed_2d = A.relu(tape, A.linear(tape, A.reshape(tape, h, (b * t, d)), w, bias))
            mixed = A.reshape(tape, mixed_2d, (b, t, d))
    out = A.add(tape, h, mixed)
    return (out, weights) if return_weights else out


def interaction_layer(h: Value, store: ParamStore, cfg: ModelConfig, tape: Tape, layer: int) -> Value:
    """Residual token mixing, post-norm, then dropout (training mode)."""
    if cfg.interaction_kind == "none":
        return h
    core = interaction_core(h, store, cfg, tape, layer)
    normed = A.layer_norm(
        tape,
        core,
        tape.param(store[f"layers.{layer}.norm.gamma"]),
        tape.param(store[f"layers.{layer}.norm.beta"]),
    )
    return A.dropout(tape, normed, cfg.dropout)


def fuse(h: Value, store: ParamStore, cfg: ModelConfig, tape: Tape) -> Value:
    """Pool the token axis to one vector per node."""
    if cfg.fusion_kind == "mean":
        return A.mean_pool(tape, h, axis=1)
    if cfg.fusion_kind == "max":
        return A.max_pool(tape, h, axis=1)
    if cfg.fusion_kind == "attention":
        b, t, d = h.shape
        score_w = tape.param(store["fusion.score"])
        scores = A.reshape(tape, A.linear(tape, A.reshape(tape, h, (b * t, d)), score_w), (b, t))
        w = A.softmax(tape, scores, axis=-1)
        weighted = A.mul(tape, h, A.reshape(tape, w, (b, t, 1)))
        return A.reduce_sum(tape, weighted, axis=1)
    raise ValueError(f"unknown fusion kind {cfg.fusion_kind!r}")


def predict(z: Value, store: ParamStore, tape: Tape) -> tuple[Value, np.ndarray]:
    """Class logits and softmax probabilities; losses consume the logits."""
    logits = A.linear(tape, z, tape.param(store["head.weight"]), tape.param(store["head.bias"]))
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    return logits, probs


def forward(batch: np.ndarray, store: ParamStore, cfg: ModelConfig, tape: Tape) -> ModelOutput:
    """Full pipeline: encode -> K interaction layers -> fuse -> predict."""
    h = encode_hops(batch, store, cfg, tape)
    if cfg.interaction_kind != "none":
        for k in range(cfg.interaction_layers):
            h = interaction_layer(h, store, cfg, tape, k)
    z = fuse(h, store, cfg, tape)
    logits, probs = predict(z, store, tape)
    return ModelOutput(logits=logits, probs=probs, hidden_tokens=h, fused=z)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, store: ParamStore, cfg: ModelConfig) -> None:
    """Serialize config and parameters; round-trips bit-exactly."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(store.names())))
        for name in store.names():
            p = store[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamStore, ModelConfig]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4
    try:
        (blob_len,) = struct.unpack_from("<Q", raw, off)
        off += 8
        cfg = ModelConfig.from_dict(json.loads(raw[off : off + blob_len].decode("utf-8")))
        off += blob_len
        (count,) = struct.unpack_from("<Q", raw, off)
        off += 8
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<Q", raw, off)
            off += 8
            name = raw[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", raw, off)
            off += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += size * 4
            store.add(name, data.copy())
    except (struct.error, ValueError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: truncated or corrupt checkpoint: {exc}") from None
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return store, cfg
