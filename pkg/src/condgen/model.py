"""Unified conditioned transformer.

One post-norm transformer stack serves as encoder and decoder: the attention
mask decides which positions see which. The last ``num_condition_layers``
blocks are condition-aware and add a per-position condition bias to the
attention output, computed by attention routing over two routes (the
condition route with key/value ``k^c, v^c`` and the generic route with key
``k^g`` and a fixed zero value). Two parametric-gate variants are kept for
ablation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor

GATE_VARIANTS = ("attention_routing", "single_gate", "double_gates")
NONE = None  # unconditioned forward
CHECKPOINT_FORMAT = "condgen-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_size: int | None = None
    max_length: int = 80
    num_condition_layers: int = 2
    num_conditions: int = 0
    dropout_p: float = 0.1
    gate_variant: str = "attention_routing"
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.ffn_size is None:
            self.ffn_size = 4 * self.hidden_size
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if not 0 <= self.num_condition_layers <= self.num_layers:
            raise ConfigError(
                f"num_condition_layers {self.num_condition_layers} must be in [0, {self.num_layers}]"
            )
        if self.gate_variant not in GATE_VARIANTS:
            raise ConfigError(f"unknown gate variant {self.gate_variant!r}; expected one of {GATE_VARIANTS}")
        if self.vocab_size < 1 or self.max_length < 2 or self.num_conditions < 0:
            raise ConfigError("vocab_size, max_length and num_conditions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class InputEncoding:
    """One packed sequence.

    ``attention_mask`` is an n x n array of 0 / -inf; ``type_ids`` is 0 on the
    source side and 1 on the target side.
    """

    token_ids: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    attention_mask: np.ndarray
    condition_id: int | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.position_ids = np.asarray(self.position_ids, dtype=np.int64)
        self.type_ids = np.asarray(self.type_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.float64)

    def __len__(self):
        return len(self.token_ids)

    @property
    def target_side(self) -> np.ndarray:
        return self.type_ids == 1


@dataclass
class Batch:
    """Padded stack of encodings. Padding rows attend only to themselves."""

    token_ids: np.ndarray  # [B, n]
    position_ids: np.ndarray
    type_ids: np.ndarray
    attention_mask: np.ndarray  # [B, n, n]
    condition_ids: np.ndarray  # [B], -1 for NONE
    lengths: np.ndarray

    def __len__(self):
        return self.token_ids.shape[0]

    @property
    def target_side(self) -> np.ndarray:
        pad = np.arange(self.token_ids.shape[1])[None, :] >= self.lengths[:, None]
        return (self.type_ids == 1) & ~pad


def collate(encodings: list[InputEncoding], pad_id: int = 0) -> Batch:
    B = len(encodings)
    n = max(len(e) for e in encodings)
    tok = np.full((B, n), pad_id, dtype=np.int64)
    pos = np.zeros((B, n), dtype=np.int64)
    typ = np.zeros((B, n), dtype=np.int64)
    mask = np.full((B, n, n), -np.inf)
    cond = np.full(B, -1, dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, e in enumerate(encodings):
        m = len(e)
        tok[b, :m] = e.token_ids
        pos[b, :m] = e.position_ids
        typ[b, :m] = e.type_ids
        mask[b, :m, :m] = e.attention_mask
        idx = np.arange(m, n)
        mask[b, idx, idx] = 0.0
        if e.condition_id is not None:
            cond[b] = e.condition_id
        lengths[b] = m
    return Batch(tok, pos, typ, mask, cond, lengths)


def condition_bias_mask(target_side: np.ndarray, has_condition: np.ndarray | None = None) -> np.ndarray:
    """M_b as ``[..., n, 2]``: column 0 is the condition route, column 1 the generic route.

    The condition route is blocked (-inf) on source positions, and on every
    position of a sample without a condition. The generic route is never blocked.
    """
    open_ = np.asarray(target_side, dtype=bool)
    if has_condition is not None:
        open_ = open_ & np.asarray(has_condition, dtype=bool)[..., None]
    mb = np.zeros(open_.shape + (2,))
    mb[..., 0] = np.where(open_, 0.0, -np.inf)
    return mb


# ---------------------------------------------------------------- parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """BERT-style init: truncated normal weights, zero biases, unit LayerNorm gains."""
    d, f, std = config.hidden_size, config.ffn_size, config.init_std
    p: dict[str, np.ndarray] = {
        "tok_emb": _trunc_normal(rng, (config.vocab_size, d), std),
        "pos_emb": _trunc_normal(rng, (config.max_length, d), std),
        "type_emb": _trunc_normal(rng, (2, d), std),
    }
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + name] = _trunc_normal(rng, (d, d), std)
            p[pre + "attn.b" + name[1]] = np.zeros(d)
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "ffn.w1"] = _trunc_normal(rng, (d, f), std)
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = _trunc_normal(rng, (f, d), std)
        p[pre + "ffn.b2"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
    p["lm_bias"] = np.zeros(config.vocab_size)
    if config.num_conditions:
        # one table shared by every condition-aware layer; v^g is implicit zero
        p["cond.keys"] = _trunc_normal(rng, (config.num_conditions, d), std)
        p["cond.values"] = _trunc_normal(rng, (config.num_conditions, d), std)
        p["cond.generic_key"] = _trunc_normal(rng, (d,), std)
        if config.gate_variant == "single_gate":
            p["gate.c.w"] = _trunc_normal(rng, (d, 1), std)
            p["gate.c.b"] = np.zeros(1)
        elif config.gate_variant == "double_gates":
            p["gate.c.w"] = _trunc_normal(rng, (d, 1), std)
            p["gate.c.b"] = np.zeros(1)
            p["gate.v.w"] = _trunc_normal(rng, (d, 1), std)
            p["gate.v.b"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def count_parameters(params: dict[str, Tensor], prefix: str | None = None) -> int:
    return int(np.sum([t.size for k, t in params.items() if prefix is None or k.startswith(prefix)]))


@dataclass
class ConditionTable:
    """View of the shared condition parameters.

    Trainable size is ``(2C + 1) * d_h``: a key and a value per condition plus
    the generic key. The generic value is the constant zero vector.
    """

    keys: Tensor
    values: Tensor
    generic_key: Tensor

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> "ConditionTable":
        return cls(params["cond.keys"], params["cond.values"], params["cond.generic_key"])

    @property
    def generic_value(self) -> np.ndarray:
        return np.zeros(self.keys.shape[1])

    def num_parameters(self) -> int:
        return self.keys.size + self.values.size + self.generic_key.size


# -------------------------------------------------------------------- layers


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y if b is None else y + b


def embed(batch: Batch, params: dict[str, Tensor]) -> Tensor:
    """H0 = token + position + type embeddings, ``[B, n, d]``."""
    tok = T.embedding(params["tok_emb"], batch.token_ids)
    pos = T.embedding(params["pos_emb"], batch.position_ids)
    typ = T.embedding(params["type_emb"], batch.type_ids)
    return tok + pos + typ


def masked_multi_head_attention(
    H: Tensor,
    mask: np.ndarray,
    params: dict[str, Tensor],
    layer: int,
    config: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + M) V per head, concatenated and projected."""
    B, n, d = H.shape
    h, dk = config.num_heads, config.head_dim
    pre = f"layers.{layer}.attn."

    def heads(name):
        x = _linear(H, params[pre + "w" + name], params[pre + "b" + name])
        return x.reshape(B, n, h, dk).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    probs = T.softmax_lastdim(scores, mask[:, None, :, :])
    probs = T.dropout(probs, config.dropout_p, rng, training)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    return _linear(ctx, params[pre + "wo"], params[pre + "bo"])


def attention_routing(
    C: Tensor,
    condition_ids: np.ndarray,
    table: ConditionTable,
    mb: np.ndarray,
    config: ModelConfig,
) -> Tensor:
    """Position-wise condition bias by attention over {condition, generic} routes.

    ``mb`` is the ``[B, n, 2]`` route mask. Returns B^i ``[B, n, d]`` where
    row t equals ``w_t * v^c`` (the generic value is zero).
    """
    B, n, d = C.shape
    ids = np.maximum(condition_ids, 0)
    kc = T.embedding(table.keys, ids).reshape(B, d, 1)
    vc = T.embedding(table.values, ids).reshape(B, 1, d)
    s_cond = (C @ kc).reshape(B, n)
    s_gen = (C @ table.generic_key.reshape(d, 1)).reshape(B, n)
    logits = T.stack([s_cond, s_gen], axis=-1) * (1.0 / math.sqrt(config.head_dim))
    weights = T.softmax_lastdim(logits, mb)
    return weights[..., 0:1] * vc


def routing_weights(C: Tensor, condition_ids, table: ConditionTable, mb, config: ModelConfig) -> np.ndarray:
    """Condition-route weight w_t for inspection, ``[B, n]``."""
    with T.no_grad():
        B, n, d = C.shape
        ids = np.maximum(np.asarray(condition_ids), 0)
        s_cond = np.einsum("bnd,bd->bn", C.data, table.keys.data[ids])
        s_gen = C.data @ table.generic_key.data
        logits = np.stack([s_cond, s_gen], -1) / math.sqrt(config.head_dim) + mb
        out = T.softmax_lastdim(Tensor(logits))
    return out.data[..., 0]


def parametric_gate_bias(
    C: Tensor,
    condition_ids: np.ndarray,
    table: ConditionTable,
    mb: np.ndarray,
    variant: str,
    params: dict[str, Tensor],
) -> tuple[Tensor | None, Tensor]:
    """Gate-based alternatives to attention routing.

    Returns ``(scale, bias)`` so that the combined output is
    ``scale * C + bias`` (``scale`` is ``None`` for the single gate, meaning 1).
    Positions whose condition route is blocked in ``mb`` get zero bias and
    scale 1.
    """
    if variant not in ("single_gate", "double_gates"):
        raise ConfigError(f"unknown gate variant {variant!r}")
    B, n, d = C.shape
    ids = np.maximum(condition_ids, 0)
    vc = T.embedding(table.values, ids)  # [B, d]
    open_ = np.isfinite(mb[..., 0])[..., None].astype(np.float64)  # [B, n, 1]
    w = T.sigmoid(_linear(C, params["gate.c.w"], params["gate.c.b"]))  # [B, n, 1]
    if variant == "single_gate":
        return None, (w * open_) * vc.reshape(B, 1, d)
    u = T.sigmoid(_linear(vc, params["gate.v.w"], params["gate.v.b"])).reshape(B, 1, 1)
    scale = (w - 1.0) * open_ + 1.0
    bias = (u * open_) * vc.reshape(B, 1, d)
    return scale, bias


def _combine_condition(C: Tensor, C_drop: Tensor, batch: Batch, params, config: ModelConfig) -> Tensor:
    has = batch.condition_ids >= 0
    if not config.num_conditions or not has.any():
        return C_drop
    table = ConditionTable.from_params(params)
    mb = condition_bias_mask(batch.target_side, has)
    if config.gate_variant == "attention_routing":
        return C_drop + attention_routing(C, batch.condition_ids, table, mb, config)
    scale, bias = parametric_gate_bias(C, batch.condition_ids, table, mb, config.gate_variant, params)
    return (C_drop if scale is None else C_drop * scale) + bias


def transformer_block(
    H: Tensor,
    batch: Batch,
    params: dict[str, Tensor],
    layer: int,
    config: ModelConfig,
    *,
    condition_aware: bool = False,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Post-norm block: X = LN(H + C'), out = LN(X + FFN(X)).

    For a condition-aware block C' adds the condition bias to the attention
    output; otherwise C' is the attention output itself.
    """
    pre = f"layers.{layer}."
    C = masked_multi_head_attention(H, batch.attention_mask, params, layer, config, training=training, rng=rng)
    C_drop = T.dropout(C, config.dropout_p, rng, training)
    if condition_aware:
        C_drop = _combine_condition(C, C_drop, batch, params, config)
    eps = config.layer_norm_eps
    X = T.layer_norm(H + C_drop, params[pre + "ln1.g"], params[pre + "ln1.b"], eps)
    F = _linear(T.gelu(_linear(X, params[pre + "ffn.w1"], params[pre + "ffn.b1"])),
                params[pre + "ffn.w2"], params[pre + "ffn.b2"])
    F = T.dropout(F, config.dropout_p, rng, training)
    return T.layer_norm(X + F, params[pre + "ln2.g"], params[pre + "ln2.b"], eps)


def condition_aware_block(H, batch, params, layer, config, *, training=False, rng=None) -> Tensor:
    return transformer_block(H, batch, params, layer, config, condition_aware=True, training=training, rng=rng)


def hidden_states(
    batch: Batch,
    params: dict[str, Tensor],
    config: ModelConfig,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if batch.token_ids.shape[1] > config.max_length:
        raise LengthError(f"sequence length {batch.token_ids.shape[1]} exceeds max_length {config.max_length}")
    H = T.dropout(embed(batch, params), config.dropout_p, rng, training)
    first_cond = config.num_layers - config.num_condition_layers
    for i in range(config.num_layers):
        H = transformer_block(H, batch, params, i, config, condition_aware=i >= first_cond,
                              training=training, rng=rng)
    return H


def forward(
    batch: Batch | InputEncoding,
    params: dict[str, Tensor],
    config: ModelConfig,
    *,
    select: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits over the vocabulary.

    Without ``select`` the result is ``[B, n, V]`` (``[n, V]`` for a single
    encoding). ``select`` is a boolean ``[B, n]`` array; only those positions
    are scored, giving ``[N, V]`` in row-major order.
    """
    single = isinstance(batch, InputEncoding)
    if single:
        batch = collate([batch])
    H = hidden_states(batch, params, config, training=training, rng=rng)
    if select is not None:
        B, n, d = H.shape
        H = H.reshape(B * n, d)[np.flatnonzero(np.asarray(select).reshape(-1))]
    logits = H @ T.transpose(params["tok_emb"]) + params["lm_bias"]
    if single and select is None:
        logits = logits.reshape(logits.shape[1:])
    return logits


class ConditionedTransformer:
    """Config plus named parameters, with convenience wrappers."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, np.random.default_rng(seed))

    def __call__(self, batch, **kw) -> Tensor:
        return forward(batch, self.params, self.config, **kw)

    def num_parameters(self) -> int:
        return count_parameters(self.params)

    def condition_parameter_count(self) -> int:
        return count_parameters(self.params, "cond.")


# --------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Everything needed to resume training or decode.

    On disk this is one ``.npz`` archive: a ``meta`` entry holding UTF-8 JSON
    (format tag, version, model config, vocabulary tokens, condition labels,
    step, free-form extras) and one float64 array per parameter under
    ``param/<name>``. Optimizer moments live under ``opt/m/<name>`` and
    ``opt/v/<name>`` with the optimizer step in ``opt/step``.
    """

    config: ModelConfig
    params: dict[str, Tensor]
    vocab: list[str]
    conditions: list[str]
    step: int = 0
    optimizer_state: dict[str, Any] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def model(self) -> ConditionedTransformer:
        return ConditionedTransformer(self.config, self.params)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab,
        "conditions": ckpt.conditions,
        "step": int(ckpt.step),
        "extra": ckpt.extra,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for k, t in ckpt.params.items():
        arrays["param/" + k] = t.data
    if ckpt.optimizer_state:
        arrays["opt/step"] = np.asarray(ckpt.optimizer_state["step"], dtype=np.int64)
        for k, a in ckpt.optimizer_state["m"].items():
            arrays["opt/m/" + k] = a
        for k, a in ckpt.optimizer_state["v"].items():
            arrays["opt/v/" + k] = a
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if meta["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {meta['version']} is newer than supported")
        params = {}
        opt = {"m": {}, "v": {}, "step": 0}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                params[name] = Tensor(z[key], requires_grad=True, name=name)
            elif key.startswith("opt/m/"):
                opt["m"][key[6:]] = z[key].copy()
            elif key.startswith("opt/v/"):
                opt["v"][key[6:]] = z[key].copy()
            elif key == "opt/step":
                opt["step"] = int(z[key])
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        params=params,
        vocab=meta["vocab"],
        conditions=meta["conditions"],
        step=meta["step"],
        optimizer_state=opt if opt["m"] else None,
        extra=meta.get("extra", {}),
    )
