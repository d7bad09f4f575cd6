"""
Pre-norm decoder-only transformer over packed (source, register, target) sequences.

Parameters live in a flat, ordered name -> Tensor dict so the optimizer and
the checkpoint format can walk them uniformly. The output projection is the
token embedding itself (tied). Optional LoRA adapters add a low-rank update to
the query and value projections of every layer.

Besides the batched training forward, the module exposes the two pieces the
cached decoder needs: `encode_prefix` (one pass over x' ++ r that fills the
per-layer key/value cache) and `decode_step` (one generated token).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

import tensor as T
from errors import ConfigError, LengthError
from layout import PackedBatch, PackedSequence, SequenceLayout, Variant, build_mask, pack_batch
from tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Transformer shape; desk-scale defaults."""
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    attention_dropout: float = 0.1
    max_positions: int = 256
    variant: str = "registering"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        if self.d_ff < self.d_model:
            raise ConfigError(f"d_ff {self.d_ff} must be >= d_model {self.d_model}")
        if self.vocab_size < 1 or self.n_layers < 1:
            raise ConfigError("vocab_size and n_layers must be positive")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.attention_dropout < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        self.variant = str(Variant.parse(self.variant))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# ------------------------------
# Parameters
# ------------------------------

def _layer_shapes(config: ModelConfig) -> Dict[str, tuple]:
    d, f = config.d_model, config.d_ff
    return {
        "ln1.gain": (d,), "ln1.bias": (d,),
        "attn.q.weight": (d, d), "attn.q.bias": (d,),
        "attn.k.weight": (d, d), "attn.k.bias": (d,),
        "attn.v.weight": (d, d), "attn.v.bias": (d,),
        "attn.o.weight": (d, d), "attn.o.bias": (d,),
        "ln2.gain": (d,), "ln2.bias": (d,),
        "ff1.weight": (d, f), "ff1.bias": (f,),
        "ff2.weight": (f, d), "ff2.bias": (d,),
    }


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Ordered name -> shape of every base parameter."""
    shapes = {"embed": (config.vocab_size, config.d_model)}
    for i in range(config.n_layers):
        for name, shape in _layer_shapes(config).items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["final_ln.gain"] = (config.d_model,)
    shapes["final_ln.bias"] = (config.d_model,)
    return shapes


@dataclass
class LoraAdapter:
    """Low-rank query/value updates: delta(x) = (x @ A) @ B * alpha / rank."""
    rank: int
    alpha: float
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


class ModelParams:
    """All learned tensors of one model plus the optional LoRA adapter."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ConfigError(f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"parameter '{name}' has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors
        self.lora: Optional[LoraAdapter] = None
        self.frozen = False
        for name, t in tensors.items():
            t.name = name
            t.requires_grad = True

    @property
    def output_projection(self) -> Tensor:
        """Tied to the token embedding: the very same tensor object."""
        return self.tensors["embed"]

    def layer(self, i: int) -> Dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {name[len(prefix):]: t for name, t in self.tensors.items() if name.startswith(prefix)}

    def lora_pair(self, i: int, proj: str):
        if self.lora is None:
            return None
        return (self.lora.tensors[f"layers.{i}.attn.{proj}.lora_a"],
                self.lora.tensors[f"layers.{i}.attn.{proj}.lora_b"])

    def trainable(self) -> Dict[str, Tensor]:
        """Tensors the optimizer updates: adapters when frozen, else the base."""
        if self.frozen:
            return dict(self.lora.tensors) if self.lora else {}
        return dict(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """
    Deterministic initialization.

    Weights and the embedding ~ N(0, 0.02); biases and layer-norm biases 0;
    layer-norm gains 1.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(data)
    params = ModelParams(config, tensors)
    logger.debug("Initialized %d parameters (seed %d)", params.count(), seed)
    return params


def attach_lora(params: ModelParams, rank: int, seed: int, alpha: float = 16.0) -> LoraAdapter:
    """
    Add query/value adapters to every layer and freeze the base parameters.

    A ~ N(0, 0.02) and B = 0, so the adapted model starts out identical to the
    base model.
    """
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    d = params.config.d_model
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(rank=rank, alpha=float(alpha))
    for i in range(params.config.n_layers):
        for proj in ("q", "v"):
            a_name = f"layers.{i}.attn.{proj}.lora_a"
            b_name = f"layers.{i}.attn.{proj}.lora_b"
            adapter.tensors[a_name] = Tensor(rng.normal(0.0, INIT_STD, size=(d, rank)),
                                             requires_grad=True, name=a_name)
            adapter.tensors[b_name] = Tensor(np.zeros((rank, d)), requires_grad=True, name=b_name)
    params.lora = adapter
    params.frozen = True
    for t in params.tensors.values():
        t.requires_grad = False
    logger.info("Attached LoRA rank %d (alpha %g): %d trainable parameters",
                rank, alpha, adapter.trainable_count)
    return adapter


# ------------------------------
# Building blocks
# ------------------------------

def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)


def _projection(params: ModelParams, i: int, layer: Dict[str, Tensor], proj: str, h: Tensor) -> Tensor:
    out = _linear(h, layer[f"attn.{proj}.weight"], layer[f"attn.{proj}.bias"])
    pair = params.lora_pair(i, proj) if proj in ("q", "v") else None
    if pair is not None:
        delta = T.matmul(T.matmul(h, pair[0]), pair[1])
        out = T.add(out, T.mul(delta, params.lora.scaling))
    return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, L, d] -> [B, H, L, d/H]"""
    B, L, d = x.shape
    return T.transpose(T.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def _embed(params: ModelParams, tokens: np.ndarray, offset: int) -> Tensor:
    d = params.config.d_model
    x = T.mul(T.embedding(params.tensors["embed"], tokens), math.sqrt(d))
    return T.add(x, T.sinusoidal_positions(offset, tokens.shape[-1], d))


def _feed_forward(layer: Dict[str, Tensor], x: Tensor) -> Tensor:
    h = T.layer_norm(x, layer["ln2.gain"], layer["ln2.bias"])
    return _linear(T.relu(_linear(h, layer["ff1.weight"], layer["ff1.bias"])),
                   layer["ff2.weight"], layer["ff2.bias"])


def _output_logits(params: ModelParams, x: Tensor) -> Tensor:
    h = T.layer_norm(x, params.tensors["final_ln.gain"], params.tensors["final_ln.bias"])
    return T.matmul(h, T.transpose(params.output_projection, (1, 0)))


@dataclass
class Capture:
    """Optional recording of per-layer attention (head-resolved) and hidden states."""
    attention: List[np.ndarray] = field(default_factory=list)  # n_layers x [B, H, L, L]
    hidden: List[np.ndarray] = field(default_factory=list)     # (n_layers + 1) x [B, L, d]


def forward(params: ModelParams, batch: PackedBatch, train: bool = False,
            rng: Optional[np.random.Generator] = None,
            capture: Optional[Capture] = None) -> Tensor:
    """
    Logits for every slot of a packed batch.

    Args:
        params: model parameters
        batch: packed token ids, masks and layouts
        train: enables residual and attention dropout
        rng: dropout randomness (required when train and dropout > 0)
        capture: filled with attention probabilities and hidden states

    Returns:
        tensor [B, L, V]

    Raises:
        LengthError: L exceeds max_positions
    """
    config = params.config
    B, L = batch.tokens.shape
    if L > config.max_positions:
        raise LengthError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    mask = batch.masks[:, None, :, :]
    scale = 1.0 / math.sqrt(config.head_dim)

    x = T.dropout(_embed(params, batch.tokens, 0), config.dropout, rng, train)
    if capture is not None:
        capture.hidden.append(x.data.copy())
    for i in range(config.n_layers):
        layer = params.layer(i)
        h = T.layer_norm(x, layer["ln1.gain"], layer["ln1.bias"])
        q = _split_heads(_projection(params, i, layer, "q", h), config.n_heads)
        k = _split_heads(_projection(params, i, layer, "k", h), config.n_heads)
        v = _split_heads(_projection(params, i, layer, "v", h), config.n_heads)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
        probs = T.masked_softmax(scores, mask)
        if capture is not None:
            capture.attention.append(probs.data.copy())
        probs = T.dropout(probs, config.attention_dropout, rng, train)
        attended = _linear(_merge_heads(T.matmul(probs, v)), layer["attn.o.weight"], layer["attn.o.bias"])
        x = T.add(x, T.dropout(attended, config.dropout, rng, train))
        x = T.add(x, T.dropout(_feed_forward(layer, x), config.dropout, rng, train))
        if capture is not None:
            capture.hidden.append(x.data.copy())
    return _output_logits(params, x)


def _single_batch(inputs: Union[PackedSequence, PackedBatch]) -> PackedBatch:
    if isinstance(inputs, PackedBatch):
        return inputs
    return pack_batch([inputs], pad_id=0)


@T.no_grad()
def extract_attention(params: ModelParams, inputs: Union[PackedSequence, PackedBatch], layer: int,
                      head: Union[int, str] = "all") -> np.ndarray:
    """
    Post-softmax attention of one layer, [L, L] for a single sequence
    ([B, L, L] for a batch).

    Args:
        layer: 0 .. n_layers-1
        head: head index, or 'all' for the mean over heads
    """
    config = params.config
    if not 0 <= layer < config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{config.n_layers - 1}")
    if head != "all" and not (isinstance(head, (int, np.integer)) and 0 <= head < config.n_heads):
        raise IndexError(f"head {head} outside 0..{config.n_heads - 1} (or 'all')")
    batch = _single_batch(inputs)
    capture = Capture()
    forward(params, batch, train=False, capture=capture)
    probs = capture.attention[layer]
    weights = probs.mean(axis=1) if head == "all" else probs[:, head]
    if isinstance(inputs, PackedSequence):
        n = inputs.layout.length
        return weights[0, :n, :n]
    return weights


@T.no_grad()
def extract_hidden(params: ModelParams, inputs: Union[PackedSequence, PackedBatch], layer: int) -> np.ndarray:
    """Residual-stream states after `layer` (0 = embedding output), [L, d]."""
    config = params.config
    if not 0 <= layer <= config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{config.n_layers}")
    batch = _single_batch(inputs)
    capture = Capture()
    forward(params, batch, train=False, capture=capture)
    hidden = capture.hidden[layer]
    if isinstance(inputs, PackedSequence):
        return hidden[0, :inputs.layout.length]
    return hidden


# ------------------------------
# Cached decoding primitives
# ------------------------------

@dataclass
class KVCache:
    """
    Retained keys/values per layer.

    `columns` holds the absolute slot index of every retained entry, so a
    visibility row over all slots can be projected onto the cache.
    """
    keys: List[np.ndarray]     # n_layers x [H, n, dh]
    values: List[np.ndarray]
    columns: np.ndarray        # [n] int

    @property
    def length(self) -> int:
        return int(self.columns.shape[0])

    def select(self, keep: np.ndarray) -> "KVCache":
        keep = np.asarray(keep, dtype=bool)
        return KVCache([k[:, keep] for k in self.keys], [v[:, keep] for v in self.values],
                       self.columns[keep])

    def copy(self) -> "KVCache":
        return KVCache([k.copy() for k in self.keys], [v.copy() for v in self.values], self.columns.copy())


@T.no_grad()
def encode_prefix(params: ModelParams, prefix_tokens: np.ndarray, layout: SequenceLayout) -> KVCache:
    """
    Run x' ++ r through the model once and cache every layer's keys and values.

    Prefix rows never read target columns, so their activations do not depend
    on anything generated later.
    """
    config = params.config
    P = layout.prefix_len
    if P >= config.max_positions:
        raise LengthError(f"prefix length {P} leaves no room below max_positions {config.max_positions}")
    tokens = np.asarray(prefix_tokens, dtype=np.int64).reshape(1, P)
    mask = build_mask(layout)[None, None, :P, :P]
    scale = 1.0 / math.sqrt(config.head_dim)

    keys, values = [], []
    x = _embed(params, tokens, 0)
    for i in range(config.n_layers):
        layer = params.layer(i)
        h = T.layer_norm(x, layer["ln1.gain"], layer["ln1.bias"])
        q = _split_heads(_projection(params, i, layer, "q", h), config.n_heads)
        k = _split_heads(_projection(params, i, layer, "k", h), config.n_heads)
        v = _split_heads(_projection(params, i, layer, "v", h), config.n_heads)
        keys.append(k.data[0].copy())
        values.append(v.data[0].copy())
        probs = T.masked_softmax(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), mask)
        attended = _linear(_merge_heads(T.matmul(probs, v)), layer["attn.o.weight"], layer["attn.o.bias"])
        x = T.add(x, attended)
        x = T.add(x, _feed_forward(layer, x))
    return KVCache(keys, values, np.arange(P))


@T.no_grad()
def decode_step(params: ModelParams, cache: KVCache, token: int, position: int,
                visible: np.ndarray):
    """
    Feed one token at absolute `position`.

    Args:
        cache: retained keys/values (not modified)
        token: input id of the new slot
        position: absolute slot index of the new token
        visible: boolean row over slots 0..position (incremental_mask_row)

    Returns:
        (log-probabilities [V], extended cache, number of attended keys)
    """
    config = params.config
    if position >= config.max_positions:
        raise LengthError(f"position {position} exceeds max_positions {config.max_positions}")
    scale = 1.0 / math.sqrt(config.head_dim)
    columns = np.append(cache.columns, position)
    row = np.asarray(visible, dtype=bool)[columns][None, None, None, :]
    attended_keys = int(row.sum())

    keys, values = [], []
    x = _embed(params, np.array([[token]], dtype=np.int64), position)
    for i in range(config.n_layers):
        layer = params.layer(i)
        h = T.layer_norm(x, layer["ln1.gain"], layer["ln1.bias"])
        q = _split_heads(_projection(params, i, layer, "q", h), config.n_heads)
        k = _split_heads(_projection(params, i, layer, "k", h), config.n_heads)
        v = _split_heads(_projection(params, i, layer, "v", h), config.n_heads)
        k_all = np.concatenate([cache.keys[i], k.data[0]], axis=1)
        v_all = np.concatenate([cache.values[i], v.data[0]], axis=1)
        keys.append(k_all)
        values.append(v_all)
        scores = T.mul(T.matmul(q, Tensor(np.swapaxes(k_all, -1, -2)[None])), scale)
        probs = T.masked_softmax(scores, row)
        attended = _linear(_merge_heads(T.matmul(probs, Tensor(v_all[None]))),
                           layer["attn.o.weight"], layer["attn.o.bias"])
        x = T.add(x, attended)
        x = T.add(x, _feed_forward(layer, x))
    logits = _output_logits(params, x).data[0, 0]
    shifted = logits - logits.max()
    log_probs = shifted - np.log(np.exp(shifted).sum())
    return log_probs, KVCache(keys, values, columns), attended_keys
