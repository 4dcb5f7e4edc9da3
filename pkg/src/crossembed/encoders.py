"""Image and text towers producing unit-norm joint embeddings.

The image tower is a single linear projection over precomputed feature
vectors. The text tower is one of three encoders sharing a word embedding
table:

* ``avg``: masked mean of word embeddings, FC(512)+ReLU, linear to D.
* ``rnn``: stacked unidirectional GRU, last real hidden state, linear to D.
* ``transformer``: BOS + tokens with learned positions, pre-norm blocks,
  BOS state, linear to D.

Every encoder ends in L2 normalization, so inner products are cosines.
Parameters live in a flat ``dict[str, Tensor]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from crossembed.autodiff import (
    Tensor,
    concat,
    embedding_lookup,
    gelu,
    l2_normalize,
    layer_norm,
    masked_fill,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)
from crossembed.errors import ConfigError, ContractError, ShapeError
from crossembed.text import BOS

TEXT_ENCODERS = ("avg", "rnn", "transformer")


@dataclass
class TransformerConfig:
    layers: int = 6
    heads: int = 4
    hidden: int = 128
    ffn_dim: int = 512


@dataclass
class RNNConfig:
    hidden: int = 256
    layers: int = 2


@dataclass
class AvgConfig:
    fc_dim: int = 512


@dataclass
class ModelConfig:
    vocab_size: int
    image_feat_dim: int
    text_encoder: str = "transformer"
    embed_dim: int = 256
    word_dim: int = 128
    max_len: int = 32
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    rnn: RNNConfig = field(default_factory=RNNConfig)
    avg: AvgConfig = field(default_factory=AvgConfig)

    def __post_init__(self):
        for sub, cls in (("transformer", TransformerConfig), ("rnn", RNNConfig), ("avg", AvgConfig)):
            if isinstance(getattr(self, sub), dict):
                setattr(self, sub, cls(**getattr(self, sub)))
        self.text_encoder = self.text_encoder.lower()
        if self.text_encoder not in TEXT_ENCODERS:
            raise ConfigError(f"text_encoder must be one of {TEXT_ENCODERS}, got {self.text_encoder!r}")
        if self.embed_dim <= 0 or self.word_dim <= 0 or self.vocab_size <= 0:
            raise ConfigError("embed_dim, word_dim and vocab_size must be positive")
        if self.image_feat_dim <= 0:
            raise ConfigError("image_feat_dim must be positive")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.transformer.hidden % self.transformer.heads:
            raise ConfigError(
                f"transformer hidden {self.transformer.hidden} not divisible by "
                f"{self.transformer.heads} heads"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_encoder(self, name: str) -> "ModelConfig":
        return replace(self, text_encoder=name)


# ---------------------------------------------------------------------------
# initialization


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(np.float32)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Seeded parameters for the image tower and the configured text encoder.

    Weights: truncated normal (std 0.02, cut at 2 std); biases zero;
    layer-norm gains one.
    """
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple] = {}
    D, E, F = config.embed_dim, config.word_dim, config.image_feat_dim
    shapes["word_emb"] = (config.vocab_size, E)
    shapes["image.w"] = (F, D)
    shapes["image.b"] = (D,)
    kind = config.text_encoder
    if kind == "avg":
        fc = config.avg.fc_dim
        shapes.update({"avg.fc.w": (E, fc), "avg.fc.b": (fc,), "avg.out.w": (fc, D), "avg.out.b": (D,)})
    elif kind == "rnn":
        H = config.rnn.hidden
        for i in range(config.rnn.layers):
            d_in = E if i == 0 else H
            shapes.update({f"rnn.l{i}.wx": (d_in, 3 * H), f"rnn.l{i}.bx": (3 * H,),
                           f"rnn.l{i}.wh": (H, 3 * H), f"rnn.l{i}.bh": (3 * H,)})
        shapes.update({"rnn.out.w": (H, D), "rnn.out.b": (D,)})
    else:
        tc = config.transformer
        Hd = tc.hidden
        shapes["tf.pos"] = (config.max_len + 1, Hd)
        if E != Hd:
            shapes.update({"tf.in.w": (E, Hd), "tf.in.b": (Hd,)})
        for i in range(tc.layers):
            p = f"tf.b{i}."
            shapes.update({
                p + "ln1.g": (Hd,), p + "ln1.b": (Hd,),
                p + "qkv.w": (Hd, 3 * Hd), p + "qkv.b": (3 * Hd,),
                p + "o.w": (Hd, Hd), p + "o.b": (Hd,),
                p + "ln2.g": (Hd,), p + "ln2.b": (Hd,),
                p + "ffn1.w": (Hd, tc.ffn_dim), p + "ffn1.b": (tc.ffn_dim,),
                p + "ffn2.w": (tc.ffn_dim, Hd), p + "ffn2.b": (Hd,),
            })
        shapes.update({"tf.lnf.g": (Hd,), "tf.lnf.b": (Hd,), "tf.out.w": (Hd, D), "tf.out.b": (D,)})
    params = {}
    # insertion order above fixes the RNG stream, so the same seed is bit-identical
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, np.float32)
        elif leaf.startswith("b"):
            data = np.zeros(shape, np.float32)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def is_image_param(name: str) -> bool:
    return name.startswith("image.")


# ---------------------------------------------------------------------------
# towers


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def encode_image(features, params, config: Optional[ModelConfig] = None) -> Tensor:
    """Project ``(B, F)`` features to unit-norm ``(B, D)`` embeddings."""
    x = features if isinstance(features, Tensor) else Tensor(features, dtype=params["image.w"].dtype)
    F = params["image.w"].shape[0]
    if x.ndim != 2 or x.shape[1] != F:
        raise ContractError(f"image features must be (B, {F}), got {x.shape}")
    return l2_normalize(_linear(x, params, "image"), axis=-1)


def _check_ids(ids, lengths, max_len: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, int]:
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise ShapeError(f"ids must be (B, T) with lengths (B,), got {ids.shape} and {lengths.shape}")
    if np.any(lengths < 0) or np.any(lengths > ids.shape[1]):
        raise ContractError("lengths must lie in [0, T]")
    if max_len is not None and np.any(lengths > max_len):
        raise ContractError(f"sequence longer than max_len={max_len}")
    t = int(lengths.max()) if lengths.size else 0
    return ids, lengths, t


def encode_text_avg(ids, lengths, params, config: Optional[ModelConfig] = None) -> Tensor:
    """Masked mean of word embeddings -> FC+ReLU -> linear -> L2 normalize.

    Tokens are sorted by id before summation so the result is bitwise
    independent of token order. Length-0 rows get a zero mean vector.
    """
    ids, lengths, t = _check_ids(ids, lengths)
    B = ids.shape[0]
    t = max(t, 1)
    ids = ids[:, :t].copy()
    mask = np.arange(t)[None, :] < lengths[:, None]
    # canonical order: real tokens sorted, padding pushed behind them
    big = np.iinfo(np.int64).max
    ids = np.sort(np.where(mask, ids, big), axis=1)
    ids = np.where(ids == big, 0, ids)
    emb = embedding_lookup(params["word_emb"], ids)
    dtype = emb.dtype
    weights = mask / np.maximum(lengths, 1)[:, None]
    pooled = (emb * Tensor(weights[:, :, None], dtype=dtype)).sum(axis=1)
    assert pooled.shape == (B, params["word_emb"].shape[1])
    h = relu(_linear(pooled, params, "avg.fc"))
    return l2_normalize(_linear(h, params, "avg.out"), axis=-1)


def _gru_layer(x_proj: Tensor, params, prefix: str, mask: np.ndarray, hidden: int) -> list[Tensor]:
    """Run one GRU layer; returns the hidden state after each step.

    Gates follow the common convention: r and z from sigmoid, candidate
    n = tanh(x_n + r * (h W_n + b_hn)), h' = (1 - z) * n + z * h. Steps where
    ``mask`` is false leave h unchanged.
    """
    B, T, _ = x_proj.shape
    dtype = x_proj.dtype
    h = Tensor(np.zeros((B, hidden), dtype=dtype), dtype=dtype)
    wh, bh = params[prefix + ".wh"], params[prefix + ".bh"]
    H = hidden
    states = []
    for step in range(T):
        xt = x_proj[:, step]
        gh = h @ wh + bh
        r = sigmoid(xt[:, :H] + gh[:, :H])
        z = sigmoid(xt[:, H:2 * H] + gh[:, H:2 * H])
        n = tanh(xt[:, 2 * H:] + r * gh[:, 2 * H:])
        h_new = (1.0 - z) * n + z * h
        m = mask[:, step:step + 1]
        if m.all():
            h = h_new
        else:
            m = Tensor(m.astype(dtype), dtype=dtype)
            h = m * h_new + (1.0 - m) * h
        states.append(h)
    return states


def encode_text_rnn(ids, lengths, params, config: ModelConfig) -> Tensor:
    """Stacked GRU over the real tokens; the last real hidden state is projected to D."""
    ids, lengths, t = _check_ids(ids, lengths)
    if np.any(lengths == 0):
        raise ContractError("RNN encoder needs every sequence to have length >= 1")
    mask = np.arange(t)[None, :] < lengths[:, None]
    x = embedding_lookup(params["word_emb"], ids[:, :t])
    H = config.rnn.hidden
    states = None
    for i in range(config.rnn.layers):
        p = f"rnn.l{i}"
        x_proj = x @ params[p + ".wx"] + params[p + ".bx"]
        states = _gru_layer(x_proj, params, p, mask, H)
        if i + 1 < config.rnn.layers:
            x = stack(states, axis=1)
    return l2_normalize(_linear(states[-1], params, "rnn.out"), axis=-1)


def encode_text_transformer(ids, lengths, params, config: ModelConfig,
                            return_attention: bool = False):
    """Pre-norm transformer over ``[BOS] + tokens``; the BOS state is pooled.

    Keys past each sequence's true length are masked with -inf before the
    softmax, so padding content cannot influence the output. With
    ``return_attention`` the per-layer ``(B, heads, T+1, T+1)`` attention
    weights are returned too.
    """
    tc = config.transformer
    ids, lengths, t = _check_ids(ids, lengths, config.max_len)
    B = ids.shape[0]
    seq = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), ids[:, :t]], axis=1)
    T = t + 1
    x = embedding_lookup(params["word_emb"], seq)
    if "tf.in.w" in params:
        x = _linear(x, params, "tf.in")
    x = x + params["tf.pos"][:T]
    key_pad = (np.arange(T)[None, :] > lengths[:, None])[:, None, None, :]
    nh, Hd = tc.heads, tc.hidden
    dh = Hd // nh
    scale = 1.0 / math.sqrt(dh)
    attn_maps = []
    for i in range(tc.layers):
        p = f"tf.b{i}."
        a = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = (a @ params[p + "qkv.w"] + params[p + "qkv.b"]).reshape(B, T, 3, nh, dh)
        qkv = qkv.transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        if key_pad.any():
            scores = masked_fill(scores, np.broadcast_to(key_pad, scores.shape), -np.inf)
        w = softmax(scores, axis=-1)
        if return_attention:
            attn_maps.append(w.data)
        ctx = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, Hd)
        x = x + ctx @ params[p + "o.w"] + params[p + "o.b"]
        f = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        f = gelu(f @ params[p + "ffn1.w"] + params[p + "ffn1.b"])
        x = x + f @ params[p + "ffn2.w"] + params[p + "ffn2.b"]
    x = layer_norm(x, params["tf.lnf.g"], params["tf.lnf.b"])
    out = l2_normalize(_linear(x[:, 0], params, "tf.out"), axis=-1)
    return (out, attn_maps) if return_attention else out


_TEXT_FNS = {"avg": encode_text_avg, "rnn": encode_text_rnn, "transformer": encode_text_transformer}


def encode_text(ids, lengths, params, config: ModelConfig) -> Tensor:
    return _TEXT_FNS[config.text_encoder](ids, lengths, params, config)


class DualEncoder:
    """Config plus parameters, with batched inference helpers."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def embed_images(self, features) -> Tensor:
        return encode_image(features, self.params, self.config)

    def embed_texts(self, ids, lengths) -> Tensor:
        return encode_text(ids, lengths, self.params, self.config)

    def image_embeddings(self, features: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Untaped inference over many rows."""
        out = [self.embed_images(features[i:i + batch_size]).data
               for i in range(0, len(features), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim), np.float32)

    def text_embeddings(self, ids: np.ndarray, lengths: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self.embed_texts(ids[i:i + batch_size], lengths[i:i + batch_size]).data
               for i in range(0, len(ids), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim), np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs model {t.shape}")
            t.data = np.array(state[k], dtype=t.dtype)

    def astype(self, dtype) -> "DualEncoder":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype, name=k)
                  for k, v in self.params.items()}
        return DualEncoder(self.config, params)
