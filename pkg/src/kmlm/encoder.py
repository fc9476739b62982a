"""Transformer encoder with summed token/type/position embeddings and the
MLM, real/fake, and generic task heads.

Post-layer-norm residual ordering, GELU feed-forward, and an MLM projection
tied to the token embedding table (untied available via config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

ATTENTION_MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn_hidden: int = 0  # 0 means 4 * hidden
    max_len: int = 128
    vocab_size: int = 5
    type_vocab: int = 4
    dropout: float = 0.1
    tie_mlm: bool = True

    def __post_init__(self):
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.hidden
        self.validate()

    def validate(self) -> None:
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.max_len < 4:
            raise ConfigError(f"max_len {self.max_len} must be >= 4")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size {self.vocab_size} must be >= 5 (the specials)")
        if self.layers < 1:
            raise ConfigError(f"layers {self.layers} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} must be in [0,1)")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn_hidden": self.ffn_hidden,
            "max_len": self.max_len,
            "vocab_size": self.vocab_size,
            "type_vocab": self.type_vocab,
            "dropout": self.dropout,
            "tie_mlm": self.tie_mlm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


INIT_STD = 0.02


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameter dict: normal(0, 0.02) weights, zero biases, unit LN gains."""

    def weight(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    h, f = cfg.hidden, cfg.ffn_hidden
    params: dict[str, Tensor] = {
        "token_emb": weight(cfg.vocab_size, h),
        "type_emb": weight(cfg.type_vocab, h),
        "pos_emb": weight(cfg.max_len, h),
        "emb.ln_gain": ones(h),
        "emb.ln_bias": zeros(h),
    }
    for i in range(cfg.layers):
        p = f"l{i}."
        params[p + "attn.q_w"] = weight(h, h)
        params[p + "attn.q_b"] = zeros(h)
        params[p + "attn.k_w"] = weight(h, h)
        params[p + "attn.k_b"] = zeros(h)
        params[p + "attn.v_w"] = weight(h, h)
        params[p + "attn.v_b"] = zeros(h)
        params[p + "attn.o_w"] = weight(h, h)
        params[p + "attn.o_b"] = zeros(h)
        params[p + "attn.ln_gain"] = ones(h)
        params[p + "attn.ln_bias"] = zeros(h)
        params[p + "ffn.w1"] = weight(h, f)
        params[p + "ffn.b1"] = zeros(f)
        params[p + "ffn.w2"] = weight(f, h)
        params[p + "ffn.b2"] = zeros(h)
        params[p + "ffn.ln_gain"] = ones(h)
        params[p + "ffn.ln_bias"] = zeros(h)
    params["mlm.bias"] = zeros(cfg.vocab_size)
    if not cfg.tie_mlm:
        params["mlm.w"] = weight(h, cfg.vocab_size)
    params["realfake.w"] = weight(h, 2)
    params["realfake.b"] = zeros(2)
    return params


def param_count(cfg: ModelConfig) -> int:
    """Total parameter scalars; a pure function of the config."""
    rng = np.random.default_rng(0)
    return sum(int(np.prod(p.shape)) for p in init_params(cfg, rng).values())


def _check_ids(ids: np.ndarray, limit: int, table: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise ShapeError(f"{table} id {bad} out of range [0, {limit})")
    return ids


class Encoder:
    """Config + parameters + the forward passes. Parameters are immutable
    during forward; training mutates them through the optimizer only."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None,
                 init_rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        if params is None:
            if init_rng is None:
                init_rng = np.random.default_rng(0)
            params = init_params(cfg, init_rng, dtype=dtype)
        self.params = params

    def embed(
        self,
        input_ids: np.ndarray,
        type_ids: np.ndarray,
        position_ids: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Sum the three lookups, layer-norm, dropout. ids are [B, L] ints."""
        cfg, p = self.cfg, self.params
        input_ids = _check_ids(input_ids, cfg.vocab_size, "token")
        type_ids = _check_ids(type_ids, cfg.type_vocab, "type")
        position_ids = _check_ids(position_ids, cfg.max_len, "position")
        x = T.add(
            T.add(T.embedding_lookup(p["token_emb"], input_ids),
                  T.embedding_lookup(p["type_emb"], type_ids)),
            T.embedding_lookup(p["pos_emb"], position_ids),
        )
        x = T.layer_norm(x, p["emb.ln_gain"], p["emb.ln_bias"])
        return self._dropout(x, train, rng)

    def encode(
        self,
        x: Tensor,
        pad_mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Run the layer stack. pad_mask is bool [B, L], True at PAD positions."""
        cfg = self.cfg
        b, length, hidden = x.shape
        if length > cfg.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        bias = np.where(np.asarray(pad_mask), ATTENTION_MASK_BIAS, 0.0).astype(x.dtype)
        attn_bias = Tensor(bias.reshape(b, 1, 1, length))
        for i in range(cfg.layers):
            x = self._attention_block(x, attn_bias, i, train, rng)
            x = self._ffn_block(x, i, train, rng)
        return x

    def forward(
        self,
        input_ids: np.ndarray,
        type_ids: np.ndarray,
        position_ids: np.ndarray | None = None,
        pad_mask: np.ndarray | None = None,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """embed + encode with defaults for position ids and the PAD mask."""
        input_ids = np.asarray(input_ids)
        if position_ids is None:
            position_ids = np.broadcast_to(np.arange(input_ids.shape[1]), input_ids.shape)
        if pad_mask is None:
            pad_mask = input_ids == 0
        x = self.embed(input_ids, type_ids, position_ids, train, rng)
        return self.encode(x, pad_mask, train, rng)

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        p = self.cfg.dropout if train else 0.0
        return T.dropout(x, p, rng)

    def _attention_block(self, x, attn_bias, i, train, rng) -> Tensor:
        cfg, p = self.cfg, self.params
        pre = f"l{i}.attn."
        b, length, hidden = x.shape
        heads, dh = cfg.heads, cfg.hidden // cfg.heads

        def split(t):  # [B,L,H] -> [B,heads,L,dh]
            return T.transpose(T.reshape(t, (b, length, heads, dh)), 1, 2)

        q = split(T.add(T.matmul(x, p[pre + "q_w"]), p[pre + "q_b"]))
        k = split(T.add(T.matmul(x, p[pre + "k_w"]), p[pre + "k_b"]))
        v = split(T.add(T.matmul(x, p[pre + "v_w"]), p[pre + "v_b"]))
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        probs = T.softmax(T.add(scores, attn_bias))
        probs = self._dropout(probs, train, rng)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), 1, 2), (b, length, hidden))
        out = T.add(T.matmul(ctx, p[pre + "o_w"]), p[pre + "o_b"])
        out = self._dropout(out, train, rng)
        return T.layer_norm(T.add(x, out), p[pre + "ln_gain"], p[pre + "ln_bias"])

    def _ffn_block(self, x, i, train, rng) -> Tensor:
        p = self.params
        pre = f"l{i}.ffn."
        h1 = T.gelu(T.add(T.matmul(x, p[pre + "w1"]), p[pre + "b1"]))
        h2 = T.add(T.matmul(h1, p[pre + "w2"]), p[pre + "b2"])
        h2 = self._dropout(h2, train, rng)
        return T.layer_norm(T.add(x, h2), p[pre + "ln_gain"], p[pre + "ln_bias"])

    # -- heads --

    def mlm_logits(self, h: Tensor) -> Tensor:
        """[B,L,H] -> [B,L,vocab]; projection tied to token_emb unless untied."""
        p = self.params
        if self.cfg.tie_mlm:
            proj = T.transpose(p["token_emb"])
        else:
            proj = p["mlm.w"]
        return T.add(T.matmul(h, proj), p["mlm.bias"])

    def real_fake_logits(self, h: Tensor) -> Tensor:
        """CLS readout through the binary real/fake classifier: [B,2]."""
        cls = T.take_at(h, 0, axis=1)
        return T.add(T.matmul(cls, self.params["realfake.w"]), self.params["realfake.b"])

    def cls_logits(self, h: Tensor, head: dict[str, Tensor]) -> Tensor:
        """Sequence-classification head on the CLS position: [B, n_classes]."""
        cls = T.take_at(h, 0, axis=1)
        return T.add(T.matmul(cls, head["w"]), head["b"])

    def tag_logits(self, h: Tensor, head: dict[str, Tensor]) -> Tensor:
        """Per-position tagging head: [B, L, n_tags]."""
        return T.add(T.matmul(h, head["w"]), head["b"])


def make_head(cfg: ModelConfig, n_out: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """A fresh affine task head hidden -> n_out."""
    return {
        "w": Tensor(rng.normal(0.0, INIT_STD, size=(cfg.hidden, n_out)).astype(dtype), requires_grad=True),
        "b": Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True),
    }
