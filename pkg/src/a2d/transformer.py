"""Post-norm encoder-decoder Transformer that exposes every attention map."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .data import BOS, EOS, PAD, Batch
from .errors import ConfigError, InputError, ShapeError
from .numerics import Tensor

ATTENTION_KINDS = ("enc_self", "dec_self", "dec_cross")


@dataclass
class ModelConfig:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_model: int = 32
    d_ffn: int = 64
    vocab_size: int = 16
    max_len: int = 32
    dropout_rate: float = 0.1

    def __post_init__(self):
        for f in ("n_enc_layers", "n_dec_layers", "n_heads", "d_model", "d_ffn",
                  "vocab_size", "max_len"):
            if int(getattr(self, f)) < 1:
                raise ConfigError(f"model.{f} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must be in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
        return cls(**d)


def param_count_formula(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    Per attention block 4 projections with bias (4d^2 + 4d); FFN
    d*f + f + f*d + d; 2d per LayerNorm. Encoder layers carry one attention
    block and two norms, decoder layers two blocks and three norms. Source
    and target embeddings are separate (2Vd); the output projection has a
    bias (dV + V).
    """
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    attn = 4 * d * d + 4 * d
    ffn = 2 * d * f + f + d
    enc = attn + ffn + 2 * 2 * d
    dec = 2 * attn + ffn + 3 * 2 * d
    return 2 * v * d + d * v + v + cfg.n_enc_layers * enc + cfg.n_dec_layers * dec


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


@dataclass
class AttentionMapSet:
    """Attention maps of one forward pass.

    Each kind holds one tensor per layer of shape ``[batch, heads, rows,
    keys]``; these are the exact tensors multiplied into the values.
    ``dec_cross`` rows are target queries, columns source keys.
    """

    enc_self: list[Tensor]
    dec_self: list[Tensor]
    dec_cross: list[Tensor]

    def layers(self, kind: str) -> list[Tensor]:
        if kind not in ATTENTION_KINDS:
            raise KeyError(kind)
        return getattr(self, kind)

    def count(self, kind: str) -> int:
        return sum(t.shape[1] for t in self.layers(kind))

    def head(self, kind: str, layer: int, head: int) -> Tensor:
        return self.layers(kind)[layer][:, head]

    def maps(self, kind: str) -> list[Tensor]:
        """Per-head maps ``[batch, rows, keys]`` in layer-major, head-minor order."""
        return [t[:, h] for t in self.layers(kind) for h in range(t.shape[1])]

    def stacked(self, kind: str) -> Tensor:
        """All maps of a kind as ``[batch, layers*heads, rows, keys]``."""
        layers = self.layers(kind)
        return layers[0] if len(layers) == 1 else nx.concat(layers, axis=1)


def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: dict, prefix: str,
                         n_heads: int, attn_mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``n_heads`` heads.

    Head ``h`` owns columns ``h*d_head:(h+1)*d_head`` of the query, key and
    value projections. ``attn_mask`` is boolean, broadcastable to
    ``[batch, heads, L_q, L_kv]``, True where attention is allowed.

    Returns the projected output ``[batch, L_q, d_model]`` and the maps
    ``[batch, heads, L_q, L_kv]``. Unbatched ``[L, d]`` inputs are accepted
    and give unbatched results.
    """
    squeeze = x_q.ndim == 2
    if squeeze:
        x_q, x_kv = x_q.reshape(1, *x_q.shape), x_kv.reshape(1, *x_kv.shape)
    b, lq, d = x_q.shape
    lk = x_kv.shape[1]
    dh = d // n_heads

    def split(t: Tensor, length: int) -> Tensor:
        return t.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x_q, params, prefix + ".q"), lq)
    k = split(_linear(x_kv, params, prefix + ".k"), lk)
    v = split(_linear(x_kv, params, prefix + ".v"), lk)
    scores = (q @ nx.transpose_last_two(k)) * (1.0 / math.sqrt(dh))
    if attn_mask is not None:
        m = np.asarray(attn_mask, dtype=bool)
        if squeeze and m.ndim == 2:
            m = m[None, None]
        try:
            np.broadcast_shapes(m.shape, scores.shape)
        except ValueError:
            raise ShapeError(f"attention mask {m.shape} does not fit scores {scores.shape}") from None
        attn_mask = m
    maps = nx.softmax_rows(scores, attn_mask)
    ctx = (maps @ v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    out = _linear(ctx, params, prefix + ".o")
    if squeeze:
        return out.reshape(lq, d), maps.reshape(n_heads, lq, lk)
    return out, maps


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class Transformer:
    """Encoder-decoder model; parameters live in an ordered name -> Tensor dict."""

    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0,
                 dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c = config
        self._normal("src_embed", (c.vocab_size, c.d_model), rng)
        self._normal("tgt_embed", (c.vocab_size, c.d_model), rng)
        for i in range(c.n_enc_layers):
            self._attention(f"enc.{i}.self", rng)
            self._ffn(f"enc.{i}.ffn", rng)
            self._norm(f"enc.{i}.ln1")
            self._norm(f"enc.{i}.ln2")
        for i in range(c.n_dec_layers):
            self._attention(f"dec.{i}.self", rng)
            self._attention(f"dec.{i}.cross", rng)
            self._ffn(f"dec.{i}.ffn", rng)
            for j in (1, 2, 3):
                self._norm(f"dec.{i}.ln{j}")
        self._normal("out.w", (c.d_model, c.vocab_size), rng)
        self._zeros("out.b", (c.vocab_size,))
        self._pe = sinusoidal_positions(c.max_len, c.d_model).astype(self.dtype)

    # -- construction helpers ----------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def _normal(self, name, shape, rng):
        self._add(name, rng.normal(0.0, 0.02, size=shape))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _attention(self, prefix, rng):
        d = self.config.d_model
        for p in ("q", "k", "v", "o"):
            self._normal(f"{prefix}.{p}.w", (d, d), rng)
            self._zeros(f"{prefix}.{p}.b", (d,))

    def _ffn(self, prefix, rng):
        d, f = self.config.d_model, self.config.d_ffn
        self._normal(f"{prefix}.1.w", (d, f), rng)
        self._zeros(f"{prefix}.1.b", (f,))
        self._normal(f"{prefix}.2.w", (f, d), rng)
        self._zeros(f"{prefix}.2.b", (d,))

    def _norm(self, prefix):
        d = self.config.d_model
        self._add(prefix + ".g", np.ones(d))
        self._add(prefix + ".b", np.zeros(d))

    # -- bookkeeping ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self) -> "Transformer":
        self.training = True
        return self

    def eval(self) -> "Transformer":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> None:
        """Stop gradient tracking for every parameter."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    # -- forward -------------------------------------------------------------
    def _embed(self, table: str, ids: np.ndarray, rng) -> Tensor:
        length = ids.shape[1]
        if length > self.config.max_len:
            raise InputError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = nx.embedding(self.params[table], ids) * math.sqrt(self.config.d_model)
        x = x + self._pe[:length]
        return self._dropout(x, rng)

    def _dropout(self, x: Tensor, rng) -> Tensor:
        if not self.training:
            return x
        return nx.dropout(x, self.config.dropout_rate, rng)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _ffn_forward(self, x: Tensor, prefix: str) -> Tensor:
        h = nx.relu(_linear(x, self.params, prefix + ".1"))
        return _linear(h, self.params, prefix + ".2")

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
        src_ids = np.asarray(src_ids, dtype=np.int64)
        if src_mask is None:
            src_mask = src_ids != PAD
        key_mask = src_mask[:, None, None, :]
        x = self._embed("src_embed", src_ids, rng)
        maps = []
        h = self.config.n_heads
        for i in range(self.config.n_enc_layers):
            a, m = multi_head_attention(x, x, self.params, f"enc.{i}.self", h, key_mask)
            maps.append(m)
            x = self._ln(x + self._dropout(a, rng), f"enc.{i}.ln1")
            x = self._ln(x + self._dropout(self._ffn_forward(x, f"enc.{i}.ffn"), rng), f"enc.{i}.ln2")
        return x, maps

    def decode(self, memory: Tensor, src_mask: np.ndarray, tgt_in_ids: np.ndarray,
               tgt_mask: np.ndarray | None = None,
               rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor], list[Tensor]]:
        tgt_in_ids = np.asarray(tgt_in_ids, dtype=np.int64)
        if tgt_mask is None:
            tgt_mask = tgt_in_ids != PAD
        lt = tgt_in_ids.shape[1]
        self_mask = causal_mask(lt)[None, None] & tgt_mask[:, None, None, :]
        cross_mask = src_mask[:, None, None, :]
        y = self._embed("tgt_embed", tgt_in_ids, rng)
        self_maps, cross_maps = [], []
        h = self.config.n_heads
        for i in range(self.config.n_dec_layers):
            a, m = multi_head_attention(y, y, self.params, f"dec.{i}.self", h, self_mask)
            self_maps.append(m)
            y = self._ln(y + self._dropout(a, rng), f"dec.{i}.ln1")
            a, m = multi_head_attention(y, memory, self.params, f"dec.{i}.cross", h, cross_mask)
            cross_maps.append(m)
            y = self._ln(y + self._dropout(a, rng), f"dec.{i}.ln2")
            y = self._ln(y + self._dropout(self._ffn_forward(y, f"dec.{i}.ffn"), rng), f"dec.{i}.ln3")
        logits = _linear(y, self.params, "out")
        return logits, self_maps, cross_maps

    def forward(self, batch: Batch, collect_maps: bool = False,
                rng: np.random.Generator | None = None):
        """Return ``(logits [batch, L_tgt, vocab], AttentionMapSet | None)``.

        Dropout is applied only in training mode and only when ``rng`` is
        given.
        """
        for ids in (batch.src_ids, batch.tgt_in_ids):
            if ids.size and ids.max() >= self.config.vocab_size:
                raise InputError(f"token id {int(ids.max())} >= vocab_size {self.config.vocab_size}")
        memory, enc_maps = self.encode(batch.src_ids, batch.src_pad_mask, rng)
        logits, self_maps, cross_maps = self.decode(
            memory, batch.src_pad_mask, batch.tgt_in_ids, batch.tgt_pad_mask, rng)
        maps = AttentionMapSet(enc_maps, self_maps, cross_maps) if collect_maps else None
        return logits, maps

    __call__ = forward


def greedy_decode_batch(model: Transformer, src_ids: np.ndarray, max_steps: int) -> list[list[int]]:
    """Argmax decoding for a padded ``[batch, L_src]`` id matrix.

    Each result stops before EOS or after ``max_steps`` tokens (capped so
    the decoder input never exceeds ``max_len``).
    """
    src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
    max_steps = max(0, min(max_steps, model.config.max_len))
    was_training = model.training
    model.eval()
    try:
        with nx.no_grad():
            src_mask = src_ids != PAD
            memory, _ = model.encode(src_ids, src_mask)
            n = src_ids.shape[0]
            tgt = np.full((n, 1), BOS, dtype=np.int64)
            done = np.zeros(n, dtype=bool)
            for _ in range(max_steps):
                logits, _, _ = model.decode(memory, src_mask, tgt, np.ones_like(tgt, dtype=bool))
                nxt = logits.data[:, -1].argmax(axis=-1)
                nxt = np.where(done, PAD, nxt)
                tgt = np.concatenate([tgt, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
    finally:
        model.training = was_training
    out = []
    for row in tgt[:, 1:]:
        seq = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            seq.append(int(tok))
        out.append(seq)
    return out


def greedy_decode(model: Transformer, src_ids, max_steps: int) -> list[int]:
    """Decode a single source sequence (list of ids, no padding)."""
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    if src.shape[1] == 0:
        src = np.array([[EOS]], dtype=np.int64)
    return greedy_decode_batch(model, src, max_steps)[0]
