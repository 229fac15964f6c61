"""Attention alignment and the combined distillation objective.

An alignment module (AAM) is a 1x1 convolution across attention maps: the
M*N student maps of one attention kind are the input channels, the C
teacher maps the output channels. Each intermediate map is compared to its
teacher map with a row-wise KL divergence.

By default the intermediate rows are clamped and renormalized over the
valid keys before the KL. Without that step the bias and unconstrained
weights let the module inflate every row, and the KL term decreases
without bound; ``renormalize_intermediate=False`` keeps that raw form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import PAD, Batch
from .errors import ConfigError, ShapeError
from .numerics import Tensor
from .transformer import ATTENTION_KINDS, AttentionMapSet, ModelConfig, Transformer

PART_NAMES = {"enc": "enc_self", "enc-self": "enc_self", "dec-self": "dec_self",
              "dec-cross": "dec_cross"}


@dataclass
class DistillConfig:
    lambda_att: float = 1.0
    mu_kd: float = 1.0
    lambda_decay: float = 0.9
    apply_enc_self: bool = True
    apply_dec_self: bool = True
    apply_dec_cross: bool = True
    layerwise_variant: bool = False
    kd_temperature: float = 1.0
    renormalize_intermediate: bool = True

    def __post_init__(self):
        for name in ("lambda_att", "mu_kd"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"distill.{name} must be finite and >= 0")
        if not 0.0 < self.lambda_decay <= 1.0:
            raise ConfigError("distill.lambda_decay must be in (0, 1]")
        if self.kd_temperature <= 0:
            raise ConfigError("distill.kd_temperature must be > 0")

    @property
    def enabled_kinds(self) -> list[str]:
        return [k for k in ATTENTION_KINDS if getattr(self, "apply_" + k)]

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown distill config key {key!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_parts(self, parts: Sequence[str]) -> "DistillConfig":
        """Copy with only the named attention kinds enabled.

        Accepts ``enc``/``enc-self``, ``dec-self``, ``dec-cross`` and ``dec``
        (both decoder kinds).
        """
        wanted = set()
        for p in parts:
            p = p.strip()
            if p == "dec":
                wanted |= {"dec_self", "dec_cross"}
            elif p in PART_NAMES:
                wanted.add(PART_NAMES[p])
            elif p in ATTENTION_KINDS:
                wanted.add(p)
            else:
                raise ConfigError(f"unknown attention part {p!r}")
        if not wanted:
            raise ConfigError("at least one attention part must be named")
        d = self.to_dict()
        for k in ATTENTION_KINDS:
            d["apply_" + k] = k in wanted
        return DistillConfig(**d)


def aam_param_count(m: int, n: int, c: int) -> int:
    """Trainable size of one alignment module: M*N*C weights plus C biases."""
    return m * n * c + c


class AlignmentModule:
    """Weights ``w[C, K]`` and bias ``b[C]`` mapping K student maps to C maps.

    Column ``k = layer * heads + head`` (layer-major, head-minor) for the
    per-head form; in the layer-wise form columns and rows are layers.
    Initialized so every output map is the mean of the inputs.
    """

    def __init__(self, student: tuple[int, int], teacher: tuple[int, int],
                 layerwise: bool = False, dtype=np.float64):
        self.student = tuple(student)
        self.teacher = tuple(teacher)
        self.layerwise = layerwise
        k = self.n_in
        self.w = Tensor(np.full((self.n_out, k), 1.0 / k, dtype=dtype), requires_grad=True)
        self.b = Tensor(np.zeros(self.n_out, dtype=dtype), requires_grad=True)

    @property
    def n_in(self) -> int:
        layers, heads = self.student
        return layers if self.layerwise else layers * heads

    @property
    def n_out(self) -> int:
        layers, heads = self.teacher
        return layers if self.layerwise else layers * heads

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def num_parameters(self) -> int:
        return self.w.size + self.b.size


class AamParams(dict):
    """Alignment modules keyed by attention kind (only enabled kinds)."""

    def parameters(self) -> list[Tensor]:
        return [p for kind in ATTENTION_KINDS if kind in self for p in self[kind].parameters()]

    def named_parameters(self):
        for kind in ATTENTION_KINDS:
            if kind in self:
                yield f"aam.{kind}.w", self[kind].w
                yield f"aam.{kind}.b", self[kind].b

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _stack_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {"enc_self": (cfg.n_enc_layers, cfg.n_heads),
            "dec_self": (cfg.n_dec_layers, cfg.n_heads),
            "dec_cross": (cfg.n_dec_layers, cfg.n_heads)}


def build_aams(student: ModelConfig, teacher: ModelConfig, cfg: DistillConfig,
               dtype=np.float64) -> AamParams:
    s, t = _stack_shapes(student), _stack_shapes(teacher)
    return AamParams({k: AlignmentModule(s[k], t[k], cfg.layerwise_variant, dtype)
                      for k in cfg.enabled_kinds})


def _as_channels(maps) -> Tensor:
    """Accept ``[B, K, r, c]`` or a list of K maps ``[B, r, c]``."""
    if isinstance(maps, Tensor):
        return maps
    if isinstance(maps, np.ndarray):
        return Tensor(maps)
    maps = list(maps)
    if not maps:
        raise ConfigError("no attention maps given")
    b, r, c = maps[0].shape
    return nx.concat([m.reshape(b, 1, r, c) for m in maps], axis=1)


def aam_forward(student_maps, aam: AlignmentModule) -> Tensor:
    """Intermediate maps ``H_I[:, c] = sum_k w[c, k] * H_S[:, k] + b[c]``.

    Returns ``[batch, C, rows, keys]``.
    """
    x = _as_channels(student_maps)
    if x.ndim != 4:
        raise ShapeError(f"student maps must be [batch, K, rows, keys], got {x.shape}")
    if x.shape[1] != aam.n_in:
        raise ConfigError(f"alignment module expects {aam.n_in} student maps, got {x.shape[1]}")
    mixed = x.transpose(0, 2, 3, 1) @ aam.w.transpose() + aam.b
    return mixed.transpose(0, 3, 1, 2)


def layerwise_maps(layer_maps: Sequence[Tensor]) -> Tensor:
    """Head-averaged map per layer, ``[batch, layers, rows, keys]``."""
    means = [m.mean(axis=1, keepdims=True) for m in layer_maps]
    return means[0] if len(means) == 1 else nx.concat(means, axis=1)


def attention_transfer_loss(teacher_maps, intermediate_maps, row_mask=None) -> Tensor:
    """Sum over heads c of the row-mean KL(H_T_c || H_I_c).

    Rows excluded by ``row_mask`` ([batch, rows]) and rows where the
    teacher has no valid key are skipped.
    """
    t = _as_channels(teacher_maps)
    i = _as_channels(intermediate_maps)
    if t.shape[1] != i.shape[1]:
        raise ConfigError(f"{t.shape[1]} teacher maps vs {i.shape[1]} intermediate maps")
    if t.shape != i.shape:
        raise ShapeError(f"teacher maps {t.shape} vs intermediate maps {i.shape}")
    rows = t.data.sum(axis=-1) > 0
    if row_mask is not None:
        rows = rows & np.asarray(row_mask, dtype=bool)[:, None, :]
    # each head has the same active-row count, so C * (overall row mean) == sum of per-head means
    return nx.kl_rows(t.data, i, rows) * float(t.shape[1])


def stack_weights(kinds: Sequence[str]) -> dict[str, float]:
    """Per-kind coefficients: encoder 1, decoder 1/2 each, or 1 when alone."""
    if not kinds:
        raise ConfigError("at least one attention kind must be enabled")
    dec = [k for k in kinds if k.startswith("dec")]
    return {k: (0.5 if k.startswith("dec") and len(dec) == 2 else 1.0) for k in kinds}


def combine_components(components: dict[str, float | Tensor], kinds: Sequence[str] | None = None):
    """Weighted sum of per-kind transfer losses."""
    kinds = list(components) if kinds is None else list(kinds)
    weights = stack_weights(kinds)
    total = None
    for k in kinds:
        term = components[k] * weights[k]
        total = term if total is None else total + term
    return total


def _row_masks(batch: Batch) -> dict[str, np.ndarray]:
    return {"enc_self": batch.src_pad_mask, "dec_self": batch.tgt_pad_mask,
            "dec_cross": batch.tgt_pad_mask}


def _key_masks(batch: Batch, kind: str) -> np.ndarray:
    if kind == "enc_self" or kind == "dec_cross":
        return batch.src_pad_mask[:, None, None, :]
    lt = batch.tgt_pad_mask.shape[1]
    return np.tril(np.ones((lt, lt), dtype=bool))[None, None] & batch.tgt_pad_mask[:, None, None, :]


def _features(maps: AttentionMapSet, kind: str, layerwise: bool) -> Tensor:
    return layerwise_maps(maps.layers(kind)) if layerwise else maps.stacked(kind)


def combined_attention_loss(maps_t: AttentionMapSet, maps_s: AttentionMapSet,
                            aams: AamParams, cfg: DistillConfig,
                            batch: Batch) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted transfer loss over the enabled kinds and its components."""
    kinds = cfg.enabled_kinds
    stack_weights(kinds)
    masks = _row_masks(batch)
    parts: dict[str, Tensor] = {}
    for kind in kinds:
        if kind not in aams:
            raise ConfigError(f"no alignment module for {kind}")
        teacher = _features(maps_t, kind, cfg.layerwise_variant)
        student = _features(maps_s, kind, cfg.layerwise_variant)
        assert teacher.shape[0] == student.shape[0] and teacher.shape[2:] == student.shape[2:], \
            f"teacher/student batch divergence on {kind}: {teacher.shape} vs {student.shape}"
        inter = aam_forward(student, aams[kind])
        if cfg.renormalize_intermediate:
            inter = nx.normalize_rows(inter, _key_masks(batch, kind))
        parts[kind] = attention_transfer_loss(teacher.data, inter, masks[kind])
    return combine_components(parts, kinds), parts


def vanilla_kd_loss(student_logits: Tensor, teacher_logits, tgt_mask, temperature: float = 1.0) -> Tensor:
    """T^2 * mean over real target positions of -sum_v p_T log p_S."""
    t_logits = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    if t_logits.shape != student_logits.shape:
        raise ShapeError(f"teacher logits {t_logits.shape} vs student logits {student_logits.shape}")
    z = t_logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p_t = np.exp(z)
    p_t /= p_t.sum(axis=-1, keepdims=True)
    log_ps = nx.log_softmax_rows(student_logits * (1.0 / temperature))
    per_pos = nx.mul(log_ps, p_t.astype(student_logits.dtype)).sum(axis=-1)
    mask = np.asarray(tgt_mask, dtype=student_logits.dtype)
    count = mask.sum()
    if count == 0:
        return per_pos.sum() * 0.0
    return nx.mul(per_pos, mask).sum() * (-(temperature ** 2) / count)


def cross_entropy_loss(logits: Tensor, batch: Batch) -> Tensor:
    v = logits.shape[-1]
    return nx.cross_entropy(logits.reshape(-1, v), batch.tgt_out_ids.reshape(-1), PAD)


def total_loss(batch: Batch, student: Transformer, teacher: Transformer | None,
               aams: AamParams | None, cfg: DistillConfig, lambda_att: float | None = None,
               rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """``L_CE + lambda * L_att + mu * L_KD`` plus a metrics record.

    Terms whose weight is zero are neither computed nor added, so the
    lambda = mu = 0 objective is exactly the plain cross-entropy graph.
    The teacher runs in eval mode without gradient recording.
    """
    lam = cfg.lambda_att if lambda_att is None else lambda_att
    mu = cfg.mu_kd
    need_att = lam != 0
    need_kd = mu != 0
    t_logits = t_maps = None
    if need_att or need_kd:
        if teacher is None:
            raise ConfigError("a teacher model is required when lambda or mu is nonzero")
        was_training = teacher.training
        teacher.eval()
        with nx.no_grad():
            t_logits, t_maps = teacher.forward(batch, collect_maps=need_att)
        teacher.training = was_training

    logits, s_maps = student.forward(batch, collect_maps=need_att, rng=rng)
    ce = cross_entropy_loss(logits, batch)
    loss = ce
    metrics = {"l_ce": ce.item(), "l_att": None, "l_att_enc": None,
               "l_att_dec_self": None, "l_att_dec_cross": None, "l_kd": None, "lambda": lam}
    if need_att:
        if aams is None:
            raise ConfigError("alignment modules are required when lambda is nonzero")
        att, parts = combined_attention_loss(t_maps, s_maps, aams, cfg, batch)
        loss = loss + att * lam
        metrics["l_att"] = att.item()
        for kind, key in (("enc_self", "l_att_enc"), ("dec_self", "l_att_dec_self"),
                          ("dec_cross", "l_att_dec_cross")):
            if kind in parts:
                metrics[key] = parts[kind].item()
    if need_kd:
        kd = vanilla_kd_loss(logits, t_logits, batch.tgt_pad_mask, cfg.kd_temperature)
        loss = loss + kd * mu
        metrics["l_kd"] = kd.item()
    metrics["loss"] = loss.item()
    return loss, metrics
