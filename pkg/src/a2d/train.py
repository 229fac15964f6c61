"""Adam, the lambda schedule and the epoch driver for teachers and students."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import EOS, PAD, ParallelCorpus, Vocab, batchify
from .distill import AamParams, DistillConfig, build_aams, total_loss
from .errors import A2DError, ConfigError
from .evaluate import corpus_bleu, token_accuracy
from .numerics import Tensor
from .transformer import ModelConfig, Transformer, greedy_decode_batch

log = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "l_ce", "l_att_enc", "l_att_dec_self", "l_att_dec_cross",
            "l_kd", "lambda", "val_acc", "val_bleu")


class NonFiniteGradientError(A2DError, FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    seed: int = 0
    precision: str = "float32"
    val_bleu: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("train.precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_schedule(lambda0: float, epoch: int, decay: float = 0.9) -> float:
    """Exponentially decayed attention-loss weight for a 0-based epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lambda0 * decay ** epoch


def warmup_lr(base_lr: float, step: int, warmup: int) -> float:
    """Inverse-square-root schedule with linear warmup, peaking at ``base_lr``."""
    if warmup <= 0:
        return base_lr
    return base_lr * math.sqrt(warmup) * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, lr_t: float,
              betas: tuple[float, float] = (0.9, 0.98), eps: float = 1e-9) -> None:
    """One bias-corrected Adam update; tensors without a gradient are skipped."""
    for name, p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (_, p) in enumerate(params):
        g = p.grad
        if g is None:
            continue
        m = state.m.get(i)
        v = state.v.get(i)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[i], state.v[i] = m, v
        p.data = (p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def current_lr(self) -> float:
        return warmup_lr(self.cfg.learning_rate, self.state.step + 1, self.cfg.warmup_steps)

    def step(self) -> float:
        lr = self.current_lr()
        adam_step(self.params, self.state, lr, (self.cfg.beta1, self.cfg.beta2), self.cfg.eps)
        return lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def evaluate_model(model: Transformer, corpus: ParallelCorpus, vocab: Vocab,
                   batch_size: int = 256, bleu: bool = True) -> dict:
    """Teacher-forced token accuracy and greedy-decode corpus BLEU."""
    model.eval()
    correct = total = 0
    hyps, refs = [], []
    with nx.no_grad():
        for batch in batchify(corpus, batch_size, vocab, max_len=model.config.max_len):
            logits, _ = model.forward(batch)
            n = batch.n_tokens
            correct += token_accuracy(logits.data, batch.tgt_out_ids, PAD) * n
            total += n
            if bleu:
                steps = batch.tgt_out_ids.shape[1] + 2
                hyps.extend(greedy_decode_batch(model, batch.src_ids, steps))
                refs.extend([int(t) for t in row if t not in (PAD, EOS)] for row in batch.tgt_out_ids)
    out = {"val_acc": correct / total if total else 0.0}
    out["val_bleu"] = corpus_bleu(hyps, refs) if bleu else None
    return out


@dataclass
class RunResult:
    model: Transformer
    aams: AamParams | None
    history: list[dict]
    best: dict
    checkpoint_path: Path | None = None


def _seeds(seed: int) -> tuple[int, np.random.Generator, np.random.Generator]:
    init, shuffle, drop = np.random.SeedSequence(seed).spawn(3)
    init_seed = int(init.generate_state(1)[0])
    return init_seed, np.random.default_rng(shuffle), np.random.default_rng(drop)


def _fit(student: Transformer, teacher: Transformer | None, aams: AamParams | None,
         dcfg: DistillConfig, tcfg: TrainConfig, train: ParallelCorpus,
         valid: ParallelCorpus | None, vocab: Vocab, shuffle_rng, drop_rng,
         out_dir: Path | None, meta: dict) -> RunResult:
    params = list(student.named_parameters())
    if aams is not None and dcfg.lambda_att != 0:
        params += list(aams.named_parameters())
    opt = Adam(params, tcfg)
    trainable = [p for _, p in params]
    history: list[dict] = []
    best: dict | None = None
    best_state = None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for epoch in range(tcfg.epochs):
            lam = lambda_schedule(dcfg.lambda_att, epoch, dcfg.lambda_decay)
            student.train()
            sums: dict[str, float] = {}
            counts: dict[str, int] = {}
            shuffle_seed = int(shuffle_rng.integers(2 ** 31))
            for batch in batchify(train, tcfg.batch_size, vocab, shuffle_seed, student.config.max_len):
                opt.zero_grad()
                loss, metrics = total_loss(batch, student, teacher, aams, dcfg, lam, drop_rng)
                loss.backward()
                clip_grad_norm(trainable, tcfg.grad_clip_norm)
                opt.step()
                for k, v in metrics.items():
                    if v is not None and k != "lambda":
                        sums[k] = sums.get(k, 0.0) + v
                        counts[k] = counts.get(k, 0) + 1
            record = {"epoch": epoch}
            for key in ("l_ce", "l_att", "l_att_enc", "l_att_dec_self", "l_att_dec_cross", "l_kd", "loss"):
                record[key] = sums[key] / counts[key] if key in sums else None
            record["lambda"] = lam
            if valid is not None and len(valid):
                record.update(evaluate_model(student, valid, vocab, bleu=tcfg.val_bleu))
            else:
                record.update(val_acc=None, val_bleu=None)
            history.append(record)
            log.info("epoch %d: %s", epoch, {k: v for k, v in record.items() if v is not None})
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            key = (record["val_acc"] or 0.0, record["val_bleu"] or 0.0)
            if best is None or key > (best["val_acc"] or 0.0, best["val_bleu"] or 0.0):
                best = record
                best_state = {n: p.data.copy() for n, p in params}
    finally:
        if log_fh is not None:
            log_fh.close()
    for n, p in params:
        p.data = best_state[n]
    student.eval()
    ckpt = None
    if out_dir is not None:
        extra = dict(aams.named_parameters()) if aams is not None else None
        meta = dict(meta, best_epoch=best["epoch"])
        ckpt = save_checkpoint(out_dir / "checkpoint.a2d", student, vocab, extra, meta)
    return RunResult(student, aams, history, best, ckpt)


def train_teacher(model_cfg: ModelConfig, train_cfg: TrainConfig, train: ParallelCorpus,
                  valid: ParallelCorpus | None, vocab: Vocab,
                  out_dir: str | Path | None = None) -> RunResult:
    """Plain cross-entropy training; the no-KD baseline uses the same path."""
    if model_cfg.vocab_size != len(vocab):
        raise ConfigError(f"model.vocab_size={model_cfg.vocab_size} but vocabulary has {len(vocab)} entries")
    init_seed, shuffle_rng, drop_rng = _seeds(train_cfg.seed)
    model = Transformer(model_cfg, seed=init_seed, dtype=train_cfg.dtype)
    dcfg = DistillConfig(lambda_att=0.0, mu_kd=0.0)
    return _fit(model, None, None, dcfg, train_cfg, train, valid, vocab, shuffle_rng, drop_rng,
                Path(out_dir) if out_dir is not None else None, {"role": "teacher"})


def _load_teacher(teacher, dtype) -> tuple[Transformer, Vocab | None]:
    if isinstance(teacher, Transformer):
        return teacher, None
    ckpt = teacher if isinstance(teacher, Checkpoint) else load_checkpoint(teacher)
    return ckpt.build_model(dtype), ckpt.vocab


def distill_run(teacher, student_cfg: ModelConfig, distill_cfg: DistillConfig,
                train_cfg: TrainConfig, train: ParallelCorpus, valid: ParallelCorpus | None,
                vocab: Vocab, out_dir: str | Path | None = None) -> RunResult:
    """Train a student and its alignment modules jointly on the combined loss.

    ``teacher`` may be a model, a loaded :class:`Checkpoint` or a path.
    With ``lambda_att == mu_kd == 0`` this is exactly :func:`train_teacher`
    on the student config.
    """
    teacher_model, teacher_vocab = _load_teacher(teacher, train_cfg.dtype)
    if teacher_vocab is not None and teacher_vocab != vocab:
        raise ConfigError("teacher and student vocabularies differ")
    if teacher_model.config.vocab_size != student_cfg.vocab_size or student_cfg.vocab_size != len(vocab):
        raise ConfigError("teacher, student and data vocabulary sizes must match")
    teacher_model.freeze()
    teacher_model.eval()
    before = nx.parameters_checksum(teacher_model.parameters())

    init_seed, shuffle_rng, drop_rng = _seeds(train_cfg.seed)
    student = Transformer(student_cfg, seed=init_seed, dtype=train_cfg.dtype)
    aams = build_aams(student_cfg, teacher_model.config, distill_cfg, train_cfg.dtype)
    meta = {
        "role": "student",
        "distill": distill_cfg.to_dict(),
        "teacher_config": teacher_model.config.to_dict(),
        "aam": {k: {"student": list(m.student), "teacher": list(m.teacher), "layerwise": m.layerwise}
                for k, m in aams.items()},
    }
    result = _fit(student, teacher_model, aams, distill_cfg, train_cfg, train, valid, vocab,
                  shuffle_rng, drop_rng, Path(out_dir) if out_dir is not None else None, meta)
    after = nx.parameters_checksum(teacher_model.parameters())
    assert before == after, "teacher parameters changed during distillation"
    assert all(p.grad is None for p in teacher_model.parameters()), "teacher accumulated gradients"
    return result
