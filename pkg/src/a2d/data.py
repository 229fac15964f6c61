"""Corpora, vocabularies, synthetic tasks and padded batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

Pair = tuple[list[str], list[str]]


class Vocab:
    """Token <-> id map with four reserved ids in front."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise InputError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def content_tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    @classmethod
    def from_corpus(cls, *corpora: "ParallelCorpus") -> "Vocab":
        seen = set()
        for corpus in corpora:
            for src, tgt in corpus.pairs:
                seen.update(src)
                seen.update(tgt)
        return cls(sorted(seen - set(RESERVED)))

    @classmethod
    def for_synth(cls, vocab_size: int) -> "Vocab":
        """Vocab whose content token ``str(i)`` has id ``i``."""
        return cls([str(i) for i in range(len(RESERVED), vocab_size)])

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.content_tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


@dataclass
class ParallelCorpus:
    pairs: list[Pair]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.pairs)

    def __post_init__(self):
        for i, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise InputError(f"pair {i} has an empty side")


def load_parallel_tsv(path: str | Path, split: str = "train") -> ParallelCorpus:
    """Read ``source<TAB>target`` lines; whitespace tokenization."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    pairs: list[Pair] = []
    bad: list[int] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            bad.append(lineno)
            continue
        src, tgt = tokenize(parts[0]), tokenize(parts[1])
        if not src or not tgt:
            bad.append(lineno)
            continue
        pairs.append((src, tgt))
    if bad:
        raise InputError(f"{path}: malformed line(s) {', '.join(map(str, bad))}")
    if not pairs:
        log.warning("%s: empty corpus", path)
    return ParallelCorpus(pairs, split)


def digit_map_bijection(vocab_size: int, seed: int) -> dict[int, int]:
    content = np.arange(len(RESERVED), vocab_size)
    perm = np.random.default_rng(seed).permutation(content)
    return {int(a): int(b) for a, b in zip(content, perm)}


def synth_task(kind: str, n_pairs: int, min_len: int, max_len: int,
               vocab_size: int, seed: int, split: str = "train",
               mapping_seed: int | None = None) -> ParallelCorpus:
    """Generate a toy parallel corpus over content ids ``[4, vocab_size)``.

    ``copy`` repeats the source, ``reverse`` reverses it, ``digit_map``
    applies a fixed random bijection to every token. The bijection is
    drawn from ``mapping_seed`` (default ``seed``) so that several splits
    can share one mapping.
    """
    if vocab_size < 5:
        raise InputError("vocab_size must be >= 5")
    if not 1 <= min_len <= max_len:
        raise InputError(f"bad length range [{min_len}, {max_len}]")
    rng = np.random.default_rng(seed)
    sigma = None
    if kind == "digit_map":
        sigma = digit_map_bijection(vocab_size, seed if mapping_seed is None else mapping_seed)
    elif kind not in ("copy", "reverse"):
        raise InputError(f"unknown synthetic task {kind!r}")
    pairs: list[Pair] = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        src = [int(x) for x in rng.integers(len(RESERVED), vocab_size, size=n)]
        if kind == "copy":
            tgt = list(src)
        elif kind == "reverse":
            tgt = src[::-1]
        else:
            tgt = [sigma[x] for x in src]
        pairs.append(([str(x) for x in src], [str(x) for x in tgt]))
    return ParallelCorpus(pairs, split)


@dataclass
class Batch:
    """Padded id matrices; masks are True at real (non-PAD) positions."""

    src_ids: np.ndarray
    tgt_in_ids: np.ndarray
    tgt_out_ids: np.ndarray
    src_pad_mask: np.ndarray = field(init=False)
    tgt_pad_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.src_ids = np.asarray(self.src_ids, dtype=np.int64)
        self.tgt_in_ids = np.asarray(self.tgt_in_ids, dtype=np.int64)
        self.tgt_out_ids = np.asarray(self.tgt_out_ids, dtype=np.int64)
        self.src_pad_mask = self.src_ids != PAD
        self.tgt_pad_mask = self.tgt_out_ids != PAD

    def __len__(self) -> int:
        return self.src_ids.shape[0]

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_pad_mask.sum())


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad already-encoded id pairs to the per-batch maximum lengths."""
    ls = max(len(s) for s, _ in pairs)
    lt = max(len(t) for _, t in pairs) + 1
    src = np.full((len(pairs), ls), PAD, dtype=np.int64)
    tin = np.full((len(pairs), lt), PAD, dtype=np.int64)
    tout = np.full((len(pairs), lt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        tin[i, 0] = BOS
        tin[i, 1:len(t) + 1] = t
        tout[i, :len(t)] = t
        tout[i, len(t)] = EOS
    return Batch(src, tin, tout)


def batchify(corpus: ParallelCorpus, batch_size: int, vocab: Vocab,
             shuffle_seed: int | None = None, max_len: int | None = None) -> Iterator[Batch]:
    """Yield padded batches in corpus order, or permuted when a seed is given.

    ``max_len`` bounds the source length and the target length plus one
    (BOS/EOS), matching the positions a model can embed.
    """
    if not corpus.pairs:
        raise InputError("cannot batch an empty corpus")
    encoded = [(vocab.encode(s), vocab.encode(t)) for s, t in corpus.pairs]
    if max_len is not None:
        for i, (s, t) in enumerate(encoded):
            if len(s) > max_len or len(t) + 1 > max_len:
                raise InputError(f"pair {i} ({len(s)} -> {len(t)} tokens) exceeds max_len {max_len}")
    order = np.arange(len(encoded))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(encoded))
    for start in range(0, len(order), batch_size):
        yield make_batch([encoded[i] for i in order[start:start + batch_size]])
