"""Corpus BLEU and token accuracy."""

from __future__ import annotations

import logging
import math
from collections import Counter
from typing import Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision_counts(hypotheses, references, n: int) -> tuple[int, int]:
    """Corpus totals of clipped n-gram matches and hypothesis n-grams."""
    matched = total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
        matched += sum(min(c, r[g]) for g, c in h.items())
        total += max(len(hyp) - n + 1, 0)
    return matched, total


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100], one reference per hypothesis.

    A precision with zero clipped matches is smoothed to
    ``1 / (total + 1)`` (add-one); scores are only comparable within this
    package.
    """
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise InputError("BLEU of an empty corpus is undefined")
    log_p = 0.0
    for n in range(1, max_n + 1):
        m, t = modified_precision_counts(hypotheses, references, n)
        if m == 0:
            m, t = m + 1, t + 1
        log_p += math.log(m / t)
    c = sum(len(h) for h in hypotheses)
    r = sum(len(x) for x in references)
    bp = brevity_penalty(c, r)
    if bp == 0.0:
        return 0.0
    return 100.0 * bp * math.exp(log_p / max_n)


def token_accuracy(predictions, targets, pad_id: int = 0) -> float:
    """Fraction of non-pad target positions predicted correctly.

    ``predictions`` is either logits ``[..., V]`` (argmax is taken) or an id
    array with the same shape as ``targets``.
    """
    pred = np.asarray(getattr(predictions, "data", predictions))
    tgt = np.asarray(targets)
    if pred.shape != tgt.shape:
        pred = pred.argmax(axis=-1)
    real = tgt != pad_id
    n = int(real.sum())
    if n == 0:
        log.warning("token accuracy over zero target positions; reporting 0.0")
        return 0.0
    return float(((pred == tgt) & real).sum() / n)
