import logging
import math

import numpy as np
import pytest

from a2d.errors import InputError
from a2d.evaluate import brevity_penalty, corpus_bleu, modified_precision_counts, token_accuracy


def test_identical_corpus_scores_100():
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
    assert corpus_bleu(refs, refs) == 100.0


def test_clipped_unigram_precision():
    hyp, ref = "the the the the".split(), "the cat sat down".split()
    m, t = modified_precision_counts([hyp], [ref], 1)
    assert m / t == pytest.approx(0.25, abs=1e-12)


def test_brevity_penalty_hand_oracle():
    ref = "a b c d e f g h".split()
    hyp = ref[:4]
    # precisions are all 1, so the score is the penalty alone
    expected = 100.0 * math.exp(1.0 - 8 / 4)
    assert corpus_bleu([hyp], [ref]) == pytest.approx(expected, abs=1e-9)
    assert brevity_penalty(4, 8) == pytest.approx(math.exp(-1.0), abs=1e-15)
    assert brevity_penalty(9, 8) == 1.0


def test_smoothed_zero_precision_hand_oracle():
    hyp, ref = "a b x c".split(), "a b c d".split()
    # p1 = 3/4, p2 = 1/3, p3 = 0 -> 1/3, p4 = 0 -> 1/2; lengths equal
    expected = 100.0 * (0.75 * (1 / 3) * (1 / 3) * 0.5) ** 0.25
    assert corpus_bleu([hyp], [ref]) == pytest.approx(expected, abs=1e-9)


def test_permutation_invariance():
    rng = np.random.default_rng(0)
    refs = [list(rng.integers(0, 6, size=rng.integers(3, 9))) for _ in range(20)]
    hyps = [list(r[:-1]) + [int(rng.integers(0, 6))] for r in refs]
    perm = rng.permutation(20)
    a = corpus_bleu(hyps, refs)
    b = corpus_bleu([hyps[i] for i in perm], [refs[i] for i in perm])
    assert a == pytest.approx(b, abs=1e-12)


def test_corruption_is_monotone():
    rng = np.random.default_rng(1)
    ok = total = 0
    for _ in range(300):
        refs = [[int(x) for x in rng.integers(0, 8, size=rng.integers(4, 10))] for _ in range(5)]
        hyps = [list(r) for r in refs]
        for _ in range(int(rng.integers(0, 6))):
            i = int(rng.integers(5))
            hyps[i][int(rng.integers(len(hyps[i])))] = int(rng.integers(0, 8))
        before = corpus_bleu(hyps, refs)
        i = int(rng.integers(5))
        j = int(rng.integers(len(hyps[i])))
        hyps[i][j] = 100 + int(rng.integers(5))
        total += 1
        ok += corpus_bleu(hyps, refs) <= before + 1e-12
    assert ok / total >= 0.95


def test_bleu_errors():
    with pytest.raises(InputError):
        corpus_bleu([], [])
    with pytest.raises(InputError):
        corpus_bleu([["a"]], [])


def test_token_accuracy_cases(caplog):
    tgt = np.array([[4, 5, 6, 7, 0, 0, 0, 0]])
    assert token_accuracy(tgt, tgt) == 1.0
    pred = np.array([[4, 5, 9, 9, 0, 0, 0, 0]])
    assert token_accuracy(pred, tgt) == 0.5
    with caplog.at_level(logging.WARNING):
        assert token_accuracy(np.zeros((2, 3), int), np.zeros((2, 3), int)) == 0.0
    assert "zero" in caplog.text


def test_token_accuracy_from_logits():
    tgt = np.array([[1, 2, 0]])
    logits = np.zeros((1, 3, 4))
    logits[0, 0, 1] = logits[0, 1, 3] = logits[0, 2, 0] = 1.0
    assert token_accuracy(logits, tgt) == 0.5
